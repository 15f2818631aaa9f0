import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, relative_error
from fedrecsim.attacks import (
    AttackConfig,
    AttackState,
    Attacker,
    ClientContext,
    ClusterPlan,
    adaptive_update_K,
    attack_loss_and_grad,
    clip_rows,
    cluster_attack_update,
    cohort_stats,
    fang_update,
    fedattack_examples,
    flip_examples,
    gaussian_update,
    gradient_moments,
    label_flip_update,
    lie_update,
    normal_row_norm_stats,
    plan_cluster_attack,
)
from fedrecsim.data import TrainingExample, examples_to_arrays, sample_batch
from fedrecsim.model import GlobalModel, UserModel, bpr_batch_gradient, score_all


# ------------------------------------------------------------ adaptive K


def feed(state, losses):
    trace = []
    for loss in losses:
        state = adaptive_update_K(state, loss)
        trace.append(state)
    return state, trace


def test_three_decreasing_steps_trigger_one_decrease():
    state = AttackState(K=8, R=3)
    # the first loss only seeds the average; the next three are strictly smaller
    state, trace = feed(state, [10.0, 9.0, 8.0, 7.0])
    assert [s.K for s in trace] == [8, 8, 8, 5]
    assert (state.n_inc, state.n_dec, state.t) == (0, 0, 0)
    assert [s.n_dec for s in trace[:3]] == [0, 1, 2]


def test_scripted_trajectory():
    state = AttackState(K=2, R=3)
    # rising losses: 2 -> floor(2 + sqrt(48)) = 8
    state, trace = feed(state, [1.0, 2.0, 3.0, 4.0])
    assert [s.K for s in trace] == [2, 2, 2, 8]
    assert (state.n_inc, state.n_dec, state.t) == (0, 0, 0)
    # falling after the restart: 8 -> floor(8 - sqrt(7)) = 5
    state, trace = feed(state, [50.0, 40.0, 30.0, 20.0])
    assert [s.K for s in trace] == [8, 8, 8, 5]
    # mixed votes cancel and K holds
    state, trace = feed(state, [5.0, 6.0, 1.0, 9.0, 0.5])
    assert all(s.K == 5 for s in trace)
    assert trace[-1].n_inc == 2 and trace[-1].n_dec == 2


def test_bias_corrected_average_first_step_equals_loss():
    s = adaptive_update_K(AttackState(K=2), 7.0)
    assert s.prev_corrected == pytest.approx(7.0)
    s = adaptive_update_K(s, 7.0)
    # a constant loss keeps the corrected average constant -> counted as a decrease
    assert s.prev_corrected == pytest.approx(7.0)
    assert s.n_dec == 1


def test_decrease_rule_bottoms_out():
    state = AttackState(K=1, R=1)
    state, _ = feed(state, [3.0, 2.0, 1.0])
    assert state.K == 1


def test_state_rejects_out_of_range():
    with pytest.raises(ValueError):
        AttackState(K=0)
    with pytest.raises(ValueError):
        AttackState(K=51)


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=200), st.integers(1, 50), st.integers(1, 5))
@settings(max_examples=60, deadline=None)
def test_K_stays_in_range(losses, K, R):
    state = AttackState(K=K, R=R)
    for loss in losses:
        state = adaptive_update_K(state, loss)
        assert state.K_min <= state.K <= state.K_max
        assert state.n_inc >= 0 and state.n_dec >= 0 and state.t >= 0


# ---------------------------------------------------------- ClusterAttack


def test_attack_loss_gradient_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        V = rng.normal(size=(10, int(rng.integers(1, 9))))
        assign = rng.integers(0, 3, size=10)
        centroids = rng.normal(size=(3, V.shape[1]))
        _, grad = attack_loss_and_grad(V, centroids, assign)
        fd = central_difference(lambda x: attack_loss_and_grad(x, centroids, assign)[0], V)
        assert relative_error(grad, fd) < 1e-5


def test_single_row_raw_gradient():
    _, grad = attack_loss_and_grad(np.array([[2.0, 0.0]]), np.zeros((1, 2)), np.array([0]))
    assert grad.tolist() == [[4.0, 0.0]]


def test_equal_rows_give_zero_plan():
    model = GlobalModel(np.ones((5, 3)))
    plan = plan_cluster_attack(model, 1, np.random.default_rng(0))
    assert plan.attack_loss == 0.0 and np.all(plan.raw_grad == 0)
    # more clusters than distinct rows is reduced, not an error
    assert plan_cluster_attack(model, 4, np.random.default_rng(0)).k_used == 1


def test_plan_loss_matches_kmeans_dispersion():
    V = np.random.default_rng(3).normal(size=(30, 4))
    plan = plan_cluster_attack(GlobalModel(V), 3, np.random.default_rng(1))
    assert plan.k_used == 3
    assert plan.attack_loss == pytest.approx(((plan.raw_grad / 2) ** 2).sum())


def test_clip_rows_bounds_and_identity():
    rng = np.random.default_rng(4)
    raw = rng.normal(size=(20, 4))
    bounds = rng.uniform(0.5, 3.0, size=20)
    out = clip_rows(raw, bounds)
    norms = np.linalg.norm(raw, axis=1)
    assert np.all(np.linalg.norm(out, axis=1) <= bounds * (1 + 1e-12))
    under = norms <= bounds
    assert under.any() and (~under).any()
    assert np.array_equal(out[under], raw[under])
    # clipped rows keep their direction
    over = ~under
    np.testing.assert_allclose(out[over] / np.linalg.norm(out[over], axis=1)[:, None],
                               raw[over] / norms[over][:, None])


def test_cluster_update_is_dense_and_bounded():
    rng = np.random.default_rng(5)
    model = GlobalModel(rng.normal(size=(20, 4)))
    user = UserModel(rng.normal(size=4))
    examples = [TrainingExample(0, i, (10 + i,)) for i in range(5)]
    plan = plan_cluster_attack(model, 3, rng)
    upd, normal = cluster_attack_update(model, user, examples, plan, 1e-5, np.random.default_rng(9), 7)
    mu, sigma = normal_row_norm_stats(normal)
    assert mu > 0
    lam = np.random.default_rng(9).uniform(0, 3, size=20)
    bounds = mu + lam * sigma
    assert np.all(bounds >= mu)
    assert np.all(np.linalg.norm(upd.item_grad, axis=1) <= bounds * (1 + 1e-12))
    assert upd.item_grad.shape == (20, 4) and upd.client_id == 7 and upd.is_malicious
    assert np.count_nonzero(np.linalg.norm(upd.item_grad, axis=1)) == 20


def test_norm_stats_use_touched_rows_only():
    from fedrecsim.model import LocalGradient
    g = np.zeros((6, 2))
    g[1] = [3, 4]
    g[4] = [0, 1]
    mu, sigma = normal_row_norm_stats(LocalGradient(g, np.zeros(2), np.array([1, 4])))
    assert mu == pytest.approx(3.0) and sigma == pytest.approx(2.0)


# --------------------------------------------------------- data poisoning


def test_label_flip_symmetric_loss():
    V = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
    model, user = GlobalModel(V), UserModel(np.array([0.5, -1.0]))
    ex = [TrainingExample(0, 0, (1,))]
    _, flipped = label_flip_update(user, model, ex, 0.0)
    pos, neg = examples_to_arrays(ex)
    _, plain = bpr_batch_gradient(user, model, pos, neg, 0.0)
    assert flipped == pytest.approx(plain) == pytest.approx(math.log(2))


def test_label_flip_swaps_rows():
    rng = np.random.default_rng(0)
    model, user = GlobalModel(rng.normal(size=(4, 3))), UserModel(rng.normal(size=3))
    flipped, _ = label_flip_update(user, model, [TrainingExample(0, 0, (2,))], 1e-3)
    swapped, _ = bpr_batch_gradient(user, model, np.array([2]), np.array([[0]]), 1e-3)
    assert np.array_equal(flipped.item_grad, swapped.item_grad)
    # at equal scores the flipped upload is the plain one with rows 0 and 2 exchanged
    tied = GlobalModel(np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
    u = UserModel(np.array([1.0, 1.0, 0.5]))
    f, _ = label_flip_update(u, tied, [TrainingExample(0, 0, (2,))], 0.0)
    plain, _ = bpr_batch_gradient(u, tied, np.array([0]), np.array([[2]]), 0.0)
    np.testing.assert_array_equal(f.item_grad[[0, 2]], plain.item_grad[[2, 0]])


def test_flip_examples_roles():
    out = flip_examples([TrainingExample(3, 1, (5, 6))])
    assert [(e.positive, e.negatives) for e in out] == [(5, (1,)), (6, (1,))]


def test_label_flip_training_inverts_order():
    rng = np.random.default_rng(1)
    V = rng.normal(size=(6, 4)) * 0.1
    u = rng.normal(size=4) * 0.1
    ex = [TrainingExample(0, 0, (3,)), TrainingExample(0, 1, (4,))]
    for _ in range(100):
        g, _ = label_flip_update(UserModel(u), GlobalModel(V), ex, 0.0)
        V = V - 0.5 * g.item_grad
        u = u - 0.5 * g.user_grad
    s = V @ u
    assert s[3] > s[0] and s[4] > s[1]


def test_fedattack_extremes():
    user = UserModel(np.array([1.0]))
    model = GlobalModel(np.array([[5.0], [0.0], [-5.0]]))
    (ex,) = fedattack_examples(user, model, np.array([], dtype=int), 1, 1)
    assert ex.negatives == (0,) and ex.positive == 2


def test_fedattack_ties_prefer_lower_id():
    user = UserModel(np.array([1.0]))
    model = GlobalModel(np.array([[1.0], [5.0], [1.0], [5.0], [9.0]]))
    (ex,) = fedattack_examples(user, model, np.array([4]), 1, 1)
    assert ex.negatives == (1,) and ex.positive == 0


def test_fedattack_skips_history():
    user = UserModel(np.array([1.0]))
    model = GlobalModel(np.array([[9.0], [5.0], [-9.0], [0.0]]))
    (ex,) = fedattack_examples(user, model, np.array([0, 2]), 1, 1)
    assert ex.negatives == (1,) and ex.positive == 3


def test_fedattack_update_lowers_own_test_score(small_dataset):
    from fedrecsim.federation import FederationConfig, train

    ds = small_dataset
    cfg = FederationConfig(rounds=150, clients_per_round=10, eval_interval=150, lr=0.02, dim=8, num_negatives=4)
    trained = train(ds, cfg, seed=0)
    model = trained.model
    lowered = 0
    for u in range(ds.num_users):
        user = trained.users[u]
        target = int(ds.test[u])
        # the held-out target is in the history, so it is never chosen as a sample
        examples = fedattack_examples(user, model, ds.history(u), len(ds.train[u]), 1)
        pos, neg = examples_to_arrays(examples)
        g, _ = bpr_batch_gradient(user, model, pos, neg, 0.0)
        before = score_all(user, model)[target]
        after = score_all(UserModel(user.user_embedding - 0.1 * g.user_grad),
                          GlobalModel(model.item_embeddings - 0.1 * g.item_grad))[target]
        lowered += after < before
    assert lowered >= 0.9 * ds.num_users


# -------------------------------------------------------- model poisoning


def test_gaussian_zero_std_returns_mean():
    mean = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(gaussian_update(mean, np.zeros_like(mean), np.random.default_rng(1)), mean)


def test_gaussian_sample_mean_within_three_se():
    rng = np.random.default_rng(2)
    mean = rng.normal(size=(3, 2))
    std = rng.uniform(0.1, 2.0, size=(3, 2))
    draws = np.stack([gaussian_update(mean, std, rng) for _ in range(10_000)])
    se = std / math.sqrt(10_000)
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= 3 * se)


def test_gaussian_shape_mismatch():
    with pytest.raises(ValueError):
        gaussian_update(np.zeros((2, 2)), np.zeros((2, 3)), np.random.default_rng(0))


def test_gradient_moments_mean_is_batch_gradient():
    rng = np.random.default_rng(3)
    model, user = GlobalModel(rng.normal(size=(8, 3))), UserModel(rng.normal(size=3))
    ex = [TrainingExample(0, 0, (5, 6)), TrainingExample(0, 1, (7, 5))]
    mean, std = gradient_moments(user, model, ex, 1e-3)
    pos, neg = examples_to_arrays(ex)
    g, _ = bpr_batch_gradient(user, model, pos, neg, 1e-3)
    np.testing.assert_allclose(mean, g.item_grad, rtol=1e-12, atol=1e-15)
    assert np.all(std >= 0) and np.all(std[[2, 3, 4]] == 0)


def test_lie_examples():
    mean = np.random.default_rng(0).normal(size=(3, 2))
    assert np.array_equal(lie_update(mean, np.ones_like(mean), 0.0), mean)
    np.testing.assert_allclose(lie_update(mean, np.ones_like(mean), 1.5), mean + 1.5)
    own = mean[None]
    mu, sigma = cohort_stats(own)
    assert np.all(sigma == 0)
    assert np.array_equal(lie_update(mu, sigma, 1.5), mean)


def test_fang_examples():
    mean = np.array([[0.5, -0.2], [0.0, 1.0]])
    std = np.array([[0.1, 0.3], [0.4, 0.0]])
    assert np.array_equal(fang_update(mean, std, 0.0), mean)
    out = fang_update(mean, std, 3.0)
    assert out[0, 0] < mean[0, 0]


@given(st.integers(0, 10_000), st.floats(0, 10))
@settings(max_examples=50, deadline=None)
def test_fang_opposes_mean(seed, gamma):
    rng = np.random.default_rng(seed)
    mean = rng.normal(size=(5, 3))
    std = rng.uniform(0, 2, size=(5, 3))
    out = fang_update(mean, std, gamma)
    assert float(((out - mean) * mean).sum()) <= 0


# ------------------------------------------------------------- controller


@pytest.mark.parametrize("name", ["label_flip", "fedattack", "gaussian", "lie", "fang", "cluster", "cluster_cl"])
def test_attacks_are_deterministic(small_dataset, name):
    ds = small_dataset

    def run():
        cfg = AttackConfig(name=name, malicious_percent=10)
        att = Attacker(cfg, [0, 1, 2, 3], ds, l2=1e-5, lr=0.01, cl_negatives=3)
        model = GlobalModel(np.random.default_rng(0).normal(size=(ds.num_items, 4)) * 0.1)
        users = {c: UserModel(np.random.default_rng(c).normal(size=4) * 0.1) for c in range(4)}
        ctxs = [ClientContext(c, users[c], np.random.default_rng([9, c])) for c in (1, 3)]
        ups, loss = att.attack_round(model, ctxs, users, np.random.default_rng(5),
                                     lambda c: np.random.default_rng([9, c]))
        return ups, loss, users

    a, la, ua = run()
    b, lb, ub = run()
    assert la == lb
    assert [u.client_id for u in a] == [1, 3]
    for x, y in zip(a, b):
        assert np.array_equal(x.item_grad, y.item_grad) and x.is_malicious
    for c in ua:
        assert np.array_equal(ua[c].user_embedding, ub[c].user_embedding)
    # selected malicious clients also train their user embedding
    assert not np.array_equal(ua[1].user_embedding, np.random.default_rng(1).normal(size=4) * 0.1)


def test_lie_cohort_share_one_update(small_dataset):
    ds = small_dataset
    att = Attacker(AttackConfig(name="lie", malicious_percent=10), [0, 1, 2], ds, l2=0.0, lr=0.0)
    model = GlobalModel(np.random.default_rng(0).normal(size=(ds.num_items, 4)))
    users = {c: UserModel(np.ones(4)) for c in range(3)}
    ctxs = [ClientContext(c, users[c], np.random.default_rng(c)) for c in (0, 2)]
    ups, _ = att.attack_round(model, ctxs, users, np.random.default_rng(0), lambda c: np.random.default_rng(c))
    assert np.array_equal(ups[0].item_grad, ups[1].item_grad)


def test_cluster_attacker_tracks_K(small_dataset):
    ds = small_dataset
    att = Attacker(AttackConfig(name="cluster", malicious_percent=10, K_init=4, R=2), [0], ds, l2=0.0, lr=0.01)
    model = GlobalModel(np.random.default_rng(0).normal(size=(ds.num_items, 4)))
    users = {0: UserModel(np.ones(4))}
    for r in range(6):
        ctx = ClientContext(0, users[0], np.random.default_rng(r))
        _, loss = att.attack_round(model, [ctx], users, np.random.default_rng(r), lambda c: None)
        assert loss > 0
    assert len(att.k_history) == 6
    assert att.k_history[0] == 4
