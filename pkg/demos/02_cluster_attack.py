# ClusterAttack: malicious clients pull item embeddings into K tight clusters.
import numpy as np

from fedrecsim import AttackConfig, AttackState, FederationConfig, adaptive_update_K, generate_synthetic, train
from fedrecsim.attacks import clip_rows, plan_cluster_attack
from fedrecsim.model import GlobalModel

rng = np.random.default_rng(1)

# one attack step on a toy model: raw gradient is 2 (v - centroid)
model = GlobalModel(rng.normal(size=(12, 2)))
plan = plan_cluster_attack(model, K=3, rng=rng)
print("attack loss (within-cluster variance): %.3f" % plan.attack_loss)

# each row is clipped to a bound that looks like a normal gradient norm
bounds = 0.2 + rng.uniform(0, 3, size=12) * 0.05
clipped = clip_rows(plan.raw_grad, bounds)
print("row norms before", np.round(np.linalg.norm(plan.raw_grad, axis=1), 2))
print("row norms after ", np.round(np.linalg.norm(clipped, axis=1), 2))

# the cluster count adapts to the smoothed attack loss
state = AttackState(K=2, R=3)
for loss in [1, 2, 3, 4, 50, 40, 30, 20]:
    state = adaptive_update_K(state, loss)
    print(f"loss {loss:3d} -> K={state.K} (inc {state.n_inc}, dec {state.n_dec})")

# end to end at default step sizes: 5% malicious clients, no defense
ds = generate_synthetic(200, 100, 5, 30, seed=7)
cfg = FederationConfig(rounds=300, clients_per_round=20, eval_interval=25)
clean = train(ds, cfg, seed=0).test.hr_at_k
attacked = train(ds, cfg, AttackConfig(name="cluster", malicious_percent=5), seed=0)
print("HR@5 clean %.3f attacked %.3f" % (clean, attacked.test.hr_at_k))
losses = [r.attack_loss for r in attacked.reports if r.attack_loss is not None]
print("attack loss first/last: %.2f / %.2f" % (losses[0], losses[-1]))
