# Train a federated MF recommender on synthetic data and score it with HR@5 / NDCG@5.
import numpy as np

from fedrecsim import FederationConfig, evaluate, generate_synthetic, train

# 200 users whose tastes come from 5 latent item groups
ds = generate_synthetic(num_users=200, num_items=100, num_latent_groups=5, interactions_per_user=30, seed=7)
print(ds.num_users, "users,", ds.num_items, "items,", ds.num_interactions, "interactions")

# leave-one-out: last item is test, second to last validation
u = 0
print("user 0 train tail:", ds.train[u][-5:], "valid:", ds.valid[u], "test:", ds.test[u])

cfg = FederationConfig(rounds=150, clients_per_round=20, eval_interval=25, lr=1e-2, num_negatives=8)

def progress(rep):
    if rep.metrics:
        print(f"round {rep.round + 1:4d}  valid HR@5 {rep.metrics['valid_hr']:.3f}  test HR@5 {rep.metrics['test_hr']:.3f}")

res = train(ds, cfg, seed=0, on_round=progress)
print("best round", res.best_round, "test HR@5 %.3f NDCG@5 %.3f" % (res.test.hr_at_k, res.test.ndcg_at_k))

# a random ranking hits the top 5 of ~100 candidates about 5% of the time
rng = np.random.default_rng(0)
noise = res.model.copy()
noise.item_embeddings = rng.normal(size=noise.item_embeddings.shape)
print("random-embedding HR@5 %.3f" % evaluate(noise, res.users, ds, k=5).hr_at_k)
