# UNION: benign clients add a contrastive term that spreads item embeddings out;
# the server flags updates whose virtual step makes the embeddings clump.
import numpy as np

from fedrecsim import AttackConfig, DefenseConfig, FederationConfig, generate_synthetic, train
from fedrecsim.clustering import gap_statistics

rng = np.random.default_rng(0)

# the gap test asks "one group or two?" about a list of numbers
print("evenly spaced:", gap_statistics(np.linspace(0, 1, 40), B=50, rng=rng))
print("two groups:   ", gap_statistics(np.r_[rng.normal(0, 0.1, 20), rng.normal(3, 0.1, 20)], B=50, rng=rng))

ds = generate_synthetic(200, 100, 5, 30, seed=7)
# with larger steps and 8 negatives the attacker's clip bound is large enough to stand out;
# at the default step size its uploads blend in (see README)
cfg = FederationConfig(rounds=150, clients_per_round=20, eval_interval=25, lr=1e-2, num_negatives=8)
res = train(ds, cfg, AttackConfig(name="cluster", malicious_percent=5),
            DefenseConfig(filter="union", aggregate="norm_bound"), seed=0)

# look at one round with a malicious participant
rep = next(r for r in res.reports[60:] if r.malicious_sampled)
print("round", rep.round, "malicious", rep.malicious_sampled, "filtered", rep.filtered)
for cid, d in sorted(rep.uniformity.items(), key=lambda kv: kv[1])[:5]:
    tag = "malicious" if cid in rep.malicious_sampled else ""
    print(f"  client {cid:3d}  uniformity {d:.6f} {tag}")

sampled = sum(len(r.malicious_sampled) for r in res.reports[50:])
caught = sum(len(r.malicious_filtered) for r in res.reports[50:])
print(f"malicious updates filtered after round 50: {caught}/{sampled}")
print("HR@5 under attack with UNION: %.3f" % res.test.hr_at_k)
