"""Telling honest improvement from overfitting to the generator.

When training probes start echoing the spec's own wording (drift d > 0),
train fidelity runs ahead of the frozen test set. The gap leaves the
Hoeffding envelope within a few iterations; without drift it stays inside.

    python3 gallery/04_drift_discriminant.py
"""
from specprobe.loop import StoppingConfig
from specprobe.montecarlo import SimConfig, monte_carlo
from specprobe.seeding import derive_seed
from specprobe.stats import hoeffding_envelope

bound = hoeffding_envelope(785, 0.05)[1]
print(f"two-sided envelope at n=785: {bound:.4f}\n")
for d in (0.0, 0.1, 0.3):
    cfg = SimConfig(n_facts=1000, f0=0.38, f_wrong=0.35, d=d, n_train=785, n_test=785,
                    stopping=StoppingConfig(max_iters=8, fixed=True))
    res = monte_carlo(cfg, [derive_seed(0, "drift", i) for i in range(50)])
    gaps = res.gap_matrix.mean(axis=0)
    share = res.envelope_exceeded(within=4).mean()
    print(f"d={d:.1f}: mean gap per k " + " ".join(f"{g:+.3f}" for g in gaps)
          + f"  | runs beyond envelope by k=4: {share:.0%}")
