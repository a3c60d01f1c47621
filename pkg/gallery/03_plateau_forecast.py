"""Forecasting the plateau from the first few transitions.

Takes seven recorded held/regr/impr/stuck transitions from a frozen 785-probe
test set, estimates per-step rates, replays the fidelity recursion, and
checks whether the fixed point fitted on the first four transitions brackets
the fidelity observed afterwards.

    python3 gallery/03_plateau_forecast.py
"""
from specprobe.model import TransitionContingency
from specprobe.stats import (balance_identity, bootstrap_fixed_point, estimate_rates, forecast,
                             trajectory_table)

rows = [(439, 24, 204, 118), (622, 21, 80, 62), (687, 15, 24, 59), (698, 13, 18, 56),
        (699, 17, 30, 39), (716, 13, 18, 38), (713, 21, 19, 32)]
observed = [0.590, 0.819, 0.894, 0.906, 0.912, 0.929, 0.935, 0.932]
conts = [TransitionContingency(*r) for r in rows]

print(" k   pi_hat  r_hat  plateau  imp-reg")
for row in trajectory_table(conts):
    print(f"{row['k']:2d}   {row['pi_hat']:.3f}   {row['r_hat']:.3f}  {row['f_dagger']:.3f}"
          f"   {row['imp_minus_reg']:+4d}")

pred = forecast(observed[0], [estimate_rates(c) for c in conts])
print("\npredicted:", " ".join(f"{x:.3f}" for x in pred))
print("observed: ", " ".join(f"{x:.3f}" for x in observed))

fp = bootstrap_fixed_point(conts[:4], B=5000, seed=0, fit_window=(0, 3))
lo, hi = fp.bootstrap_ci
print(f"\nplateau from transitions 0..3: {fp.f_dagger:.3f}, 95% CI [{lo:.3f}, {hi:.3f}]")
for k in (5, 6, 7):
    print(f"  k={k}: observed {observed[k]:.3f} {'inside' if lo <= observed[k] <= hi else 'OUTSIDE'}")

last = estimate_rates(conts[-1])
imp, reg = balance_identity(observed[-2], last, 785)
print(f"\nat the last step, expected improvements {imp:.1f} vs regressions {reg:.1f} "
      f"(observed {rows[-1][2]} vs {rows[-1][1]})")
