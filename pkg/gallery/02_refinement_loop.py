"""Two refinement loops side by side.

The first runs against the CALCDISC spec with the rule-based roles (no
model needed). The second runs in the synthetic world, where the repair and
regression rates are known, so the observed trajectory can be checked
against the plateau the rates imply.

    python3 gallery/02_refinement_loop.py [run-dir]
"""
import sys
import tempfile
from importlib import resources
from pathlib import Path

from specprobe.cobol import parse_file
from specprobe.graphs import extract
from specprobe.loop import StoppingConfig, run_loop
from specprobe.model import MixtureWeights
from specprobe.montecarlo import SimConfig, simulated_setup
from specprobe.probes import build_pools
from specprobe.providers.base import ROLES, Providers
from specprobe.providers.template import TemplateBackend

FIX = Path(str(resources.files("specprobe").joinpath("data").joinpath("fixtures")))
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="specprobe-"))

# rule-based roles on a real program
bundle = extract(parse_file(FIX / "calcdisc.cbl", [FIX]))
pools = build_pools([bundle], TemplateBackend(), workers=1)
roles = Providers({r: TemplateBackend(role=r) for r in ROLES})
res = run_loop(pools, (FIX / "calcdisc_spec.md").read_text(), MixtureWeights(0.0, 0.4, 0.3, 0.3),
               n_train=60, n_test=40, stopping=StoppingConfig(max_iters=3), providers=roles,
               seed=1, run_dir=out / "calcdisc")
print("CALCDISC:", res.status, [round(f, 3) for f in res.test_trajectory])
for st in res.states:
    print(f"  k={st.k} F_train={float(st.train_report.F):.3f} "
          f"F_test={float(st.test_report.F):.3f} actions={len(st.actions)}")

# synthetic world with known rates
cfg = SimConfig(n_facts=400, f0=0.55, pi=0.5, r=0.03, n_train=800, n_test=300,
                stopping=StoppingConfig(delta=0.002, max_iters=12))
world, prov, spec = simulated_setup(cfg, seed=7)
res = run_loop({}, spec, MixtureWeights(1.0), cfg.n_train, cfg.n_test, cfg.stopping, prov, 7,
               out / "synthetic")
print("\nsynthetic:", res.status, "-", res.stop_reason)
print("  test fidelity:", [round(f, 3) for f in res.test_trajectory])
print(f"  plateau implied by the rates: {cfg.pi / (cfg.pi + cfg.r):.3f}")
for k, r in enumerate(s.rates for s in res.states if s.rates):
    print(f"  transition {k}: pi={r.pi_hat:.3f} r={r.r_hat:.3f}")
print("\nartifacts under", out)
