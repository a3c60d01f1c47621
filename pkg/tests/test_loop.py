import json

import pytest

from specprobe import loop as loop_mod
from specprobe.judgement import SpecDocument
from specprobe.loop import (ANCHOR_LOSS_LIMIT, FrozenSetViolation, StoppingConfig,
                            anchor_locality, freeze_test_set, load_frozen, load_run, revise,
                            run_loop, should_stop, verify_frozen)
from specprobe.model import Action, ActionKind, Category, Channel, MixtureWeights, Probe
from specprobe.montecarlo import SimConfig, simulated_setup
from specprobe.providers.base import ProviderError
from specprobe.providers.template import TemplateBackend
from specprobe.stats import hoeffding_envelope

NO_SLEEP = lambda s: None
ALL_LLM = MixtureWeights(1.0)


def probes(n=5):
    return [Probe(f"t-{i}", f"q{i}?", f"a{i}", Category.GUARD, Channel.CFG, "P") for i in range(n)]


def sim_run(tmp_path=None, seed=3, **over):
    base = dict(n_facts=200, f0=0.5, pi=0.6, r=0.05, n_train=300, n_test=150,
                stopping=StoppingConfig(delta=0.005, max_iters=6))
    base.update(over)
    cfg = SimConfig(**base)
    world, prov, spec = simulated_setup(cfg, seed)
    res = run_loop({}, spec, ALL_LLM, cfg.n_train, cfg.n_test, cfg.stopping, prov, seed,
                   tmp_path, sleep=NO_SLEEP)
    return res, world, prov


# -------------------------------------------------------------- frozen set

def test_freeze_and_verify(tmp_path):
    fz = freeze_test_set(probes(), tmp_path)
    verify_frozen(fz)
    assert (tmp_path / "frozen_test.json.sha256").read_text().strip() == fz.sha256
    again = load_frozen(tmp_path / "frozen_test.json")
    assert [p.id for p in again.probes] == [p.id for p in fz.probes]


def test_mutation_is_detected(tmp_path):
    fz = freeze_test_set(probes(), tmp_path)
    path = tmp_path / "frozen_test.json"
    path.write_bytes(path.read_bytes().replace(b'"a0"', b'"a9"'))
    with pytest.raises(FrozenSetViolation, match="frozen-set violated"):
        verify_frozen(fz)
    with pytest.raises(FrozenSetViolation):
        load_frozen(path)


def test_in_memory_mutation_is_detected():
    fz = freeze_test_set(probes())
    fz.blob = fz.blob.replace(b"q1", b"qX")
    with pytest.raises(FrozenSetViolation):
        verify_frozen(fz)


def test_mutation_during_a_run_halts_it(tmp_path):
    cfg = SimConfig(n_facts=50, f0=0.4, n_train=40, n_test=30,
                    stopping=StoppingConfig(delta=0.001, max_iters=5, fixed=True))
    world, prov, spec = simulated_setup(cfg, 1)
    judge = prov.backends["judge"]
    real = judge.answer
    calls = {"n": 0}

    def tamper(spec_text, p):
        calls["n"] += 1
        if calls["n"] == 5:
            f = tmp_path / "frozen_test.json"
            f.write_text(f.read_text().replace("result code", "result kode", 1))
        return real(spec_text, p)

    judge.answer = tamper
    with pytest.raises(FrozenSetViolation):
        run_loop({}, spec, ALL_LLM, cfg.n_train, cfg.n_test, cfg.stopping, prov, 1, tmp_path,
                 sleep=NO_SLEEP)


def test_test_ids_never_reach_actions(tmp_path, monkeypatch):
    res, _, _ = sim_run(tmp_path)
    for st in res.states:
        assert all(a.probe_id.startswith(f"train{st.k}-") for a in st.actions)
    original = loop_mod.classify_action

    def leaky(p, v, ans):
        a = original(p, v, ans)
        return a and Action(a.kind, a.anchors, a.guidance, a.evidence, "test-00000")

    monkeypatch.setattr(loop_mod, "classify_action", leaky)
    with pytest.raises(FrozenSetViolation, match="action set"):
        sim_run()


# ----------------------------------------------------------------- revision

SPEC = """# Discounts

REQ-D-001 The system shall apply 20% above 1000.

REQ-D-002 The system shall apply 15% above 500.

REQ-D-003 The system shall apply 5% otherwise.

REQ-D-004 Premium members get 5 more points.

REQ-D-005 Every discount is audited.
"""


def act(kind, anchors=(), guidance="The discount above 1000 is 25%."):
    return Action(kind, anchors, guidance, "", "train0-00001")


class TextReviser:
    def __init__(self, text):
        self.text = text

    def revise(self, spec_text, actions, seed=0):
        return self.text


def test_no_actions_returns_spec_untouched():
    spec = SpecDocument(SPEC)

    class Boom:
        def revise(self, *a, **k):
            raise AssertionError("reviser must not be called")

    out = revise(spec, [], Boom())
    assert out.accepted and out.spec is spec and out.spec.text.encode() == SPEC.encode()


def test_fix_is_local():
    out = revise(SpecDocument(SPEC), [act(ActionKind.FIX, ("REQ-D-001",))], TemplateBackend())
    assert out.accepted and out.locality == 1.0
    assert "25%" in out.spec.text and "20%" not in out.spec.text
    assert out.anchors_before == out.anchors_after == 5


def test_add_after_cited_anchor():
    a = act(ActionKind.ADD, ("REQ-D-003",), "Orders of exactly 0 get no discount.")
    out = revise(SpecDocument(SPEC), [a], TemplateBackend())
    lines = out.spec.text.splitlines()
    i = lines.index("REQ-ADD-001 Orders of exactly 0 get no discount.")
    assert lines[i - 2].startswith("REQ-D-003")
    assert out.locality == 1.0 and out.anchors_after == 6


def test_uncited_add_lands_far_from_anchors():
    long_spec = SPEC + "\n".join(f"Note line {i}." for i in range(20)) + "\n"
    out = revise(SpecDocument(long_spec), [act(ActionKind.ADD, ("REQ-D-001",), "New rule.")],
                 TextReviser(long_spec + "\nREQ-ADD-001 New rule.\n"))
    assert out.accepted and out.locality == 0.0


def test_remove_within_anchor_budget():
    out = revise(SpecDocument(SPEC), [act(ActionKind.REMOVE, ("REQ-D-004",))], TemplateBackend())
    assert out.accepted and "REQ-D-004" not in out.spec.text
    assert 1 / 5 <= ANCHOR_LOSS_LIMIT


def test_losing_too_many_anchors_is_rejected():
    spec = SpecDocument(SPEC)
    trimmed = "\n".join(ln for ln in SPEC.splitlines()
                        if not ln.startswith(("REQ-D-004", "REQ-D-005")))
    out = revise(spec, [act(ActionKind.FIX, ("REQ-D-001",))], TextReviser(trimmed))
    assert not out.accepted and out.spec is spec
    assert "dropped 2 of 5" in out.reason


def test_failed_reviser_carries_spec_forward():
    class Down:
        def revise(self, *a, **k):
            raise ProviderError("401")

    spec = SpecDocument(SPEC)
    out = revise(spec, [act(ActionKind.FIX, ("REQ-D-001",))], Down(), sleep=NO_SLEEP)
    assert not out.accepted and out.spec is spec
    assert not revise(spec, [act(ActionKind.FIX)], TextReviser("  ")).accepted


def test_anchor_locality_counts_lines():
    spec = SpecDocument(SPEC)
    new = SPEC.replace("20% above 1000", "25% above 1000")
    assert anchor_locality(spec, new, ["REQ-D-001"]) == 1.0
    assert anchor_locality(spec, SPEC, ["REQ-D-001"]) is None


# ----------------------------------------------------------------- stopping

def test_should_stop_order():
    st = StoppingConfig(delta=0.01, delta_max=0.1, max_iters=5)
    assert should_stop(0, 0.5, None, 0.0, st) is None
    assert should_stop(1, 0.505, 0.5, 0.0, st).startswith("improvement")
    assert should_stop(1, 0.6, 0.5, 0.2, st).startswith("train/test")
    assert should_stop(0, 0.6, None, 0.2, st).startswith("train/test")
    assert should_stop(5, 0.9, 0.5, 0.0, st).startswith("reached")
    fixed = StoppingConfig(delta=0.5, delta_max=0.01, max_iters=3, fixed=True)
    assert should_stop(2, 0.5, 0.5, 0.9, fixed) is None
    assert should_stop(3, 0.5, 0.5, 0.9, fixed).startswith("reached")


def test_default_gap_bound_is_hoeffding():
    assert StoppingConfig().resolved(785).delta_max == pytest.approx(hoeffding_envelope(785)[1])
    with pytest.raises(ValueError):
        StoppingConfig(delta=0)


def test_delta_one_halts_at_first_check():
    res, _, _ = sim_run(stopping=StoppingConfig(delta=1.0, max_iters=10))
    assert res.k_star == 1 and res.status == "converged"
    assert len(res.contingencies) == 1


def test_perfect_spec_holds_constant():
    res, _, _ = sim_run(f0=1.0, r=0.0)
    assert res.test_trajectory == [1.0, 1.0]
    assert res.k_star == 1 and res.status == "converged"
    assert res.states[0].actions == []


def test_loop_improves_and_records(tmp_path):
    res, world, _ = sim_run(tmp_path, r=0.0, stopping=StoppingConfig(delta=0.005, max_iters=8))
    traj = res.test_trajectory
    assert traj[-1] > traj[0]
    assert res.status in ("converged", "max_iters")
    for k, st in enumerate(res.states):
        d = tmp_path / f"iter_{k}"
        for name in ("spec.md", "train_probes.json", "train_verdicts.json", "test_verdicts.json",
                     "actions.json", "contingency.json", "rates.json", "fidelity.json"):
            assert (d / name).exists(), (k, name)
        assert (d / "spec.md").read_text() == st.spec.text
    run = load_run(tmp_path)
    assert len(run["iterations"]) == len(res.states)
    assert run["summary"]["status"] == res.status
    assert json.loads((tmp_path / "usage.json").read_text())["totals"]["calls"] > 0


def test_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    sim_run(a, seed=9)
    sim_run(b, seed=9)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b and files_a
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_generator_failure_sets_provider_error(tmp_path):
    cfg = SimConfig(n_facts=50, f0=0.4, n_train=40, n_test=30,
                    stopping=StoppingConfig(delta=0.001, max_iters=5))
    world, prov, spec = simulated_setup(cfg, 2)
    gen = prov.backends["generator"]
    real = gen.generate
    calls = {"n": 0}

    def flaky(n, seed, spec_text=None, purpose="train"):
        calls["n"] += 1
        if calls["n"] > 2:
            raise ProviderError("quota exhausted")
        return real(n, seed, spec_text, purpose)

    gen.generate = flaky
    res = run_loop({}, spec, ALL_LLM, 40, 30, cfg.stopping, prov, 2, tmp_path, sleep=NO_SLEEP)
    assert res.status == "provider_error" and "quota" in res.stop_reason
    assert len(res.states) == 1
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "provider_error"


def test_template_loop_on_real_program(calcdisc, calcdisc_spec, tmp_path):
    from specprobe.probes import build_pools
    from specprobe.providers.base import Providers, ROLES
    pools = build_pools([calcdisc], TemplateBackend(), workers=1)
    prov = Providers({r: TemplateBackend(role=r) for r in ROLES})
    w = MixtureWeights(0.0, 0.4, 0.3, 0.3)
    res = run_loop(pools, calcdisc_spec, w, 40, 30, StoppingConfig(max_iters=3), prov, 5,
                   tmp_path, sleep=NO_SLEEP)
    assert res.states and res.status in ("converged", "max_iters", "gap_exceeded")
    ids = {p["id"] for p in json.loads((tmp_path / "frozen_test.json").read_text())}
    assert all(i.startswith("test-") for i in ids)
