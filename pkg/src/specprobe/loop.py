"""The refinement loop: resample train, judge both sets, act on train, revise.

The test probes are drawn once, serialized with a hash, and re-verified
before every judging pass. Actions come from train probes only.
"""
from __future__ import annotations

import difflib
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .judgement import JudgedProbe, SpecDocument, classify_action, judge_all, record_transition
from .model import (Action, FidelityReport, MixtureWeights, Probe, RateEstimates,
                    TransitionContingency, canonical_json, extract_anchors, fidelity,
                    probes_from_json, probes_to_json)
from .probes import sample_mixture
from .providers.base import ProviderError, with_retries
from .seeding import revise_seed, test_seed, train_seed
from .stats import estimate_rates, hoeffding_envelope

log = logging.getLogger(__name__)

ANCHOR_LOSS_LIMIT = 0.20
LOCALITY_WINDOW = 5


class FrozenSetViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class StoppingConfig:
    delta: float = 0.005
    delta_max: Optional[float] = None  # None: two-sided Hoeffding bound at n_test
    max_iters: int = 10
    fixed: bool = False  # run exactly max_iters, ignoring the plateau and gap rules

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.delta_max is not None and self.delta_max <= 0:
            raise ValueError("delta_max must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def resolved(self, n_test: int) -> "StoppingConfig":
        if self.delta_max is not None:
            return self
        return StoppingConfig(self.delta, hoeffding_envelope(n_test, 0.05)[1], self.max_iters,
                              self.fixed)

    def to_dict(self) -> dict:
        return {"delta": self.delta, "delta_max": self.delta_max, "max_iters": self.max_iters,
                "fixed": self.fixed}

    @classmethod
    def from_dict(cls, d: dict) -> "StoppingConfig":
        return cls(d.get("delta", 0.005), d.get("delta_max"), d.get("max_iters", 10),
                   d.get("fixed", False))


# ------------------------------------------------------------- frozen test

@dataclass
class FrozenTestSet:
    probes: list[Probe]
    blob: bytes
    sha256: str
    path: Optional[Path] = None

    @property
    def ids(self) -> set[str]:
        return {p.id for p in self.probes}


def _probe_blob(probes: Sequence[Probe]) -> bytes:
    return canonical_json(probes_to_json(probes)).encode("utf-8")


def freeze_test_set(probes: Sequence[Probe], run_dir: Optional[Union[str, Path]] = None) -> FrozenTestSet:
    blob = _probe_blob(probes)
    digest = hashlib.sha256(blob).hexdigest()
    path = None
    if run_dir is not None:
        path = Path(run_dir) / "frozen_test.json"
        path.write_bytes(blob)
        path.with_name("frozen_test.json.sha256").write_text(digest + "\n")
    return FrozenTestSet(list(probes), blob, digest, path)


def verify_frozen(frozen: FrozenTestSet) -> None:
    """Raise FrozenSetViolation if the stored set or its hash changed."""
    if frozen.path is not None:
        blob = frozen.path.read_bytes()
        stored = frozen.path.with_name("frozen_test.json.sha256").read_text().strip()
    else:
        blob, stored = frozen.blob, frozen.sha256
    digest = hashlib.sha256(blob).hexdigest()
    if digest != frozen.sha256 or stored != frozen.sha256:
        raise FrozenSetViolation(f"frozen-set violated: expected {frozen.sha256[:12]}, "
                                 f"found {digest[:12]}")
    if blob != frozen.blob:
        raise FrozenSetViolation("frozen-set violated: contents differ from the frozen copy")


def load_frozen(path: Union[str, Path]) -> FrozenTestSet:
    path = Path(path)
    blob = path.read_bytes()
    stored = path.with_name(path.name + ".sha256").read_text().strip()
    if hashlib.sha256(blob).hexdigest() != stored:
        raise FrozenSetViolation(f"frozen-set violated: {path} does not match its hash")
    return FrozenTestSet(probes_from_json(json.loads(blob)), blob, stored, path)


# ----------------------------------------------------------------- revision

@dataclass
class RevisionOutcome:
    spec: SpecDocument
    accepted: bool
    reason: str = ""
    locality: Optional[float] = None
    anchors_before: int = 0
    anchors_after: int = 0

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "reason": self.reason, "locality": self.locality,
                "anchors_before": self.anchors_before, "anchors_after": self.anchors_after}


def anchor_locality(old: SpecDocument, new_text: str, anchors: Sequence[str],
                    window: int = LOCALITY_WINDOW) -> Optional[float]:
    """Share of changed lines (indexed in the old text) within +-window lines of a cited anchor span."""
    a, b = old.text.splitlines(), new_text.splitlines()
    changed: list[int] = []
    for tag, i1, i2, j1, j2 in difflib.SequenceMatcher(None, a, b, autojunk=False).get_opcodes():
        if tag == "equal":
            continue
        if i2 > i1:
            changed += range(i1 + 1, i2 + 1)
        else:
            changed += [i1] * (j2 - j1)  # insertion after old line i1
    if not changed:
        return None
    spans = [old.anchors[x] for x in anchors if x in old.anchors]
    inside = sum(1 for ln in changed if any(s - window <= ln <= e + window for s, e in spans))
    return inside / len(changed)


def revise(spec: SpecDocument, actions: Sequence[Action], provider, seed: int = 0,
           retries: int = 3, sleep=time.sleep) -> RevisionOutcome:
    before = set(extract_anchors(spec.text))
    if not actions:
        return RevisionOutcome(spec, True, "no actions", None, len(before), len(before))
    try:
        text = with_retries(lambda: provider.revise(spec.text, list(actions), seed=seed), retries,
                            sleep=sleep)
    except ProviderError as exc:
        return RevisionOutcome(spec, False, f"reviser failed: {exc}", None, len(before), len(before))
    if not isinstance(text, str) or not text.strip():
        return RevisionOutcome(spec, False, "reviser returned no text", None, len(before), len(before))
    after = set(extract_anchors(text))
    if before and len(before - after) / len(before) > ANCHOR_LOSS_LIMIT:
        return RevisionOutcome(spec, False,
                               f"revision dropped {len(before - after)} of {len(before)} anchors",
                               None, len(before), len(after))
    try:
        new = SpecDocument(text)
    except ValueError as exc:
        return RevisionOutcome(spec, False, f"revised spec is malformed: {exc}", None,
                               len(before), len(after))
    cited = sorted({x for act in actions for x in act.anchors})
    return RevisionOutcome(new, True, "", anchor_locality(spec, text, cited), len(before), len(after))


# --------------------------------------------------------------------- loop

@dataclass
class IterationState:
    k: int
    spec: SpecDocument
    train_report: FidelityReport
    test_report: FidelityReport
    actions: list[Action] = field(default_factory=list)
    contingency: Optional[TransitionContingency] = None
    rates: Optional[RateEstimates] = None
    revision: Optional[RevisionOutcome] = None

    @property
    def gap(self) -> float:
        return float(self.train_report.F - self.test_report.F)

    def summary(self) -> dict:
        return {"k": self.k, "F_train": float(self.train_report.F),
                "F_test": float(self.test_report.F), "gap": self.gap,
                "actions": len(self.actions),
                "contingency": self.contingency.to_dict() if self.contingency else None,
                "rates": self.rates.to_dict() if self.rates else None,
                "revision": self.revision.to_dict() if self.revision else None}


@dataclass
class LoopResult:
    states: list[IterationState]
    status: str  # converged | gap_exceeded | max_iters | provider_error
    stop_reason: str
    frozen_sha256: str
    run_dir: Optional[Path] = None

    @property
    def k_star(self) -> int:
        return self.states[-1].k if self.states else -1

    @property
    def test_trajectory(self) -> list[float]:
        return [float(s.test_report.F) for s in self.states]

    @property
    def contingencies(self) -> list[TransitionContingency]:
        return [s.contingency for s in self.states if s.contingency is not None]

    def to_dict(self) -> dict:
        return {"status": self.status, "stop_reason": self.stop_reason, "k_star": self.k_star,
                "frozen_sha256": self.frozen_sha256, "test_trajectory": self.test_trajectory,
                "iterations": [s.summary() for s in self.states]}


def should_stop(k: int, f_test: float, f_prev: Optional[float], gap: float,
                stopping: StoppingConfig) -> Optional[str]:
    if stopping.fixed:
        return f"reached max_iters={stopping.max_iters}" if k >= stopping.max_iters else None
    if k >= 1 and f_prev is not None and f_test - f_prev < stopping.delta:
        return f"improvement {f_test - f_prev:+.4f} below delta {stopping.delta}"
    if stopping.delta_max is not None and gap > stopping.delta_max:
        return f"train/test gap {gap:.4f} above {stopping.delta_max:.4f}"
    if k >= stopping.max_iters:
        return f"reached max_iters={stopping.max_iters}"
    return None


def _dump(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    tmp.replace(path)


def _persist_iteration(run_dir: Path, st: IterationState, train: Sequence[Probe],
                       train_j: Sequence[JudgedProbe], test_j: Sequence[JudgedProbe]) -> None:
    d = run_dir / f"iter_{st.k}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "spec.md").write_text(st.spec.text)
    _dump(d / "train_probes.json", probes_to_json(train))
    _dump(d / "train_verdicts.json", [j.to_dict() for j in train_j])
    _dump(d / "test_verdicts.json", [j.to_dict() for j in test_j])
    _dump(d / "actions.json", [a.to_dict() for a in st.actions])
    _dump(d / "contingency.json", st.contingency.to_dict() if st.contingency else None)
    _dump(d / "rates.json", st.rates.to_dict() if st.rates else None)
    _dump(d / "fidelity.json", {"train": st.train_report.to_dict(False),
                                "test": st.test_report.to_dict(False), "gap": st.gap})


def run_loop(pools: dict, spec0: Union[str, SpecDocument], weights: MixtureWeights, n_train: int,
             n_test: int, stopping: StoppingConfig, providers, seed: int,
             run_dir: Optional[Union[str, Path]] = None, workers: int = 1,
             config: Optional[dict] = None, sleep=time.sleep) -> LoopResult:
    """Iterate until the stopping rule fires; every iteration is flushed to ``run_dir``."""
    spec = spec0 if isinstance(spec0, SpecDocument) else SpecDocument(spec0)
    stopping = stopping.resolved(n_test)
    rd = Path(run_dir) if run_dir is not None else None
    if rd is not None:
        rd.mkdir(parents=True, exist_ok=True)
        _dump(rd / "config.json", {**(config or {}), "seed": seed, "n_train": n_train,
                                   "n_test": n_test, "weights": weights.to_dict(),
                                   "stopping": stopping.to_dict()})
    ledger = getattr(providers, "ledger", None)

    def set_iter(k):
        if ledger is not None:
            ledger.iteration = k

    set_iter(0)
    test = sample_mixture(pools, weights, n_test, test_seed(seed), providers.generator, spec.text,
                          prefix="test", purpose="test")
    frozen = freeze_test_set(test, rd)
    states: list[IterationState] = []
    prev_test: Optional[dict] = None
    status, reason = "max_iters", ""
    k = 0
    try:
        while True:
            set_iter(k)
            train = sample_mixture(pools, weights, n_train, train_seed(seed, k), providers.generator,
                                   spec.text, prefix=f"train{k}", purpose="train")
            verify_frozen(frozen)
            train_j = judge_all(spec, train, providers.judge, providers.comparator, workers, sleep)
            test_j = judge_all(spec, frozen.probes, providers.judge, providers.comparator, workers,
                               sleep)
            train_rep = fidelity({j.probe.id: j.verdict for j in train_j})
            test_v = {j.probe.id: j.verdict for j in test_j}
            test_rep = fidelity(test_v)
            cont = rates = None
            if prev_test is not None:
                cont = record_transition(prev_test, test_v)
                try:
                    rates = estimate_rates(cont, k - 1)
                except ValueError:
                    rates = None
            actions = [a for j in train_j
                       if (a := classify_action(j.probe, j.verdict, j.answer)) is not None]
            leaked = {a.probe_id for a in actions} & frozen.ids
            if leaked:
                raise FrozenSetViolation(f"test probes reached the action set: {sorted(leaked)[:3]}")
            st = IterationState(k, spec, train_rep, test_rep, actions, cont, rates)
            f_prev = float(states[-1].test_report.F) if states else None
            states.append(st)
            why = should_stop(k, float(test_rep.F), f_prev, st.gap, stopping)
            if why is None:
                st.revision = revise(spec, actions, providers.reviser, revise_seed(seed, k),
                                     sleep=sleep)
                if not st.revision.accepted:
                    log.warning("iteration %d: revision rejected (%s); carrying the spec forward",
                                k, st.revision.reason)
            if rd is not None:
                _persist_iteration(rd, st, train, train_j, test_j)
                if st.revision is not None and st.revision.accepted:
                    (rd / f"iter_{k}" / "revised_spec.md").write_text(st.revision.spec.text)
                    _dump(rd / f"iter_{k}" / "revision.json", st.revision.to_dict())
            if why is not None:
                reason = why
                if why.startswith("improvement"):
                    status = "converged"
                elif why.startswith("train/test"):
                    status = "gap_exceeded"
                else:
                    status = "max_iters"
                break
            spec = st.revision.spec
            prev_test = test_v
            k += 1
    except ProviderError as exc:
        status, reason = "provider_error", str(exc)
    result = LoopResult(states, status, reason, frozen.sha256, rd)
    if rd is not None:
        _dump(rd / "summary.json", result.to_dict())
        if ledger is not None:
            _dump(rd / "usage.json", ledger.to_dict())
    return result


def load_run(run_dir: Union[str, Path]) -> dict:
    """Per-iteration records of a persisted run, in order."""
    rd = Path(run_dir)
    iters = []
    k = 0
    while (rd / f"iter_{k}").is_dir():
        d = rd / f"iter_{k}"
        rec = {"k": k}
        for name in ("fidelity", "contingency", "rates"):
            p = d / f"{name}.json"
            rec[name] = json.loads(p.read_text()) if p.exists() else None
        iters.append(rec)
        k += 1
    cfg = json.loads((rd / "config.json").read_text()) if (rd / "config.json").exists() else {}
    summary = json.loads((rd / "summary.json").read_text()) if (rd / "summary.json").exists() else {}
    return {"config": cfg, "summary": summary, "iterations": iters}
