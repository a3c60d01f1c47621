"""Domain types shared across the pipeline.

Everything here is a plain value type: constructors, validation and JSON
round-tripping, nothing else. Rates are kept as integer counts and only
turned into decimals when rendered.
"""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Iterable, Optional

ANCHOR_RE = re.compile(r"\bREQ-[A-Z0-9]+-[0-9]{3}\b")
SILENT = None  # judge answer when the spec says nothing


class Category(str, Enum):
    PRECONDITION = "precondition"
    COMPUTATION = "computation"
    BRANCHING = "branching"
    GUARD = "guard"
    OUTPUT = "output"
    DEPENDENCY = "dependency"
    NEGATIVE = "negative"
    BOUNDARY = "boundary"
    DATA = "data"
    FLOW = "flow"


class Channel(str, Enum):
    LLM = "llm"
    CFG = "cfg"
    DFG = "dfg"
    SDG = "sdg"


# categories a symbolic channel may emit; llm is unrestricted
CHANNEL_CATEGORIES = {
    Channel.CFG: {Category.GUARD},
    Channel.DFG: {Category.DATA, Category.COMPUTATION},
    Channel.SDG: {Category.FLOW, Category.DEPENDENCY},
}


class Confidence(str, Enum):
    CONFIRMED = "confirmed"
    CONTRADICTED = "contradicted"
    NOT_ADDRESSED = "not_addressed"


class Verdict(str, Enum):
    AGREE = "agree"
    CONTRADICT = "contradict"
    GAP = "gap"


class ActionKind(str, Enum):
    FIX = "Fix"
    ADD = "Add"
    REMOVE = "Remove"


class ValidationError(ValueError):
    """Raised when a value violates its type invariants."""


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def extract_anchors(text: str) -> list[str]:
    """Anchor ids in order of first appearance."""
    seen: dict[str, None] = {}
    for m in ANCHOR_RE.finditer(text or ""):
        seen.setdefault(m.group(0), None)
    return list(seen)


@dataclass(frozen=True)
class Probe:
    id: str
    question: str
    truth: str
    category: Category
    channel: Channel
    program: str
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        object.__setattr__(self, "channel", Channel(self.channel))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["category"] = self.category.value
        d["channel"] = self.channel.value
        if not self.meta:
            d.pop("meta")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Probe":
        return cls(
            id=d["id"], question=d["question"], truth=d["truth"],
            category=d["category"], channel=d["channel"], program=d["program"],
            meta=dict(d.get("meta") or {}),
        )


@dataclass(frozen=True)
class JudgeAnswer:
    answer: Optional[str]
    evidence: tuple[str, ...] = ()
    confidence: Confidence = Confidence.NOT_ADDRESSED
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "confidence", Confidence(self.confidence))
        object.__setattr__(self, "evidence", tuple(self.evidence))
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))
        if (self.answer is SILENT) != (self.confidence is Confidence.NOT_ADDRESSED):
            raise ValidationError(
                "answer must be SILENT exactly when confidence is not_addressed")

    @property
    def silent(self) -> bool:
        return self.answer is SILENT

    @classmethod
    def silent_answer(cls, *diagnostics: str) -> "JudgeAnswer":
        return cls(SILENT, (), Confidence.NOT_ADDRESSED, diagnostics)

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "evidence": list(self.evidence),
            "confidence": self.confidence.value,
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JudgeAnswer":
        return cls(d.get("answer"), tuple(d.get("evidence") or ()),
                   d.get("confidence", "not_addressed"), tuple(d.get("diagnostics") or ()))


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    anchors: tuple[str, ...]
    guidance: str
    evidence: str
    probe_id: str

    def __post_init__(self):
        object.__setattr__(self, "kind", ActionKind(self.kind))
        object.__setattr__(self, "anchors", tuple(self.anchors))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "anchors": list(self.anchors),
                "guidance": self.guidance, "evidence": self.evidence,
                "probe_id": self.probe_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Action":
        return cls(d["kind"], tuple(d.get("anchors") or ()), d.get("guidance", ""),
                   d.get("evidence", ""), d["probe_id"])


@dataclass(frozen=True)
class FidelityReport:
    """Agreement / contradiction / gap counts over one probe set."""

    agree: int
    contradict: int
    gap: int
    verdicts: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return self.agree + self.contradict + self.gap

    @property
    def F(self) -> Fraction:
        return Fraction(self.agree, self.n)

    @property
    def C(self) -> Fraction:
        return Fraction(self.contradict, self.n)

    @property
    def G(self) -> Fraction:
        return Fraction(self.gap, self.n)

    def to_dict(self, with_verdicts: bool = True) -> dict:
        d = {"n": self.n, "agree": self.agree, "contradict": self.contradict,
             "gap": self.gap, "F": float(self.F), "C": float(self.C), "G": float(self.G)}
        if with_verdicts:
            d["verdicts"] = {k: Verdict(v).value for k, v in sorted(self.verdicts.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FidelityReport":
        return cls(d["agree"], d["contradict"], d["gap"],
                   {k: Verdict(v) for k, v in (d.get("verdicts") or {}).items()})


def fidelity(verdicts: Iterable) -> FidelityReport:
    """Aggregate verdicts into a report.

    Accepts either a plain sequence of verdicts or a mapping probe id ->
    verdict (the mapping is kept on the report).
    """
    if isinstance(verdicts, dict):
        per_probe = {k: Verdict(v) for k, v in verdicts.items()}
        values = list(per_probe.values())
    else:
        per_probe = {}
        values = [Verdict(v) for v in verdicts]
    if not values:
        raise ValueError("empty probe set")
    counts = Counter(values)
    return FidelityReport(counts[Verdict.AGREE], counts[Verdict.CONTRADICT],
                          counts[Verdict.GAP], per_probe)


@dataclass(frozen=True)
class TransitionContingency:
    held: int
    regr: int
    impr: int
    stuck: int

    def __post_init__(self):
        for name in ("held", "regr", "impr", "stuck"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValidationError(f"{name} must be a non-negative integer, got {v!r}")

    @property
    def n(self) -> int:
        return self.held + self.regr + self.impr + self.stuck

    @property
    def prev_agree(self) -> int:
        return self.held + self.regr

    @property
    def next_agree(self) -> int:
        return self.held + self.impr

    def to_dict(self) -> dict:
        return {"held": self.held, "regr": self.regr, "impr": self.impr, "stuck": self.stuck}

    @classmethod
    def from_dict(cls, d: dict) -> "TransitionContingency":
        return cls(int(d["held"]), int(d["regr"]), int(d["impr"]), int(d["stuck"]))


@dataclass(frozen=True)
class MixtureWeights:
    alpha: float
    beta_cfg: float = 1.0
    beta_dfg: float = 0.0
    beta_sdg: float = 0.0

    def __post_init__(self):
        vals = (self.alpha, self.beta_cfg, self.beta_dfg, self.beta_sdg)
        if any(not (0.0 <= v <= 1.0) for v in vals):
            raise ValidationError(f"mixture weights must lie in [0, 1]: {vals}")
        total = self.beta_cfg + self.beta_dfg + self.beta_sdg
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"beta weights must sum to 1, got {total!r}")
        object.__setattr__(self, "beta_cfg", self.beta_cfg / total)
        object.__setattr__(self, "beta_dfg", self.beta_dfg / total)
        object.__setattr__(self, "beta_sdg", self.beta_sdg / total)

    @property
    def beta(self) -> tuple[float, float, float]:
        return (self.beta_cfg, self.beta_dfg, self.beta_sdg)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureWeights":
        return cls(d["alpha"], d.get("beta_cfg", 1.0), d.get("beta_dfg", 0.0),
                   d.get("beta_sdg", 0.0))


@dataclass(frozen=True)
class RateEstimates:
    """Per-transition improvement/regression rates.

    ``None`` marks an undefined rate (zero denominator); it is never NaN.
    """

    pi_hat: Optional[float]
    r_hat: Optional[float]
    k: int = 0

    def __post_init__(self):
        for name in ("pi_hat", "r_hat"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} out of [0, 1]: {v}")

    @property
    def gamma(self) -> Optional[float]:
        if self.pi_hat is None or self.r_hat is None:
            return None
        return 1.0 - self.pi_hat - self.r_hat

    @property
    def f_dagger(self) -> Optional[float]:
        if self.pi_hat is None or self.r_hat is None:
            return None
        s = self.pi_hat + self.r_hat
        return self.pi_hat / s if s > 0 else None

    def to_dict(self) -> dict:
        return {"k": self.k, "pi_hat": self.pi_hat, "r_hat": self.r_hat,
                "gamma": self.gamma, "f_dagger": self.f_dagger}

    @classmethod
    def from_dict(cls, d: dict) -> "RateEstimates":
        return cls(d.get("pi_hat"), d.get("r_hat"), int(d.get("k", 0)))


def validate_probe_set(probes: Iterable[Probe]) -> list[str]:
    """Return violations (duplicate ids, channel/category mismatch); empty means valid."""
    problems = []
    seen: set[str] = set()
    for p in probes:
        if p.id in seen:
            problems.append(f"duplicate probe id {p.id!r}")
        seen.add(p.id)
        allowed = CHANNEL_CATEGORIES.get(p.channel)
        if allowed is not None and p.category not in allowed:
            problems.append(
                f"probe {p.id!r}: channel {p.channel.value} cannot carry category "
                f"{p.category.value}")
    return problems


def probes_to_json(probes: Iterable[Probe]) -> list[dict]:
    return [p.to_dict() for p in probes]


def probes_from_json(data: list[dict]) -> list[Probe]:
    return [Probe.from_dict(d) for d in data]


_ANCHOR_DEF = re.compile(r"^\s*(?:[-*+]\s+|#+\s+|\d+[.)]\s+)?(?:\*\*|`)?(REQ-[A-Z0-9]+-[0-9]{3})\b")
_HEADER = re.compile(r"^\s*#")


def anchor_spans(text: str) -> dict[str, tuple[int, int]]:
    """Anchor id -> (first, last) 1-based line span.

    An anchor is defined on the line it starts; its span runs to the line
    before the next definition or markdown header, minus trailing blanks.
    Mentions inside prose are references, not definitions.
    """
    lines = (text or "").splitlines()
    starts = []
    for no, ln in enumerate(lines, start=1):
        m = _ANCHOR_DEF.match(ln)
        if m:
            starts.append((no, m.group(1)))
    spans: dict[str, tuple[int, int]] = {}
    for i, (no, anchor) in enumerate(starts):
        end = starts[i + 1][0] - 1 if i + 1 < len(starts) else len(lines)
        for j in range(no + 1, end + 1):
            if _HEADER.match(lines[j - 1]):
                end = j - 1
                break
        while end > no and not lines[end - 1].strip():
            end -= 1
        spans.setdefault(anchor, (no, end))
    return spans
