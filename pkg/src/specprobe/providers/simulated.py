"""Synthetic world: a known universe of behaviours and a spec whose per-fact
status evolves under a two-state repair/regress chain.

Every fact i has a canonical answer ``result code <100+i>``. The spec states
it correctly, states a wrong code (``<101+i>``), omits it, or (for negative
facts) claims a behaviour the code never performs. The spec text is rendered
from the status vector, so judging against text and judging against status
always agree.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from ..model import ANCHOR_RE, Category, Confidence, JudgeAnswer, Probe
from ..seeding import make_rng
from .base import RetriableError, UsageLedger, synthetic_tokens
from .template import rule_compare

CORRECT, WRONG, MISSING, SPURIOUS = 0, 1, 2, 3
STATUS_NAMES = ("correct", "wrong", "missing", "spurious")
_FACT_RE = re.compile(r"behaviour (\d+)")
_LINE_RE = re.compile(r"^(REQ-F(\d+)-001)\b(.*)$", re.MULTILINE)


def _code(i: int, wrong: bool = False) -> int:
    return 100 + i + (1 if wrong else 0)


@dataclass
class SyntheticWorld:
    status: np.ndarray
    negative: np.ndarray = None
    pi: float = 0.5
    r: float = 0.0
    d: float = 0.0
    d_test: float = 0.0

    def __post_init__(self):
        self.status = np.asarray(self.status, dtype=np.int8).copy()
        if self.negative is None:
            self.negative = np.zeros(len(self.status), dtype=bool)
        self.negative = np.asarray(self.negative, dtype=bool).copy()
        if len(self.status) < 1:
            raise ValueError("a synthetic world needs at least one fact")
        for name in ("pi", "r", "d", "d_test"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        ok_pos = np.isin(self.status[~self.negative], (CORRECT, WRONG, MISSING))
        ok_neg = np.isin(self.status[self.negative], (CORRECT, SPURIOUS))
        if not (ok_pos.all() and ok_neg.all()):
            raise ValueError("invalid status for fact polarity")

    @classmethod
    def initial(cls, n_facts: int, f_correct: float, f_wrong: Optional[float] = None,
                pi: float = 0.5, r: float = 0.0, d: float = 0.0, d_test: float = 0.0,
                negative_fraction: float = 0.0, seed: int = 0) -> "SyntheticWorld":
        """World with exactly round(f*M) facts in each status, randomly placed.

        Non-correct positive facts split between wrong (``f_wrong``) and
        missing (the rest); negative facts that are not correct are spurious.
        """
        if f_wrong is None:
            f_wrong = (1.0 - f_correct) / 2.0
        if f_correct + f_wrong > 1.0 + 1e-12:
            raise ValueError("f_correct + f_wrong exceeds 1")
        M = int(n_facts)
        rng = make_rng(seed)
        n_ok = int(round(f_correct * M))
        n_wrong = int(round(f_wrong * M))
        status = np.full(M, MISSING, dtype=np.int8)
        status[:n_ok] = CORRECT
        status[n_ok:n_ok + n_wrong] = WRONG
        perm = rng.permutation(M)
        status = status[perm]
        negative = rng.random(M) < negative_fraction
        status[negative & (status != CORRECT)] = SPURIOUS
        return cls(status, negative, pi, r, d, d_test)

    @property
    def M(self) -> int:
        return len(self.status)

    def copy(self) -> "SyntheticWorld":
        return SyntheticWorld(self.status.copy(), self.negative.copy(), self.pi, self.r, self.d,
                              self.d_test)

    def population_fidelity(self) -> float:
        return float(np.mean(self.status == CORRECT))

    def counts(self) -> dict:
        return {STATUS_NAMES[s]: int(np.sum(self.status == s)) for s in range(4)}

    # text ------------------------------------------------------------
    def truth(self, i: int) -> str:
        return "not performed" if self.negative[i] else f"result code {_code(i)}"

    def question(self, i: int) -> str:
        if self.negative[i]:
            return f"Does the system perform behaviour {i}?"
        return f"What result does behaviour {i} return?"

    def claim(self, i: int, status: Optional[int] = None) -> Optional[str]:
        """What the spec says about fact i under ``status`` (None if silent)."""
        s = int(self.status[i] if status is None else status)
        if s == MISSING:
            return None
        if s == CORRECT and self.negative[i]:
            return "not performed"
        return f"result code {_code(i, wrong=(s == WRONG))}"

    def anchor(self, i: int) -> str:
        return f"REQ-F{i}-001"

    def spec_line(self, i: int) -> Optional[str]:
        c = self.claim(i)
        if c is None:
            return None
        if c == "not performed":
            return f"{self.anchor(i)} The system shall not perform behaviour {i}."
        return f"{self.anchor(i)} When behaviour {i} is requested, the system shall return {c}."

    def spec_text(self) -> str:
        lines = ["# Synthetic specification", ""]
        for i in range(self.M):
            ln = self.spec_line(i)
            if ln is not None:
                lines.append(ln)
        return "\n".join(lines) + "\n"


@lru_cache(maxsize=64)
def parse_claims(spec_text: str) -> dict[int, tuple[str, str]]:
    """fact index -> (anchor, claim) as stated in a synthetic spec text."""
    out = {}
    for m in _LINE_RE.finditer(spec_text):
        anchor, i, rest = m.group(1), int(m.group(2)), m.group(3)
        if "shall not perform" in rest:
            out[i] = (anchor, "not performed")
        else:
            c = re.search(r"shall return (result code \d+)", rest)
            if c:
                out[i] = (anchor, c.group(1))
    return out


def draw_facts(rng: np.random.Generator, status: np.ndarray, n: int, d: float):
    """Shared draw routine: (fact index, echo flag, status echoed) per probe.

    Echo probes take their truth from the spec's current wording, so they are
    drawn among facts the spec addresses; if it addresses none, none echo.
    """
    echo = rng.random(n) < d
    idx = rng.integers(0, len(status), n)
    addressed = np.flatnonzero(status != MISSING)
    n_echo = int(echo.sum())
    if n_echo and len(addressed):
        idx[echo] = addressed[rng.integers(0, len(addressed), n_echo)]
    else:
        echo[:] = False
    echo_status = np.where(echo, status[idx], -1).astype(np.int8)
    return idx, echo, echo_status


def sim_generate(world: SyntheticWorld, n: int, seed: int, drift: Optional[float] = None,
                 prefix: str = "sim") -> list[Probe]:
    """n uniform draws with replacement; a share ``drift`` echo the spec's wording."""
    d = world.d if drift is None else drift
    idx, echo, echo_status = draw_facts(make_rng(seed), world.status, n, d)
    probes = []
    for j, (i, e, es) in enumerate(zip(idx.tolist(), echo.tolist(), echo_status.tolist())):
        truth = world.claim(i, es) if e else world.truth(i)
        cat = Category.NEGATIVE if world.negative[i] else Category.COMPUTATION
        meta = {"fact": i, "echo": bool(e)}
        probes.append(Probe(f"{prefix}-{j:05d}", world.question(i), truth, cat, "llm", "SYNTH", meta))
    return probes


def fact_of(probe: Probe) -> int:
    if "fact" in probe.meta:
        return int(probe.meta["fact"])
    m = _FACT_RE.search(probe.question)
    if not m:
        raise KeyError(f"probe {probe.id} does not name a synthetic fact")
    return int(m.group(1))


def sim_judge(world: SyntheticWorld, probe: Probe, spec_text: Optional[str] = None) -> JudgeAnswer:
    i = fact_of(probe)
    if not 0 <= i < world.M:
        raise KeyError(f"unknown fact id {i}")
    claims = parse_claims(spec_text if spec_text is not None else world.spec_text())
    if i not in claims:
        return JudgeAnswer.silent_answer()
    anchor, claim = claims[i]
    return JudgeAnswer(claim, (anchor,), Confidence.CONFIRMED)


def sim_revise(world: SyntheticWorld, facts: Sequence[int], seed: int) -> str:
    """Apply one repair step in place and return the new spec text.

    Each actioned non-correct fact becomes correct with probability pi; each
    correct fact that was not actioned regresses with probability r.
    """
    u = make_rng(seed).random(world.M)
    actioned = np.zeros(world.M, dtype=bool)
    if len(facts):
        actioned[np.asarray(list(facts), dtype=int)] = True
    st = world.status
    repaired = actioned & (st != CORRECT) & (u < world.pi)
    regressed = ~actioned & (st == CORRECT) & (u < world.r)
    st[repaired] = CORRECT
    st[regressed & ~world.negative] = WRONG
    st[regressed & world.negative] = SPURIOUS
    return world.spec_text()


class SimulatedBackend:
    """Every role answered from a SyntheticWorld (or canned behaviour).

    ``echo_answer`` makes the judge return that fixed answer for every probe.
    ``flip_rate`` makes a re-phrasing (attempt >= 1) of a fact diverge in
    meaning with that probability; ``fail_rate`` makes phrasing calls fail.
    """

    name = "simulated"

    def __init__(self, world: Optional[SyntheticWorld] = None, ledger: Optional[UsageLedger] = None,
                 role: str = "", echo_answer: Optional[str] = None, flip_rate: float = 0.0,
                 fail_rate: float = 0.0, seed: int = 0):
        self.world = world
        self.ledger = ledger
        self.role = role
        self.echo_answer = echo_answer
        self.flip_rate = flip_rate
        self.fail_rate = fail_rate
        self.seed = seed

    def _log(self, prompt: str, out: str):
        if self.ledger is not None:
            self.ledger.record(self.role or "simulated", synthetic_tokens(prompt),
                               synthetic_tokens(out))

    def generate(self, n: int, seed: int, spec_text: Optional[str] = None,
                 purpose: str = "train") -> list[Probe]:
        drift = self.world.d_test if purpose == "test" else self.world.d
        probes = sim_generate(self.world, n, seed, drift)
        self._log(str(n), str(len(probes)))
        return probes

    def answer(self, spec_text: str, probe: Probe) -> JudgeAnswer:
        if self.echo_answer is not None:
            ans = JudgeAnswer(self.echo_answer, (), Confidence.CONFIRMED)
        else:
            ans = sim_judge(self.world, probe, spec_text)
        self._log(probe.question, ans.answer or "")
        return ans

    def compare(self, truth: str, answer: str) -> str:
        label = rule_compare(truth, answer)
        self._log(truth + answer, label)
        return label

    def revise(self, spec_text: str, actions, seed: int = 0) -> str:
        facts = set()
        for a in actions:
            m = _FACT_RE.search(a.guidance) or _FACT_RE.search(a.evidence)
            if m:
                facts.add(int(m.group(1)))
            for anchor in a.anchors:
                mm = re.fullmatch(r"REQ-F(\d+)-001", anchor)
                if mm:
                    facts.add(int(mm.group(1)))
        out = sim_revise(self.world, sorted(facts), seed)
        self._log(spec_text, out)
        return out

    def phrase(self, fact, attempt: int = 0) -> str:
        from ..seeding import derive_seed
        u = make_rng(derive_seed(self.seed, "phrase", fact.fact_id, attempt)).random(2)
        if u[0] < self.fail_rate:
            raise RetriableError(f"simulated informalizer failure on {fact.fact_id}")
        q = fact.template_question()
        if attempt >= 1 and u[1] < self.flip_rate:
            q = fact.template_question(negate=True)
        self._log(fact.truth, q)
        return q


def spec_anchor_count(text: str) -> int:
    return len(set(ANCHOR_RE.findall(text)))
