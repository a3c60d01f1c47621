"""Judge probes against a spec, compare answers, assign verdicts and actions."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .model import (Action, ActionKind, Category, Confidence, JudgeAnswer, Probe,
                    TransitionContingency, Verdict, anchor_spans)
from .providers.base import ProviderError, RetriableError, with_retries
from .providers.template import CONTRADICTORY, EQUIVALENT, LABELS, UNRELATED


@dataclass(frozen=True)
class SpecDocument:
    text: str
    anchors: dict = field(default=None, compare=False)

    def __post_init__(self):
        if self.anchors is None:
            object.__setattr__(self, "anchors", anchor_spans(self.text))
        spans = sorted(self.anchors.values())
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 <= a1:
                raise ValueError(f"overlapping anchor spans {a0}-{a1} and {b0}-{b1}")

    @classmethod
    def from_file(cls, path) -> "SpecDocument":
        with open(path, encoding="utf-8") as fh:
            return cls(fh.read())


def judge(spec: SpecDocument, probe: Probe, provider, retries: int = 3,
          sleep: Callable[[float], None] = time.sleep) -> JudgeAnswer:
    """Answer one probe from the spec alone.

    Transient failures are retried; once retries run out, or when the output
    cannot be used, the probe is recorded as not addressed with a diagnostic.
    """
    try:
        ans = with_retries(lambda: provider.answer(spec.text, probe), retries, sleep=sleep)
    except RetriableError as exc:
        return JudgeAnswer.silent_answer(f"judge failed after {retries} attempts: {exc}")
    except (ValueError, KeyError, TypeError) as exc:
        return JudgeAnswer.silent_answer(f"unparseable judge output: {exc}")
    if not isinstance(ans, JudgeAnswer):
        return JudgeAnswer.silent_answer("judge returned a non-answer object")
    unknown = [a for a in ans.evidence if a not in spec.anchors]
    if unknown:
        diag = ans.diagnostics + tuple(f"unknown anchor {a}" for a in unknown)
        ans = JudgeAnswer(ans.answer, ans.evidence, ans.confidence, diag)
    return ans


def compare(truth: str, answer: str, provider, retries: int = 3,
            sleep: Callable[[float], None] = time.sleep) -> str:
    if answer is None:
        raise ValueError("cannot compare a silent answer")
    label = with_retries(lambda: provider.compare(truth, answer), retries, sleep=sleep)
    if label not in LABELS:
        raise ProviderError(f"comparator returned {label!r}")
    return label


def verdict(probe: Probe, judge_answer: JudgeAnswer, comparison: Optional[str]) -> Verdict:
    if judge_answer.silent:
        if comparison is not None:
            raise ValueError("a silent answer takes no comparison")
        return Verdict.GAP
    if comparison not in LABELS:
        raise ValueError(f"comparison required for a non-silent answer, got {comparison!r}")
    return Verdict.AGREE if comparison == EQUIVALENT else Verdict.CONTRADICT


def classify_action(probe: Probe, v: Verdict, judge_answer: JudgeAnswer) -> Optional[Action]:
    v = Verdict(v)
    if v is Verdict.AGREE:
        return None
    anchors = tuple(judge_answer.evidence)
    evidence = judge_answer.answer or ""
    if v is Verdict.GAP:
        kind = ActionKind.ADD
        guidance = (f"The spec does not say what happens for: {probe.question} "
                    f"The program's behaviour is: {probe.truth}")
    elif probe.category is Category.NEGATIVE:
        kind = ActionKind.REMOVE
        guidance = (f"The spec claims behaviour the program does not have. Question: "
                    f"{probe.question} Observed: {probe.truth}")
    else:
        kind = ActionKind.FIX
        guidance = (f"The spec describes this incorrectly. Question: {probe.question} "
                    f"Observed: {probe.truth}")
    return Action(kind, anchors, guidance, evidence, probe.id)


@dataclass
class JudgedProbe:
    probe: Probe
    answer: JudgeAnswer
    comparison: Optional[str]
    verdict: Verdict

    def to_dict(self) -> dict:
        return {"id": self.probe.id, "answer": self.answer.to_dict(),
                "comparison": self.comparison, "verdict": self.verdict.value}


def judge_one(spec: SpecDocument, probe: Probe, judge_provider, comparator,
              sleep=time.sleep) -> JudgedProbe:
    ans = judge(spec, probe, judge_provider, sleep=sleep)
    cmp_label = None
    if not ans.silent:
        cmp_label = compare(probe.truth, ans.answer, comparator, sleep=sleep)
    return JudgedProbe(probe, ans, cmp_label, verdict(probe, ans, cmp_label))


def judge_all(spec: SpecDocument, probes: Sequence[Probe], judge_provider, comparator,
              workers: int = 1, sleep=time.sleep) -> list[JudgedProbe]:
    """Judge a probe set; results are ordered by probe id whatever the completion order."""
    fn = lambda p: judge_one(spec, p, judge_provider, comparator, sleep)
    if workers > 1 and len(probes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(fn, probes))
    else:
        out = [fn(p) for p in probes]
    return sorted(out, key=lambda j: j.probe.id)


def record_transition(prev: dict, curr: dict) -> TransitionContingency:
    """2x2 agree/non-agree transition counts between two verdict maps keyed by probe id."""
    if set(prev) != set(curr):
        missing = sorted(set(prev) ^ set(curr))[:5]
        raise ValueError(f"probe id sets differ, e.g. {missing}")
    held = regr = impr = stuck = 0
    for pid, a in prev.items():
        was = Verdict(a) is Verdict.AGREE
        now = Verdict(curr[pid]) is Verdict.AGREE
        if was and now:
            held += 1
        elif was:
            regr += 1
        elif now:
            impr += 1
        else:
            stuck += 1
    return TransitionContingency(held, regr, impr, stuck)
