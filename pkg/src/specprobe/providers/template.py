"""Deterministic, model-free backends.

The comparator folds case, punctuation, percent signs and articles, then
decides with constant, quoted-literal, negation and token-containment rules.
The judge retrieves the best-matching requirement by keyword overlap. The
reviser applies actions as line edits keyed by anchor.
"""
from __future__ import annotations

import re
from typing import Optional

from ..model import (ActionKind, Confidence, JudgeAnswer, Probe, anchor_spans,
                     extract_anchors)
from .base import ProviderError, UsageLedger, synthetic_tokens

EQUIVALENT, CONTRADICTORY, UNRELATED = "equivalent", "contradictory", "unrelated"
LABELS = (EQUIVALENT, CONTRADICTORY, UNRELATED)

STOPWORDS = {
    "a", "an", "the", "of", "to", "in", "on", "at", "for", "by", "with", "is", "are", "be",
    "was", "were", "it", "its", "and", "or", "that", "this", "as", "from", "then", "than",
    "what", "which", "when", "where", "who", "how", "does", "do", "did", "system", "shall",
    "will", "should", "there", "their", "they", "if", "into", "any", "after", "before",
    "happens", "happen", "value", "user", "one", "so", "has", "have", "can",
}
NEGATIONS = {"not", "no", "never", "none", "opposite", "otherwise", "unless", "nor", "without"}
SYNONYMS = {"exceeds": "greater", "exceed": "greater", "over": "greater", "above": "greater",
            "more": "greater", "below": "less", "under": "less", "fewer": "less",
            "percentage": "percent", "pct": "percent", "applies": "apply", "applied": "apply",
            "discounts": "discount", "displays": "display", "displayed": "display",
            "shown": "display", "shows": "display", "returns": "return", "returned": "return"}

_NUM = re.compile(r"\d+(?:\.\d+)?")
_QUOTED = re.compile(r"'([^']+)'|\"([^\"]+)\"|‘([^’]+)’|“([^”]+)”")


def normalize(text: str) -> str:
    t = text.lower().replace("%", " percent ")
    t = re.sub(r"(?<=\d)[,\s](?=\d{3}\b)", "", t)  # 1,000 / 1 000 -> 1000
    t = re.sub(r"[^a-z0-9.\s-]", " ", t)
    t = re.sub(r"(?<!\d)\.|\.(?!\d)", " ", t)
    words = [w for w in t.split() if w not in ("a", "an", "the")]
    return " ".join(words)


def _numbers(text: str) -> set[str]:
    out = set()
    for m in _NUM.findall(text.replace(",", "")):
        out.add(str(float(m)).rstrip("0").rstrip("."))
    return out


def _content(text: str) -> set[str]:
    words = normalize(text).replace("-", " ").split()
    return {SYNONYMS.get(w, w) for w in words if w not in STOPWORDS}


def _quoted(text: str) -> set[str]:
    return {normalize(next(g for g in m if g)) for m in _QUOTED.findall(text)}


def rule_compare(truth: str, answer: str) -> str:
    """Three-way equivalence label between a ground truth and an answer."""
    nt, na = normalize(truth), normalize(answer)
    if nt == na:
        return EQUIVALENT
    ct, ca = _content(truth), _content(answer)
    neg_t, neg_a = bool(ct & NEGATIONS), bool(ca & NEGATIONS)
    if neg_t != neg_a and (ct - NEGATIONS) & (ca - NEGATIONS):
        return CONTRADICTORY
    qt, qa = _quoted(truth), _quoted(answer)
    if qt:
        if all(q in na for q in qt):
            return EQUIVALENT
        if qa:
            return CONTRADICTORY
    nums_t, nums_a = _numbers(truth), _numbers(answer)
    if nums_t and nums_a:
        if nums_t != nums_a and not (nums_t <= nums_a):
            return CONTRADICTORY
    elif nums_t and not nums_a and ct & ca:
        return CONTRADICTORY
    if ct and ca and (ct <= ca or ca <= ct):
        return EQUIVALENT
    if ct & ca:
        overlap = len(ct & ca) / len(ct | ca)
        return EQUIVALENT if overlap >= 0.75 else CONTRADICTORY
    return UNRELATED


def shall_clause(text: str) -> str:
    """The operative part of a requirement sentence (what follows 'shall')."""
    m = re.search(r"\bshall\s+(.*)", text, re.IGNORECASE | re.DOTALL)
    out = m.group(1) if m else text
    return " ".join(out.split()).rstrip(".")


def keyword_answer(spec_text: str, question: str, min_overlap: int = 2) -> JudgeAnswer:
    """Answer from the requirement with the largest keyword overlap, or SILENT."""
    spans = anchor_spans(spec_text)
    if not spans:
        return JudgeAnswer.silent_answer()
    lines = spec_text.splitlines()
    q = _content(question) | _numbers(question)
    best = None
    for anchor, (lo, hi) in spans.items():
        body = " ".join(lines[lo - 1:hi]).replace(anchor, " ")
        words = _content(body) | _numbers(body)
        score = len(q & words)
        key = (score, -len(words), -lo)
        if best is None or key > best[0]:
            best = (key, anchor, body)
    (score, _, _), anchor, body = best
    if score < min(min_overlap, max(1, len(q))):
        return JudgeAnswer.silent_answer()
    return JudgeAnswer(shall_clause(body), (anchor,), Confidence.CONFIRMED)


def _next_anchor(existing: list[str], prefix: str = "REQ-ADD") -> str:
    n = 1
    while f"{prefix}-{n:03d}" in existing:
        n += 1
    return f"{prefix}-{n:03d}"


_GUIDANCE = re.compile(
    r"(?:for|Question):\s*(?P<q>.+?\?)\s*(?:The program's behaviour is|Observed):\s*(?P<t>.+)$",
    re.DOTALL)
_CONDITION = re.compile(r"^(?P<c>(?:when|if|after|once)\b.+?),\s*(?:what|which|how)\b.*\?$",
                        re.IGNORECASE | re.DOTALL)


def requirement_sentence(guidance: str) -> str:
    """A requirement sentence for an action.

    Guidance that names a question and the observed behaviour becomes
    "<condition>, the system shall ensure that <behaviour>"; anything else
    is used as written.
    """
    m = _GUIDANCE.search(guidance.strip())
    if not m:
        return guidance.strip()
    q, truth = " ".join(m.group("q").split()), " ".join(m.group("t").split()).rstrip(".")
    if len(truth) > 1 and truth[0].isupper() and truth[1].islower():
        truth = truth[0].lower() + truth[1:]
    c = _CONDITION.match(q)
    prefix = f"{c.group('c')}, the system" if c else f"Regarding \"{q}\", the system"
    return f"{prefix} shall ensure that {truth}."


def rule_revise(spec_text: str, actions) -> str:
    """Apply actions as anchor-keyed line edits.

    Fix rewrites the cited requirement, Remove deletes it, Add appends a new
    requirement after the cited one (or at the end of the document).
    """
    lines = spec_text.splitlines()
    trailing_nl = spec_text.endswith("\n")
    for act in actions:
        spans = anchor_spans("\n".join(lines))
        cited = [a for a in act.anchors if a in spans]
        sentence = requirement_sentence(act.guidance)
        if any(ln.split(" ", 1)[-1] == sentence for ln in lines):
            continue  # already stated
        if act.kind is ActionKind.FIX and cited:
            lo, hi = spans[cited[0]]
            lines[lo - 1:hi] = [f"{cited[0]} {sentence}"]
        elif act.kind is ActionKind.REMOVE and cited:
            lo, hi = spans[cited[0]]
            del lines[lo - 1:hi]
        else:
            anchor = _next_anchor(extract_anchors("\n".join(lines)))
            new = [f"{anchor} {sentence}"]
            if cited:
                hi = spans[cited[0]][1]
                lines[hi:hi] = [""] + new
            else:
                if lines and lines[-1].strip():
                    lines.append("")
                lines += new
    return "\n".join(lines) + ("\n" if trailing_nl or not spec_text else "")


class TemplateBackend:
    """All five roles, answered by rules instead of a model."""

    name = "template"

    def __init__(self, ledger: Optional[UsageLedger] = None, role: str = "", probe_pool=None):
        self.ledger = ledger
        self.role = role
        self.probe_pool = list(probe_pool or [])

    def _log(self, prompt: str, out: str):
        if self.ledger is not None:
            self.ledger.record(self.role or "template", synthetic_tokens(prompt),
                               synthetic_tokens(out))

    def phrase(self, fact, attempt: int = 0) -> str:
        q = fact.template_question()
        self._log(fact.truth, q)
        return q

    def generate(self, n: int, seed: int, spec_text: Optional[str] = None,
                 purpose: str = "train") -> list[Probe]:
        """Draw from a fixed probe pool, uniformly with replacement."""
        from ..seeding import make_rng
        if not self.probe_pool:
            raise ProviderError("template generator has no probe pool")
        rng = make_rng(seed)
        idx = rng.integers(0, len(self.probe_pool), n)
        out = []
        for j, i in enumerate(idx):
            p = self.probe_pool[int(i)]
            out.append(Probe(f"gen-{j:05d}", p.question, p.truth, p.category, "llm", p.program,
                             {**p.meta, "source": p.id}))
        return out

    def answer(self, spec_text: str, probe: Probe) -> JudgeAnswer:
        ans = keyword_answer(spec_text, probe.question)
        self._log(probe.question, ans.answer or "")
        return ans

    def compare(self, truth: str, answer: str) -> str:
        label = rule_compare(truth, answer)
        self._log(truth + answer, label)
        return label

    def revise(self, spec_text: str, actions, seed: int = 0) -> str:
        out = rule_revise(spec_text, actions)
        self._log(spec_text, out)
        return out
