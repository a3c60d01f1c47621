"""Graph facts, the observability filter, informalization and mixture sampling.

A fact is read off exactly one graph: guard/effect pairs from the control-flow
graph, value transformations reaching an output from the data-flow graph, and
successor events (calls, transfers, guarded outputs) from the dependence
graph. Its truth text is assembled from graph constants before any model sees
it; the informalizer only phrases the question.
"""
from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

from . import cobol
from .cobol import (Add, And, Arith, Call, ClassTest, Cond, CondName, Display, Evaluate, If,
                    Move, Not, Operand, Or, Perform, Rel, SetStmt, Stmt, StringStmt)
from .graphs import ENTRY, GraphBundle
from .model import Category, Channel, MixtureWeights, Probe
from .providers.base import ProviderError, RetriableError, with_retries
from .providers.template import EQUIVALENT, normalize
from .seeding import llm_seed, make_rng
from .stats import wilson_ci

FACT_KINDS = {Channel.CFG: "guard_effect", Channel.DFG: "def_use_transform",
              Channel.SDG: "event_successor"}
SYMBOLIC = (Channel.CFG, Channel.DFG, Channel.SDG)
MESSAGE_HINTS = ("MSG", "MESSAGE", "ERRMSG", "TEXT", "PROMPT")
_PREFIX = re.compile(r"^(?:LS|WS|LK|CA|CDEMO|W|L)-")
_FIGURATIVE_TEXT = {"SPACE": "blank", "SPACES": "blank", "LOW-VALUE": "empty",
                    "LOW-VALUES": "empty", "HIGH-VALUE": "maximal", "HIGH-VALUES": "maximal",
                    "ZERO": "0", "ZEROS": "0", "ZEROES": "0", "NULL": "null", "NULLS": "null"}
_OP_TEXT = {">": "is greater than", "<": "is less than", "=": "is", "<>": "is not",
            ">=": "is at least", "<=": "is at most"}


# ------------------------------------------------------------------ wording

def humanize(name: str) -> str:
    """Business-facing rendering of a data name: prefix dropped, lower case."""
    return _PREFIX.sub("", name).lower().replace("-", " ")


def operand_text(op) -> str:
    if isinstance(op, Arith):
        return " ".join(operand_text(x) if isinstance(x, Operand) else x for x in op.items)
    if op.is_literal:
        lit = op.literal
        if lit.upper() in _FIGURATIVE_TEXT:
            return _FIGURATIVE_TEXT[lit.upper()]
        if lit[:1] in "'\"":
            return "'" + op.literal_value() + "'"
        return lit
    return humanize(op.name)


def cond_text(c: Cond) -> str:
    if isinstance(c, Rel):
        return f"{operand_text(c.left)} {_OP_TEXT[c.op]} {operand_text(c.right)}"
    if isinstance(c, ClassTest):
        return f"{operand_text(c.subject)} is {'not ' if c.negated else ''}{c.cls.lower()}"
    if isinstance(c, CondName):
        if c.parent and c.values:
            vals = " or ".join(operand_text(cobol.lit(v)) for v in c.values)
            return f"{humanize(c.parent)} is {vals}"
        return humanize(c.name)
    if isinstance(c, Not):
        return f"not ({cond_text(c.inner)})"
    if isinstance(c, And):
        return " and ".join(cond_text(x) for x in c.items)
    if isinstance(c, Or):
        return " or ".join(cond_text(x) for x in c.items)
    return str(c)


# ------------------------------------------------------------------- facts

@dataclass(frozen=True)
class GraphFact:
    fact_id: str
    channel: Channel
    fact_kind: str
    category: Category
    truth: str
    program: str
    subject: str  # condition / sink / event the question is about
    payload: tuple = ()  # structural ids and constants, hashable

    def __post_init__(self):
        object.__setattr__(self, "channel", Channel(self.channel))
        object.__setattr__(self, "category", Category(self.category))
        if FACT_KINDS.get(self.channel) != self.fact_kind:
            raise ValueError(f"channel {self.channel.value} cannot carry {self.fact_kind} facts")

    @property
    def key(self) -> tuple:
        return (self.fact_kind, self.payload)

    def template_question(self, negate: bool = False) -> str:
        if self.fact_kind == "guard_effect":
            if negate:
                return f"When it is not the case that {self.subject}, what happens?"
            return f"When {self.subject}, what happens?"
        if self.fact_kind == "def_use_transform":
            if negate:
                return f"What value does the {self.subject} not take?"
            return f"What value does the {self.subject} take?"
        if negate:
            return f"What does not happen after {self.subject}?"
        return f"What happens after {self.subject}?"

    def describe(self) -> str:
        return (f"kind: {self.fact_kind}\nabout: {self.subject}\n"
                f"observed behaviour: {self.truth}")

    def to_dict(self) -> dict:
        return {"fact_id": self.fact_id, "channel": self.channel.value, "fact_kind": self.fact_kind,
                "category": self.category.value, "truth": self.truth, "program": self.program,
                "subject": self.subject, "payload": _jsonable(self.payload)}


def _jsonable(v):
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    return v


class _Observability:
    """Which data items and statements count as externally observable."""

    def __init__(self, bundle: GraphBundle):
        prog = bundle.program
        self.prog = prog
        self.linkage = {d.name for d in prog.data_items if d.storage == "linkage"}
        # children of linkage groups are linkage too
        changed = True
        while changed:
            changed = False
            for d in prog.data_items:
                if d.parent in self.linkage and d.name not in self.linkage:
                    self.linkage.add(d.name)
                    changed = True

    def item(self, name: Optional[str]) -> bool:
        if not name:
            return False
        if name in self.linkage:
            return True
        return any(h in name for h in MESSAGE_HINTS) or re.search(r"\w+O$", name) is not None \
            and self.prog.item(name) is None

    def is_message(self, name: str) -> bool:
        return any(h in name for h in MESSAGE_HINTS)

    def output_stmt(self, st: Stmt) -> bool:
        return isinstance(st, (Display, Call))


class FactExtractor:
    def __init__(self, bundle: GraphBundle):
        self.b = bundle
        self.prog = bundle.program
        self.obs = _Observability(bundle)
        self.node_of = {id(st): nid for nid, st in bundle.acfg.stmts.items()}
        self.uses_from = {}
        for e in bundle.dfg.edges:
            self.uses_from.setdefault(e.def_node, []).append(e)

    # values -------------------------------------------------------------
    def values(self, node: str, var: str, depth: int = 0, seen=frozenset()) -> list[str]:
        """Possible values of ``var`` on entry to ``node`` by backward substitution."""
        if depth > 12 or (node, var) in seen:
            return [f"the incoming {humanize(var)}"]
        seen = seen | {(node, var)}
        out: list[str] = []
        for d in self.b.dfg.defs_reaching(node, var):
            if d == ENTRY:
                out.append(f"the incoming {humanize(var)}")
                continue
            out += self.def_values(d, var, depth, seen)
        return _dedup(out) or [f"the incoming {humanize(var)}"]

    def def_values(self, d: str, var: str, depth: int, seen) -> list[str]:
        st = self.b.acfg.stmts.get(d)
        if isinstance(st, Move):
            if st.source.is_literal:
                return [operand_text(st.source)]
            return self.values(d, st.source.name, depth + 1, seen)
        if isinstance(st, Add) and not st.giving and len(st.addends) == 1 and st.addends[0].is_literal:
            k = st.addends[0].literal
            out = []
            for v in self.values(d, var, depth + 1, seen):
                out.append(_num_add(v, k))
            return out
        if isinstance(st, StringStmt):
            return [self.string_value(st)]
        return [f"a value computed by the program"]

    def string_value(self, st: StringStmt) -> str:
        parts = []
        for src, delim in st.parts:
            if src.is_literal:
                parts.append(src.literal_value())
            else:
                parts.append(f"<{humanize(src.name)}>")
        return "'" + "".join(parts).strip() + "'"

    # effects ------------------------------------------------------------
    def effects(self, block: Sequence[Stmt], visited=frozenset()) -> list[str]:
        out: list[str] = []
        for st in block:
            nid = self.node_of.get(id(st))
            if isinstance(st, If):
                inner_t = self.effects(st.then, visited)
                inner_f = self.effects(st.orelse, visited)
                if inner_t:
                    out.append(f"when {cond_text(st.cond)}, " + " and ".join(inner_t))
                if inner_f:
                    out.append(f"when not ({cond_text(st.cond)}), " + " and ".join(inner_f))
            elif isinstance(st, Evaluate):
                for arm in st.arms:
                    inner = self.effects(arm.body, visited)
                    if not inner:
                        continue
                    c = st.arm_condition(arm) if not arm.other else None
                    lead = f"when {cond_text(c)}, " if c is not None else "otherwise "
                    out.append(lead + " and ".join(inner))
            elif isinstance(st, Perform):
                if st.body is not None:
                    out += self.effects(st.body, visited)
                else:
                    for pi in self.prog.resolve_range(st.target, st.thru):
                        if pi in visited:
                            continue
                        out += self.effects(self.prog.paragraphs[pi].statements, visited | {pi})
            else:
                out += self.direct_effects(st, nid)
        return _dedup(out)

    def direct_effects(self, st: Stmt, nid: Optional[str]) -> list[str]:
        out = []
        if isinstance(st, Move):
            for t in st.targets:
                if self.obs.item(t.name):
                    out.append(self.write_text(t.name, [operand_text(st.source)]))
            if not out and nid and st.source.is_literal:
                out += self.forwarded(nid, st)
        elif isinstance(st, Add):
            for t in (st.giving or st.to):
                if self.obs.item(t.name):
                    amount = " + ".join(operand_text(a) for a in st.addends)
                    out.append(f"the {humanize(t.name)} is increased by {amount}")
        elif isinstance(st, StringStmt):
            if self.obs.item(st.into.name):
                out.append(self.write_text(st.into.name, [self.string_value(st)]))
        elif isinstance(st, Display):
            shown = ", ".join(operand_text(o) for o in st.operands)
            out.append(f"the program displays {shown}")
        elif isinstance(st, Call):
            out.append(self.call_text(st, nid))
        return out

    def forwarded(self, nid: str, st: Move) -> list[str]:
        """A constant written to an internal item, followed to the observable
        item it is copied into."""
        out = []
        for e in self.uses_from.get(nid, []):
            use = self.b.acfg.stmts.get(e.use_node)
            if isinstance(use, Move) and not use.source.is_literal and use.source.name == e.variable:
                for t in use.targets:
                    if self.obs.item(t.name):
                        out.append(self.write_text(t.name, [operand_text(st.source)]))
        return out

    def write_text(self, name: str, values: list[str]) -> str:
        if self.obs.is_message(name) and all(v.startswith("'") for v in values):
            return f"the message {_or_list(values)} is shown"
        return f"the {humanize(name)} is {_or_list(values)}"

    def call_text(self, st: Call, nid: Optional[str]) -> str:
        edge = None
        if nid:
            edge = next((e for e in self.b.sdg.edges if e.src == nid and e.kind in ("call", "transfer")),
                        None)
        args = [humanize(o.name) for _, o in st.arguments() if o.name]
        if st.transfer:
            return self.transfer_text(st, edge)
        target = st.callee.literal_value() if st.callee.is_literal else humanize(st.callee.name)
        with_args = f" with the {_and_list(args)}" if args else ""
        return f"{target.strip()} is invoked{with_args}"

    def transfer_text(self, st: Call, edge) -> str:
        if st.callee.is_literal:
            return f"control passes to {st.callee.literal_value().strip()}"
        targets = list(edge.attr("targets", ())) if edge else []
        exposed = edge.attr("upward_exposed", True) if edge else True
        var = humanize(st.callee.name)
        if exposed and targets:
            return (f"control passes to the {var} recorded in the session context, "
                    f"defaulting to {_or_list(targets)} when none is recorded")
        if targets:
            return f"control passes to {_or_list(targets)}"
        return f"control passes to the {var} recorded in the session context"

    # channels -----------------------------------------------------------
    def cfg_facts(self) -> list[GraphFact]:
        facts = []
        for nid, st in sorted(self.b.acfg.stmts.items(), key=lambda kv: _node_key(kv[0])):
            arms = []
            if isinstance(st, If):
                arms = [("true_branch", st.cond, st.then), ("false_branch", Not(st.cond), st.orelse)]
            elif isinstance(st, Evaluate):
                prev = []
                for i, arm in enumerate(st.when_arms):
                    c = st.arm_condition(arm)
                    arms.append((f"when_arm({i})", c, arm.body))
                    prev.append(c)
                if st.other_arm is not None:
                    arms.append(("other_arm", _none_of(prev), st.other_arm.body))
            for label, c, body in arms:
                eff = self.effects(body)
                if not eff or c is None:
                    continue
                subject = _none_of_text(c) if _is_none_of(c) else cond_text(c)
                truth = _sentence(eff)
                facts.append(GraphFact(f"{self.prog.program_id}:cfg:{nid}:{label}", Channel.CFG,
                                       "guard_effect", Category.GUARD, truth, self.prog.program_id,
                                       subject, (nid, label, truth)))
        return facts

    def dfg_facts(self) -> list[GraphFact]:
        facts = []
        incoming = {}
        for e in self.b.dfg.edges:
            incoming.setdefault((e.use_node, e.variable), []).append(e.def_node)
        for (use, var), defs in sorted(incoming.items(), key=lambda kv: (_node_key(kv[0][0]), kv[0][1])):
            st = self.b.acfg.stmts.get(use)
            node = self.b.acfg.nodes[use]
            sink = None
            if isinstance(st, (Display, Call)) and var in node.reads:
                sink = "output"
            elif any(self.obs.item(w) for w in node.writes) and var in node.reads:
                sink = "write"
            if sink is None:
                continue
            written = sorted(w for w in node.writes if self.obs.item(w))
            if sink == "write":
                values = self.def_values(use, written[0], 0, frozenset())
            else:
                values = self.values(use, var)
            chain = tuple(sorted(self._chain(use, var)))
            transform = any(isinstance(self.b.acfg.stmts.get(d), (Add, StringStmt)) for d in chain)
            category = Category.COMPUTATION if transform else Category.DATA
            if sink == "output" and isinstance(st, Call):
                if not st.callee.is_literal and st.callee.name == var:
                    subject = "program that control passes to"
                else:
                    subject = f"{humanize(var)} handed to {self.call_target(st)}"
            elif sink == "output":
                subject = f"{humanize(var)} that is displayed"
            else:
                if written[0] == var:
                    subject = f"updated {humanize(var)}"
                else:
                    subject = f"{humanize(written[0])} derived from the {humanize(var)}"
            truth = f"the {subject} is {_or_list(values)}"
            facts.append(GraphFact(f"{self.prog.program_id}:dfg:{use}:{var}", Channel.DFG,
                                   "def_use_transform", category, _cap(truth) + ".",
                                   self.prog.program_id, subject, (use, var, chain)))
        return facts

    def call_target(self, st: Call) -> str:
        if st.callee.is_literal:
            return st.callee.literal_value().strip()
        return f"the program named by the {humanize(st.callee.name)}"

    def _chain(self, use: str, var: str) -> set[str]:
        out, todo, seen = set(), [(use, var)], set()
        while todo:
            n, v = todo.pop()
            if (n, v) in seen:
                continue
            seen.add((n, v))
            for d in self.b.dfg.defs_reaching(n, v):
                if d == ENTRY:
                    continue
                out.add(d)
                for r in self.b.acfg.nodes[d].reads:
                    todo.append((d, r))
        return out

    def sdg_facts(self) -> list[GraphFact]:
        facts = []
        for e in self.b.sdg.edges:
            st_src = self.b.acfg.stmts.get(e.src)
            if e.kind in ("call", "transfer"):
                payload = [p for p in e.payload if p != e.attr("callee_variable")]
                if payload:
                    event = f"the {_and_list([humanize(p) for p in payload])} is computed"
                else:
                    event = f"the {humanize(e.attr('paragraph') or 'step')} step completes" \
                        if False else "this processing step completes"
                if e.kind == "transfer":
                    truth = self.transfer_text(st_src, e)
                    event = self._transfer_event(e) or event
                    category = Category.FLOW
                else:
                    truth = self.call_text(st_src, e.src)
                    category = Category.DEPENDENCY
                facts.append(GraphFact(f"{self.prog.program_id}:sdg:{e.src}->{e.dst}", Channel.SDG,
                                       "event_successor", category, _cap(truth) + ".",
                                       self.prog.program_id, event,
                                       (e.src, e.dst, e.kind, tuple(e.payload))))
            elif e.kind == "control_dep":
                dst = self.b.acfg.stmts.get(e.dst)
                if dst is None or isinstance(dst, (If, Evaluate)):
                    continue
                eff = self.direct_effects(dst, e.dst)
                if not eff:
                    continue
                decision = self.b.acfg.stmts[e.src]
                c = _arm_condition(decision, e.label)
                if c is None:
                    continue
                subject = f"the check that {_none_of_text(c) if _is_none_of(c) else cond_text(c)} succeeds"
                facts.append(GraphFact(f"{self.prog.program_id}:sdg:{e.src}->{e.dst}:{e.label}",
                                       Channel.SDG, "event_successor", Category.FLOW,
                                       _sentence(eff), self.prog.program_id, subject,
                                       (e.src, e.dst, "control_dep", e.label)))
        return facts

    def _transfer_event(self, e) -> Optional[str]:
        return "the user asks to leave this screen" if e.attr("upward_exposed") else None


def _node_key(nid: str):
    return [int(x) if x.isdigit() else x for x in re.split(r"(\d+)", nid)]


def _arm_condition(st, label: str) -> Optional[Cond]:
    if isinstance(st, If):
        return st.cond if label == "true_branch" else Not(st.cond)
    if isinstance(st, Evaluate):
        m = re.fullmatch(r"when_arm\((\d+)\)", label)
        if m:
            return st.arm_condition(st.when_arms[int(m.group(1))])
        if label == "other_arm":
            return _none_of([st.arm_condition(a) for a in st.when_arms])
    return None


class _NoneOf(Not):
    pass


def _none_of(conds):
    conds = [c for c in conds if c is not None]
    if not conds:
        return None
    return _NoneOf(conds[0] if len(conds) == 1 else Or(tuple(conds)))


def _is_none_of(c) -> bool:
    return isinstance(c, _NoneOf)


def _none_of_text(c) -> str:
    inner = c.inner.items if isinstance(c.inner, Or) else (c.inner,)
    return "none of the earlier cases applies (" + "; ".join(cond_text(x) for x in inner) + ")"


def _dedup(items):
    return list(dict.fromkeys(items))


def _or_list(vals) -> str:
    vals = _dedup(vals)
    if len(vals) == 1:
        return vals[0]
    return "one of " + ", ".join(vals[:-1]) + " or " + vals[-1]


def _and_list(vals) -> str:
    vals = _dedup(vals)
    if len(vals) <= 1:
        return "".join(vals)
    return ", ".join(vals[:-1]) + " and " + vals[-1]


def _num_add(v: str, k: str) -> str:
    try:
        a, b = float(v), float(k)
    except ValueError:
        return f"{v} plus {k}"
    s = a + b
    return str(int(s)) if s == int(s) else str(s)


def _cap(s: str) -> str:
    return s[:1].upper() + s[1:]


def _sentence(effects: list[str]) -> str:
    return _cap("; ".join(effects)) + "."


def enumerate_facts(bundle: GraphBundle, channel: Union[Channel, str]) -> list[GraphFact]:
    ch = Channel(channel)
    ex = FactExtractor(bundle)
    facts = {Channel.CFG: ex.cfg_facts, Channel.DFG: ex.dfg_facts, Channel.SDG: ex.sdg_facts}[ch]()
    return sorted(facts, key=lambda f: f.fact_id)


# ----------------------------------------------------------- observability

@dataclass(frozen=True)
class ObservabilityVerdict:
    accepted: bool
    rejected_terms: tuple[str, ...] = ()

    def __post_init__(self):
        if self.accepted != (not self.rejected_terms):
            raise ValueError("accepted must hold exactly when no term was hit")


# label -> extra patterns that count as that term
_TERM_PATTERNS = {
    "status code": [r"status\s+codes?", r"status\s+\d+", r"file\s+status", r"return\s+codes?"],
    "record layout": [r"record\s+layouts?"],
    "copybook": [r"copy\s*books?"],
}


def load_lexicon(path: Optional[Union[str, Path]] = None) -> list[str]:
    from .providers.base import load_config_file
    if path is None:
        text = resources.files("specprobe").joinpath("data").joinpath("banned_lexicon.toml").read_text()
        try:
            import tomllib
        except ModuleNotFoundError:  # pragma: no cover
            import tomli as tomllib
        return list(tomllib.loads(text)["terms"])
    return list(load_config_file(path)["terms"])


def _term_regex(term: str) -> str:
    words = [re.escape(w) for w in term.split()]
    return r"\s+".join(words)


class ObservabilityFilter:
    """Rejects truths that mention platform internals or paragraph names."""

    def __init__(self, terms: Optional[Sequence[str]] = None, paragraph_names: Sequence[str] = ()):
        self.terms = list(terms) if terms is not None else load_lexicon()
        self.paragraph_names = sorted(set(paragraph_names))
        self._patterns = []
        for t in self.terms:
            alts = [_term_regex(t)] + _TERM_PATTERNS.get(t.lower(), [])
            self._patterns.append((t, re.compile(rf"(?<![\w-])(?:{'|'.join(alts)})(?![\w-])",
                                                 re.IGNORECASE)))
        for p in self.paragraph_names:
            self._patterns.append((p, re.compile(rf"(?<![\w-]){re.escape(p)}(?![\w-])",
                                                 re.IGNORECASE)))

    @classmethod
    def for_program(cls, program: cobol.Program, terms=None) -> "ObservabilityFilter":
        names = [p.name for p in program.paragraphs if not p.implicit] + list(program.sections)
        return cls(terms, names)

    def check_text(self, text: str) -> ObservabilityVerdict:
        hits = tuple(dict.fromkeys(t for t, rx in self._patterns if rx.search(text)))
        return ObservabilityVerdict(not hits, hits)

    def __call__(self, fact: GraphFact) -> ObservabilityVerdict:
        return self.check_text(fact.truth)


def observability_filter(fact: GraphFact, lexicon: Optional[Sequence[str]] = None,
                         paragraph_names: Sequence[str] = ()) -> ObservabilityVerdict:
    return ObservabilityFilter(lexicon, paragraph_names)(fact)


# ---------------------------------------------------------- informalization

def informalize(fact: GraphFact, provider=None, attempt: int = 0, retries: int = 3,
                sleep=None) -> Probe:
    """Phrase a fact as a probe. Truth and category are copied from the fact."""
    question = None
    if provider is not None:
        kwargs = {"sleep": sleep} if sleep is not None else {}
        try:
            question = with_retries(lambda: provider.phrase(fact, attempt), retries, **kwargs)
        except (ValueError, TypeError, KeyError):
            question = None  # malformed output: fall back to the template
        if question is not None and (not isinstance(question, str) or not question.strip()):
            question = None
    if question is None:
        question = fact.template_question()
    return Probe(fact.fact_id, question.strip(), fact.truth, fact.category, fact.channel,
                 fact.program, {"fact_kind": fact.fact_kind})


def emit_probes(facts: Sequence[GraphFact], filt: ObservabilityFilter, provider=None,
                workers: int = 4) -> tuple[list[Probe], list[tuple[GraphFact, ObservabilityVerdict]]]:
    """Filter then informalize; the filter is the only way to emission."""
    accepted, rejected = [], []
    for f in facts:
        v = filt(f)
        (accepted if v.accepted else rejected).append((f, v))
    ordered = sorted((f for f, _ in accepted), key=lambda f: f.fact_id)
    if workers > 1 and provider is not None and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            probes = list(pool.map(lambda f: informalize(f, provider), ordered))
    else:
        probes = [informalize(f, provider) for f in ordered]
    return probes, rejected


def build_pools(bundles: Sequence[GraphBundle], provider=None, terms=None,
                workers: int = 4) -> dict[Channel, list[Probe]]:
    """Per-channel probe pools over one or more programs."""
    pools: dict[Channel, list[Probe]] = {c: [] for c in SYMBOLIC}
    for b in bundles:
        filt = ObservabilityFilter.for_program(b.program, terms)
        for ch in SYMBOLIC:
            probes, _ = emit_probes(enumerate_facts(b, ch), filt, provider, workers)
            pools[ch].extend(probes)
    return pools


# ----------------------------------------------------------------- sampling

def sample_mixture(pools: dict, weights: MixtureWeights, n: int, seed: int, generator=None,
                   spec_text: Optional[str] = None, prefix: str = "p",
                   purpose: str = "train") -> list[Probe]:
    """Two-level draw: llm with probability alpha, else a channel by beta, then
    a uniform pick with replacement inside that channel's pool."""
    pools = {Channel(k): list(v) for k, v in pools.items()}
    if weights.alpha < 1.0:
        live = [c for c, w in zip(SYMBOLIC, weights.beta) if w > 0 and pools.get(c)]
        if not live:
            raise ValueError("no observable symbolic facts")
    rng = make_rng(seed)
    is_llm = rng.random(n) < weights.alpha
    channel_idx = rng.choice(3, size=n, p=list(weights.beta))
    picks = rng.random(n)
    n_llm = int(is_llm.sum())
    llm_probes: list[Probe] = []
    if n_llm:
        if generator is None:
            raise ProviderError("mixture draws llm probes but no generator is bound")
        llm_probes = list(generator.generate(n_llm, llm_seed(seed), spec_text, purpose))
        if len(llm_probes) < n_llm:
            raise ProviderError(f"generator returned {len(llm_probes)} of {n_llm} probes")
    out, li = [], 0
    for j in range(n):
        if is_llm[j]:
            src = llm_probes[li]
            li += 1
        else:
            ch = SYMBOLIC[int(channel_idx[j])]
            pool = pools.get(ch) or []
            if not pool:
                raise ValueError(f"channel {ch.value} has no observable facts")
            src = pool[min(int(picks[j] * len(pool)), len(pool) - 1)]
        meta = {**src.meta, "source_id": src.id, "draw": j}
        out.append(Probe(f"{prefix}-{j:05d}", src.question, src.truth, src.category, src.channel,
                         src.program, meta))
    return out


# ---------------------------------------------------------------- stability

@dataclass
class ChannelStability:
    facts_n: int
    successful_pairs: int
    exact_matches: int
    semantic_equivalent: int
    wilson_ci: tuple[float, float]

    @property
    def exact_match_rate(self) -> Optional[float]:
        return self.exact_matches / self.successful_pairs if self.successful_pairs else None

    @property
    def semantic_equiv_rate(self) -> Optional[float]:
        return self.semantic_equivalent / self.successful_pairs if self.successful_pairs else None

    def to_dict(self) -> dict:
        return {"facts_n": self.facts_n, "successful_pairs": self.successful_pairs,
                "exact_match_rate": self.exact_match_rate,
                "semantic_equiv_rate": self.semantic_equiv_rate,
                "wilson_ci": list(self.wilson_ci)}


@dataclass
class StabilityReport:
    channels: dict[str, ChannelStability]
    pooled: ChannelStability
    confidence: float = 0.95

    @property
    def epsilon(self) -> float:
        return 1.0 - self.pooled.wilson_ci[0]

    @classmethod
    def from_counts(cls, counts: dict, confidence: float = 0.95) -> "StabilityReport":
        """counts: channel -> (facts_n, successful_pairs, exact_matches, semantic_equivalent)."""
        chans = {}
        for ch, (n, ok, exact, sem) in counts.items():
            ci = wilson_ci(sem, ok, confidence) if ok else (0.0, 1.0)
            chans[ch] = ChannelStability(n, ok, exact, sem, ci)
        tot = [sum(c[i] for c in counts.values()) for i in range(4)]
        ci = wilson_ci(tot[3], tot[1], confidence) if tot[1] else (0.0, 1.0)
        return cls(chans, ChannelStability(*tot, ci), confidence)

    def to_dict(self) -> dict:
        return {"channels": {k: v.to_dict() for k, v in self.channels.items()},
                "pooled": self.pooled.to_dict(), "epsilon": self.epsilon,
                "confidence": self.confidence}


def stability_harness(facts: Sequence[GraphFact], provider, comparator, confidence: float = 0.95,
                      retries: int = 3, sleep=lambda s: None) -> StabilityReport:
    """Phrase each fact twice, independently, and measure agreement of the pair."""
    counts: dict[str, list[int]] = {}
    for f in facts:
        row = counts.setdefault(f.channel.value, [0, 0, 0, 0])
        row[0] += 1
        try:
            q1 = with_retries(lambda: provider.phrase(f, 0), retries, sleep=sleep)
            q2 = with_retries(lambda: provider.phrase(f, 1), retries, sleep=sleep)
        except (RetriableError, ProviderError, ValueError):
            continue
        row[1] += 1
        row[2] += int(normalize(q1) == normalize(q2))
        row[3] += int(comparator.compare(q1, q2) == EQUIVALENT)
    return StabilityReport.from_counts({k: tuple(v) for k, v in counts.items()}, confidence)
