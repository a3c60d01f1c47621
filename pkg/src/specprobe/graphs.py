"""Control-flow, data-flow and system-dependence graphs for a parsed Program.

PERFORM is modelled with explicit call/return edges into the performed
paragraph range instead of inlining, so every statement appears once and
paragraphs stay units in the dependence graph. Node ids are
``P<paragraph>.S<statement>`` with statements numbered in pre-order inside
their paragraph; structured statements get an extra ``.end`` join node.
"""
from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Optional

import networkx as nx

from . import cobol
from .cobol import Call, Evaluate, Goback, GoTo, If, Perform, Program, Stmt

ENTRY = "ENTRY"
EXIT = "EXIT"
NODE_KINDS = ("entry", "exit", "action", "decision", "terminator")
EDGE_KINDS = ("sequential", "true_branch", "false_branch", "when_arm", "other_arm",
              "fallthrough", "perform_call", "perform_return", "goto")
# successors an action node may have beyond its one "real" successor
PASSIVE_EDGES = ("fallthrough", "perform_return")


@dataclass
class AcfgNode:
    id: str
    kind: str
    label: str
    reads: frozenset = frozenset()
    writes: frozenset = frozenset()
    span: tuple[int, int] = (0, 0)
    paragraph: Optional[str] = None
    dead: bool = False

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "label": self.label,
                "reads": sorted(self.reads), "writes": sorted(self.writes),
                "span": list(self.span), "paragraph": self.paragraph, "dead": self.dead}


@dataclass(frozen=True)
class AcfgEdge:
    src: str
    dst: str
    kind: str
    index: Optional[int] = None
    flags: tuple[str, ...] = ()

    @property
    def sort_key(self):
        return (self.src, self.dst, self.kind, -1 if self.index is None else self.index, self.flags)

    @property
    def label(self) -> str:
        return f"{self.kind}({self.index})" if self.index is not None else self.kind

    def to_dict(self) -> dict:
        d = {"src": self.src, "dst": self.dst, "kind": self.kind}
        if self.index is not None:
            d["index"] = self.index
        if self.flags:
            d["flags"] = list(self.flags)
        return d


@dataclass
class Acfg:
    program_id: str
    nodes: dict[str, AcfgNode]
    edges: list[AcfgEdge]
    stmts: dict[str, Stmt] = field(default_factory=dict, repr=False)

    def sorted_nodes(self) -> list[AcfgNode]:
        return sorted(self.nodes.values(), key=lambda n: (n.span[0], n.span[1], n.id))

    def out_edges(self, node_id: str, flow_only: bool = False) -> list[AcfgEdge]:
        return [e for e in self.edges if e.src == node_id
                and not (flow_only and "unsound_return" in e.flags)]

    def successors(self, node_id: str, flow_only: bool = False) -> list[str]:
        return sorted({e.dst for e in self.out_edges(node_id, flow_only)})

    def flow_edges(self) -> list[AcfgEdge]:
        """Edges used by dataflow; returns that cannot actually happen are left out."""
        return [e for e in self.edges if "unsound_return" not in e.flags]

    def to_networkx(self, flow_only: bool = False) -> nx.MultiDiGraph:
        g = nx.MultiDiGraph()
        for n in self.sorted_nodes():
            g.add_node(n.id, kind=n.kind, label=n.label)
        for e in (self.flow_edges() if flow_only else self.edges):
            g.add_edge(e.src, e.dst, kind=e.kind, index=e.index)
        return g

    def to_dict(self) -> dict:
        return {"program_id": self.program_id,
                "nodes": [n.to_dict() for n in self.sorted_nodes()],
                "edges": [e.to_dict() for e in sorted(self.edges, key=lambda e: e.sort_key)]}


def check_acfg(acfg: Acfg) -> list[str]:
    """Structural invariant violations; empty when the graph is well formed."""
    problems = []
    ids = set(acfg.nodes)
    entries = [n for n in acfg.nodes.values() if n.kind == "entry"]
    exits = [n for n in acfg.nodes.values() if n.kind == "exit"]
    if len(entries) != 1 or len(exits) != 1:
        problems.append("graph must have exactly one entry and one exit")
    for e in acfg.edges:
        if e.src not in ids or e.dst not in ids:
            problems.append(f"dangling edge {e.src}->{e.dst}")
    for n in acfg.nodes.values():
        out = acfg.out_edges(n.id)
        if n.kind == "decision" and len(out) < 2:
            problems.append(f"decision {n.id} has {len(out)} successor(s)")
        if n.kind == "action":
            active = {e.dst for e in out if e.kind not in PASSIVE_EDGES}
            if len(active) > 1:
                problems.append(f"action {n.id} has {len(active)} non-fallthrough successors")
        arms = sorted(e.index for e in out if e.kind == "when_arm")
        if arms != list(range(len(arms))):
            problems.append(f"when_arm indices of {n.id} are not dense: {arms}")
    return problems


# ----------------------------------------------------------------- ACFG build

class _AcfgBuilder:
    def __init__(self, prog: Program):
        self.prog = prog
        self.nodes: dict[str, AcfgNode] = {}
        self.edges: dict[tuple, AcfgEdge] = {}
        self.stmts: dict[str, Stmt] = {}
        self.calls: list[tuple[str, list[int]]] = []   # (perform node, range)
        self.gotos: list[tuple[str, str]] = []         # (goto node, target)
        self.returns: list[tuple[tuple[int, ...], str]] = []  # (range, continuation)
        self.para_entry: list[str] = []
        self.para_exits: list[list[tuple]] = []
        self.para_last: list[str] = []

    def node(self, nid, kind, label, stmt=None, span=(0, 0), para=None):
        reads = frozenset(stmt.reads()) if stmt is not None else frozenset()
        writes = frozenset(stmt.writes()) if stmt is not None else frozenset()
        self.nodes[nid] = AcfgNode(nid, kind, label, reads, writes, span, para)
        if stmt is not None:
            self.stmts[nid] = stmt
        return nid

    def edge(self, src, dst, kind, index=None, flags=()):
        e = AcfgEdge(src, dst, kind, index, tuple(sorted(flags)))
        self.edges.setdefault((src, dst, kind, index), e)

    def connect(self, exit_, dst, as_kind=None):
        """Wire a dangling exit to ``dst``. Sequential exits take ``as_kind``."""
        if exit_[0] == "perform":
            self.returns.append((exit_[2], dst))
            return
        src, kind = exit_
        if kind == "sequential" and as_kind:
            kind = as_kind
        self.edge(src, dst, kind)

    # statements -------------------------------------------------------
    def block(self, stmts, pi, counter):
        entry, exits = None, []
        for s in stmts:
            e, x = self.stmt(s, pi, counter)
            if entry is None:
                entry = e
            else:
                for ex in exits:
                    self.connect(ex, e)
            exits = x
        return entry, exits

    def stmt(self, s: Stmt, pi: int, counter: list[int]):
        nid = f"P{pi}.S{counter[0]}"
        counter[0] += 1
        para = self.prog.paragraphs[pi].name
        label = s.render(0)[0].strip()
        span = s.span

        if isinstance(s, If):
            self.node(nid, "decision", label, s, span, para)
            join = f"{nid}.end"
            pending = []
            for block, kind in ((s.then, "true_branch"), (s.orelse, "false_branch")):
                entry, exits = self.block(block, pi, counter)
                if entry is None:
                    pending.append(("direct", nid, kind, None, ()))
                else:
                    self.edge(nid, entry, kind)
                    pending.extend(exits)
            return nid, self._join(join, "END-IF", span, para, pending)

        if isinstance(s, Evaluate):
            self.node(nid, "decision", label, s, span, para)
            join = f"{nid}.end"
            pending = []
            for i, arm in enumerate(s.when_arms):
                entry, exits = self.block(arm.body, pi, counter)
                if entry is None:
                    pending.append(("direct", nid, "when_arm", i, ()))
                else:
                    self.edge(nid, entry, "when_arm", i)
                    pending.extend(exits)
            other = s.other_arm
            if other is not None:
                entry, exits = self.block(other.body, pi, counter)
                if entry is None:
                    pending.append(("direct", nid, "other_arm", None, ()))
                else:
                    self.edge(nid, entry, "other_arm")
                    pending.extend(exits)
            else:
                pending.append(("direct", nid, "other_arm", None, ("implicit",)))
            return nid, self._join(join, "END-EVALUATE", span, para, pending)

        if isinstance(s, Perform):
            if s.body is not None:
                kind = "decision" if s.is_loop else "action"
                self.node(nid, kind, label, s, span, para)
                entry, exits = self.block(s.body, pi, counter)
                if not s.is_loop:
                    if entry is None:
                        return nid, [(nid, "sequential")]
                    self.edge(nid, entry, "sequential")
                    return nid, exits
                self.edge(nid, entry or nid, "false_branch")
                for ex in exits:
                    self.connect(ex, nid)
                return nid, [(nid, "true_branch")]
            rng = tuple(self.prog.resolve_range(s.target, s.thru))
            if s.is_loop:
                self.node(nid, "decision", label, s, span, para)
                self.calls.append((nid, list(rng)))
                self.returns.append((rng, nid))
                return nid, [(nid, "true_branch")]
            self.node(nid, "action", label, s, span, para)
            self.calls.append((nid, list(rng)))
            return nid, [("perform", nid, rng)]

        if isinstance(s, GoTo):
            self.node(nid, "action", label, s, span, para)
            self.gotos.append((nid, s.target))
            return nid, []

        if isinstance(s, Goback) or (isinstance(s, Call) and s.transfer):
            self.node(nid, "terminator", label, s, span, para)
            self.edge(nid, EXIT, "sequential")
            return nid, []

        self.node(nid, "action", label, s, span, para)
        return nid, [(nid, "sequential")]

    def _join(self, join, label, span, para, pending):
        """Join node for a structured statement; skipped if no arm reaches it."""
        if not pending:
            return []
        self.node(join, "terminator", label, None, (span[1], span[1]), para)
        for p in pending:
            if p[0] == "direct":
                self.edge(p[1], join, p[2], p[3], p[4])
            else:
                self.connect(p, join)
        return [(join, "sequential")]

    # program ----------------------------------------------------------
    def build(self) -> Acfg:
        prog = self.prog
        self.node(ENTRY, "entry", "ENTRY", span=(0, 0))
        self.node(EXIT, "exit", "EXIT", span=(prog.n_lines + 1, prog.n_lines + 1))
        for pi, para in enumerate(prog.paragraphs):
            counter = [0]
            entry, exits = self.block(para.statements, pi, counter)
            if entry is None:
                entry = self.node(f"P{pi}", "action", f"{para.name}.", None, para.span, para.name)
                exits = [(entry, "sequential")]
                last = entry
            else:
                last = f"P{pi}.S{self._top_index(para, len(para.statements) - 1)}"
            self.para_entry.append(entry)
            self.para_exits.append(exits)
            self.para_last.append(last)

        if prog.paragraphs:
            self.edge(ENTRY, self.para_entry[0], "sequential")
        else:
            self.edge(ENTRY, EXIT, "sequential")
        for pi in range(len(prog.paragraphs)):
            nxt = self.para_entry[pi + 1] if pi + 1 < len(prog.paragraphs) else EXIT
            for ex in self.para_exits[pi]:
                self.connect(ex, nxt, "fallthrough")

        for nid, rng in self.calls:
            self.edge(nid, self.para_entry[rng[0]], "perform_call")
        for nid, target in self.gotos:
            self.edge(nid, self.para_entry[prog.resolve_range(target)[0]], "goto")

        seen = set()
        while self.returns:
            rng, dst = self.returns.pop(0)
            if (rng, dst) in seen:
                continue
            seen.add((rng, dst))
            end = rng[-1]
            if not self.para_exits[end]:
                self.edge(self.para_last[end], dst, "perform_return", flags=("unsound_return",))
            for ex in self.para_exits[end]:
                self.connect(ex, dst, "perform_return")

        acfg = Acfg(prog.program_id, self.nodes, sorted(self.edges.values(), key=lambda e: e.sort_key),
                    self.stmts)
        _mark_dead(acfg)
        return acfg

    def _top_index(self, para, k):
        """Pre-order id of the k-th top-level statement of a paragraph."""
        idx = 0
        for s in para.statements[:k]:
            idx += sum(1 for _ in cobol.walk([s]))
        return idx


def _mark_dead(acfg: Acfg):
    succ = defaultdict(set)
    for e in acfg.edges:
        succ[e.src].add(e.dst)
    seen = {ENTRY}
    todo = deque([ENTRY])
    while todo:
        for nxt in succ[todo.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    for n in acfg.nodes.values():
        n.dead = n.id not in seen


def build_acfg(program: Program) -> Acfg:
    return _AcfgBuilder(program).build()


# ------------------------------------------------------------------ DFG build

@dataclass(frozen=True)
class DfgEdge:
    def_node: str
    use_node: str
    variable: str

    def to_dict(self) -> dict:
        return {"def_node": self.def_node, "use_node": self.use_node, "variable": self.variable}


@dataclass
class Dfg:
    program_id: str
    edges: list[DfgEdge]
    reaching: dict[str, frozenset] = field(default_factory=dict, repr=False)

    def defs_reaching(self, node_id: str, variable: str) -> list[str]:
        """Definitions of ``variable`` live on entry to ``node_id`` (ENTRY = upward exposed)."""
        return sorted(d for d, v in self.reaching.get(node_id, ()) if v == variable)

    def to_dict(self) -> dict:
        return {"program_id": self.program_id,
                "edges": [e.to_dict() for e in self.edges]}


def build_dfg(program: Program, acfg: Acfg) -> Dfg:
    """Reaching definitions over the ACFG, one edge per (def, use, variable)."""
    variables = set()
    for n in acfg.nodes.values():
        variables |= n.reads | n.writes
    preds = defaultdict(set)
    for e in acfg.flow_edges():
        preds[e.dst].add(e.src)
    succs = defaultdict(set)
    for e in acfg.flow_edges():
        succs[e.src].add(e.dst)

    out: dict[str, frozenset] = {nid: frozenset() for nid in acfg.nodes}
    out[ENTRY] = frozenset((ENTRY, v) for v in variables)
    inn: dict[str, frozenset] = {nid: frozenset() for nid in acfg.nodes}
    order = [n.id for n in acfg.sorted_nodes()]
    work = deque(order)
    queued = set(order)
    while work:
        nid = work.popleft()
        queued.discard(nid)
        if nid == ENTRY:
            continue
        new_in = frozenset().union(*(out[p] for p in preds[nid])) if preds[nid] else frozenset()
        node = acfg.nodes[nid]
        kill = node.writes
        new_out = frozenset(d for d in new_in if d[1] not in kill) | frozenset((nid, v) for v in kill)
        inn[nid] = new_in
        if new_out != out[nid]:
            out[nid] = new_out
            for s in succs[nid]:
                if s not in queued:
                    work.append(s)
                    queued.add(s)

    edges = set()
    for nid, node in acfg.nodes.items():
        for v in node.reads:
            for d, var in inn[nid]:
                if var == v and d != ENTRY:
                    edges.add(DfgEdge(d, nid, v))
    ordered = sorted(edges, key=lambda e: (e.def_node, e.use_node, e.variable))
    return Dfg(program.program_id, ordered, inn)


# ------------------------------------------------------------------ SDG build

@dataclass(frozen=True)
class SdgEdge:
    src: str
    dst: str
    kind: str  # control_dep | data_dep | call | transfer
    payload: tuple[str, ...] = ()
    label: str = ""
    attrs: tuple[tuple[str, object], ...] = ()

    def attr(self, key, default=None):
        return dict(self.attrs).get(key, default)

    def to_dict(self) -> dict:
        d = {"src": self.src, "dst": self.dst, "kind": self.kind, "payload": list(self.payload)}
        if self.label:
            d["label"] = self.label
        for k, v in self.attrs:
            d[k] = list(v) if isinstance(v, tuple) else v
        return d


@dataclass
class Sdg:
    program_id: str
    edges: list[SdgEdge]
    externals: list[str]
    metadata: dict = field(default_factory=dict)

    def of_kind(self, kind: str) -> list[SdgEdge]:
        return [e for e in self.edges if e.kind == kind]

    def to_dict(self) -> dict:
        return {"program_id": self.program_id, "externals": self.externals,
                "metadata": self.metadata, "edges": [e.to_dict() for e in self.edges]}


def postdominator_graph(acfg: Acfg) -> tuple[nx.DiGraph, list[tuple[str, str]]]:
    """Flow graph used for post-dominance, plus the synthetic edges added so
    every node reaches the exit."""
    g = nx.DiGraph()
    g.add_nodes_from(acfg.nodes)
    g.add_edges_from((e.src, e.dst) for e in acfg.flow_edges())
    reaches_exit = nx.ancestors(g, EXIT) | {EXIT}
    synthetic = sorted((n, EXIT) for n in g.nodes if n not in reaches_exit)
    g.add_edges_from(synthetic)
    return g, synthetic


def immediate_postdominators(acfg: Acfg) -> dict[str, Optional[str]]:
    g, _ = postdominator_graph(acfg)
    idom = nx.immediate_dominators(g.reverse(copy=True), EXIT)
    return {n: (None if n == EXIT else idom.get(n)) for n in g.nodes}


def _resolve_literals(acfg: Acfg, dfg: Dfg, node_id: str, var: str):
    """Literal values a variable may hold at a node, and whether it may be upward exposed."""
    values, defs, exposed = set(), [], False
    for d in dfg.defs_reaching(node_id, var):
        if d == ENTRY:
            exposed = True
            continue
        defs.append(d)
        st = acfg.stmts.get(d)
        if isinstance(st, cobol.Move) and st.source.is_literal:
            values.add(st.source.literal_value().strip())
        else:
            exposed = True
    return sorted(values), defs, exposed


def build_sdg(program: Program, acfg: Acfg, dfg: Dfg) -> Sdg:
    edges: set[SdgEdge] = set()
    g, synthetic = postdominator_graph(acfg)
    ipdom = immediate_postdominators(acfg)

    for e in acfg.flow_edges():
        a = acfg.nodes[e.src]
        if a.kind != "decision":
            continue
        stop = ipdom.get(a.id)
        runner = e.dst
        while runner is not None and runner != stop:
            edges.add(SdgEdge(a.id, runner, "control_dep", (), e.label))
            if runner == EXIT:
                break
            runner = ipdom.get(runner)

    grouped = defaultdict(set)
    for d in dfg.edges:
        grouped[(d.def_node, d.use_node)].add(d.variable)
    for (src, dst), vs in grouped.items():
        edges.add(SdgEdge(src, dst, "data_dep", tuple(sorted(vs))))

    externals = set()
    for nid, st in acfg.stmts.items():
        if not isinstance(st, Call):
            continue
        node = acfg.nodes[nid]
        kind = "transfer" if st.transfer else "call"
        payload = []
        attrs = {"paragraph": node.paragraph,
                 "by_reference": tuple(o.name for m, o in st.arguments() if m == "REFERENCE" and o.name)}
        if st.callee.is_literal:
            callee = st.callee.literal_value().strip()
            attrs.update(targets=(callee,), upward_exposed=False, reaching_defs=())
        else:
            var = st.callee.name
            values, defs, exposed = _resolve_literals(acfg, dfg, nid, var)
            payload.append(var)
            callee = values[0] if len(values) == 1 and not exposed else var
            attrs.update(targets=tuple(values), upward_exposed=exposed, reaching_defs=tuple(defs),
                         callee_variable=var)
        payload += [o.name for _, o in st.arguments() if o.name]
        dst = f"ext:{callee}"
        externals.add(dst)
        edges.add(SdgEdge(nid, dst, kind, tuple(dict.fromkeys(payload)), "",
                          tuple(sorted(attrs.items()))))

    exit_preds = sorted({e.src for e in acfg.edges if e.dst == EXIT})
    meta = {"synthetic_exit_edges": [list(x) for x in synthetic],
            "unified_exit": len(exit_preds) > 1,
            "exit_predecessors": exit_preds}
    ordered = sorted(edges, key=lambda e: (e.kind, e.src, e.dst, e.label, e.payload))
    return Sdg(program.program_id, ordered, sorted(externals), meta)


# --------------------------------------------------------------------- bundle

@dataclass
class GraphBundle:
    program: Program
    acfg: Acfg
    dfg: Dfg
    sdg: Sdg

    def to_dict(self) -> dict:
        return {"acfg": self.acfg.to_dict(), "dfg": self.dfg.to_dict(), "sdg": self.sdg.to_dict()}


def extract(program: Program) -> GraphBundle:
    acfg = build_acfg(program)
    dfg = build_dfg(program, acfg)
    return GraphBundle(program, acfg, dfg, build_sdg(program, acfg, dfg))


# ------------------------------------------------------------------------ DOT

_SHAPES = {"entry": "oval", "exit": "oval", "action": "box", "decision": "hexagon",
           "terminator": "octagon"}


def _q(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _node_label(n: AcfgNode) -> str:
    parts = [n.label]
    if n.reads:
        parts.append("R: " + ", ".join(sorted(n.reads)))
    if n.writes:
        parts.append("W: " + ", ".join(sorted(n.writes)))
    return "\\n".join(p.replace("\\", "\\\\").replace('"', '\\"') for p in parts)


def emit_dot(graph, acfg: Optional[Acfg] = None) -> str:
    """DOT text for an Acfg, Dfg or Sdg. Dfg/Sdg use ``acfg`` for node labels when given."""
    lines = []
    if isinstance(graph, Acfg):
        lines.append(f"digraph {_q(graph.program_id + '_acfg')} {{")
        for n in graph.sorted_nodes():
            extra = ", style=dashed" if n.dead else ""
            lines.append(f'  {_q(n.id)} [shape={_SHAPES[n.kind]}, label="{_node_label(n)}"{extra}];')
        for e in sorted(graph.edges, key=lambda e: e.sort_key):
            style = ", style=dotted" if e.kind == "fallthrough" else ""
            lines.append(f"  {_q(e.src)} -> {_q(e.dst)} [label={_q(e.label)}{style}];")
    elif isinstance(graph, Dfg):
        lines.append(f"digraph {_q(graph.program_id + '_dfg')} {{")
        ids = sorted({e.def_node for e in graph.edges} | {e.use_node for e in graph.edges})
        for nid in ids:
            label = _node_label(acfg.nodes[nid]) if acfg and nid in acfg.nodes else nid
            lines.append(f'  {_q(nid)} [shape=box, label="{label}"];')
        for e in graph.edges:
            lines.append(f"  {_q(e.def_node)} -> {_q(e.use_node)} [label={_q(e.variable)}];")
    elif isinstance(graph, Sdg):
        lines.append(f"digraph {_q(graph.program_id + '_sdg')} {{")
        ids = sorted({e.src for e in graph.edges} | {e.dst for e in graph.edges})
        for nid in ids:
            if nid.startswith("ext:"):
                lines.append(f"  {_q(nid)} [shape=component, label={_q(nid[4:])}];")
            else:
                node = acfg.nodes.get(nid) if acfg else None
                shape = _SHAPES[node.kind] if node else "box"
                label = _node_label(node) if node else nid
                lines.append(f'  {_q(nid)} [shape={shape}, label="{label}"];')
        for e in graph.edges:
            style = {"control_dep": "dashed", "data_dep": "solid", "call": "bold",
                     "transfer": "bold"}[e.kind]
            text = e.label or ", ".join(e.payload) or e.kind
            lines.append(f"  {_q(e.src)} -> {_q(e.dst)} [label={_q(text)}, style={style}];")
    else:
        raise TypeError(f"cannot render {type(graph).__name__} as DOT")
    lines.append("}")
    return "\n".join(lines) + "\n"
