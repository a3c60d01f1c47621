"""Lexer, parser and pretty-printer for a desk-scale COBOL subset.

Covers the statements needed to extract control, data and dependence graphs
from small online/batch programs: MOVE, ADD, IF, EVALUATE, PERFORM (out of
line, THRU, inline and looping forms), GO TO, CALL, CICS XCTL/LINK, GOBACK,
STRING, SET, CONTINUE and DISPLAY. Anything else is kept as an ``Opaque``
statement carrying its token text.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar, Iterable, Optional, Sequence, Union

SCHEMA_VERSION = 1


class ParseError(Exception):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CopybookError(Exception):
    pass


# ---------------------------------------------------------------- source text

FIXED_INDICATORS = set(" *-/Dd$")


def detect_fixed_format(lines: Sequence[str]) -> bool:
    """Fixed format iff every non-blank line fits the sequence/indicator layout
    and at least one line actually uses it."""
    body = [ln for ln in lines if ln.strip()]
    if not body:
        return False
    uses_layout = False
    for ln in body:
        if len(ln) < 7:
            return False
        seq, ind = ln[:6], ln[6]
        if not all(c.isdigit() or c == " " for c in seq) or ind not in FIXED_INDICATORS:
            return False
        if seq.strip() or ind in "*/-" or not ln[:7].strip():
            uses_layout = True
    return uses_layout


def _strip_inline_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "*" and line[i + 1:i + 2] == ">":
            return line[:i]
    return line


def logical_lines(source: str) -> list[tuple[int, str]]:
    """(line number, program text) pairs with comments and layout columns removed."""
    raw = source.splitlines()
    fixed = detect_fixed_format(raw)
    out: list[tuple[int, str]] = []
    for no, ln in enumerate(raw, start=1):
        if fixed:
            if len(ln) < 7:
                continue
            ind = ln[6]
            text = ln[7:72]
            if ind in "*/Dd":
                continue
            if ind == "-" and out:
                prev_no, prev = out[-1]
                cont = text.lstrip()
                if prev.count("'") % 2 == 1 and cont.startswith("'"):
                    cont = cont[1:]
                elif prev.count('"') % 2 == 1 and cont.startswith('"'):
                    cont = cont[1:]
                out[-1] = (prev_no, prev + cont)
                continue
            out.append((no, _strip_inline_comment(text)))
        else:
            stripped = ln.lstrip()
            if stripped.startswith("*>") or stripped == "*" or stripped.startswith("* "):
                continue
            out.append((no, _strip_inline_comment(ln)))
    return out


# ---------------------------------------------------------------------- lexer

@dataclass(frozen=True)
class Token:
    type: str  # WORD NUM STR PERIOD LPAREN RPAREN OP PIC
    text: str
    line: int
    adjacent: bool = False  # no whitespace before this token

    @property
    def upper(self) -> str:
        return self.text.upper()


_TOKEN_RE = re.compile(r"""
  (?P<ws>\s+)
| (?P<str>'(?:[^']|'')*'|"(?:[^"]|"")*")
| (?P<hex>[XxNnGgZz](?:'(?:[^']|'')*'|"(?:[^"]|"")*"))
| (?P<dec>\d+\.\d+)
| (?P<word>[A-Za-z0-9]+(?:-+[A-Za-z0-9]+)*)
| (?P<op>>=|<=|<>|\*\*|[<>=+\-*/:&])
| (?P<lp>\()
| (?P<rp>\))
| (?P<period>\.(?=\s|$))
| (?P<sep>[,;])
| (?P<other>\S)
""", re.VERBOSE)


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    pic_pending = False
    for no, text in logical_lines(source):
        pos = 0
        prev_end = -1
        while pos < len(text):
            if pic_pending:
                m = re.compile(r"\s*(\S+)").match(text, pos)
                if not m:
                    break
                chunk = m.group(1)
                if chunk.upper() == "IS":
                    pos = m.end()
                    continue
                period = chunk.endswith(".")
                tokens.append(Token("PIC", chunk[:-1] if period else chunk, no))
                if period:
                    tokens.append(Token("PERIOD", ".", no, True))
                pos = m.end()
                prev_end = pos
                pic_pending = False
                continue
            m = _TOKEN_RE.match(text, pos)
            kind = m.lastgroup
            val = m.group(0)
            adjacent = m.start() == prev_end
            pos = m.end()
            if kind == "ws":
                continue
            prev_end = pos
            if kind == "sep":
                continue
            if kind == "word":
                ttype = "NUM" if val.isdigit() else "WORD"
                tokens.append(Token(ttype, val, no, adjacent))
                if val.upper() in ("PIC", "PICTURE"):
                    pic_pending = True
            elif kind == "dec":
                tokens.append(Token("NUM", val, no, adjacent))
            elif kind in ("str", "hex"):
                tokens.append(Token("STR", val, no, adjacent))
            elif kind == "period":
                tokens.append(Token("PERIOD", ".", no, adjacent))
            elif kind == "lp":
                tokens.append(Token("LPAREN", "(", no, adjacent))
            elif kind == "rp":
                tokens.append(Token("RPAREN", ")", no, adjacent))
            elif kind == "op":
                tokens.append(Token("OP", val, no, adjacent))
            else:
                tokens.append(Token("OP", val, no, adjacent))
    return tokens


# ------------------------------------------------------------------ copybooks

_COPY_RE = re.compile(r"(?<![\w-])COPY\s+('[^']+'|\"[^\"]+\"|[A-Za-z0-9][A-Za-z0-9-]*)"
                      r"(?:\s+(?:OF|IN)\s+[A-Za-z0-9-]+)?"
                      r"(?:\s+REPLACING\s+(?P<rep>.*?))?\s*\.(?=\s|$)",
                      re.IGNORECASE | re.DOTALL)
_REPL_RE = re.compile(r"(==.*?==|'[^']*'|\S+)\s+BY\s+(==.*?==|'[^']*'|\S+)", re.IGNORECASE | re.DOTALL)


def _find_member(name: str, search_dirs: Sequence[Union[str, Path]]) -> Optional[Path]:
    for d in search_dirs:
        d = Path(d)
        for cand in (name, name.upper(), name.lower()):
            for ext in ("", ".cpy", ".CPY", ".cbl", ".CBL", ".cob", ".COB"):
                p = d / f"{cand}{ext}"
                if p.is_file():
                    return p
    return None


def _is_comment_line(line: str, fixed: bool) -> bool:
    if fixed:
        return len(line) > 6 and line[6] in "*/"
    s = line.lstrip()
    return s.startswith("*>") or s == "*" or s.startswith("* ")


def expand_copybooks(source: str, search_dirs: Sequence[Union[str, Path]] = (),
                     _stack: tuple[str, ...] = ()) -> str:
    """Inline every COPY member, recursively, failing on missing members and cycles."""
    lines = source.splitlines()
    fixed = detect_fixed_format(lines)
    # mask comment lines so COPY inside comments is ignored
    masked = ["" if _is_comment_line(ln, fixed) else ln for ln in lines]
    text = "\n".join(masked)
    out_lines = list(lines)
    replacements = []
    for m in _COPY_RE.finditer(text):
        start_line = text.count("\n", 0, m.start())
        end_line = text.count("\n", 0, m.end())
        prefix = masked[start_line][: m.start() - (text.rfind("\n", 0, m.start()) + 1)]
        if prefix.count("'") % 2 or prefix.count('"') % 2:
            continue  # inside a literal
        name = m.group(1).strip("'\"")
        key = name.upper()
        if key in _stack:
            cycle = " -> ".join(_stack + (key,))
            raise CopybookError(f"COPY cycle: {cycle}")
        path = _find_member(name, search_dirs)
        if path is None:
            raise CopybookError(
                f"copybook member {name!r} not found (COPY directive at line {start_line + 1})")
        member = expand_copybooks(path.read_text(), search_dirs, _stack + (key,))
        if m.group("rep"):
            for old, new in _REPL_RE.findall(m.group("rep")):
                old, new = old.strip("=").strip(), new.strip("=").strip()
                # word boundaries only matter where the pseudo-text starts or ends in a word char
                lead = r"(?<![\w-])" if re.match(r"[\w-]", old) else ""
                tail = r"(?![\w-])" if re.search(r"[\w-]$", old) else ""
                member = re.sub(lead + re.escape(old) + tail, lambda _m, v=new: v, member)
        replacements.append((start_line, end_line, member.splitlines()))
    for start, end, member_lines in reversed(replacements):
        out_lines[start:end + 1] = member_lines
    return "\n".join(out_lines) + ("\n" if source.endswith("\n") else "")


# ------------------------------------------------------------------ AST nodes

FIGURATIVE = {
    "SPACE", "SPACES", "ZERO", "ZEROS", "ZEROES", "LOW-VALUE", "LOW-VALUES",
    "HIGH-VALUE", "HIGH-VALUES", "QUOTE", "QUOTES", "NULL", "NULLS", "TRUE", "FALSE",
}


@dataclass(frozen=True)
class Operand:
    """A data reference or a literal. ``name`` is set for data references."""

    literal: Optional[str] = None
    name: Optional[str] = None
    qualifiers: tuple[str, ...] = ()
    subscripts: tuple["Operand", ...] = ()
    refmod: tuple["Operand", ...] = ()

    @property
    def is_literal(self) -> bool:
        return self.name is None

    def render(self) -> str:
        if self.name is None:
            return self.literal
        s = self.name + "".join(f" OF {q}" for q in self.qualifiers)
        if self.subscripts:
            s += "(" + " ".join(o.render() for o in self.subscripts) + ")"
        if self.refmod:
            s += "(" + ":".join(o.render() for o in self.refmod) + ")"
        return s

    def reads(self) -> set[str]:
        names = {self.name} if self.name else set()
        for o in self.subscripts + self.refmod:
            names |= o.reads()
        return names

    def index_reads(self) -> set[str]:
        out: set[str] = set()
        for o in self.subscripts + self.refmod:
            out |= o.reads()
        return out

    def literal_value(self) -> Optional[str]:
        """Unquoted literal text, or None for data references."""
        if self.name is not None:
            return None
        lit = self.literal
        if len(lit) >= 2 and lit[0] in "'\"" and lit[-1] == lit[0]:
            return lit[1:-1].replace(lit[0] * 2, lit[0])
        return lit

    def __str__(self):
        return self.render()


def lit(text: str) -> Operand:
    return Operand(literal=text)


def ref(name: str) -> Operand:
    return Operand(name=name.upper())


# conditions ---------------------------------------------------------------

class Cond:
    def reads(self) -> set[str]:
        raise NotImplementedError

    def render(self) -> str:
        raise NotImplementedError

    def __str__(self):
        return self.render()


@dataclass(frozen=True)
class Arith(Cond):
    items: tuple  # Operand or operator string

    def reads(self):
        out = set()
        for it in self.items:
            if isinstance(it, Operand):
                out |= it.reads()
        return out

    def render(self):
        return " ".join(it.render() if isinstance(it, Operand) else it for it in self.items)


@dataclass(frozen=True)
class Rel(Cond):
    left: Union[Operand, Arith]
    op: str
    right: Union[Operand, Arith]

    def reads(self):
        return self.left.reads() | self.right.reads()

    def render(self):
        return f"{self.left.render()} {self.op} {self.right.render()}"


@dataclass(frozen=True)
class ClassTest(Cond):
    subject: Operand
    cls: str
    negated: bool = False

    def reads(self):
        return self.subject.reads()

    def render(self):
        return f"{self.subject.render()} IS {'NOT ' if self.negated else ''}{self.cls}"


@dataclass(frozen=True)
class CondName(Cond):
    """Level-88 condition name, resolved to its parent item and values."""

    name: str
    parent: Optional[str] = None
    values: tuple[str, ...] = ()

    def reads(self):
        return {self.parent or self.name}

    def render(self):
        return self.name


@dataclass(frozen=True)
class Not(Cond):
    inner: Cond

    def reads(self):
        return self.inner.reads()

    def render(self):
        inner = self.inner.render()
        if isinstance(self.inner, (And, Or, Not)):
            inner = f"({inner})"
        return f"NOT {inner}"


@dataclass(frozen=True)
class And(Cond):
    items: tuple[Cond, ...]

    def reads(self):
        return set().union(*(c.reads() for c in self.items))

    def render(self):
        return " AND ".join(f"({c.render()})" if isinstance(c, (And, Or)) else c.render()
                            for c in self.items)


@dataclass(frozen=True)
class Or(Cond):
    items: tuple[Cond, ...]

    def reads(self):
        return set().union(*(c.reads() for c in self.items))

    def render(self):
        return " OR ".join(f"({c.render()})" if isinstance(c, (And, Or)) else c.render()
                           for c in self.items)


# statements ---------------------------------------------------------------

def _ser(v):
    if isinstance(v, Stmt):
        return v.structure()
    if isinstance(v, (Operand, Cond, Arm)):
        d = {"_type": type(v).__name__}
        for f in dataclasses.fields(v):
            d[f.name] = _ser(getattr(v, f.name))
        return d
    if isinstance(v, (list, tuple)):
        return [_ser(x) for x in v]
    return v


@dataclass(kw_only=True)
class Stmt:
    span: tuple[int, int] = field(default=(0, 0), compare=False)
    kind: ClassVar[str] = "Stmt"

    def blocks(self) -> list[list["Stmt"]]:
        return []

    def reads(self) -> set[str]:
        return set()

    def writes(self) -> set[str]:
        return set()

    def structure(self) -> dict:
        d = {"kind": self.kind}
        for f in dataclasses.fields(self):
            if f.name != "span":
                d[f.name] = _ser(getattr(self, f.name))
        return d

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "span": list(self.span)}
        for f in dataclasses.fields(self):
            if f.name == "span":
                continue
            v = getattr(self, f.name)
            if isinstance(v, list) and v and isinstance(v[0], Stmt):
                d[f.name] = [s.to_dict() for s in v]
            elif f.name == "arms":
                d[f.name] = [{"objects": _ser(a.objects), "other": a.other,
                              "body": [s.to_dict() for s in a.body]} for a in v]
            else:
                d[f.name] = _ser(v)
        return d

    def render(self, indent: int = 0) -> list[str]:
        raise NotImplementedError


def _pad(indent):
    return "    " * indent


@dataclass
class Move(Stmt):
    kind: ClassVar[str] = "Move"
    source: Operand = None
    targets: list[Operand] = field(default_factory=list)
    corresponding: bool = False

    def reads(self):
        out = self.source.reads()
        for t in self.targets:
            out |= t.index_reads()
        return out

    def writes(self):
        return {t.name for t in self.targets}

    def render(self, indent=0):
        corr = "CORRESPONDING " if self.corresponding else ""
        tgts = " ".join(t.render() for t in self.targets)
        return [f"{_pad(indent)}MOVE {corr}{self.source.render()} TO {tgts}"]


@dataclass
class Add(Stmt):
    kind: ClassVar[str] = "Add"
    addends: list[Operand] = field(default_factory=list)
    to: list[Operand] = field(default_factory=list)
    giving: list[Operand] = field(default_factory=list)

    def reads(self):
        out = set()
        for o in self.addends + self.to:
            out |= o.reads()
        for o in self.giving:
            out |= o.index_reads()
        return out

    def writes(self):
        return {o.name for o in (self.giving or self.to) if o.name}

    def render(self, indent=0):
        s = f"{_pad(indent)}ADD {' '.join(o.render() for o in self.addends)}"
        if self.to:
            s += f" TO {' '.join(o.render() for o in self.to)}"
        if self.giving:
            s += f" GIVING {' '.join(o.render() for o in self.giving)}"
        return [s]


@dataclass
class If(Stmt):
    kind: ClassVar[str] = "If"
    cond: Cond = None
    then: list[Stmt] = field(default_factory=list)
    orelse: list[Stmt] = field(default_factory=list)

    def blocks(self):
        return [self.then, self.orelse]

    def reads(self):
        return self.cond.reads()

    def render(self, indent=0):
        out = [f"{_pad(indent)}IF {self.cond.render()}"]
        for s in self.then:
            out += s.render(indent + 1)
        if self.orelse:
            out.append(f"{_pad(indent)}ELSE")
            for s in self.orelse:
                out += s.render(indent + 1)
        out.append(f"{_pad(indent)}END-IF")
        return out


@dataclass
class Arm:
    objects: tuple  # Cond for EVALUATE TRUE, else selection objects (Operand / ("THRU", a, b) / "ANY")
    body: list[Stmt] = field(default_factory=list)
    other: bool = False


@dataclass
class Evaluate(Stmt):
    kind: ClassVar[str] = "Evaluate"
    subject: Optional[Union[Operand, Arith]] = None  # None means EVALUATE TRUE
    arms: list[Arm] = field(default_factory=list)

    def blocks(self):
        return [a.body for a in self.arms]

    @property
    def when_arms(self) -> list[Arm]:
        return [a for a in self.arms if not a.other]

    @property
    def other_arm(self) -> Optional[Arm]:
        return next((a for a in self.arms if a.other), None)

    def arm_condition(self, arm: Arm) -> Optional[Cond]:
        """Selection condition of a WHEN arm as a boolean condition."""
        conds = []
        for obj in arm.objects:
            if self.subject is None:
                conds.append(obj)
            elif obj == "ANY":
                return None
            elif isinstance(obj, tuple) and obj[0] == "THRU":
                conds.append(And((Rel(self.subject, ">=", obj[1]), Rel(self.subject, "<=", obj[2]))))
            else:
                conds.append(Rel(self.subject, "=", obj))
        return conds[0] if len(conds) == 1 else Or(tuple(conds))

    def reads(self):
        out = self.subject.reads() if self.subject is not None else set()
        for a in self.arms:
            for obj in a.objects:
                if isinstance(obj, Cond):
                    out |= obj.reads()
                elif isinstance(obj, Operand):
                    out |= obj.reads()
                elif isinstance(obj, tuple):
                    out |= obj[1].reads() | obj[2].reads()
        return out

    def render(self, indent=0):
        subj = "TRUE" if self.subject is None else self.subject.render()
        out = [f"{_pad(indent)}EVALUATE {subj}"]
        for a in self.arms:
            if a.other:
                out.append(f"{_pad(indent + 1)}WHEN OTHER")
            for obj in a.objects:
                if isinstance(obj, tuple):
                    txt = f"{obj[1].render()} THRU {obj[2].render()}"
                elif obj == "ANY":
                    txt = "ANY"
                else:
                    txt = obj.render()
                out.append(f"{_pad(indent + 1)}WHEN {txt}")
            for s in a.body:
                out += s.render(indent + 2)
        out.append(f"{_pad(indent)}END-EVALUATE")
        return out


@dataclass
class Perform(Stmt):
    target: Optional[str] = None
    thru: Optional[str] = None
    until: Optional[Cond] = None
    times: Optional[Operand] = None
    varying: Optional[tuple] = None  # (var, from, by)
    test_after: bool = False
    body: Optional[list[Stmt]] = None  # inline form

    @property
    def kind(self):
        return "PerformThru" if self.thru else "Perform"

    @property
    def is_loop(self) -> bool:
        return self.until is not None or self.times is not None or self.varying is not None

    def blocks(self):
        return [self.body] if self.body is not None else []

    def reads(self):
        out = set()
        if self.until is not None:
            out |= self.until.reads()
        if self.times is not None:
            out |= self.times.reads()
        if self.varying:
            var, frm, by = self.varying
            out |= var.reads() | frm.reads() | by.reads()
        return out

    def writes(self):
        return {self.varying[0].name} if self.varying else set()

    def _loop_text(self):
        s = ""
        if self.test_after:
            s += " WITH TEST AFTER"
        if self.varying:
            var, frm, by = self.varying
            s += f" VARYING {var.render()} FROM {frm.render()} BY {by.render()}"
        if self.times is not None:
            s += f" {self.times.render()} TIMES"
        if self.until is not None:
            s += f" UNTIL {self.until.render()}"
        return s

    def render(self, indent=0):
        if self.body is not None:
            out = [f"{_pad(indent)}PERFORM{self._loop_text()}"]
            for s in self.body:
                out += s.render(indent + 1)
            out.append(f"{_pad(indent)}END-PERFORM")
            return out
        s = f"{_pad(indent)}PERFORM {self.target}"
        if self.thru:
            s += f" THRU {self.thru}"
        return [s + self._loop_text()]


@dataclass
class GoTo(Stmt):
    kind: ClassVar[str] = "GoTo"
    target: str = ""

    def render(self, indent=0):
        return [f"{_pad(indent)}GO TO {self.target}"]


@dataclass
class Call(Stmt):
    """CALL, or a CICS XCTL/LINK handoff (``transfer`` marks XCTL)."""

    callee: Operand = None
    using: list[tuple[str, Operand]] = field(default_factory=list)
    transfer: bool = False
    cics: Optional[str] = None  # None for CALL, else XCTL / LINK
    options: list[tuple[str, Optional[Operand]]] = field(default_factory=list)

    @property
    def kind(self):
        return "Xctl" if self.transfer else "Call"

    def arguments(self) -> list[tuple[str, Operand]]:
        if self.cics:
            return [("CONTENT", o) for k, o in self.options if k == "COMMAREA" and o is not None]
        return list(self.using)

    def reads(self):
        out = self.callee.reads()
        for _, o in self.arguments():
            out |= o.reads()
        for k, o in self.options:
            if o is not None and k not in ("PROGRAM", "COMMAREA"):
                out |= o.reads()
        return out

    def writes(self):
        return {o.name for mode, o in self.arguments() if mode == "REFERENCE" and o.name}

    def render(self, indent=0):
        if self.cics:
            opts = " ".join(f"{k}({o.render()})" if o is not None else k for k, o in self.options)
            return [f"{_pad(indent)}EXEC CICS {self.cics} {opts} END-EXEC"]
        s = f"{_pad(indent)}CALL {self.callee.render()}"
        if self.using:
            s += " USING " + " ".join(f"BY {m} {o.render()}" for m, o in self.using)
        return [s + " END-CALL"]


@dataclass
class Goback(Stmt):
    kind: ClassVar[str] = "Goback"
    verb: str = "GOBACK"

    def render(self, indent=0):
        return [f"{_pad(indent)}{self.verb}"]


@dataclass
class StringStmt(Stmt):
    kind: ClassVar[str] = "String"
    parts: list[tuple[Operand, Union[str, Operand]]] = field(default_factory=list)
    into: Operand = None
    pointer: Optional[Operand] = None

    def reads(self):
        out = set()
        for src, delim in self.parts:
            out |= src.reads()
            if isinstance(delim, Operand):
                out |= delim.reads()
        out |= self.into.index_reads()
        if self.pointer is not None:
            out |= self.pointer.reads()
        return out

    def writes(self):
        out = {self.into.name}
        if self.pointer is not None:
            out.add(self.pointer.name)
        return out

    def render(self, indent=0):
        parts = " ".join(
            f"{src.render()} DELIMITED BY {d if isinstance(d, str) else d.render()}"
            for src, d in self.parts)
        s = f"{_pad(indent)}STRING {parts} INTO {self.into.render()}"
        if self.pointer is not None:
            s += f" WITH POINTER {self.pointer.render()}"
        return [s + " END-STRING"]


@dataclass
class SetStmt(Stmt):
    kind: ClassVar[str] = "Set"
    targets: list[Union[Operand, CondName]] = field(default_factory=list)
    mode: str = "TRUE"  # TRUE, FALSE, TO, UP, DOWN
    value: Optional[Operand] = None

    def reads(self):
        out = set()
        if self.value is not None:
            out |= self.value.reads()
        if self.mode in ("UP", "DOWN"):
            out |= {t.name for t in self.targets}
        return out

    def writes(self):
        out = set()
        for t in self.targets:
            if isinstance(t, CondName):
                out.add(t.parent or t.name)
            else:
                out.add(t.name)
        return out

    def render(self, indent=0):
        tg = " ".join(t.render() for t in self.targets)
        if self.mode in ("TRUE", "FALSE"):
            return [f"{_pad(indent)}SET {tg} TO {self.mode}"]
        if self.mode == "TO":
            return [f"{_pad(indent)}SET {tg} TO {self.value.render()}"]
        return [f"{_pad(indent)}SET {tg} {self.mode} BY {self.value.render()}"]


@dataclass
class Continue(Stmt):
    kind: ClassVar[str] = "Continue"
    verb: str = "CONTINUE"

    def render(self, indent=0):
        return [f"{_pad(indent)}{self.verb}"]


@dataclass
class Display(Stmt):
    kind: ClassVar[str] = "Display"
    operands: list[Operand] = field(default_factory=list)
    upon: Optional[str] = None

    def reads(self):
        return set().union(*(o.reads() for o in self.operands)) if self.operands else set()

    def render(self, indent=0):
        s = f"{_pad(indent)}DISPLAY {' '.join(o.render() for o in self.operands)}"
        if self.upon:
            s += f" UPON {self.upon}"
        return [s]


@dataclass
class Opaque(Stmt):
    kind: ClassVar[str] = "Opaque"
    text: str = ""

    def render(self, indent=0):
        return [f"{_pad(indent)}{self.text}"]


def walk(stmts: Iterable[Stmt]):
    """Pre-order traversal over nested statements."""
    for s in stmts:
        yield s
        for block in s.blocks():
            yield from walk(block)


# ------------------------------------------------------------- program level

@dataclass
class DataItem:
    level: int
    name: str
    picture: Optional[str] = None
    storage: str = "working"  # working | linkage
    parent: Optional[str] = None
    values: tuple[str, ...] = ()
    line: int = field(default=0, compare=False)

    def __post_init__(self):
        if not (1 <= self.level <= 49 or self.level in (66, 77, 88)):
            raise ParseError(f"invalid level number {self.level:02d} for {self.name}", self.line)

    def structure(self) -> dict:
        return {"level": self.level, "name": self.name, "picture": self.picture,
                "storage": self.storage, "parent": self.parent, "values": list(self.values)}

    def to_dict(self) -> dict:
        return {**self.structure(), "line": self.line}


@dataclass
class Paragraph:
    name: str
    statements: list[Stmt] = field(default_factory=list)
    section: Optional[str] = None
    implicit: bool = False  # no header in source (leading statements)
    span: tuple[int, int] = field(default=(0, 0), compare=False)

    def structure(self) -> dict:
        return {"name": self.name, "section": self.section, "implicit": self.implicit,
                "statements": [s.structure() for s in self.statements]}

    def to_dict(self) -> dict:
        return {"name": self.name, "section": self.section, "implicit": self.implicit,
                "span": list(self.span), "statements": [s.to_dict() for s in self.statements]}


@dataclass
class Program:
    program_id: str
    data_items: list[DataItem] = field(default_factory=list)
    paragraphs: list[Paragraph] = field(default_factory=list)
    sections: dict[str, list[str]] = field(default_factory=dict)
    using: list[str] = field(default_factory=list)
    n_lines: int = 0

    def item(self, name: str) -> Optional[DataItem]:
        name = name.upper()
        return next((d for d in self.data_items if d.name == name), None)

    def paragraph_index(self, name: str) -> int:
        name = name.upper()
        for i, p in enumerate(self.paragraphs):
            if p.name == name:
                return i
        raise KeyError(name)

    def resolve_range(self, target: str, thru: Optional[str] = None) -> list[int]:
        """Paragraph indices executed by PERFORM target [THRU thru]."""
        def bounds(name):
            name = name.upper()
            if name in self.sections and self.sections[name]:
                members = self.sections[name]
                return self.paragraph_index(members[0]), self.paragraph_index(members[-1])
            i = self.paragraph_index(name)
            return i, i
        lo, hi = bounds(target)
        if thru:
            hi = bounds(thru)[1]
        return list(range(lo, hi + 1))

    def iter_statements(self):
        for p in self.paragraphs:
            yield from walk(p.statements)

    @property
    def opaque_count(self) -> int:
        return sum(1 for s in self.iter_statements() if isinstance(s, Opaque))

    @property
    def linkage_items(self) -> list[DataItem]:
        return [d for d in self.data_items if d.storage == "linkage" and d.level != 88]

    @property
    def working_items(self) -> list[DataItem]:
        return [d for d in self.data_items if d.storage == "working" and d.level != 88]

    def structure(self) -> dict:
        return {
            "program_id": self.program_id,
            "data_items": [d.structure() for d in self.data_items],
            "paragraphs": [p.structure() for p in self.paragraphs],
            "sections": {k: list(v) for k, v in self.sections.items()},
            "using": list(self.using),
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "program_id": self.program_id,
            "data_items": [d.to_dict() for d in self.data_items],
            "paragraphs": [p.to_dict() for p in self.paragraphs],
            "sections": {k: list(v) for k, v in self.sections.items()},
            "using": list(self.using),
            "opaque_count": self.opaque_count,
            "n_lines": self.n_lines,
        }

    def render(self) -> str:
        """Free-format source that parses back to the same AST."""
        out = ["IDENTIFICATION DIVISION.", f"PROGRAM-ID. {self.program_id}."]
        if self.data_items:
            out.append("DATA DIVISION.")
            for storage, header in (("working", "WORKING-STORAGE SECTION."),
                                    ("linkage", "LINKAGE SECTION.")):
                items = [d for d in self.data_items if d.storage == storage]
                if not items:
                    continue
                out.append(header)
                for d in items:
                    s = f"{d.level:02d} {d.name}"
                    if d.picture:
                        s += f" PIC {d.picture}"
                    if d.values:
                        s += " VALUE " + " ".join(d.values)
                    out.append(s + ".")
        proc = "PROCEDURE DIVISION"
        if self.using:
            proc += " USING " + " ".join(self.using)
        out.append(proc + ".")
        current_section = None
        for p in self.paragraphs:
            if p.section and p.section != current_section:
                out.append(f"{p.section} SECTION.")
                current_section = p.section
            if not p.implicit:
                out.append(f"{p.name}.")
            for s in p.statements:
                out += s.render(1)
            if p.statements:
                out.append("    .")
        return "\n".join(out) + "\n"


# --------------------------------------------------------------------- parser

VERBS = {
    "ACCEPT", "ADD", "ALTER", "CALL", "CANCEL", "CLOSE", "COMPUTE", "CONTINUE",
    "DELETE", "DISPLAY", "DIVIDE", "EVALUATE", "EXEC", "EXIT", "GO", "GOBACK", "IF",
    "INITIALIZE", "INSPECT", "MERGE", "MOVE", "MULTIPLY", "NEXT", "OPEN", "PERFORM",
    "READ", "RELEASE", "RETURN", "REWRITE", "SEARCH", "SET", "SORT", "START", "STOP",
    "STRING", "SUBTRACT", "UNSTRING", "WRITE", "ENTRY", "INITIATE", "TERMINATE",
    "GENERATE", "COPY",
}
STOPS = {"ELSE", "END-IF", "WHEN", "END-EVALUATE", "END-PERFORM"}
REL_WORDS = {"GREATER", "LESS", "EQUAL", "EQUALS"}
CLASS_WORDS = {"NUMERIC", "ALPHABETIC", "ALPHABETIC-LOWER", "ALPHABETIC-UPPER",
               "POSITIVE", "NEGATIVE", "ZERO"}
EXCEPTION_WORDS = {"ON", "AT", "INVALID", "NOT", "SIZE", "OVERFLOW", "EXCEPTION"}


class _Fallback(Exception):
    """Statement uses syntax outside the subset; re-read it as Opaque."""


class Parser:
    def __init__(self, tokens: list[Token], n_lines: int = 0):
        self.toks = tokens
        self.pos = 0
        self.n_lines = n_lines
        self.items: dict[str, DataItem] = {}
        self.open: list[str] = []  # open structured statements (IF/EVALUATE/PERFORM)

    # token helpers ------------------------------------------------------
    def peek(self, off: int = 0) -> Optional[Token]:
        i = self.pos + off
        return self.toks[i] if i < len(self.toks) else None

    def at(self, *words: str, off: int = 0) -> bool:
        t = self.peek(off)
        return t is not None and t.type in ("WORD", "NUM") and t.upper in words

    def at_type(self, ttype: str, off: int = 0) -> bool:
        t = self.peek(off)
        return t is not None and t.type == ttype

    def next(self) -> Token:
        t = self.peek()
        if t is None:
            raise ParseError("unexpected end of source", self.toks[-1].line if self.toks else None)
        self.pos += 1
        return t

    def expect(self, *words: str) -> Token:
        t = self.next()
        if t.upper not in words:
            raise ParseError(f"expected {'/'.join(words)}, found {t.text!r}", t.line)
        return t

    def skip(self, *words: str) -> bool:
        if self.at(*words):
            self.pos += 1
            return True
        return False

    def line(self) -> int:
        t = self.peek() or (self.toks[-1] if self.toks else None)
        return t.line if t else 0

    def prev_line(self) -> int:
        return self.toks[self.pos - 1].line if self.pos else 0

    def skip_to_period(self):
        while self.peek() is not None and not self.at_type("PERIOD"):
            self.pos += 1
        if self.at_type("PERIOD"):
            self.pos += 1

    # program ------------------------------------------------------------
    def parse_program(self) -> Program:
        program_id = None
        # IDENTIFICATION / ENVIRONMENT
        while self.peek() is not None and not (self.at("DATA", "PROCEDURE") and self.at("DIVISION", off=1)):
            if self.at("PROGRAM-ID"):
                self.next()
                if self.at_type("PERIOD"):
                    self.next()
                t = self.next()
                program_id = t.text.strip("'\"").upper()
                self.skip_to_period()
                continue
            self.pos += 1
        if program_id is None:
            raise ParseError("missing PROGRAM-ID", 1)
        prog = Program(program_id, n_lines=self.n_lines)
        if self.at("DATA"):
            self.next(); self.next()
            self.expect_period()
            self.parse_data_division(prog)
        if self.at("PROCEDURE"):
            self.next(); self.next()
            if self.skip("USING"):
                while not self.at_type("PERIOD"):
                    t = self.next()
                    if t.upper in ("BY", "REFERENCE", "VALUE", "CONTENT"):
                        continue
                    prog.using.append(t.upper)
            self.expect_period()
            self.parse_procedure(prog)
        self.check_targets(prog)
        return prog

    def expect_period(self):
        t = self.next()
        if t.type != "PERIOD":
            raise ParseError(f"expected '.', found {t.text!r}", t.line)

    def parse_data_division(self, prog: Program):
        storage = "working"
        stack: list[DataItem] = []
        last_non88: Optional[DataItem] = None
        while self.peek() is not None and not (self.at("PROCEDURE") and self.at("DIVISION", off=1)):
            if self.at_type("WORD") and self.at("SECTION", off=1):
                name = self.next().upper
                self.next()
                self.expect_period()
                storage = "linkage" if name == "LINKAGE" else "working"
                stack.clear()
                continue
            if self.at("FD", "SD", "RD", "EXEC", "COPY"):
                if self.at("EXEC"):
                    while not self.at("END-EXEC"):
                        self.next()
                self.skip_to_period()
                continue
            t = self.peek()
            if t.type != "NUM":
                self.skip_to_period()
                continue
            level = int(self.next().text)
            line = t.line
            if self.at_type("WORD") and not self.at("PIC", "PICTURE", "VALUE", "VALUES", "REDEFINES",
                                                     "OCCURS", "USAGE", "COMP", "COMP-3"):
                name = self.next().upper
            else:
                name = "FILLER"
            picture = None
            values: list[str] = []
            while self.peek() is not None and not self.at_type("PERIOD"):
                if self.at("PIC", "PICTURE"):
                    self.next()
                    picture = self.next().text.upper()
                elif self.at("VALUE", "VALUES"):
                    self.next()
                    self.skip("IS", "ARE")
                    while self.peek() is not None and not self.at_type("PERIOD") and not self.at(
                            "PIC", "PICTURE", "OCCURS", "USAGE", "REDEFINES"):
                        v = self.next()
                        values.append(v.text if v.type != "WORD" else v.upper)
                else:
                    self.next()
            self.expect_period()
            if level == 88:
                parent = last_non88.name if last_non88 else None
                item = DataItem(88, name, None, storage, parent, tuple(values), line)
            else:
                if level in (1, 77):
                    stack.clear()
                while stack and stack[-1].level >= level:
                    stack.pop()
                parent = stack[-1].name if stack else None
                item = DataItem(level, name, picture, storage, parent, tuple(values), line)
                stack.append(item)
                last_non88 = item
            prog.data_items.append(item)
            if name != "FILLER":
                self.items.setdefault(name, item)

    # procedure division -------------------------------------------------
    def is_header(self) -> Optional[str]:
        t = self.peek()
        if t is None or t.type not in ("WORD", "NUM"):
            return None
        if self.at("SECTION", off=1) and self.at_type("PERIOD", off=2):
            return "section"
        if t.upper not in VERBS and t.upper not in STOPS and self.at_type("PERIOD", off=1):
            return "paragraph"
        return None

    def parse_procedure(self, prog: Program):
        section = None
        para: Optional[Paragraph] = None
        while self.peek() is not None:
            if self.at("END") and self.at("PROGRAM", off=1):
                break
            if self.at("DECLARATIVES", "END-DECLARATIVES"):
                self.skip_to_period()
                continue
            kind = self.is_header()
            if kind == "section":
                t = self.next()
                section = t.upper
                self.next(); self.next()
                prog.sections.setdefault(section, [])
                para = None
                continue
            if kind == "paragraph":
                t = self.next()
                self.next()
                para = self._new_paragraph(prog, t.upper, section, False, t.line)
                continue
            if self.at_type("PERIOD"):
                self.next()
                continue
            if para is None:
                name = section if section else "(ENTRY)"
                para = self._new_paragraph(prog, name, section, True, self.line())
            stmts = self.parse_block()
            t = self.peek()
            if t is not None and t.type != "PERIOD" and t.upper in STOPS:
                raise ParseError(f"unbalanced {t.upper}", t.line)
            para.statements.extend(stmts)
            if stmts:
                para.span = (para.span[0], stmts[-1].span[1])

    def _new_paragraph(self, prog, name, section, implicit, line) -> Paragraph:
        if any(p.name == name for p in prog.paragraphs):
            raise ParseError(f"duplicate paragraph name {name}", line)
        para = Paragraph(name, [], section, implicit, (line, line))
        prog.paragraphs.append(para)
        if section:
            prog.sections[section].append(name)
        return para

    def check_targets(self, prog: Program):
        names = {p.name for p in prog.paragraphs} | set(prog.sections)
        for s in prog.iter_statements():
            targets = []
            if isinstance(s, Perform) and s.body is None:
                targets = [s.target] + ([s.thru] if s.thru else [])
            elif isinstance(s, GoTo):
                targets = [s.target]
            for tg in targets:
                if tg not in names:
                    kind = "GO TO" if isinstance(s, GoTo) else "PERFORM"
                    raise ParseError(f"undefined paragraph {tg} in {kind}", s.span[0])

    # statements ---------------------------------------------------------
    def parse_block(self) -> list[Stmt]:
        out: list[Stmt] = []
        while True:
            t = self.peek()
            if t is None or t.type == "PERIOD":
                return out
            if t.upper in STOPS and t.type == "WORD":
                if t.upper.startswith("END-"):
                    opener = t.upper[4:]
                    if opener not in self.open:
                        raise ParseError(f"unbalanced {t.upper}", t.line)
                return out
            if not out and self.is_header():
                return out
            out.append(self.parse_statement())

    def parse_statement(self) -> Stmt:
        start = self.pos
        t = self.peek()
        verb = t.upper if t.type == "WORD" else ""
        handler = getattr(self, f"st_{verb.replace('-', '_').lower()}", None) if verb in VERBS else None
        if handler is not None:
            try:
                stmt = handler()
            except _Fallback:
                self.pos = start
                stmt = self.st_opaque()
        else:
            stmt = self.st_opaque()
        stmt.span = (t.line, self.prev_line())
        return stmt

    def st_opaque(self) -> Stmt:
        first = self.next()
        words = [first.text]
        end_word = f"END-{first.upper}"
        # scan to the matching scope terminator if one closes this sentence
        depth_end = None
        i = self.pos
        depth = 0
        while i < len(self.toks) and self.toks[i].type != "PERIOD":
            u = self.toks[i].upper
            if u == first.upper:
                depth += 1
            elif u == end_word:
                if depth == 0:
                    depth_end = i
                    break
                depth -= 1
            i += 1
        if depth_end is not None:
            while self.pos <= depth_end:
                words.append(self.next().text)
        else:
            while True:
                t = self.peek()
                if t is None or t.type == "PERIOD":
                    break
                if t.type == "WORD" and (t.upper in VERBS or t.upper in STOPS):
                    break
                words.append(self.next().text)
        return Opaque(text=" ".join(words))

    # operands -----------------------------------------------------------
    def operand(self) -> Operand:
        t = self.next()
        if t.type in ("STR", "NUM"):
            return lit(t.text)
        if t.type == "OP" and t.text in "+-" and self.at_type("NUM") and self.peek().adjacent:
            return lit(t.text + self.next().text)
        if t.type != "WORD":
            raise ParseError(f"expected operand, found {t.text!r}", t.line)
        if t.upper == "ALL" and self.at_type("STR"):
            return lit(f"ALL {self.next().text}")
        if t.upper in FIGURATIVE:
            return lit(t.upper)
        if t.upper == "FUNCTION":
            raise _Fallback()
        name = t.upper
        quals = []
        while self.at("OF", "IN") and self.at_type("WORD", off=1):
            self.next()
            quals.append(self.next().upper)
        subs: list[Operand] = []
        refmod: list[Operand] = []
        while self.at_type("LPAREN") and self.peek().adjacent:
            self.next()
            group = []
            colon = False
            while not self.at_type("RPAREN"):
                if self.at_type("OP") and self.peek().text == ":":
                    colon = True
                    self.next()
                    continue
                if self.at_type("OP"):
                    raise _Fallback()
                group.append(self.operand())
            self.next()
            if colon:
                refmod = group
            else:
                subs = group
        return Operand(name=name, qualifiers=tuple(quals), subscripts=tuple(subs),
                       refmod=tuple(refmod))

    def operand_list(self, stop_words: set[str]) -> list[Operand]:
        out = []
        while True:
            t = self.peek()
            if t is None or t.type == "PERIOD":
                break
            if t.type == "WORD" and (t.upper in stop_words or t.upper in VERBS or t.upper in STOPS
                                     or t.upper.startswith("END-")):
                break
            if t.type in ("OP", "LPAREN", "RPAREN"):
                break
            out.append(self.operand())
        return out

    def _reject_exception_phrase(self):
        if self.peek() is not None and self.at(*EXCEPTION_WORDS):
            raise _Fallback()

    # verbs --------------------------------------------------------------
    def st_move(self):
        self.next()
        corr = self.skip("CORRESPONDING", "CORR")
        src = self.operand()
        self.expect("TO")
        targets = self.operand_list(set())
        if not targets:
            raise ParseError("MOVE without target", self.prev_line())
        return Move(source=src, targets=targets, corresponding=corr)

    def st_add(self):
        self.next()
        if self.at("CORRESPONDING", "CORR"):
            raise _Fallback()
        addends = self.operand_list({"TO", "GIVING"})
        to, giving = [], []
        if self.skip("TO"):
            to = self.operand_list({"GIVING", "ROUNDED"} | EXCEPTION_WORDS)
        while self.skip("ROUNDED"):
            pass
        if self.skip("GIVING"):
            giving = self.operand_list({"ROUNDED"} | EXCEPTION_WORDS)
            while self.skip("ROUNDED"):
                pass
        self._reject_exception_phrase()
        self.skip("END-ADD")
        if not addends or not (to or giving):
            raise _Fallback()
        return Add(addends=addends, to=to, giving=giving)

    def st_if(self):
        self.next()
        cond = self.condition()
        self.skip("THEN")
        self.open.append("IF")
        try:
            then = self.parse_block()
            orelse = []
            if self.skip("ELSE"):
                orelse = self.parse_block()
            self.skip("END-IF")
        finally:
            self.open.pop()
        return If(cond=cond, then=then, orelse=orelse)

    def st_evaluate(self):
        self.next()
        if self.at("TRUE"):
            self.next()
            subject = None
        else:
            subject = self.arith_or_operand()
        if self.at("ALSO"):
            raise _Fallback()
        arms: list[Arm] = []
        self.open.append("EVALUATE")
        try:
            while self.at("WHEN"):
                objects = []
                other = False
                while self.at("WHEN"):
                    self.next()
                    if self.skip("OTHER"):
                        other = True
                        break
                    objects.append(self.selection_object(subject))
                    if self.at("ALSO"):
                        raise _Fallback()
                body = self.parse_block()
                arms.append(Arm(tuple(objects), body, other))
                if other:
                    break
            self.skip("END-EVALUATE")
        finally:
            self.open.pop()
        return Evaluate(subject=subject, arms=arms)

    def selection_object(self, subject):
        if subject is None:
            return self.condition()
        if self.skip("ANY"):
            return "ANY"
        if self.at("NOT"):
            raise _Fallback()
        first = self.operand()
        if self.skip("THRU", "THROUGH"):
            return ("THRU", first, self.operand())
        return first

    def _perform_loop_phrase(self, st: Perform):
        if self.skip("WITH"):
            self.expect("TEST")
            st.test_after = self.expect("BEFORE", "AFTER").upper == "AFTER"
        elif self.at("TEST"):
            self.next()
            st.test_after = self.expect("BEFORE", "AFTER").upper == "AFTER"
        if self.skip("VARYING"):
            var = self.operand()
            self.expect("FROM")
            frm = self.operand()
            self.expect("BY")
            by = self.operand()
            st.varying = (var, frm, by)
            self.expect("UNTIL")
            st.until = self.condition()
            if self.at("AFTER"):
                raise _Fallback()
            return
        if self.skip("UNTIL"):
            st.until = self.condition()
            return
        t = self.peek()
        if t is not None and t.type in ("NUM", "WORD") and self.at("TIMES", off=1):
            st.times = self.operand()
            self.next()

    def st_perform(self):
        self.next()
        st = Perform()
        t = self.peek()
        inline = (t is None or t.type == "PERIOD" or self.at("UNTIL", "VARYING", "WITH", "TEST")
                  or (t.type == "WORD" and t.upper in VERBS)
                  or (t.type in ("NUM", "WORD") and self.at("TIMES", off=1)))
        if not inline:
            st.target = self.next().upper
            if self.skip("THRU", "THROUGH"):
                st.thru = self.next().upper
            self._perform_loop_phrase(st)
            return st
        self._perform_loop_phrase(st)
        self.open.append("PERFORM")
        try:
            st.body = self.parse_block()
            if not self.skip("END-PERFORM"):
                raise ParseError("inline PERFORM without END-PERFORM", self.line())
        finally:
            self.open.pop()
        return st

    def st_go(self):
        self.next()
        self.skip("TO")
        target = self.next().upper
        if self.at("DEPENDING") or (self.at_type("WORD") and not self.at(*VERBS)
                                    and not self.at(*STOPS) and not self.at_type("PERIOD")):
            raise _Fallback()
        return GoTo(target=target)

    def st_goback(self):
        self.next()
        return Goback(verb="GOBACK")

    def st_stop(self):
        self.next()
        if not self.skip("RUN"):
            raise _Fallback()
        return Goback(verb="STOP RUN")

    def st_exit(self):
        self.next()
        if self.skip("PROGRAM"):
            return Goback(verb="EXIT PROGRAM")
        if self.at("PARAGRAPH", "SECTION", "PERFORM"):
            raise _Fallback()
        return Continue(verb="EXIT")

    def st_continue(self):
        self.next()
        return Continue(verb="CONTINUE")

    def st_next(self):
        self.next()
        if not self.skip("SENTENCE"):
            raise _Fallback()
        return Continue(verb="NEXT SENTENCE")

    def st_call(self):
        self.next()
        callee = self.operand()
        using = []
        if self.skip("USING"):
            mode = "REFERENCE"
            while True:
                if self.skip("BY"):
                    mode = self.expect("REFERENCE", "CONTENT", "VALUE").upper
                    continue
                t = self.peek()
                if t is None or t.type != "WORD" and t.type not in ("STR", "NUM"):
                    break
                if t.upper in VERBS or t.upper in STOPS or t.upper in EXCEPTION_WORDS \
                        or t.upper in ("END-CALL", "RETURNING", "GIVING"):
                    break
                using.append((mode, self.operand()))
        if self.at("RETURNING", "GIVING"):
            raise _Fallback()
        self._reject_exception_phrase()
        self.skip("END-CALL")
        return Call(callee=callee, using=using)

    def st_exec(self):
        self.next()
        if not (self.at("CICS") and self.at("XCTL", "LINK", off=1)):
            raise _Fallback()
        self.next()
        cmd = self.next().upper
        options: list[tuple[str, Optional[Operand]]] = []
        while not self.at("END-EXEC"):
            t = self.next()
            if t.type != "WORD":
                raise _Fallback()
            arg = None
            if self.at_type("LPAREN"):
                self.next()
                arg = self.operand()
                if not self.at_type("RPAREN"):
                    raise _Fallback()
                self.next()
            options.append((t.upper, arg))
        self.next()
        prog = next((o for k, o in options if k == "PROGRAM"), None)
        if prog is None:
            raise _Fallback()
        return Call(callee=prog, transfer=(cmd == "XCTL"), cics=cmd, options=options)

    def st_string(self):
        self.next()
        parts = []
        pending: list[Operand] = []
        while not self.at("INTO"):
            if self.skip("DELIMITED"):
                self.skip("BY")
                if self.skip("SIZE"):
                    delim: Union[str, Operand] = "SIZE"
                else:
                    delim = self.operand()
                if not pending:
                    raise ParseError("DELIMITED without source", self.prev_line())
                parts.extend((p, delim) for p in pending)
                pending = []
                continue
            if self.peek() is None or self.at_type("PERIOD"):
                raise ParseError("STRING without INTO", self.prev_line())
            pending.append(self.operand())
        if pending:
            parts.extend((p, "SIZE") for p in pending)
        self.next()
        into = self.operand()
        pointer = None
        if self.skip("WITH"):
            self.expect("POINTER")
            pointer = self.operand()
        elif self.skip("POINTER"):
            pointer = self.operand()
        self._reject_exception_phrase()
        self.skip("END-STRING")
        return StringStmt(parts=parts, into=into, pointer=pointer)

    def st_set(self):
        self.next()
        targets = []
        while not self.at("TO", "UP", "DOWN"):
            if self.peek() is None or self.at_type("PERIOD"):
                raise _Fallback()
            op = self.operand()
            item = self.items.get(op.name) if op.name else None
            if item is not None and item.level == 88:
                targets.append(CondName(item.name, item.parent, item.values))
            else:
                targets.append(op)
        word = self.next().upper
        if word == "TO":
            if self.at("TRUE", "FALSE"):
                return SetStmt(targets=targets, mode=self.next().upper)
            return SetStmt(targets=targets, mode="TO", value=self.operand())
        self.expect("BY")
        return SetStmt(targets=targets, mode=word, value=self.operand())

    def st_display(self):
        self.next()
        ops = self.operand_list({"UPON", "WITH", "NO"})
        upon = None
        if self.skip("UPON"):
            upon = self.next().upper
        if self.at("WITH", "NO"):
            raise _Fallback()
        return Display(operands=ops, upon=upon)

    # conditions ---------------------------------------------------------
    def arith_or_operand(self):
        items: list = [self.operand()]
        while self.at_type("OP") and self.peek().text in ("+", "-", "*", "/", "**"):
            items.append(self.next().text)
            items.append(self.operand())
        return items[0] if len(items) == 1 else Arith(tuple(items))

    def rel_operator(self) -> Optional[str]:
        """Consume a relational operator if present; returns its symbol."""
        save = self.pos
        self.skip("IS")
        negate = self.skip("NOT")
        t = self.peek()
        op = None
        if t is not None and t.type == "OP" and t.text in (">", "<", "=", ">=", "<=", "<>"):
            self.next()
            op = t.text
        elif self.at("GREATER", "LESS"):
            base = ">" if self.next().upper == "GREATER" else "<"
            self.skip("THAN")
            if self.at("OR") and self.at("EQUAL", off=1):
                self.next(); self.next()
                self.skip("TO")
                base += "="
            op = base
        elif self.at("EQUAL", "EQUALS"):
            self.next()
            self.skip("TO")
            op = "="
        if op is None:
            self.pos = save
            return None
        if negate:
            op = {"=": "<>", "<>": "=", ">": "<=", "<": ">=", ">=": "<", "<=": ">"}[op]
        return op

    def condition(self) -> Cond:
        self._last_rel = None
        return self.cond_or()

    def cond_or(self) -> Cond:
        items = [self.cond_and()]
        while self.at("OR"):
            self.next()
            items.append(self.cond_and())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def cond_and(self) -> Cond:
        items = [self.cond_not()]
        while self.at("AND"):
            self.next()
            items.append(self.cond_not())
        return items[0] if len(items) == 1 else And(tuple(items))

    def cond_not(self) -> Cond:
        if self.at("NOT"):
            # "NOT = x" inside an abbreviated relation is an operator, not a negation
            save = self.pos
            if self._last_rel is not None:
                op = self.rel_operator()
                if op is not None:
                    right = self.arith_or_operand()
                    rel = Rel(self._last_rel.left, op, right)
                    self._last_rel = rel
                    return rel
                self.pos = save
            self.next()
            return Not(self.cond_not())
        return self.cond_primary()

    def cond_primary(self) -> Cond:
        t = self.peek()
        if t is None:
            raise ParseError("unexpected end of condition", self.prev_line())
        if t.type == "LPAREN":
            self.next()
            saved = self._last_rel
            inner = self.cond_or()
            if not self.at_type("RPAREN"):
                raise ParseError("unbalanced parenthesis in condition", t.line)
            self.next()
            self._last_rel = saved if not isinstance(inner, Rel) else inner
            return inner
        # abbreviated combined relation: operator or bare object continues the last relation
        if self._last_rel is not None:
            op = self.rel_operator()
            if op is not None:
                rel = Rel(self._last_rel.left, op, self.arith_or_operand())
                self._last_rel = rel
                return rel
            if t.type in ("STR", "NUM") or (t.type == "WORD" and t.upper in FIGURATIVE):
                rel = Rel(self._last_rel.left, self._last_rel.op, self.operand())
                self._last_rel = rel
                return rel
        left = self.arith_or_operand()
        op = self.rel_operator()
        if op is not None:
            rel = Rel(left, op, self.arith_or_operand())
            self._last_rel = rel
            return rel
        # class condition
        save = self.pos
        self.skip("IS")
        neg = self.skip("NOT")
        if self.at(*CLASS_WORDS) and isinstance(left, Operand):
            return ClassTest(left, self.next().upper, neg)
        self.pos = save
        if isinstance(left, Operand) and left.name:
            item = self.items.get(left.name)
            if item is not None and item.level == 88:
                return CondName(item.name, item.parent, item.values)
            return CondName(left.name)
        raise ParseError(f"cannot read condition at {t.text!r}", t.line)


def parse(source: str) -> Program:
    """Parse COBOL source (fixed or free format) into a Program."""
    tokens = tokenize(source)
    return Parser(tokens, len(source.splitlines())).parse_program()


def parse_file(path: Union[str, Path], copy_dirs: Sequence[Union[str, Path]] = ()) -> Program:
    path = Path(path)
    text = path.read_text()
    dirs = list(copy_dirs) or [path.parent]
    return parse(expand_copybooks(text, dirs))
