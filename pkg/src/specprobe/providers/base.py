"""Role bindings, prompt rendering, retries, response cache and usage accounting.

Five roles consume a language model: generator, informalizer, judge,
comparator and reviser. Each is bound to one backend: ``http`` (a
chat-completions endpoint), ``simulated`` (the synthetic world) or
``template`` (deterministic rules, no model at all).
"""
from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional, Union

ROLES = ("generator", "informalizer", "judge", "comparator", "reviser")
BACKENDS = ("http", "simulated", "template")


class Role(str, Enum):
    GENERATOR = "generator"
    INFORMALIZER = "informalizer"
    JUDGE = "judge"
    COMPARATOR = "comparator"
    REVISER = "reviser"


class ProviderError(RuntimeError):
    """A role call failed and should not be retried."""


class RetriableError(ProviderError):
    """Transient failure (timeout, rate limit, 5xx)."""


class PromptError(ValueError):
    pass


def with_retries(fn: Callable[[], Any], attempts: int = 3, base_delay: float = 0.5,
                 sleep: Callable[[float], None] = time.sleep):
    """Call ``fn`` up to ``attempts`` times with exponential backoff on RetriableError."""
    for i in range(attempts):
        try:
            return fn()
        except RetriableError:
            if i == attempts - 1:
                raise
            sleep(base_delay * (2 ** i))


# ---------------------------------------------------------------- prompts

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


def render_prompt(template: str, **values) -> str:
    """Substitute ``{name}`` placeholders; any placeholder left unfilled is an error."""
    missing = sorted({m.group(1) for m in _PLACEHOLDER.finditer(template)} - set(values))
    if missing:
        raise PromptError(f"unfilled prompt placeholders: {', '.join(missing)}")
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), template)


def load_prompt(name_or_path: Union[str, Path]) -> str:
    """A bundled template by role name (e.g. ``judge``) or a template file path."""
    p = Path(name_or_path)
    if p.suffix and p.exists():
        return p.read_text()
    fname = name_or_path if str(name_or_path).endswith(".md") else f"{name_or_path}.md"
    return resources.files("specprobe").joinpath("data").joinpath("prompts").joinpath(fname).read_text()


# ------------------------------------------------------------------ usage

@dataclass
class UsageRecord:
    role: str
    input_tokens: int
    output_tokens: int
    seconds: float
    iteration: Optional[int] = None
    cached: bool = False


class UsageLedger:
    """Append-only call/token/time accounting, safe to share between threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[UsageRecord] = []
        self.iteration: Optional[int] = None

    def record(self, role: str, input_tokens: int, output_tokens: int, seconds: float = 0.0,
               cached: bool = False):
        with self._lock:
            self._records.append(UsageRecord(str(role), int(input_tokens), int(output_tokens),
                                             float(seconds), self.iteration, cached))

    @property
    def records(self) -> list[UsageRecord]:
        with self._lock:
            return list(self._records)

    def totals(self) -> dict:
        recs = self.records
        return {"calls": sum(1 for r in recs if not r.cached),
                "cached_calls": sum(1 for r in recs if r.cached),
                "input_tokens": sum(r.input_tokens for r in recs),
                "output_tokens": sum(r.output_tokens for r in recs),
                "seconds": sum(r.seconds for r in recs)}

    def per_iteration(self) -> dict:
        out: dict = {}
        for r in self.records:
            row = out.setdefault(r.iteration, {"calls": 0, "input_tokens": 0,
                                               "output_tokens": 0, "seconds": 0.0})
            row["calls"] += 0 if r.cached else 1
            row["input_tokens"] += r.input_tokens
            row["output_tokens"] += r.output_tokens
            row["seconds"] += r.seconds
        return out

    def to_dict(self) -> dict:
        return {"totals": self.totals(),
                "per_iteration": {str(k): v for k, v in self.per_iteration().items()}}


def synthetic_tokens(text: str) -> int:
    """Token count stand-in for offline backends: about four characters per token."""
    return max(1, (len(text) + 3) // 4)


# ------------------------------------------------------------------ cache

class ResponseCache:
    """Disk cache keyed by (role, prompt hash, model)."""

    def __init__(self, directory: Union[str, Path]):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(role: str, prompt: str, model: str) -> str:
        h = hashlib.sha256()
        for part in (role, model, prompt):
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()

    def get(self, role: str, prompt: str, model: str) -> Optional[dict]:
        p = self.dir / f"{self.key(role, prompt, model)}.json"
        if not p.exists():
            return None
        return json.loads(p.read_text())

    def put(self, role: str, prompt: str, model: str, entry: dict):
        p = self.dir / f"{self.key(role, prompt, model)}.json"
        tmp = p.with_suffix(".tmp")
        tmp.write_text(json.dumps(entry, sort_keys=True))
        tmp.replace(p)


# ---------------------------------------------------------------- binding

@dataclass
class RoleBinding:
    role: str
    backend: str = "template"
    endpoint: Optional[str] = None
    model: Optional[str] = None
    prompt: Optional[str] = None
    api_key_env: Optional[str] = None
    temperature: float = 0.0
    timeout: float = 60.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r} for role {self.role}")
        if self.backend == "http" and not (self.endpoint and self.model):
            raise ValueError(f"http binding for {self.role} needs endpoint and model")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v not in (None, {})}


def parse_bindings(cfg: dict) -> dict[str, RoleBinding]:
    """Bindings from a ``{"roles": {role: {...}}}`` mapping; unbound roles use templates."""
    roles = cfg.get("roles", {})
    unknown = set(roles) - set(ROLES)
    if unknown:
        raise ValueError(f"unknown roles in provider config: {sorted(unknown)}")
    out = {}
    for role in ROLES:
        spec = dict(roles.get(role, {}))
        params = {k: spec.pop(k) for k in list(spec) if k not in RoleBinding.__dataclass_fields__}
        spec.setdefault("backend", "template")
        spec.pop("role", None)
        out[role] = RoleBinding(role=role, params={**spec.pop("params", {}), **params}, **spec)
    return out


def load_config_file(path: Union[str, Path]) -> dict:
    """TOML or JSON config as a dict."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(raw)
    try:
        import tomllib  # Python 3.11+
    except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
        import tomli as tomllib
    return tomllib.loads(raw.decode("utf-8"))


class Providers:
    """One backend object per role plus the shared usage ledger."""

    def __init__(self, backends: dict[str, Any], ledger: Optional[UsageLedger] = None,
                 bindings: Optional[dict[str, RoleBinding]] = None):
        missing = set(ROLES) - set(backends)
        if missing:
            raise ValueError(f"roles without a backend: {sorted(missing)}")
        self.backends = dict(backends)
        self.ledger = ledger or UsageLedger()
        self.bindings = bindings or {}

    def __getitem__(self, role: str):
        return self.backends[str(role.value if isinstance(role, Role) else role)]

    @property
    def generator(self):
        return self.backends["generator"]

    @property
    def informalizer(self):
        return self.backends["informalizer"]

    @property
    def judge(self):
        return self.backends["judge"]

    @property
    def comparator(self):
        return self.backends["comparator"]

    @property
    def reviser(self):
        return self.backends["reviser"]


def build_providers(bindings: dict[str, RoleBinding], world=None,
                    cache_dir: Optional[Union[str, Path]] = None,
                    ledger: Optional[UsageLedger] = None, transport=None,
                    probe_pool=None) -> Providers:
    from .http import HttpBackend
    from .simulated import SimulatedBackend
    from .template import TemplateBackend

    ledger = ledger or UsageLedger()
    cache = ResponseCache(cache_dir) if cache_dir else None
    backends = {}
    for role, b in bindings.items():
        if b.backend == "http":
            backends[role] = HttpBackend(b, ledger, cache=cache, transport=transport)
        elif b.backend == "simulated":
            if world is None:
                raise ValueError(f"role {role} is bound to the simulated backend but no world is given")
            backends[role] = SimulatedBackend(world, ledger=ledger, role=role, **b.params)
        else:
            backends[role] = TemplateBackend(ledger=ledger, role=role, probe_pool=probe_pool)
    return Providers(backends, ledger, bindings)
