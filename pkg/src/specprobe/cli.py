"""Command-line entry point: ``specprobe <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or config, 2 provider failure,
3 frozen test set violated.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import jsonschema

from . import __version__
from .cobol import CopybookError, ParseError, parse_file
from .graphs import emit_dot, extract
from .judgement import SpecDocument, judge_all
from .loop import FrozenSetViolation, StoppingConfig, load_run, run_loop
from .model import (MixtureWeights, TransitionContingency, content_hash, fidelity,
                    probes_from_json, probes_to_json, ValidationError)
from .montecarlo import SimConfig, monte_carlo
from .probes import (SYMBOLIC, ObservabilityFilter, build_pools, emit_probes, enumerate_facts,
                     sample_mixture, stability_harness)
from .providers.base import (ProviderError, Providers, UsageLedger, build_providers,
                             load_config_file, parse_bindings)
from .seeding import derive_seed
from .stats import bootstrap_fixed_point, hoeffding_envelope, trajectory_table

EXIT_OK, EXIT_INVALID, EXIT_PROVIDER, EXIT_FROZEN = 0, 1, 2, 3
CONFIG_ENV = "SPECPROBE_CONFIG"

_ROLE_SCHEMA = {
    "type": "object",
    "properties": {
        "backend": {"enum": ["http", "simulated", "template"]},
        "endpoint": {"type": "string"},
        "model": {"type": "string"},
        "prompt": {"type": "string"},
        "api_key_env": {"type": "string"},
        "temperature": {"type": "number", "minimum": 0},
        "timeout": {"type": "number", "exclusiveMinimum": 0},
    },
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "programs": {"type": "array", "items": {"type": "string"}},
        "copy_dirs": {"type": "array", "items": {"type": "string"}},
        "spec": {"type": "string"},
        "n_train": {"type": "integer", "minimum": 1},
        "n_test": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
        "run_id": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "weights": {
            "type": "object",
            "properties": {k: {"type": "number", "minimum": 0, "maximum": 1}
                           for k in ("alpha", "beta_cfg", "beta_dfg", "beta_sdg")},
            "required": ["alpha"],
            "additionalProperties": False,
        },
        "stopping": {
            "type": "object",
            "properties": {
                "delta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "delta_max": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
                "fixed": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "roles": {"type": "object",
                  "properties": {r: _ROLE_SCHEMA for r in
                                 ("generator", "informalizer", "judge", "comparator", "reviser")},
                  "additionalProperties": False},
        "simulation": {
            "type": "object",
            "properties": {
                "n_facts": {"type": "integer", "minimum": 1},
                "f0": {"type": "number", "minimum": 0, "maximum": 1},
                "f_wrong": {"type": "number", "minimum": 0, "maximum": 1},
                "pi": {"type": "number", "minimum": 0, "maximum": 1},
                "r": {"type": "number", "minimum": 0, "maximum": 1},
                "d": {"type": "number", "minimum": 0, "maximum": 1},
                "d_test": {"type": "number", "minimum": 0, "maximum": 1},
                "negative_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
            "additionalProperties": False,
        },
    },
    "required": ["seed", "n_train", "n_test"],
    "additionalProperties": False,
}


class CliError(Exception):
    pass


def validate_run_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(f"invalid run config at {where}: {exc.message}") from exc
    uses_sim = any(r.get("backend") == "simulated" for r in cfg.get("roles", {}).values())
    if uses_sim and "simulation" not in cfg:
        raise CliError("roles bound to the simulated backend need a [simulation] table")
    if not uses_sim and not cfg.get("programs"):
        raise CliError("a run over real programs needs at least one entry in programs")
    if not uses_sim and not cfg.get("spec"):
        raise CliError("a run over real programs needs an initial spec path")
    return cfg


def _load_config(path: Optional[str]) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        raise CliError(f"no config given (use --config or set {CONFIG_ENV})")
    try:
        return load_config_file(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc


def _sim_config(sim: dict, n_train: int, n_test: int, stopping: StoppingConfig) -> SimConfig:
    return SimConfig(**sim, n_train=n_train, n_test=n_test, stopping=stopping)


def _providers(cfg: dict, seed: int, probe_pool=None, cache_dir=None):
    """(providers, world) for a config with an optional [simulation] table."""
    bindings = parse_bindings(cfg)
    world = None
    if any(b.backend == "simulated" for b in bindings.values()):
        if "simulation" not in cfg:
            raise CliError("roles bound to the simulated backend need a [simulation] table")
        world = _sim_config(cfg["simulation"], 1, 1, StoppingConfig()).world(seed)
    return build_providers(bindings, world, cache_dir, UsageLedger(), probe_pool=probe_pool), world


def _bundles(paths, copy_dirs):
    out = []
    for p in paths:
        dirs = list(copy_dirs) + [str(Path(p).parent)]
        out.append(extract(parse_file(p, dirs)))
    return out


def _write(out: Optional[str], text: str):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _weights(args) -> MixtureWeights:
    return MixtureWeights(args.alpha, args.beta_cfg, args.beta_dfg, args.beta_sdg)


# ------------------------------------------------------------- subcommands

def cmd_parse(args) -> int:
    prog = parse_file(args.program, args.copy_dir)
    _write(args.out, _json(prog.to_dict()))
    return EXIT_OK


def cmd_extract_graphs(args) -> int:
    bundle = extract(parse_file(args.program, args.copy_dir))
    graphs = ("acfg", "dfg", "sdg") if args.graph == "all" else (args.graph,)
    if args.emit == "dot":
        objs = {"acfg": bundle.acfg, "dfg": bundle.dfg, "sdg": bundle.sdg}
        if args.out and len(graphs) > 1:
            for g in graphs:
                _write(str(Path(args.out) / f"{bundle.program.program_id}.{g}.dot"),
                       emit_dot(objs[g], bundle.acfg))
        else:
            _write(args.out, "\n".join(emit_dot(objs[g], bundle.acfg) for g in graphs))
    else:
        d = bundle.to_dict()
        _write(args.out, _json({g: d[g] for g in graphs} | {"program_id": bundle.program.program_id}))
    return EXIT_OK


def cmd_gen_probes(args) -> int:
    bundles = _bundles(args.program, args.copy_dir)
    cfg = load_config_file(args.provider) if args.provider else {}
    providers, _ = _providers(cfg, args.seed)
    rejected = []
    pools = {c: [] for c in SYMBOLIC}
    for b in bundles:
        filt = ObservabilityFilter.for_program(b.program)
        for ch in SYMBOLIC:
            probes, rej = emit_probes(enumerate_facts(b, ch), filt, providers.informalizer,
                                      args.workers)
            pools[ch] += probes
            rejected += [{"fact": f.to_dict(), "terms": list(v.rejected_terms)} for f, v in rej]
    if args.n is None:
        out = [p for ch in SYMBOLIC for p in pools[ch]]
    else:
        spec_text = Path(args.spec).read_text() if args.spec else None
        if providers.generator.__class__.__name__ == "TemplateBackend":
            providers.generator.probe_pool = [p for ch in SYMBOLIC for p in pools[ch]]
        out = sample_mixture(pools, _weights(args), args.n, args.seed, providers.generator,
                             spec_text, prefix=args.prefix)
    if args.emit == "csv":
        _write(args.out, _csv([p.to_dict() | {"meta": json.dumps(p.meta, sort_keys=True)}
                               for p in out]))
    else:
        _write(args.out, _json(probes_to_json(out)))
    if args.rejected:
        _write(args.rejected, _json(rejected))
    print(f"{len(out)} probes; {len(rejected)} facts rejected by the observability filter",
          file=sys.stderr)
    return EXIT_OK


def cmd_judge(args) -> int:
    spec = SpecDocument.from_file(args.spec)
    probes = probes_from_json(json.loads(Path(args.probes).read_text()))
    cfg = load_config_file(args.provider) if args.provider else {}
    providers, _ = _providers(cfg, args.seed)
    judged = judge_all(spec, probes, providers.judge, providers.comparator, args.workers)
    rep = fidelity({j.probe.id: j.verdict for j in judged})
    payload = {"report": rep.to_dict(False), "verdicts": [j.to_dict() for j in judged]}
    if args.emit == "csv":
        _write(args.out, _csv([{"id": j.probe.id, "verdict": j.verdict.value,
                                "comparison": j.comparison or "", "answer": j.answer.answer or ""}
                               for j in judged]))
    else:
        _write(args.out, _json(payload))
    print(f"F={float(rep.F):.4f} C={float(rep.C):.4f} G={float(rep.G):.4f} n={rep.n}",
          file=sys.stderr)
    return EXIT_OK


def cmd_iterate(args) -> int:
    cfg = validate_run_config(_load_config(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.workers is not None:
        cfg["workers"] = args.workers
    seed = cfg["seed"]
    weights = MixtureWeights.from_dict(cfg.get("weights", {"alpha": 1.0}))
    stopping = StoppingConfig.from_dict(cfg.get("stopping", {}))
    run_id = cfg.get("run_id") or f"seed{seed}-{content_hash(cfg)[:10]}"
    run_dir = Path(args.out or cfg.get("output_dir", "run")) / run_id
    pools = {c: [] for c in SYMBOLIC}
    if cfg.get("programs"):
        bundles = _bundles(cfg["programs"], cfg.get("copy_dirs", []))
        inf_providers, _ = _providers(cfg, seed)
        pools = build_pools(bundles, inf_providers.informalizer, workers=cfg.get("workers", 4))
    flat = [p for ch in SYMBOLIC for p in pools[ch]]
    providers, world = _providers(cfg, seed, probe_pool=flat,
                                  cache_dir=str(run_dir / "cache") if args.cache else None)
    if cfg.get("spec"):
        spec = Path(cfg["spec"]).read_text()
    elif world is not None:
        spec = world.spec_text()
    else:
        raise CliError("no initial spec")
    result = run_loop(pools, spec, weights, cfg["n_train"], cfg["n_test"], stopping, providers,
                      seed, run_dir, cfg.get("workers", 4), config=cfg)
    print(_json({"run_dir": str(run_dir), "status": result.status, "k_star": result.k_star,
                 "stop_reason": result.stop_reason, "test_trajectory": result.test_trajectory}),
          end="")
    return EXIT_PROVIDER if result.status == "provider_error" else EXIT_OK


def _parse_window(text: Optional[str]):
    if not text:
        return None
    try:
        a, b = text.split("..")
        a, b = int(a), int(b)
    except ValueError as exc:
        raise CliError(f"--fit-window expects A..B, got {text!r}") from exc
    if a < 0 or b < a:
        raise CliError(f"invalid fit window {text!r}")
    return a, b


def _contingencies_from(path: Path) -> tuple[list[TransitionContingency], dict]:
    if path.is_dir():
        run = load_run(path)
        conts = [TransitionContingency.from_dict(it["contingency"]) for it in run["iterations"]
                 if it.get("contingency")]
        return conts, run
    data = json.loads(path.read_text())
    rows = data["contingencies"] if isinstance(data, dict) else data
    return [TransitionContingency.from_dict(r) for r in rows], {}


def cmd_analyze(args) -> int:
    conts, run = _contingencies_from(Path(args.run))
    if not conts:
        raise CliError("no transitions to analyse")
    window = _parse_window(args.fit_window)
    table = trajectory_table(conts)
    out = {"trajectory": table}
    n_test = conts[0].n
    one, two = hoeffding_envelope(n_test, args.confidence_delta)
    gaps = [it["fidelity"]["gap"] for it in run.get("iterations", []) if it.get("fidelity")]
    out["envelope"] = {"n_test": n_test, "one_sided": one, "two_sided": two,
                       "gaps": gaps, "exceeded": [abs(g) > two for g in gaps]}
    if window is not None:
        a, b = window
        if b >= len(conts):
            raise CliError(f"fit window {a}..{b} exceeds the {len(conts)} recorded transitions")
        fc = bootstrap_fixed_point(conts[a:b + 1], B=args.bootstrap, seed=args.seed,
                                   fit_window=window, horizon=len(conts) - 1 - b)
        out["forecast"] = fc.to_dict()
    if args.emit == "csv":
        text = _csv(table)
    else:
        text = _json(out)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_stability(args) -> int:
    bundles = _bundles(args.program, args.copy_dir)
    cfg = load_config_file(args.provider) if args.provider else {}
    providers, _ = _providers(cfg, args.seed)
    facts = []
    for b in bundles:
        filt = ObservabilityFilter.for_program(b.program)
        for ch in SYMBOLIC:
            facts += [f for f in enumerate_facts(b, ch) if filt(f).accepted]
    rep = stability_harness(facts, providers.informalizer, providers.comparator)
    _write(args.out, _json(rep.to_dict()))
    return EXIT_OK


def cmd_simulate(args) -> int:
    n_train = args.n_train if args.n_train is not None else 10 * args.facts
    stopping = StoppingConfig(args.delta, args.delta_max, args.iters, fixed=not args.adaptive)
    cfg = SimConfig(args.facts, args.f0, args.f_wrong, args.pi, args.r, args.d, args.d_test,
                    args.negative_fraction, n_train, args.n_test, stopping)
    seeds = [derive_seed(args.seed, "mc", i) for i in range(args.seeds)]
    res = monte_carlo(cfg, seeds)
    summary = {"config": cfg.to_dict(), "seed": args.seed, **res.summary()}
    if args.emit == "csv":
        rows = [{"k": k, "mean_test_fidelity": v} for k, v in enumerate(res.mean_trajectory)]
        text = _csv(rows)
    else:
        if args.runs:
            summary["runs"] = [r.to_dict() for r in res.runs]
        text = _json(summary)
    _write(args.out, text)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specprobe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"specprobe {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, workers=False):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if workers:
            sp.add_argument("--workers", type=int, default=4)
        sp.add_argument("--out", help="output file (stdout if omitted)")

    sp = sub.add_parser("parse", help="parse a COBOL program and print its AST as JSON")
    sp.add_argument("program")
    sp.add_argument("--copy-dir", action="append", default=[])
    common(sp, seed=False)
    sp.set_defaults(fn=cmd_parse)

    sp = sub.add_parser("extract-graphs", help="control-flow, data-flow and dependence graphs")
    sp.add_argument("program")
    sp.add_argument("--copy-dir", action="append", default=[])
    sp.add_argument("--graph", choices=["acfg", "dfg", "sdg", "all"], default="all")
    sp.add_argument("--emit", choices=["json", "dot"], default="json")
    common(sp, seed=False)
    sp.set_defaults(fn=cmd_extract_graphs)

    sp = sub.add_parser("gen-probes", help="graph facts -> filtered, phrased probes")
    sp.add_argument("program", nargs="+")
    sp.add_argument("--copy-dir", action="append", default=[])
    sp.add_argument("--provider", help="role bindings (TOML or JSON)")
    sp.add_argument("--n", type=int, help="draw n probes from the mixture instead of all")
    sp.add_argument("--alpha", type=float, default=0.0)
    sp.add_argument("--beta-cfg", type=float, default=1 / 3)
    sp.add_argument("--beta-dfg", type=float, default=1 / 3)
    sp.add_argument("--beta-sdg", type=float, default=1 / 3)
    sp.add_argument("--spec", help="spec text handed to the generator role")
    sp.add_argument("--prefix", default="probe")
    sp.add_argument("--rejected", help="write facts the filter rejected to this file")
    sp.add_argument("--emit", choices=["json", "csv"], default="json")
    common(sp, workers=True)
    sp.set_defaults(fn=cmd_gen_probes)

    sp = sub.add_parser("judge", help="judge probes against a spec")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--probes", required=True)
    sp.add_argument("--provider")
    sp.add_argument("--emit", choices=["json", "csv"], default="json")
    common(sp, workers=True)
    sp.set_defaults(fn=cmd_judge)

    sp = sub.add_parser("iterate", help="run the refinement loop from a run config")
    sp.add_argument("--config", help=f"run config (TOML/JSON); defaults to ${CONFIG_ENV}")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--cache", action="store_true", help="cache model responses in the run dir")
    sp.add_argument("--out", help="parent directory for run directories")
    sp.set_defaults(fn=cmd_iterate)

    sp = sub.add_parser("analyze", help="rates, envelope and plateau forecast for a run")
    sp.add_argument("run", help="run directory or JSON file of contingencies")
    sp.add_argument("--fit-window", help="transition range A..B for the plateau forecast")
    sp.add_argument("--bootstrap", type=int, default=2000)
    sp.add_argument("--confidence-delta", type=float, default=0.05)
    sp.add_argument("--emit", choices=["json", "csv"], default="json")
    common(sp)
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("stability", help="phrase every fact twice and measure agreement")
    sp.add_argument("program", nargs="+")
    sp.add_argument("--copy-dir", action="append", default=[])
    sp.add_argument("--provider")
    common(sp)
    sp.set_defaults(fn=cmd_stability)

    sp = sub.add_parser("simulate", help="Monte Carlo runs in the synthetic world")
    sp.add_argument("--pi", type=float, default=0.634)
    sp.add_argument("--r", type=float, default=0.052)
    sp.add_argument("--facts", type=int, default=1000)
    sp.add_argument("--f0", type=float, default=0.59)
    sp.add_argument("--f-wrong", type=float, default=None)
    sp.add_argument("--d", type=float, default=0.0, help="train drift (echo probability)")
    sp.add_argument("--d-test", type=float, default=0.0)
    sp.add_argument("--negative-fraction", type=float, default=0.0)
    sp.add_argument("--n-train", type=int, default=None, help="default: 10 x facts")
    sp.add_argument("--n-test", type=int, default=785)
    sp.add_argument("--iters", type=int, default=50)
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--adaptive", action="store_true", help="apply the plateau/gap stopping rule")
    sp.add_argument("--delta", type=float, default=0.005)
    sp.add_argument("--delta-max", type=float, default=None)
    sp.add_argument("--runs", action="store_true", help="include every run in the output")
    sp.add_argument("--emit", choices=["json", "csv"], default="json")
    common(sp)
    sp.set_defaults(fn=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except FrozenSetViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FROZEN
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (CliError, ParseError, CopybookError, ValidationError, ValueError, KeyError,
            OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
