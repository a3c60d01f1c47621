import json

import pytest

from specprobe import loop as loop_mod
from specprobe.cli import (EXIT_FROZEN, EXIT_INVALID, EXIT_OK, EXIT_PROVIDER, main,
                           validate_run_config, CliError)
from specprobe.loop import FrozenSetViolation

from reference import TRANSITIONS


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


SIM_CONFIG = {
    "seed": 4, "n_train": 200, "n_test": 100, "workers": 1, "run_id": "sim",
    "weights": {"alpha": 1.0},
    "stopping": {"delta": 0.005, "max_iters": 5},
    "roles": {r: {"backend": "simulated"} for r in
              ("generator", "informalizer", "judge", "comparator", "reviser")},
    "simulation": {"n_facts": 150, "f0": 0.5, "pi": 0.6, "r": 0.03},
}


def write_config(tmp_path, cfg, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_parse(capsys, fixtures_dir):
    code, out, _ = run(capsys, "parse", str(fixtures_dir / "calcdisc.cbl"))
    assert code == EXIT_OK and json.loads(out)["program_id"] == "CALCDISC"


def test_parse_error_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.cbl"
    bad.write_text("IDENTIFICATION DIVISION.\nPROGRAM-ID. B.\nPROCEDURE DIVISION.\nA.\n  END-IF.\n")
    code, _, err = run(capsys, "parse", str(bad))
    assert code == EXIT_INVALID and "END-IF" in err


def test_extract_graphs_json_and_dot(capsys, fixtures_dir, tmp_path):
    code, out, _ = run(capsys, "extract-graphs", str(fixtures_dir / "calcdisc.cbl"), "--graph", "sdg")
    d = json.loads(out)
    assert code == EXIT_OK and set(d) == {"sdg", "program_id"}
    code, _, _ = run(capsys, "extract-graphs", str(fixtures_dir / "coadm01c.cbl"), "--emit", "dot",
                     "--out", str(tmp_path / "dots"))
    assert code == EXIT_OK
    assert sorted(p.name for p in (tmp_path / "dots").iterdir()) == [
        "COADM01C.acfg.dot", "COADM01C.dfg.dot", "COADM01C.sdg.dot"]


def test_gen_probes_and_judge(capsys, fixtures_dir, tmp_path):
    probes = tmp_path / "probes.json"
    code, _, err = run(capsys, "gen-probes", str(fixtures_dir / "calcdisc.cbl"), "--n", "25",
                       "--seed", "2", "--out", str(probes), "--rejected", str(tmp_path / "rej.json"))
    assert code == EXIT_OK and "25 probes" in err
    data = json.loads(probes.read_text())
    assert len(data) == 25 and data[0]["id"] == "probe-00000"
    code, out, err = run(capsys, "judge", "--spec", str(fixtures_dir / "calcdisc_spec.md"),
                         "--probes", str(probes), "--workers", "2")
    rep = json.loads(out)["report"]
    assert code == EXIT_OK and rep["n"] == 25
    assert rep["agree"] + rep["contradict"] + rep["gap"] == 25
    assert err.startswith("F=")


def test_gen_probes_csv(capsys, fixtures_dir):
    code, out, _ = run(capsys, "gen-probes", str(fixtures_dir / "thru.cbl"), "--emit", "csv")
    assert code == EXIT_OK and out.splitlines()[0].startswith("id,question,truth")


def test_iterate_and_analyze(capsys, tmp_path, monkeypatch):
    cfg = write_config(tmp_path, SIM_CONFIG)
    monkeypatch.setenv("SPECPROBE_CONFIG", cfg)
    code, out, _ = run(capsys, "iterate", "--out", str(tmp_path / "runs"))
    res = json.loads(out)
    assert code == EXIT_OK and res["status"] in ("converged", "max_iters", "gap_exceeded")
    rd = tmp_path / "runs" / "sim"
    assert (rd / "summary.json").exists() and (rd / "frozen_test.json.sha256").exists()
    code, out, _ = run(capsys, "analyze", str(rd))
    a = json.loads(out)
    assert code == EXIT_OK and len(a["trajectory"]) == res["k_star"]
    assert a["envelope"]["n_test"] == 100 and len(a["envelope"]["gaps"]) == res["k_star"] + 1


def test_analyze_published_transitions(capsys, tmp_path):
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"contingencies": [dict(zip(("held", "regr", "impr", "stuck"), c))
                                               for c, _, _ in TRANSITIONS]}))
    code, out, _ = run(capsys, "analyze", str(p), "--fit-window", "0..3", "--bootstrap", "3000")
    a = json.loads(out)
    assert code == EXIT_OK
    assert abs(a["forecast"]["f_dagger"] - 0.931) <= 0.002
    assert len(a["forecast"]["predicted_trajectory"]) == 8
    assert [round(r["pi_hat"], 3) for r in a["trajectory"]] == [t[1][0] for t in TRANSITIONS]
    code, out, _ = run(capsys, "analyze", str(p), "--emit", "csv")
    assert out.splitlines()[0].startswith("k,held,regr,impr,stuck")
    code, _, err = run(capsys, "analyze", str(p), "--fit-window", "3..1")
    assert code == EXIT_INVALID
    code, _, err = run(capsys, "analyze", str(p), "--fit-window", "0..9")
    assert code == EXIT_INVALID and "exceeds" in err


def test_iterate_rejects_bad_config(capsys, tmp_path):
    bad = dict(SIM_CONFIG, colour="blue")
    code, _, err = run(capsys, "iterate", "--config", write_config(tmp_path, bad))
    assert code == EXIT_INVALID and "colour" in err
    no_sim = {k: v for k, v in SIM_CONFIG.items() if k != "simulation"}
    code, _, err = run(capsys, "iterate", "--config", write_config(tmp_path, no_sim, "b.json"))
    assert code == EXIT_INVALID and "simulation" in err


def test_iterate_without_config(capsys, monkeypatch):
    monkeypatch.delenv("SPECPROBE_CONFIG", raising=False)
    code, _, err = run(capsys, "iterate")
    assert code == EXIT_INVALID and "SPECPROBE_CONFIG" in err


def test_validate_real_program_config():
    with pytest.raises(CliError, match="programs"):
        validate_run_config({"seed": 1, "n_train": 5, "n_test": 5})
    cfg = {"seed": 1, "n_train": 5, "n_test": 5, "programs": ["a.cbl"], "spec": "s.md"}
    assert validate_run_config(cfg) is cfg


def test_iterate_real_program_toml(capsys, tmp_path, fixtures_dir):
    cfg = tmp_path / "run.toml"
    cfg.write_text(
        f'seed = 3\nn_train = 30\nn_test = 20\nworkers = 1\nrun_id = "calc"\n'
        f'programs = ["{fixtures_dir / "calcdisc.cbl"}"]\nspec = "{fixtures_dir / "calcdisc_spec.md"}"\n'
        f'[weights]\nalpha = 0.0\nbeta_cfg = 0.5\nbeta_dfg = 0.25\nbeta_sdg = 0.25\n'
        f'[stopping]\nmax_iters = 2\n')
    code, out, _ = run(capsys, "iterate", "--config", str(cfg), "--out", str(tmp_path))
    assert code == EXIT_OK and json.loads(out)["run_dir"].endswith("calc")


def test_frozen_violation_exit_code(capsys, tmp_path, monkeypatch):
    def violated(frozen):
        raise FrozenSetViolation("frozen-set violated: test")
    monkeypatch.setattr(loop_mod, "verify_frozen", violated)
    code, _, err = run(capsys, "iterate", "--config", write_config(tmp_path, SIM_CONFIG),
                       "--out", str(tmp_path))
    assert code == EXIT_FROZEN and "frozen-set violated" in err


def test_provider_failure_exit_code(capsys, tmp_path, monkeypatch):
    from specprobe.providers.simulated import SimulatedBackend
    from specprobe.providers.base import ProviderError

    def down(self, *a, **k):
        raise ProviderError("503 forever")
    monkeypatch.setattr(SimulatedBackend, "generate", down)
    code, _, _ = run(capsys, "iterate", "--config", write_config(tmp_path, SIM_CONFIG),
                     "--out", str(tmp_path))
    assert code == EXIT_PROVIDER


def test_simulate(capsys):
    code, out, _ = run(capsys, "simulate", "--facts", "100", "--seeds", "4", "--iters", "5",
                       "--n-test", "100")
    s = json.loads(out)
    assert code == EXIT_OK and s["runs"] == 4 and len(s["mean_trajectory"]) == 6
    assert s["config"]["n_train"] == 1000
    code, out, _ = run(capsys, "simulate", "--facts", "100", "--seeds", "2", "--iters", "3",
                       "--emit", "csv")
    assert out.splitlines()[0] == "k,mean_test_fidelity"


def test_stability(capsys, fixtures_dir):
    code, out, _ = run(capsys, "stability", str(fixtures_dir / "calcdisc.cbl"))
    rep = json.loads(out)
    assert code == EXIT_OK and rep["epsilon"] < 0.5


def test_version(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["--version"])
    assert ei.value.code == 0
    assert "specprobe" in capsys.readouterr().out
