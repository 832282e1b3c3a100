import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mfg1d.cli import EXIT_ASSUMPTION, EXIT_INPUT, EXIT_NONCONVERGENCE, EXIT_OK, EXIT_VERDICT, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def small(extra="", m0="cosine(0.3)", n=16):
    return f'[problem]\nm0 = "{m0}"\n[grid]\nn_x = {n}\nn_t = {n}\n' + extra


def test_exit_codes_are_distinct():
    assert len({EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGENCE, EXIT_ASSUMPTION, EXIT_VERDICT}) == 5
    assert (EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGENCE, EXIT_ASSUMPTION) == (0, 1, 2, 3)


def test_solve_uniform(tmp_path):
    out = tmp_path / "u"
    assert main(["solve", "--config", str(CONFIGS / "uniform.toml"), "--out", str(out)]) == EXIT_OK
    ver = json.loads((out / "verify.json").read_text())
    for k in ("hj_residual", "continuity_residual", "initial_mismatch", "terminal_mismatch"):
        assert ver[k] <= 1e-10
    man = json.loads((out / "manifest.json").read_text())
    names = [f["name"] for f in man["files"]]
    assert len(names) == len(set(names))
    assert {"u.csv", "m.csv", "verify.json"} <= set(names)
    assert man["status"] == "converged"


def test_negative_nx_names_key(tmp_path, capsys):
    cfg = write(tmp_path, "[grid]\nn_x = -4\n")
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "grid.n_x" in err and "line 2" in err


def test_unknown_key_and_hex_literal(tmp_path, capsys):
    for text, key in (("[solver]\nfoo = 1\n", "solver.foo"), ("[grid]\nn_x = 0x10\n", "n_x")):
        cfg = write(tmp_path, text)
        assert main(["solve", "--config", str(cfg)]) == EXIT_INPUT
        assert key in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "absent.toml")]) == EXIT_INPUT


def test_counterexample_exit_2(tmp_path):
    out = tmp_path / "ce"
    assert main(["solve", "--config", str(CONFIGS / "counterexample.toml"), "--out", str(out)]) == EXIT_NONCONVERGENCE
    rep = json.loads((out / "solve_report.json").read_text())
    assert rep["probe"]["verdict"] == "NO_SOLUTION"
    assert not (out / "u.csv").exists()


def test_assumption_failure_exit_3(tmp_path):
    cfg = write(tmp_path, small('[model]\nfamily = "congestion"\nalpha = 1.9\n'))
    out = tmp_path / "af"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == EXIT_ASSUMPTION
    rep = json.loads((out / "assumptions.json").read_text())
    assert rep["checks"]["E1"]["passed"] is False and rep["checks"]["E1"]["witness"]


def test_nonconvergence_exit_2(tmp_path):
    cfg = write(tmp_path, small("[solver]\nmax_iter = 1\n", m0="cosine(0.5)"))
    out = tmp_path / "nc"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == EXIT_NONCONVERGENCE
    rep = json.loads((out / "solve_report.json").read_text())
    assert rep["best_residual_norm"] > 0


def test_check_model(tmp_path):
    assert main(["check-model", "--config", str(CONFIGS / "cosine.toml"), "--out", str(tmp_path / "cm")]) == EXIT_OK
    bad = write(tmp_path, small('[model]\nfamily = "congestion"\nalpha = 1.9\n'))
    assert main(["check-model", "--config", str(bad), "--out", str(tmp_path / "cm2")]) == EXIT_ASSUMPTION


def test_iteration_log(tmp_path):
    cfg = write(tmp_path, small("[solver]\nlog_iterations = true\n"))
    out = tmp_path / "il"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    lines = (out / "iterations.jsonl").read_text().splitlines()
    assert lines and set(json.loads(lines[0])) >= {"iteration", "residual", "damping_exponent", "clamp_count"}


# ---------------------------------------------------------------------------
# diagnose round trip


@pytest.fixture(scope="module")
def solved_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cos") / "run"
    cfg = out.parent / "c.toml"
    cfg.write_text(small('[diagnostics]\nrun = ["convexity", "terminal_decrease", "monotonicity"]\n'
                         "monotonicity_samples = 2000\n", n=32))
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    return out


def test_diagnose_roundtrip(solved_dir, tmp_path):
    out = tmp_path / "d"
    assert main(["diagnose", str(solved_dir), "--out", str(out)]) == EXIT_OK
    a = json.loads((solved_dir / "verify.json").read_text())
    b = json.loads((out / "verify.json").read_text())
    assert set(a) == set(b)
    for k in a:
        assert f"{a[k]:.17g}" == f"{b[k]:.17g}", k
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["passed"] and all(v == "PASS" for v in diag["verdicts"].values())
    assert list((out / "profiles").glob("*.csv"))


def test_diagnose_default_location_and_subset(solved_dir):
    assert main(["diagnose", str(solved_dir), "--run", "convexity"]) == EXIT_OK
    diag = json.loads((solved_dir / "diagnostics" / "diagnostics.json").read_text())
    assert all(k.startswith("convexity") or k == "verify_roundtrip" for k in diag["verdicts"])
    assert main(["diagnose", str(solved_dir), "--run", "spectra"]) == EXIT_INPUT


def test_diagnose_uniform_suite(tmp_path):
    out = tmp_path / "u"
    assert main(["solve", "--config", str(CONFIGS / "uniform.toml"), "--out", str(out)]) == EXIT_OK
    assert main(["diagnose", str(out), "--run", "convexity,monotonicity"]) == EXIT_OK


def test_diagnose_detects_corruption(solved_dir, tmp_path):
    import shutil

    copy = tmp_path / "corrupt"
    shutil.copytree(solved_dir, copy, ignore=shutil.ignore_patterns("diagnostics"))
    rows = list(csv.reader((copy / "m.csv").open()))
    # flip one sign in the first data row
    for r in rows:
        if r and not r[0].startswith("#"):
            try:
                float(r[-1])
            except ValueError:
                continue
            r[-1] = "-" + r[-1]
            break
    with (copy / "m.csv").open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    assert main(["diagnose", str(copy)]) == EXIT_INPUT
    assert not (copy / "diagnostics" / "diagnostics.json").exists()


def test_diagnose_missing_directory(tmp_path):
    assert main(["diagnose", str(tmp_path / "nothing")]) == EXIT_INPUT


def test_diagnose_failed_verdict_exit_4(solved_dir, tmp_path):
    out = tmp_path / "strict"
    import shutil

    shutil.copytree(solved_dir, out, ignore=shutil.ignore_patterns("diagnostics"))
    man = json.loads((out / "manifest.json").read_text())
    # an impossible decrease tolerance makes the verdict fail without touching the fields
    man["config"]["diagnostics"]["decrease_tolerance"] = -1.0
    (out / "manifest.json").write_text(json.dumps(man, sort_keys=True, indent=2) + "\n")
    assert main(["diagnose", str(out), "--run", "terminal_decrease"]) == EXIT_VERDICT


# ---------------------------------------------------------------------------
# determinism and sweeps


def test_byte_identical_reports(tmp_path):
    cfg = write(tmp_path, small('[diagnostics]\nrun = ["monotonicity", "convexity"]\nseed = 11\n'
                                "monotonicity_samples = 1000\n"))
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["solve", "--config", str(cfg), "--out", str(out), "--seed", "11"]) == EXIT_OK
        assert main(["diagnose", str(out)]) == EXIT_OK
        runs.append(out)
    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(runs[1]) for p in runs[1].rglob("*") if p.is_file())
    for rel in files:
        if rel.name == "manifest.json":
            continue
        assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes(), rel
    for rel in (Path("manifest.json"), Path("diagnostics/manifest.json")):
        ma, mb = (json.loads((r / rel).read_text()) for r in runs)
        ma["config"].pop("output"), mb["config"].pop("output")
        assert ma["files"] == mb["files"] and ma["config"] == mb["config"] and ma["seed"] == 11


def test_json_is_sorted_utf8(solved_dir):
    text = (solved_dir / "verify.json").read_text(encoding="utf-8")
    d = json.loads(text)
    assert list(d) == sorted(d) and text.endswith("\n")


def test_sweep_rejects_short_horizon(tmp_path, capsys):
    code = main(["sweep-T", "--config", str(CONFIGS / "turnpike.toml"), "--horizons", "0.5,10",
                 "--out", str(tmp_path / "s")])
    assert code == EXIT_INPUT
    assert "sweep.horizons" in capsys.readouterr().err


def test_sweep_single_horizon(tmp_path):
    cfg = write(tmp_path, '[problem]\nkind = "LongHorizon"\nm0 = "cosine(0.3)"\n'
                          "[grid]\nn_x = 16\ndt = 0.125\nhorizon = 4.0\n")
    out = tmp_path / "s"
    assert main(["sweep-T", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    tp = json.loads((out / "turnpike.json").read_text())
    assert len(tp["fits"]) == 1 and tp["fits"][0]["T"] == 4.0
    sub = out / "T_4"
    assert (sub / "u.csv").exists() and (sub / "v.csv").exists() and (sub / "verify.json").exists()


def test_sweep_parallel_matches_serial(tmp_path):
    cfg = write(tmp_path, '[problem]\nkind = "LongHorizon"\nm0 = "cosine(0.3)"\n'
                          "[grid]\nn_x = 16\ndt = 0.125\n[sweep]\nhorizons = [2.0, 4.0, 8.0]\nt0 = 1.0\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sweep-T", "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main(["sweep-T", "--config", str(cfg), "--out", str(b), "--jobs", "3"]) == EXIT_OK
    for rel in ("turnpike.json", "horizon_compare.json", "T_8/u.csv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    cmp_ = json.loads((a / "horizon_compare.json").read_text())
    assert len(cmp_["pairs"]) == 2


def test_output_paths_confined(tmp_path):
    from mfg1d.cli import RunDir
    from mfg1d.errors import ConfigError

    rd = RunDir(tmp_path / "x")
    with pytest.raises(ConfigError):
        rd.write_text("../escape.txt", "no")


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mfg1d.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "mfg1d" in res.stdout
