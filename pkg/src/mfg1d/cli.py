"""Batch entry point: ``mfg1d solve | sweep-T | diagnose | check-model``.

Exit codes: 0 converged (and all requested verdicts PASS), 1 input error,
2 solver nonconvergence, 3 assumption failure, 4 a diagnostic verdict FAIL.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .diagnostics import DIAGNOSTICS, infinite_horizon_compare, run_suite, turnpike_fit
from .errors import (
    AssumptionFailure,
    ClampOverflow,
    ConfigError,
    InsufficientData,
    MFGError,
    NoConvergence,
    NoRoot,
    SingularMatrix,
)
from .grid import Field
from .hamiltonian import lambda_star
from .pipeline import (
    Normalization,
    ProblemKind,
    SolutionPair,
    check_spec_assumptions,
    solve,
    verify_solution,
)
from .solver import write_iteration_log

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NONCONVERGENCE = 2
EXIT_ASSUMPTION = 3
EXIT_VERDICT = 4


# ---------------------------------------------------------------------------
# output helpers


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunDir:
    """Output directory that records every file it writes for the manifest."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.phases: dict[str, float] = {}

    def path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if self.root.resolve() not in p.parents:
            raise ConfigError(f"output path {name!r} escapes the output directory")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _record(self, name: str) -> None:
        if name not in self.files:
            self.files.append(name)

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text, encoding="utf-8")
        self._record(name)

    def write_json(self, name: str, obj) -> None:
        self.write_text(name, dumps(obj))

    def write_field(self, name: str, fld: Field) -> None:
        fld.save_csv(self.path(name))
        self._record(name)

    def adopt(self, name: str) -> None:
        self._record(name)

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.phases[name] = self.phases.get(name, 0.0) + time.perf_counter() - t0

    def write_manifest(self, command: str, config: dict | None, seed, status: str, extra=None) -> None:
        files = [
            {"name": n, "sha256": sha256(self.root / n), "bytes": (self.root / n).stat().st_size}
            for n in sorted(self.files)
        ]
        manifest = {
            "artifact": "mfg1d",
            "version": __version__,
            "command": command,
            "config": config,
            "seed": seed,
            "status": status,
            "wall_clock_s": self.phases,
            "files": files,
        }
        if extra:
            manifest.update(extra)
        (self.root / "manifest.json").write_text(dumps(manifest), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def _solve_into(cfg: RunConfig, out: RunDir, horizon: float | None = None):
    """Solve one configured problem into ``out``; returns (exit code, pair, spec)."""
    log_name = "iterations.jsonl" if cfg.get("solver", "log_iterations") else None
    spec = cfg.problem(horizon)
    status, code, pair = "converged", EXIT_OK, None
    report: dict = {"kind": spec.kind.value, "grid": {"n_x": spec.grid.n_x, "n_t": spec.grid.n_t,
                                                      "horizon": spec.grid.horizon}}
    try:
        with out.phase("assumptions"):
            rep_a = check_spec_assumptions(spec)
        out.write_json("assumptions.json", rep_a.to_dict())
        if not rep_a.passed:
            raise AssumptionFailure("model fails the assumption check", rep_a)
        with out.phase("solve"):
            pair, rep = solve(spec, check=False)
        report["solver"] = rep.summary()
        if log_name:
            write_iteration_log(rep.history, out.path(log_name))
            out.adopt(log_name)
        eps = getattr(rep, "epsilon_result", None)
        if eps is not None:
            report["epsilon"] = {"eps": eps.epsilons, "terminal_error": eps.errors}
        deg = getattr(rep, "degenerate_run", None)
        if deg is not None:
            report["degenerate"] = deg.to_dict()
        with out.phase("verify"):
            ver = verify_solution(pair, spec)
        out.write_field("u.csv", pair.u)
        out.write_field("m.csv", pair.m)
        if spec.kind is ProblemKind.LONG_HORIZON:
            out.write_field("v.csv", pair.v)
        out.write_json("verify.json", ver)
    except AssumptionFailure as exc:
        status, code = "assumption_failure", EXIT_ASSUMPTION
        report["error"] = str(exc)
    except NoConvergence as exc:
        status, code = "nonconvergence", EXIT_NONCONVERGENCE
        report["error"] = str(exc)
        probe = exc.detail.get("probe")
        if probe is not None:
            report["probe"] = probe.to_dict()
            report["verdict"] = probe.verdict
        for k in ("failed_eps", "epsilons", "errors", "last_good_theta", "last_good_delta"):
            if k in exc.detail:
                report.setdefault("detail", {})[k] = exc.detail[k]
        if exc.best is not None:
            report["best_residual_norm"] = exc.best.residual_norm
    except (SingularMatrix, NoRoot, ClampOverflow) as exc:
        status, code = "nonconvergence", EXIT_NONCONVERGENCE
        report["error"] = f"{type(exc).__name__}: {exc}"
    report["status"] = status
    out.write_json("solve_report.json", report)
    return code, pair, spec


def cmd_solve(cfg: RunConfig, out_dir: Path) -> int:
    out = RunDir(out_dir)
    code, _, _ = _solve_into(cfg, out)
    out.write_manifest("solve", cfg.echo(), cfg.seed, _STATUS[code])
    return code


_STATUS = {
    EXIT_OK: "converged",
    EXIT_NONCONVERGENCE: "nonconvergence",
    EXIT_ASSUMPTION: "assumption_failure",
    EXIT_VERDICT: "verdict_fail",
}


def _horizon_dir(T: float) -> str:
    return f"T_{T:g}"


def _sweep_member(values: dict, T: float, root: str):
    cfg = RunConfig(values)
    out = RunDir(Path(root) / _horizon_dir(T))
    code, pair, _ = _solve_into(cfg, out, horizon=T)
    out.write_manifest("solve", cfg.echo(), cfg.seed, _STATUS[code], {"horizon": T})
    if pair is None:
        return T, code, None
    data = {
        "u": pair.u.values, "m": pair.m.values, "n_t": pair.grid.n_t,
        "u_dev": pair.u_deviation, "m_dev": pair.m_deviation,
        "v_offset": pair.v_offset, "lam": pair.lam, "kind": pair.kind.value,
        "normalization": pair.normalization.value,
    }
    return T, code, data


def _rebuild_pair(cfg: RunConfig, T: float, d: dict) -> SolutionPair:
    g = cfg.grid(T)
    return SolutionPair(Field(g, d["u"]), Field(g, d["m"]), Normalization(d["normalization"]),
                        ProblemKind(d["kind"]), d["u_dev"], d["m_dev"], d["v_offset"], d["lam"])


def cmd_sweep(cfg: RunConfig, out_dir: Path, jobs: int = 1) -> int:
    horizons = cfg.horizons()
    for T in horizons:
        g = cfg.grid(T)
        if T < 10 * g.dt:
            raise ConfigError(f"horizon {T:g} is shorter than 10 dt = {10 * g.dt:g}", "sweep.horizons")
    cfg.problem(horizons[0])  # validate before any work
    out = RunDir(out_dir)
    results = []
    with out.phase("solves"):
        if jobs > 1 and len(horizons) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                futs = [ex.submit(_sweep_member, cfg.values, T, str(out.root)) for T in horizons]
                results = [f.result() for f in futs]
        else:
            results = [_sweep_member(cfg.values, T, str(out.root)) for T in horizons]
    for T, _, _ in results:
        sub = out.root / _horizon_dir(T)
        for f in sorted(p for p in sub.rglob("*") if p.is_file()):
            out.adopt(str(f.relative_to(out.root)))
    fits, pairs = [], []
    window = cfg.turnpike_window()
    with out.phase("fits"):
        for T, code, data in results:
            row = {"T": T, "exit_code": code}
            if data is not None:
                pair = _rebuild_pair(cfg, T, data)
                pairs.append(pair)
                mid = (pair.grid.n_t - 1) // 2
                row["midpoint_m_dev"] = float(np.max(np.abs(pair.density_deviation()[mid])))
                try:
                    row.update(turnpike_fit(pair, window).to_dict())
                except (InsufficientData, ValueError) as exc:
                    row["error"] = str(exc)
            fits.append(row)
    omegas = [r["omega"] for r in fits if "omega" in r]
    spread = (max(omegas) - min(omegas)) / max(omegas) if len(omegas) > 1 and max(omegas) > 0 else 0.0
    out.write_json("turnpike.json", {"fits": fits, "omega_relative_spread": spread})
    compare: dict
    try:
        compare = infinite_horizon_compare(pairs, float(cfg.get("sweep", "t0"))).to_dict()
    except MFGError as exc:
        compare = {"skipped": str(exc)}
    out.write_json("horizon_compare.json", compare)
    codes = [c for _, c, _ in results]
    code = max(codes) if codes else EXIT_OK
    out.write_manifest("sweep-T", cfg.echo(), cfg.seed, _STATUS[code], {"horizons": horizons})
    return code


def _read_manifest(sol_dir: Path) -> dict:
    mpath = sol_dir / "manifest.json"
    try:
        return json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {mpath}: {exc}") from None


def validate_checksums(sol_dir: Path, manifest: dict) -> list:
    """Names of listed files that are missing or whose checksum differs."""
    bad = []
    for entry in manifest.get("files", []):
        p = sol_dir / entry["name"]
        if not p.is_file() or sha256(p) != entry["sha256"]:
            bad.append(entry["name"])
    return bad


def cmd_diagnose(sol_dir: Path, out_dir: Path | None, seed: int | None, names=None) -> int:
    sol_dir = Path(sol_dir)
    manifest = _read_manifest(sol_dir)
    listed = {e["name"] for e in manifest.get("files", [])}
    for need in ("u.csv", "m.csv"):
        if need not in listed:
            raise ConfigError(f"{need} is not listed in the manifest")
    bad = validate_checksums(sol_dir, manifest)
    if bad:
        raise ConfigError("checksum mismatch: " + ", ".join(bad))
    cfg = RunConfig(manifest["config"])
    if seed is not None:
        cfg.values["diagnostics"]["seed"] = seed
    spec = cfg.problem()
    out = RunDir(out_dir if out_dir is not None else sol_dir / "diagnostics")
    with out.phase("load"):
        T = spec.grid.horizon
        u = Field.load_csv(sol_dir / "u.csv", T)
        m = Field.load_csv(sol_dir / "m.csv", T)
    if u.grid != spec.grid or m.grid != spec.grid:
        raise ConfigError("stored fields do not match the configured grid")
    planning = spec.kind is ProblemKind.PLANNING
    pair = SolutionPair(
        u, m,
        Normalization.MEAN_ZERO_AT_HALF_T if planning else Normalization.NONE,
        spec.kind,
        v_offset=0.0 if planning else float(spec.cost.g(1.0)),
        lam=lambda_star(spec.model),
    )
    names = list(names or cfg.diagnostics() or DIAGNOSTICS)
    with out.phase("diagnostics"):
        ver = verify_solution(pair, spec)
        rep = run_suite(
            pair, spec.model, names, seed=cfg.seed,
            convexity_tolerance=float(cfg.get("diagnostics", "convexity_tolerance")),
            decrease_tolerance=float(cfg.get("diagnostics", "decrease_tolerance")),
            monotonicity_samples=cfg.get("diagnostics", "monotonicity_samples"),
            turnpike_window=cfg.turnpike_window(),
        )
    stored = sol_dir / "verify.json"
    if stored.is_file():
        same = json.loads(stored.read_text(encoding="utf-8")) == json.loads(dumps(ver))
        rep.add("verify_roundtrip", {"matches_stored": same}, "PASS" if same else "FAIL")
    out.write_json("verify.json", ver)
    out.write_json("diagnostics.json", rep.to_dict())
    for name, text in rep.csv_files().items():
        out.write_text(f"profiles/{name}", text)
    code = EXIT_OK if rep.passed else EXIT_VERDICT
    out.write_manifest("diagnose", cfg.echo(), cfg.seed, _STATUS[code], {"source": str(sol_dir)})
    return code


def cmd_check_model(cfg: RunConfig, out_dir: Path | None) -> int:
    spec = cfg.problem()
    rep = check_spec_assumptions(spec)
    text = dumps(rep.to_dict())
    if out_dir is not None:
        out = RunDir(out_dir)
        out.write_text("assumptions.json", text)
        out.write_manifest("check-model", cfg.echo(), cfg.seed,
                           "converged" if rep.passed else "assumption_failure")
    sys.stdout.write(text)
    return EXIT_OK if rep.passed else EXIT_ASSUMPTION


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfg1d", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mfg1d {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required, help="TOML run config")
        p.add_argument("--out", type=Path, help="output directory (default: [output] dir)")
        p.add_argument("--seed", type=int, help="seed for randomized checks")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers (sweep-T)")

    common(sub.add_parser("solve", help="solve one problem"))
    sw = sub.add_parser("sweep-T", help="solve over a list of horizons")
    common(sw)
    sw.add_argument("--horizons", type=str, help="comma-separated T list, overrides [sweep]")
    dg = sub.add_parser("diagnose", help="rerun diagnostics on a stored solution")
    dg.add_argument("directory", type=Path)
    common(dg, config_required=False)
    dg.add_argument("--run", type=str, help="comma-separated diagnostics to run")
    common(sub.add_parser("check-model", help="run the assumption checks only"))
    return ap


def _with_overrides(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.values["diagnostics"]["seed"] = args.seed
    if args.out is not None:
        cfg.values["output"]["dir"] = str(args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1", "jobs")
        if args.command == "diagnose":
            names = [s.strip() for s in args.run.split(",")] if args.run else None
            if names:
                bad = [n for n in names if n not in DIAGNOSTICS]
                if bad:
                    raise ConfigError(f"unknown diagnostics {bad}", "run")
            return cmd_diagnose(args.directory, args.out, args.seed, names)
        cfg = _with_overrides(args)
        if args.command == "solve":
            return cmd_solve(cfg, cfg.output_dir)
        if args.command == "sweep-T":
            if args.horizons:
                try:
                    hs = [float(s) for s in args.horizons.split(",")]
                except ValueError:
                    raise ConfigError("horizons must be decimal numbers", "horizons") from None
                cfg.values["sweep"]["horizons"] = hs
            return cmd_sweep(cfg, cfg.output_dir, args.jobs)
        return cmd_check_model(cfg, args.out)
    except (ConfigError, ValueError) as exc:
        print(f"mfg1d: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
