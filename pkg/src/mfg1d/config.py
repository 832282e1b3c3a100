"""Strict TOML run configurations.

Every section and key is declared in ``SCHEMA``; unknown keys, wrong types,
non-finite numbers and hexadecimal or other non-decimal literals are
rejected with the key and source line named.
"""

from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .diagnostics import DIAGNOSTICS
from .errors import ConfigError
from .grid import DensitySlice, GridSpec
from .hamiltonian import Coupling, HamiltonianModel, TerminalCost
from .pipeline import ProblemKind, ProblemSpec, density_preset
from .solver import NewtonConfig

_NUM = (int, float)

# section -> key -> (type, default); ``None`` default means optional
SCHEMA: dict = {
    "problem": {
        "kind": (str, "TerminalCost"),
        "m0": (str, "uniform"),
        "mT": (str, None),
    },
    "model": {
        "family": (str, "separated_power"),
        "gamma": (_NUM, 2.0),
        "alpha": (_NUM, 1.0),
        "c0": (_NUM, 0.0),
        "coupling": (str, "linear"),
        "coupling_a": (_NUM, 1.0),
        "coupling_b": (_NUM, 0.0),
        "coupling_beta": (_NUM, 1.0),
    },
    "cost": {
        "kind": (str, "linear"),
        "a": (_NUM, 1.0),
        "b": (_NUM, 0.0),
        "beta": (_NUM, 1.0),
    },
    "grid": {
        "n_x": (int, 64),
        "n_t": (int, None),
        "dt": (_NUM, None),
        "horizon": (_NUM, 1.0),
    },
    "solver": {
        "rtol": (_NUM, 1e-10),
        "max_iter": (int, 50),
        "backtrack": (_NUM, 0.5),
        "max_halvings": (int, 20),
        "homotopy_steps": (int, 1),
        "delta_schedule": (list, []),
        "log_iterations": (bool, False),
    },
    "planning": {
        "tolerance": (_NUM, 1e-6),
        "eps_schedule": (list, None),
        "eps_min": (_NUM, 1e-8),
    },
    "assumptions": {
        "box_p": (_NUM, 10.0),
        "c0": (_NUM, 10.0),
        "samples": (int, 41),
    },
    "degenerate": {
        "deltas": (list, [1e-2, 1e-3, 1e-4]),
    },
    "diagnostics": {
        "run": (list, []),
        "seed": (int, 0),
        "monotonicity_samples": (int, 10_000),
        "convexity_tolerance": (_NUM, 1e-4),
        "decrease_tolerance": (_NUM, 1e-6),
        "turnpike_window": (list, None),
    },
    "sweep": {
        "horizons": (list, []),
        "t0": (_NUM, 5.0),
    },
    "output": {
        "dir": (str, "out"),
    },
}

_NON_DECIMAL = re.compile(r"[=\[,]\s*[-+]?(0x|0o|0b|inf\b|nan\b)", re.IGNORECASE)


def _key_line(text: str, section: str, key: str | None = None) -> int | None:
    """Source line of ``[section] key`` (or of the section header)."""
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        hdr = re.match(r"^\[\s*([A-Za-z0-9_]+)\s*\]", line)
        if hdr:
            current = hdr.group(1)
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return no
    return None


def _check_type(value, typ, where: str, line):
    if typ is bool:
        ok = isinstance(value, bool)
    elif typ is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif typ is _NUM:
        ok = isinstance(value, _NUM) and not isinstance(value, bool)
        if ok and not math.isfinite(value):
            raise ConfigError("number must be finite", where, line)
    else:
        ok = isinstance(value, typ)
    if not ok:
        want = "number" if typ is _NUM else typ.__name__
        raise ConfigError(f"expected {want}, got {type(value).__name__}", where, line)
    if typ is list:
        for v in value:
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError("list entries must be finite", where, line)


@dataclass
class RunConfig:
    """Parsed run configuration: a problem plus diagnostics and output settings."""

    values: dict
    text: str = ""
    source: str | None = None
    overrides: dict = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def _err(self, message: str, section: str, key: str) -> ConfigError:
        return ConfigError(message, f"{section}.{key}", _key_line(self.text, section, key))

    # -- builders -----------------------------------------------------------
    @property
    def kind(self) -> ProblemKind:
        try:
            return ProblemKind(self.get("problem", "kind"))
        except ValueError:
            kinds = ", ".join(k.value for k in ProblemKind)
            raise self._err(f"kind must be one of {kinds}", "problem", "kind") from None

    @property
    def seed(self) -> int:
        return self.get("diagnostics", "seed")

    @property
    def output_dir(self) -> Path:
        return Path(self.get("output", "dir"))

    def model(self) -> HamiltonianModel:
        s = self.values["model"]
        try:
            coupling = Coupling(s["coupling"], float(s["coupling_a"]), float(s["coupling_b"]),
                                float(s["coupling_beta"]))
        except ValueError as exc:
            raise self._err(str(exc), "model", "coupling") from None
        fam = s["family"]
        try:
            if fam == "separated_power":
                return HamiltonianModel.separated_power(float(s["gamma"]), coupling)
            if fam == "congestion":
                return HamiltonianModel.congestion(float(s["alpha"]), float(s["c0"]), coupling)
        except ValueError as exc:
            raise self._err(str(exc), "model", "family") from None
        raise self._err("family must be separated_power or congestion", "model", "family")

    def cost(self) -> TerminalCost | None:
        if self.kind is ProblemKind.PLANNING:
            return None
        s = self.values["cost"]
        if s["kind"] == "custom":
            raise self._err("custom costs need callbacks and are library-only", "cost", "kind")
        try:
            return TerminalCost(s["kind"], float(s["a"]), float(s["b"]), float(s["beta"]))
        except ValueError as exc:
            raise self._err(str(exc), "cost", "kind") from None

    def grid(self, horizon: float | None = None) -> GridSpec:
        s = self.values["grid"]
        T = float(s["horizon"] if horizon is None else horizon)
        if s["n_x"] < 8:
            raise self._err("n_x must be an integer >= 8", "grid", "n_x")
        if not T > 0:
            raise self._err("horizon must be positive", "grid", "horizon")
        if s["dt"] is not None and s["n_t"] is not None:
            raise self._err("give either n_t or dt, not both", "grid", "dt")
        if s["dt"] is not None:
            if not s["dt"] > 0:
                raise self._err("dt must be positive", "grid", "dt")
            return GridSpec.with_step(s["n_x"], float(s["dt"]), T)
        n_t = s["n_t"] if s["n_t"] is not None else 64
        if n_t < 8:
            raise self._err("n_t must be an integer >= 8", "grid", "n_t")
        return GridSpec(s["n_x"], n_t, T)

    def _density(self, key: str, n_x: int, normalize: bool):
        spec = self.get("problem", key)
        try:
            vals = density_preset(spec, n_x)
        except ValueError as exc:
            raise self._err(str(exc), "problem", key) from None
        if normalize:
            return DensitySlice.normalized(vals)
        return vals / vals.mean()

    def newton(self, log_path=None) -> NewtonConfig:
        s = self.values["solver"]
        for k in ("rtol",):
            if not s[k] > 0:
                raise self._err(f"{k} must be positive", "solver", k)
        if not 0 < s["backtrack"] < 1:
            raise self._err("backtrack must lie in (0, 1)", "solver", "backtrack")
        if s["max_iter"] < 1:
            raise self._err("max_iter must be at least 1", "solver", "max_iter")
        return NewtonConfig(float(s["rtol"]), s["max_iter"], float(s["backtrack"]),
                            s["max_halvings"], log_path)

    def _positive_list(self, section: str, key: str, decreasing: bool = False):
        vals = self.get(section, key)
        if vals is None:
            return None
        if not all(isinstance(v, _NUM) and not isinstance(v, bool) and v > 0 for v in vals):
            raise self._err("entries must be positive numbers", section, key)
        if decreasing and any(b >= a for a, b in zip(vals, vals[1:])):
            raise self._err("entries must be strictly decreasing", section, key)
        return tuple(float(v) for v in vals)

    def problem(self, horizon: float | None = None, log_path=None) -> ProblemSpec:
        kind = self.kind
        grid = self.grid(horizon)
        m0 = self._density("m0", grid.n_x, True)
        mT = None
        if kind is ProblemKind.PLANNING:
            if self.get("problem", "mT") is None:
                raise self._err("planning problems need mT", "problem", "mT")
            mT = self._density("mT", grid.n_x, False)
        elif self.get("problem", "mT") is not None:
            raise self._err("mT is only used by planning problems", "problem", "mT")
        s = self.values["solver"]
        if s["homotopy_steps"] < 1:
            raise self._err("homotopy_steps must be at least 1", "solver", "homotopy_steps")
        a = self.values["assumptions"]
        p = self.values["planning"]
        return ProblemSpec(
            kind=kind,
            model=self.model(),
            grid=grid,
            m0=m0,
            cost=self.cost(),
            mT=mT,
            newton=self.newton(log_path),
            homotopy_steps=s["homotopy_steps"],
            delta_schedule=self._positive_list("solver", "delta_schedule", True) or (),
            degenerate_deltas=self._positive_list("degenerate", "deltas", True),
            planning_tolerance=float(p["tolerance"]),
            eps_schedule=self._positive_list("planning", "eps_schedule", True),
            eps_min=float(p["eps_min"]),
            box_p=float(a["box_p"]),
            assumption_c0=float(a["c0"]),
            assumption_samples=a["samples"],
        )

    def diagnostics(self) -> list:
        names = self.get("diagnostics", "run")
        for n in names:
            if n not in DIAGNOSTICS:
                raise self._err(f"unknown diagnostic {n!r}; choose from {', '.join(DIAGNOSTICS)}",
                                "diagnostics", "run")
        return list(names)

    def turnpike_window(self):
        w = self.get("diagnostics", "turnpike_window")
        if w is None:
            return None
        if len(w) != 2 or not all(isinstance(v, _NUM) for v in w) or not 0 <= w[0] < w[1]:
            raise self._err("window must be [t_a, t_b] with 0 <= t_a < t_b", "diagnostics",
                            "turnpike_window")
        return (float(w[0]), float(w[1]))

    def horizons(self) -> list:
        hs = self._positive_list("sweep", "horizons") or ()
        if not hs:
            return [float(self.get("grid", "horizon"))]
        if any(b <= a for a, b in zip(hs, hs[1:])):
            raise self._err("horizons must be strictly increasing", "sweep", "horizons")
        return list(hs)

    def echo(self) -> dict:
        """Resolved configuration with defaults filled in (JSON-ready)."""
        return {s: dict(sorted(v.items())) for s, v in sorted(self.values.items())}


def parse_config(text: str, source: str | None = None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        mt = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed config: {exc}", None, int(mt.group(1)) if mt else None) from None
    for no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0]
        if _NON_DECIMAL.search(stripped):
            key = stripped.split("=", 1)[0].strip()
            raise ConfigError("only decimal literals are allowed", key or None, no)
    values = {}
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ConfigError("unknown section", section, _key_line(text, section))
        if not isinstance(body, dict):
            raise ConfigError("expected a table", section, _key_line(text, section))
        for key, val in body.items():
            where = f"{section}.{key}"
            line = _key_line(text, section, key)
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", where, line)
            _check_type(val, SCHEMA[section][key][0], where, line)
    for section, keys in SCHEMA.items():
        body = raw.get(section, {})
        values[section] = {k: body.get(k, default) for k, (_, default) in keys.items()}
    cfg = RunConfig(values, text, source)
    cfg.kind  # validates early
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, str(path))


__all__ = ["RunConfig", "SCHEMA", "load_config", "parse_config"]
