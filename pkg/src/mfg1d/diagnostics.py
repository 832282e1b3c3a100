"""Measurements of structural properties on computed solutions."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .elliptic import BoxScheme, InitialDensity, TerminalDensityPenalized
from .errors import DomainError, GridMismatch, InsufficientData, NoConvergence, PreconditionFailure
from .grid import DensitySlice, GridSpec, _dx, integrate_x
from .hamiltonian import HamiltonianModel, check_assumptions
from .pipeline import ProblemKind, SolutionPair
from .solver import (
    NewtonConfig,
    default_epsilon_schedule,
    homotopy_solve,
    newton_iterate,
    rebase,
    terminal_error,
)

PASS = "PASS"
FAIL = "FAIL"


# ---------------------------------------------------------------------------
# convex test functions


@dataclass(frozen=True)
class Square:
    name = "square"

    def __call__(self, m):
        return m * m


@dataclass(frozen=True)
class Power4:
    name = "power4"

    def __call__(self, m):
        return m**4


@dataclass(frozen=True)
class InversePower:
    kappa: float = 1.0

    @property
    def name(self) -> str:
        return f"inverse_power({self.kappa:g})"

    def __call__(self, m):
        if np.any(m <= 0):
            raise DomainError("inverse powers need positive densities")
        return m ** (-self.kappa)


def test_function(name: str):
    key = name.strip().lower()
    if key == "square":
        return Square()
    if key == "power4":
        return Power4()
    if key.startswith("inverse_power"):
        inner = key[len("inverse_power"):].strip("() ")
        return InversePower(float(inner) if inner else 1.0)
    raise ValueError(f"unknown test function {name!r}")


# ---------------------------------------------------------------------------
# displacement convexity and terminal decrease


@dataclass
class ConvexityProfile:
    h: str
    t: np.ndarray
    values: np.ndarray
    second_diff: np.ndarray
    tolerance: float

    @property
    def scale(self) -> float:
        return float(np.max(np.abs(self.values)))

    @property
    def min_second_diff(self) -> float:
        return float(self.second_diff.min())

    @property
    def verdict(self) -> str:
        return PASS if self.min_second_diff >= -self.tolerance * self.scale else FAIL

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "values": self.values.tolist(),
            "second_diff": self.second_diff.tolist(),
            "min_second_diff": self.min_second_diff,
            "scale": self.scale,
            "tolerance": self.tolerance,
            "verdict": self.verdict,
        }


def convexity_profile(pair: SolutionPair, h, tolerance: float = 1e-4) -> ConvexityProfile:
    """Per-level integrals of h(m) and their second differences in t."""
    g = pair.grid
    vals = integrate_x(h(pair.m.values))
    sd = (vals[2:] - 2.0 * vals[1:-1] + vals[:-2]) / g.dt**2
    return ConvexityProfile(getattr(h, "name", str(h)), g.t, vals, sd, tolerance)


@dataclass
class DecreaseProfile:
    h: str
    values: np.ndarray
    tolerance: float

    @property
    def scale(self) -> float:
        return float(np.max(np.abs(self.values)))

    @property
    def max_increase(self) -> float:
        return float(np.max(np.diff(self.values))) if self.values.size > 1 else 0.0

    @property
    def verdict(self) -> str:
        return PASS if self.max_increase <= self.tolerance * self.scale else FAIL

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "values": self.values.tolist(),
            "max_increase": self.max_increase,
            "tolerance": self.tolerance,
            "verdict": self.verdict,
        }


def radial_margin(model: HamiltonianModel, box, samples: int = 41) -> float:
    """Worst sampled value of H_p(p, m) p on the box."""
    rep = check_assumptions(model, None, box, samples)
    return rep.checks["radial"].worst_margin


def terminal_decrease_check(pair: SolutionPair, model: HamiltonianModel, h=None,
                            tolerance: float = 1e-6, box_p: float = 10.0) -> DecreaseProfile:
    """t -> int h(m(., t)) must not increase for terminal-cost runs of radial models."""
    if pair.kind is ProblemKind.PLANNING:
        raise PreconditionFailure("terminal decrease applies to terminal-cost solves only")
    m = pair.m.values
    box = (-box_p, box_p, float(m.min()) / 2.0, 2.0 * float(m.max()))
    margin = radial_margin(model, box)
    if margin < 0:
        raise PreconditionFailure(f"radial condition H_p p >= 0 fails (worst {margin:.3e})")
    h = h or Square()
    return DecreaseProfile(getattr(h, "name", str(h)), integrate_x(h(m)), tolerance)


# ---------------------------------------------------------------------------
# pointwise monotonicity


def monotonicity_gap(model: HamiltonianModel, p0, p1, m0, m1):
    """(m1 H_p(p1,m1) - m0 H_p(p0,m0))(p1 - p0) - (H(p1,m1) - H(p0,m0))(m1 - m0)."""
    m0a, m1a = np.asarray(m0, dtype=float), np.asarray(m1, dtype=float)
    if np.any(m0a <= 0) or np.any(m1a <= 0):
        raise DomainError("densities must be positive")
    p0a, p1a = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    a = (m1a * model.H_p(p1a, m1a) - m0a * model.H_p(p0a, m0a)) * (p1a - p0a)
    b = (model.H(p1a, m1a) - model.H(p0a, m0a)) * (m1a - m0a)
    out = a - b
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class MonotonicitySample:
    samples: int
    seed: int
    min_gap: float
    negative: int
    box: tuple

    @property
    def verdict(self) -> str:
        return PASS if self.negative == 0 else FAIL

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "seed": self.seed,
            "min_gap": self.min_gap,
            "negative": self.negative,
            "box": list(self.box),
            "verdict": self.verdict,
        }


def monotonicity_sample(model: HamiltonianModel, samples: int = 10_000, seed: int = 0,
                        box=(-5.0, 5.0, 0.1, 10.0)) -> MonotonicitySample:
    rng = np.random.default_rng(seed)
    p_lo, p_hi, m_lo, m_hi = box
    p = rng.uniform(p_lo, p_hi, size=(2, samples))
    m = rng.uniform(m_lo, m_hi, size=(2, samples))
    gap = monotonicity_gap(model, p[0], p[1], m[0], m[1])
    return MonotonicitySample(samples, seed, float(gap.min()), int(np.sum(gap < 0)), tuple(box))


# ---------------------------------------------------------------------------
# turnpike


@dataclass
class TurnpikeFit:
    window: tuple
    t: np.ndarray
    series_m: np.ndarray
    series_ux: np.ndarray
    omega: float
    c: float
    r_squared: float
    n_levels: int
    floor_reached: bool

    @property
    def series(self) -> np.ndarray:
        return self.series_m + self.series_ux

    def to_dict(self) -> dict:
        return {
            "window": list(self.window),
            "omega": self.omega,
            "c": self.c,
            "r_squared": self.r_squared,
            "n_levels": self.n_levels,
            "floor_reached": self.floor_reached,
        }


def fit_exponential(t, series, window, floor: float = 0.0):
    """Least squares of log(series) on t over the window, stopping at the floor.

    Returns (omega, c, r_squared, n_levels, floor_reached) for series ~ c e^(-omega t).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(series, dtype=float)
    t_a, t_b = window
    sel = np.nonzero((t >= t_a - 1e-12) & (t <= t_b + 1e-12))[0]
    keep = []
    floor_hit = False
    for j in sel:
        if not (y[j] > floor):
            floor_hit = True
            break
        keep.append(j)
    keep = np.asarray(keep, dtype=int)
    if keep.size < 5:
        raise InsufficientData(f"only {keep.size} usable levels in window {window}")
    tt, ly = t[keep], np.log(y[keep])
    slope, icpt = np.polyfit(tt, ly, 1)
    pred = slope * tt + icpt
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(-slope), float(math.exp(icpt)), r2, int(keep.size), floor_hit


def turnpike_series(pair: SolutionPair):
    """(||m - 1||_inf, ||u_x||_inf) per level, from the exact deviations when present."""
    g = pair.grid
    mdev = pair.density_deviation()
    w = pair.value_deviation()
    return np.max(np.abs(mdev), axis=1), np.max(np.abs(_dx(w, g.dx)), axis=1)


def turnpike_fit(pair: SolutionPair, window=None, floor: float = 1e-24) -> TurnpikeFit:
    """Fit ||m - 1|| + ||u_x|| ~ c exp(-omega t) on [t_a, min(t_b, T/2)].

    The default window is [0.1 T, 0.5 T].  Levels at or below ``floor`` (the
    round-off floor of the deviation arithmetic) end the fit window early.
    """
    g = pair.grid
    T = g.horizon
    t_a, t_b = window if window is not None else (0.1 * T, 0.9 * T)
    if not (0 <= t_a < t_b <= T):
        raise ValueError("window must lie within [0, T]")
    t_b = min(t_b, 0.5 * T)
    sm, su = turnpike_series(pair)
    omega, c, r2, n, hit = fit_exponential(g.t, sm + su, (t_a, t_b), floor)
    return TurnpikeFit((t_a, t_b), g.t, sm, su, omega, c, r2, n, hit)


# ---------------------------------------------------------------------------
# long-horizon comparison


def _level_mean(values) -> float:
    return math.fsum(values) / len(values)


def mean_at_half(pair: SolutionPair) -> float:
    """Exact spatial mean of v - v_offset at t = T/2 (linear in t between levels)."""
    g = pair.grid
    vdev = pair.value_deviation()
    s = (g.n_t - 1) / 2.0
    j0 = int(math.floor(s))
    frac = s - j0
    mean0 = _level_mean(vdev[j0])
    if frac == 0:
        return mean0
    return (1.0 - frac) * mean0 + frac * _level_mean(vdev[j0 + 1])


@dataclass
class HorizonComparison:
    horizons: list
    t0: float
    v_diff: list
    m_diff: list
    mean_deviation_half: list

    @property
    def cauchy(self) -> bool:
        return all(b <= a for a, b in zip(self.v_diff, self.v_diff[1:]))

    @property
    def mean_nonincreasing(self) -> bool:
        d = self.mean_deviation_half
        return all(b <= a for a, b in zip(d, d[1:]))

    def to_dict(self) -> dict:
        return {
            "horizons": list(self.horizons),
            "t0": self.t0,
            "pairs": [
                {"T1": a, "T2": b, "v_diff": dv, "m_diff": dm}
                for a, b, dv, dm in zip(self.horizons, self.horizons[1:], self.v_diff, self.m_diff)
            ],
            "mean_deviation_half": list(self.mean_deviation_half),
            "cauchy": self.cauchy,
            "mean_nonincreasing": self.mean_nonincreasing,
        }


def infinite_horizon_compare(pairs, t0: float) -> HorizonComparison:
    """Differences of v^T and m^T on [0, t0] between consecutive horizons.

    v is compared through its exact deviation from the offset g(1) (terminal
    cost) or after the mean-zero normalization at T/2 (planning).
    """
    pairs = sorted(pairs, key=lambda p: p.grid.horizon)
    if not pairs:
        raise InsufficientData("no solutions to compare")
    g0 = pairs[0].grid
    for p in pairs[1:]:
        if p.grid.n_x != g0.n_x or not math.isclose(p.grid.dt, g0.dt, rel_tol=1e-12):
            raise GridMismatch("all horizons must share n_x and dt")
        if p.v_offset != pairs[0].v_offset:
            raise GridMismatch("solutions use different value offsets")
    Ts = [p.grid.horizon for p in pairs]
    if any(b <= a for a, b in zip(Ts, Ts[1:])):
        raise PreconditionFailure("horizons must be strictly increasing")
    if Ts[0] < 2 * t0:
        raise PreconditionFailure("every horizon must be at least 2 t0")
    k = int(round(t0 / g0.dt)) + 1
    v_diff, m_diff = [], []
    for a, b in zip(pairs, pairs[1:]):
        va, vb = a.value_deviation()[:k], b.value_deviation()[:k]
        ma, mb = a.density_deviation()[:k], b.density_deviation()[:k]
        v_diff.append(float(np.max(np.abs(va - vb))))
        m_diff.append(float(np.max(np.abs(ma - mb))))
    means = [abs(mean_at_half(p)) for p in pairs]
    return HorizonComparison(Ts, t0, v_diff, m_diff, means)


# ---------------------------------------------------------------------------
# counterexample probe


@dataclass
class RateRow:
    eps: float
    error: float
    ratio: float | None
    converged: bool

    def to_dict(self) -> dict:
        return {"eps": self.eps, "error": self.error, "ratio": self.ratio, "converged": self.converged}


@dataclass
class RateTable:
    rows: list = field(default_factory=list)

    def add(self, eps: float, error: float, converged: bool) -> None:
        if self.rows and not eps < self.rows[-1].eps:
            raise ValueError("eps must decrease down the table")
        prev = self.rows[-1].error if self.rows else None
        ratio = error / prev if prev else None
        self.rows.append(RateRow(eps, error, ratio, converged))

    def to_dict(self) -> list:
        return [r.to_dict() for r in self.rows]


@dataclass
class ProbeResult:
    table: RateTable
    verdict: str
    floor: float
    threshold: float

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "floor": self.floor,
            "threshold": self.threshold,
            "rate_table": self.table.to_dict(),
        }


NO_SOLUTION = "NO_SOLUTION"
SOLUTION_EXISTS = "SOLUTION_EXISTS"


def counterexample_probe(m0: DensitySlice, mT_signed, model: HamiltonianModel, grid: GridSpec,
                         cfg: NewtonConfig | None = None, schedule=None,
                         threshold: float = 1e-2, tolerance: float = 0.1) -> ProbeResult:
    """Penalized solves over the whole eps schedule, recording failures as data.

    Each eps is warm-started from the last converged solve.  A failed solve
    contributes the terminal error of its best iterate, whose clamped density
    is nonnegative.  The verdict is NO_SOLUTION when, for every eps at or below
    ``threshold``, either Newton failed or the terminal error stayed above
    |min m_T| (1 - tolerance).
    """
    cfg = cfg or NewtonConfig()
    mT = np.asarray(mT_signed.values if isinstance(mT_signed, DensitySlice) else mT_signed, dtype=float)
    sched = [float(e) for e in (schedule if schedule is not None else default_epsilon_schedule(20))]
    floor = max(0.0, -float(mT.min()))
    b0 = InitialDensity(m0)
    table = RateTable()
    w_prev, s_prev = None, None
    for eps in sched:
        scheme = BoxScheme(grid, model, b0, TerminalDensityPenalized(mT, eps))
        try:
            if s_prev is None:
                rep = homotopy_solve(model, b0, TerminalDensityPenalized(mT, eps), grid, cfg)
            else:
                rep = newton_iterate(scheme, rebase(w_prev, s_prev, scheme), cfg)
            table.add(eps, terminal_error(rep, mT), True)
            w_prev, s_prev = rep.deviation, rep.scheme
        except NoConvergence as exc:
            best = exc.best
            err = terminal_error(best, mT) if best is not None else float("inf")
            table.add(eps, err, False)
    small = [r for r in table.rows if r.eps <= threshold]
    stagnates = all((not r.converged) or r.error >= floor * (1.0 - tolerance) for r in small)
    verdict = NO_SOLUTION if (floor > 0 and small and stagnates) else SOLUTION_EXISTS
    return ProbeResult(table, verdict, floor, threshold)


# ---------------------------------------------------------------------------
# report


@dataclass
class DiagnosticsReport:
    sections: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)

    def add(self, name: str, payload: dict, verdict: str | None = None, series=None) -> None:
        self.sections[name] = payload
        if verdict is not None:
            self.verdicts[name] = verdict
        if series is not None:
            self.series[name] = series

    @property
    def passed(self) -> bool:
        return all(v == PASS for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return {"sections": self.sections, "verdicts": self.verdicts, "passed": self.passed}

    def csv_files(self) -> dict:
        """name -> CSV text for each recorded time series."""
        out = {}
        for name, (header, columns) in sorted(self.series.items()):
            buf = io.StringIO()
            wr = csv.writer(buf, lineterminator="\n")
            wr.writerow(header)
            for row in zip(*columns):
                wr.writerow([repr(float(v)) for v in row])
            out[f"{name}.csv"] = buf.getvalue()
        return out


def run_suite(pair: SolutionPair, model: HamiltonianModel, names, seed: int = 0,
              convexity_tolerance: float = 1e-4, decrease_tolerance: float = 1e-6,
              monotonicity_samples: int = 10_000, turnpike_window=None) -> DiagnosticsReport:
    """Run the named diagnostics on a stored pair."""
    rep = DiagnosticsReport()
    g = pair.grid
    for name in names:
        if name == "convexity":
            for h in (Square(), Power4(), InversePower(1.0)):
                prof = convexity_profile(pair, h, convexity_tolerance)
                key = f"convexity_{h.name}"
                rep.add(key, prof.to_dict(), prof.verdict,
                        (["t", "value"], [g.t, prof.values]))
        elif name == "terminal_decrease":
            try:
                prof = terminal_decrease_check(pair, model, Square(), decrease_tolerance)
                rep.add(name, prof.to_dict(), prof.verdict, (["t", "value"], [g.t, prof.values]))
            except PreconditionFailure as exc:
                rep.add(name, {"skipped": str(exc)})
        elif name == "monotonicity":
            smp = monotonicity_sample(model, monotonicity_samples, seed)
            rep.add(name, smp.to_dict(), smp.verdict)
        elif name == "turnpike":
            try:
                fit = turnpike_fit(pair, turnpike_window)
                verdict = PASS if fit.omega > 0 and fit.r_squared >= 0.95 else FAIL
                rep.add(name, fit.to_dict(), verdict,
                        (["t", "m_dev", "ux"], [g.t, fit.series_m, fit.series_ux]))
            except InsufficientData as exc:
                rep.add(name, {"error": str(exc)}, FAIL)
        else:
            raise ValueError(f"unknown diagnostic {name!r}")
    return rep


DIAGNOSTICS = ("convexity", "terminal_decrease", "monotonicity", "turnpike")
