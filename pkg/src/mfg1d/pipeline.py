"""Problem definitions, end-to-end solves and a posteriori verification."""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .elliptic import BoxScheme, InitialDensity, TerminalCostBoundary, pointwise_density
from .errors import AssumptionFailure, NoConvergence, NoRoot
from .grid import DensitySlice, Field, GridSpec, _dt, _dx, integrate_x
from .hamiltonian import HamiltonianModel, TerminalCost, check_assumptions, lambda_star
from .solver import NewtonConfig, SolveReport, epsilon_continuation, homotopy_solve

MASS_RTOL = 1e-12
DEGENERATE_DELTAS = (1e-2, 1e-3, 1e-4)


class ProblemKind(str, enum.Enum):
    TERMINAL_COST = "TerminalCost"
    PLANNING = "Planning"
    LONG_HORIZON = "LongHorizon"


class Normalization(str, enum.Enum):
    NONE = "None"
    MEAN_ZERO_AT_HALF_T = "MeanZeroAtHalfT"


# ---------------------------------------------------------------------------
# density presets


_PRESET = re.compile(r"^\s*(uniform|vanishing|cosine|signed)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*$")


def density_preset(spec: str, n_x: int) -> np.ndarray:
    """Evaluate a named density: ``uniform``, ``cosine(a)`` = 1 + a cos(2 pi x),
    ``vanishing`` = 1 - cos(2 pi x), ``signed(a)`` = 1 - a cos(2 pi x) with a > 1."""
    mt = _PRESET.match(spec)
    if not mt:
        raise ValueError(f"unknown density preset {spec!r}")
    name, arg = mt.group(1), mt.group(2)
    x = np.arange(n_x) / n_x
    c = np.cos(2.0 * np.pi * x)
    if name in ("uniform", "vanishing"):
        if arg is not None:
            raise ValueError(f"preset {name!r} takes no argument")
        return np.ones(n_x) if name == "uniform" else 1.0 - c
    if arg is None:
        raise ValueError(f"preset {name!r} needs an amplitude")
    a = float(arg)
    if name == "cosine":
        if abs(a) >= 1.0:
            raise ValueError("cosine amplitude must satisfy |a| < 1")
        return 1.0 + a * c
    if a <= 1.0:
        raise ValueError("signed amplitude must exceed 1 so the minimum is negative")
    return 1.0 - a * c


def regularize(m0: DensitySlice, delta: float) -> DensitySlice:
    """(m0 + delta) / (1 + delta), renormalized."""
    return DensitySlice.normalized((m0.values + delta) / (1.0 + delta))


# ---------------------------------------------------------------------------
# problem definition


@dataclass(frozen=True)
class ProblemSpec:
    kind: ProblemKind
    model: HamiltonianModel
    grid: GridSpec
    m0: DensitySlice
    cost: TerminalCost | None = None
    mT: np.ndarray | None = None
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    homotopy_steps: int = 1
    delta_schedule: tuple = ()
    degenerate_deltas: tuple = DEGENERATE_DELTAS
    planning_tolerance: float = 1e-6
    eps_schedule: tuple | None = None
    eps_min: float = 1e-8
    box_p: float = 10.0
    assumption_c0: float = 10.0
    assumption_samples: int = 41

    def __post_init__(self):
        object.__setattr__(self, "kind", ProblemKind(self.kind))
        if self.m0.n_x != self.grid.n_x:
            raise ValueError("m0 does not match the grid")
        if abs(self.m0.mass - 1.0) > MASS_RTOL:
            raise ValueError("m0 must have unit mass")
        if np.any(self.m0.values < 0):
            raise ValueError("m0 must be nonnegative")
        if self.kind is ProblemKind.PLANNING:
            if self.mT is None:
                raise ValueError("planning problems need m_T")
            mT = np.array(self.mT.values if isinstance(self.mT, DensitySlice) else self.mT, dtype=float)
            if mT.shape != (self.grid.n_x,):
                raise ValueError("m_T does not match the grid")
            if abs(mT.mean() - 1.0) > MASS_RTOL:
                raise ValueError("m_T must have unit mass")
            mT.setflags(write=False)
            object.__setattr__(self, "mT", mT)
        elif self.cost is None:
            raise ValueError(f"{self.kind.value} problems need a terminal cost")
        if self.homotopy_steps < 1:
            raise ValueError("homotopy_steps must be at least 1")

    @property
    def terminal_boundary(self):
        return TerminalCostBoundary(self.cost)

    @property
    def degenerate(self) -> bool:
        return float(self.m0.values.min()) <= 0.0

    def density_box(self) -> tuple[float, float]:
        vals = [self.m0.values]
        if self.mT is not None:
            vals.append(np.asarray(self.mT))
        allv = np.concatenate(vals)
        pos = allv[allv > 0]
        lo = float(pos.min()) / 2.0
        if self.degenerate:
            lo = min(lo, min(self.degenerate_deltas) / 2.0)
        return lo, 2.0 * float(allv.max())


# ---------------------------------------------------------------------------
# solution pairs


@dataclass
class SolutionPair:
    u: Field
    m: Field
    normalization: Normalization = Normalization.NONE
    kind: ProblemKind = ProblemKind.TERMINAL_COST
    u_deviation: np.ndarray | None = None
    m_deviation: np.ndarray | None = None
    v_offset: float = 0.0
    lam: float | None = None

    def __post_init__(self):
        if not np.all(self.m.values > 0):
            raise ValueError("solution densities must be positive")

    @property
    def grid(self) -> GridSpec:
        return self.u.grid

    def density_deviation(self) -> np.ndarray:
        return self.m_deviation if self.m_deviation is not None else self.m.values - 1.0

    def value_deviation(self) -> np.ndarray:
        """v - v_offset, where v = u - lambda (T - t); exact when available."""
        if self.u_deviation is not None:
            return self.u_deviation
        g = self.grid
        lam = self.lam if self.lam is not None else 0.0
        return self.u.values - lam * (g.horizon - g.t)[:, None] - self.v_offset

    @property
    def v(self) -> Field:
        return Field(self.grid, self.value_deviation() + self.v_offset)


def _pair_from_report(rep: SolveReport, kind: ProblemKind) -> SolutionPair:
    sch = rep.scheme
    return SolutionPair(
        u=rep.u,
        m=rep.m,
        kind=kind,
        u_deviation=rep.deviation,
        m_deviation=rep.density_deviation,
        v_offset=sch.offset,
        lam=-sch.slope,
    )


# ---------------------------------------------------------------------------
# density recovery and residuals


def recover_density(u: Field, model: HamiltonianModel, scheme: BoxScheme | None = None) -> Field:
    """m = H^-1(u_x, u_t) on the nodes.

    Without ``scheme`` the centered grid stencils are used.  With a scheme the
    scheme's own nodal densities are returned (data at t = 0 and T, averages
    of half-level densities inside), which is what the solver reports.
    """
    if scheme is not None:
        st = scheme.state(scheme.to_deviation(u), check_clamp=False)
        return Field(u.grid, st.nodal_density())
    m, ok = pointwise_density(u, model)
    if not np.all(ok):
        j, i = np.argwhere(~ok)[0]
        raise NoRoot(f"no admissible density at node (i={i}, j={j})", location=(int(i), int(j)))
    return Field(u.grid, m)


def continuity_residual(pair: SolutionPair, model: HamiltonianModel) -> Field:
    """m_t - (m H_p(u_x, m))_x with centered nodal flux differences."""
    g = pair.grid
    m = pair.m.values
    ux = _dx(pair.u.values, g.dx)
    flux = m * model.H_p(ux, m)
    res = _dt(m, g.dt) - _dx(flux, g.dx)
    return Field(g, res)


def hj_residual(pair: SolutionPair, model: HamiltonianModel) -> Field:
    g = pair.grid
    u = pair.u.values
    return Field(g, -_dt(u, g.dt) + model.H(_dx(u, g.dx), pair.m.values))


def verify_solution(pair: SolutionPair, spec: ProblemSpec) -> dict:
    """Max-norm residuals and bounds of a pair; depends only on (u, m) values."""
    g = pair.grid
    model = spec.model
    u, m = pair.u.values, pair.m.values
    hj = hj_residual(pair, model).values
    cont = continuity_residual(pair, model).values
    rec = {
        "hj_residual": float(np.max(np.abs(hj))),
        "hj_residual_interior": float(np.max(np.abs(hj[1:-1]))),
        "continuity_residual": float(np.max(np.abs(cont))),
        "continuity_residual_interior": float(np.max(np.abs(cont[1:-1]))),
        "initial_mismatch": float(np.max(np.abs(m[0] - spec.m0.values))),
        "mass_deviation": float(np.max(np.abs(integrate_x(m) - 1.0))),
        "min_m": float(m.min()),
        "max_m": float(m.max()),
    }
    if spec.kind is ProblemKind.PLANNING:
        rec["terminal_mismatch"] = float(np.max(np.abs(m[-1] - np.asarray(spec.mT))))
    else:
        rec["terminal_mismatch"] = float(np.max(np.abs(u[-1] - spec.cost.g(m[-1]))))
    if pair.lam is not None:
        vv = u - pair.lam * (g.horizon - g.t)[:, None]
        shifted = -_dt(vv, g.dt) + pair.lam + model.H(_dx(vv, g.dx), m)
        rec["hj_residual_shifted"] = float(np.max(np.abs(shifted)))
    return rec


# ---------------------------------------------------------------------------
# solves


def check_spec_assumptions(spec: ProblemSpec):
    lo, hi = spec.density_box()
    cost = spec.cost if spec.kind is not ProblemKind.PLANNING else None
    return check_assumptions(
        spec.model, cost, (-spec.box_p, spec.box_p, lo, hi), spec.assumption_samples, spec.assumption_c0
    )


@dataclass
class DegenerateRun:
    deltas: list
    interior_minima: list
    pairs: list
    reports: list

    def floor_ratio(self) -> float:
        mins = np.asarray(self.interior_minima)
        return float(mins.max() / mins.min())

    def to_dict(self) -> dict:
        return {
            "deltas": list(self.deltas),
            "interior_minima": list(self.interior_minima),
            "floor_ratio": self.floor_ratio(),
        }


def interior_minimum(pair: SolutionPair) -> float:
    g = pair.grid
    t = g.t
    sel = (t >= 0.25 * g.horizon) & (t <= 0.75 * g.horizon)
    return float(pair.m.values[sel].min())


def solve_degenerate(spec: ProblemSpec) -> DegenerateRun:
    """Solve with (m0 + delta)/(1 + delta) along the delta schedule, warm-started."""
    pairs, reports, mins = [], [], []
    u_prev = None
    kind = ProblemKind.TERMINAL_COST if spec.kind is ProblemKind.PLANNING else spec.kind
    for d in spec.degenerate_deltas:
        m0d = regularize(spec.m0, d)
        rep = homotopy_solve(
            spec.model, InitialDensity(m0d), spec.terminal_boundary, spec.grid,
            spec.newton, steps=spec.homotopy_steps if u_prev is None else 1,
            delta_schedule=spec.delta_schedule or None, u0=u_prev,
        )
        pair = _pair_from_report(rep, kind)
        pairs.append(pair)
        reports.append(rep)
        mins.append(interior_minimum(pair))
        u_prev = rep.u
    return DegenerateRun(list(spec.degenerate_deltas), mins, pairs, reports)


def normalize_half_time(pair: SolutionPair) -> SolutionPair:
    """Shift u by a constant so that the mean of v at t = T/2 vanishes."""
    g = pair.grid
    vdev = pair.value_deviation()
    s = (g.n_t - 1) / 2.0
    j0 = int(math.floor(s))
    frac = s - j0
    mean0 = math.fsum(vdev[j0]) / g.n_x
    if frac > 0:
        mean1 = math.fsum(vdev[j0 + 1]) / g.n_x
        c_dev = (1.0 - frac) * mean0 + frac * mean1
    else:
        c_dev = mean0
    return SolutionPair(
        u=Field(g, pair.u.values - (c_dev + pair.v_offset)),
        m=pair.m,
        normalization=Normalization.MEAN_ZERO_AT_HALF_T,
        kind=pair.kind,
        u_deviation=vdev - c_dev,
        m_deviation=pair.m_deviation,
        v_offset=0.0,
        lam=pair.lam,
    )


def solve(spec: ProblemSpec, check: bool = True) -> tuple[SolutionPair, SolveReport]:
    """Solve the problem described by ``spec``; see ``ProblemKind``."""
    if check:
        report = check_spec_assumptions(spec)
        if not report.passed:
            names = ", ".join(c.name for c in report.failures())
            raise AssumptionFailure(f"model fails {names} on the admissibility box", report)
    if spec.kind is ProblemKind.PLANNING:
        mT = np.asarray(spec.mT)
        if mT.min() <= 0:
            from .diagnostics import counterexample_probe

            probe = counterexample_probe(spec.m0, mT, spec.model, spec.grid, spec.newton,
                                         schedule=spec.eps_schedule)
            raise NoConvergence(
                f"planning target has negative minimum; probe verdict {probe.verdict}",
                detail={"probe": probe},
            )
        res = epsilon_continuation(
            spec.m0, mT, spec.model, spec.grid, spec.newton,
            schedule=spec.eps_schedule, tolerance=spec.planning_tolerance,
            eps_min=spec.eps_min, homotopy_steps=spec.homotopy_steps,
        )
        rep = res.final
        if not res.converged_to_tolerance:
            raise NoConvergence(
                f"terminal error {res.errors[-1]:.3e} above tolerance {spec.planning_tolerance:g}",
                best=rep, reports=res.reports,
            )
        pair = normalize_half_time(_pair_from_report(rep, ProblemKind.PLANNING))
        rep.epsilon_result = res
        return pair, rep
    if spec.degenerate:
        run = solve_degenerate(spec)
        rep = run.reports[-1]
        rep.degenerate_run = run
        return run.pairs[-1], rep
    rep = homotopy_solve(
        spec.model, InitialDensity(spec.m0), spec.terminal_boundary, spec.grid, spec.newton,
        steps=spec.homotopy_steps, delta_schedule=spec.delta_schedule or None,
    )
    return _pair_from_report(rep, spec.kind), rep


def uniform_solution(spec: ProblemSpec) -> np.ndarray:
    """H(0,1)(t - T) + g(1), the flat equilibrium."""
    g = spec.grid
    return (-lambda_star(spec.model) * (g.t - g.horizon) + float(spec.cost.g(1.0)))[:, None] * np.ones(g.n_x)


__all__ = [
    "DegenerateRun",
    "Normalization",
    "ProblemKind",
    "ProblemSpec",
    "SolutionPair",
    "check_spec_assumptions",
    "continuity_residual",
    "density_preset",
    "hj_residual",
    "interior_minimum",
    "normalize_half_time",
    "recover_density",
    "regularize",
    "solve",
    "solve_degenerate",
    "uniform_solution",
    "verify_solution",
]
