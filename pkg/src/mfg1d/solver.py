"""Damped Newton iteration, banded direct solves and continuation loops."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack

from .elliptic import BoxScheme, InitialDensity, TerminalDensityPenalized, bandwidth
from .errors import ClampOverflow, NoConvergence, SingularMatrix
from .grid import DensitySlice, Field, GridSpec
from .hamiltonian import HamiltonianModel

logger = logging.getLogger(__name__)

PIVOT_RTOL = 1e-14


# ---------------------------------------------------------------------------
# banded linear algebra


def banded_solve(J, r) -> np.ndarray:
    """Solve J x = r by LU with partial pivoting inside the band (LAPACK gbtrf)."""
    A = sp.coo_matrix(J)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    rhs = np.asarray(r, dtype=float).ravel()
    kl, ku = bandwidth(A)
    ab = np.zeros((2 * kl + ku + 1, n))
    np.add.at(ab, (kl + ku + A.row - A.col, A.col), A.data)
    norm = float(np.max(np.abs(sp.csr_matrix(A)).sum(axis=1))) if A.nnz else 0.0
    lu, piv, info = lapack.dgbtrf(ab, kl, ku)
    if info < 0:
        raise ValueError(f"gbtrf argument error {info}")
    pivots = np.abs(lu[kl + ku])
    if info > 0 or norm == 0.0 or pivots.min() < PIVOT_RTOL * norm:
        raise SingularMatrix(f"pivot {pivots.min():.3e} below {PIVOT_RTOL:g} * |J| = {norm:.3e}")
    x, info = lapack.dgbtrs(lu, kl, ku, rhs, piv)
    if info != 0:
        raise SingularMatrix(f"gbtrs failed with info {info}")
    # one step of refinement keeps the relative residual near round-off
    Acsr = sp.csr_matrix(A)
    res = rhs - Acsr @ x
    if np.max(np.abs(res)) > 1e-12 * max(np.max(np.abs(rhs)), 1e-300):
        dx, _ = lapack.dgbtrs(lu, kl, ku, res, piv)
        x = x + dx
    return x


# ---------------------------------------------------------------------------
# configuration and reports


@dataclass(frozen=True)
class NewtonConfig:
    rtol: float = 1e-10
    max_iter: int = 50
    backtrack: float = 0.5
    max_halvings: int = 20
    log_path: str | None = None

    def __post_init__(self):
        if not self.rtol > 0:
            raise ValueError("rtol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class TraceEntry:
    parameter: float
    iterations: int
    residual: float
    clamp_count: int

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "iterations": self.iterations,
            "residual": self.residual,
            "clamp_count": self.clamp_count,
        }


@dataclass
class ContinuationTrace:
    name: str = "theta"
    entries: list = field(default_factory=list)

    def append(self, entry: TraceEntry) -> None:
        if len(self.entries) >= 2:
            a, b = self.entries[-2].parameter, self.entries[-1].parameter
            c = entry.parameter
            if (b - a) * (c - b) <= 0:
                raise ValueError("continuation parameters must be strictly monotone")
        elif self.entries and entry.parameter == self.entries[-1].parameter:
            raise ValueError("continuation parameters must be strictly monotone")
        self.entries.append(entry)

    @property
    def parameters(self) -> list:
        return [e.parameter for e in self.entries]

    def to_dict(self) -> dict:
        return {"name": self.name, "entries": [e.to_dict() for e in self.entries]}


@dataclass
class SolveReport:
    u: Field
    m: Field
    deviation: np.ndarray
    density_deviation: np.ndarray
    converged: bool
    trace: ContinuationTrace
    residual_norm: float
    clamping_active_at_solution: bool
    iterations: int = 0
    history: list = field(default_factory=list)
    scheme: BoxScheme | None = None
    traces: list = field(default_factory=list)

    @property
    def grid(self) -> GridSpec:
        return self.u.grid

    def terminal_density(self) -> np.ndarray:
        return self.m.values[-1]

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "residual_norm": self.residual_norm,
            "clamping_active_at_solution": self.clamping_active_at_solution,
            "iterations": self.iterations,
            "traces": [t.to_dict() for t in (self.traces or [self.trace])],
        }


def write_iteration_log(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _scaled_norm(scheme: BoxScheme, w, residual) -> float:
    u_max = float(np.max(np.abs(scheme.to_u(w))))
    return float(np.max(np.abs(residual))) / (1.0 + u_max)


def _report(scheme, w, st, norm, converged, it, history, trace) -> SolveReport:
    g = scheme.grid
    return SolveReport(
        u=Field(g, scheme.to_u(w)),
        m=Field(g, st.nodal_density()),
        deviation=np.array(w, dtype=float).reshape(g.shape),
        density_deviation=st.nodal_deviation(),
        converged=converged,
        trace=trace,
        residual_norm=norm,
        clamping_active_at_solution=st.clamp_count > 0,
        iterations=it,
        history=history,
        scheme=scheme,
        traces=[trace],
    )


def _refine(scheme, w, st, norm, cfg):
    """Mean-mode refinement of a converged iterate; kept only if still converged."""
    w2 = scheme.refine_mass_modes(w).ravel()
    st2 = scheme.state(w2, check_clamp=False)
    norm2 = _scaled_norm(scheme, w2, st2.residual)
    if norm2 <= max(cfg.rtol, norm) and st2.clamp_count == 0:
        return w2, st2, norm2
    return w, st, norm


def newton_iterate(scheme: BoxScheme, w0=None, cfg: NewtonConfig | None = None) -> SolveReport:
    """Damped Newton on the deviation w from the flat reference profile."""
    cfg = cfg or NewtonConfig()
    w = scheme.uniform_deviation() if w0 is None else np.array(w0, dtype=float).reshape(scheme.grid.shape)
    w = w.ravel()
    history: list = []
    trace = ContinuationTrace("newton")
    try:
        st = scheme.state(w)
    except ClampOverflow as exc:
        raise NoConvergence(f"initial guess leaves the admissible set: {exc}") from exc
    norm = _scaled_norm(scheme, w, st.residual)
    best = (norm, w, st)
    log_fh = open(cfg.log_path, "a", encoding="utf-8") if cfg.log_path else None
    try:
        for it in range(cfg.max_iter + 1):
            rec = {"iteration": it, "residual": norm, "damping_exponent": 0 if it == 0 else k_used,
                   "clamp_count": st.clamp_count}
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            logger.debug("newton %d residual %.3e clamps %d", it, norm, st.clamp_count)
            if norm <= cfg.rtol and st.clamp_count == 0:
                w, st, norm = _refine(scheme, w, st, norm, cfg)
                return _report(scheme, w, st, norm, True, it, history, trace)
            if it == cfg.max_iter:
                break
            J = scheme.jacobian(w, st)
            step = banded_solve(J, -st.residual.ravel())
            lam = 1.0
            accepted = False
            for k_used in range(cfg.max_halvings + 1):
                trial = w + lam * step
                try:
                    st_t = scheme.state(trial)
                except ClampOverflow:
                    lam *= cfg.backtrack
                    continue
                norm_t = _scaled_norm(scheme, trial, st_t.residual)
                if np.isfinite(norm_t) and norm_t <= (1.0 - 0.25 * lam) * norm:
                    accepted = True
                    break
                lam *= cfg.backtrack
            if not accepted:
                bn, bw, bst = best
                rep = _report(scheme, bw, bst, bn, False, it, history, trace)
                raise NoConvergence("line search hit the damping floor", best=rep)
            w, st, norm = trial, st_t, norm_t
            if norm < best[0]:
                best = (norm, w, st)
    finally:
        if log_fh:
            log_fh.close()
    bn, bw, bst = best
    rep = _report(scheme, bw, bst, bn, False, cfg.max_iter, history, trace)
    raise NoConvergence(f"no convergence in {cfg.max_iter} iterations", best=rep)


def newton_solve(u0: Field | None, model: HamiltonianModel, boundary0, boundaryT,
                 cfg: NewtonConfig | None = None, grid: GridSpec | None = None) -> SolveReport:
    """Newton solve from ``u0`` (the flat reference profile when ``None``)."""
    if grid is None:
        if u0 is None:
            raise ValueError("need u0 or a grid")
        grid = u0.grid
    scheme = BoxScheme(grid, model, boundary0, boundaryT)
    w0 = None if u0 is None else scheme.to_deviation(u0)
    return newton_iterate(scheme, w0, cfg)


# ---------------------------------------------------------------------------
# continuation


def _blend_density(theta, values):
    return (1.0 - theta) + theta * np.asarray(values, dtype=float)


def _at_theta(boundary0, boundaryT, theta):
    b0 = InitialDensity(DensitySlice(_blend_density(theta, boundary0.m0.values)))
    if isinstance(boundaryT, TerminalDensityPenalized):
        bT = TerminalDensityPenalized(_blend_density(theta, boundaryT.mT), boundaryT.eps)
    else:
        bT = boundaryT
    return b0, bT


def rebase(w, old: BoxScheme, new: BoxScheme) -> np.ndarray:
    """Express a deviation relative to another scheme's reference profile."""
    w = np.asarray(w, dtype=float).reshape(old.grid.shape)
    t = old.grid.t[:, None] - old.grid.horizon
    return w + (old.slope - new.slope) * t + (old.offset - new.offset)


def homotopy_solve(model: HamiltonianModel, boundary0: InitialDensity, boundaryT, grid: GridSpec,
                   cfg: NewtonConfig | None = None, steps: int = 1,
                   delta_schedule=None, u0: Field | None = None) -> SolveReport:
    """Continuation in the data m0^theta = (1 - theta) + theta m0, theta = 1/steps, ..., 1.

    The terminal density of a penalized condition is blended the same way;
    the terminal cost g is kept fixed because the flat profile already solves
    the theta = 0 problem for any g.  With ``delta_schedule`` the theta path
    runs on H(p, m + delta_0) and delta is then lowered through the schedule
    and finally to 0.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    cfg = cfg or NewtonConfig()
    deltas = [float(d) for d in (delta_schedule or [])]
    if any(b >= a for a, b in zip(deltas, deltas[1:])) or any(d <= 0 for d in deltas):
        raise ValueError("delta schedule must be positive and strictly decreasing")
    base_model = model.with_delta(deltas[0]) if deltas else model
    theta_trace = ContinuationTrace("theta")
    prev_scheme = None
    w = None
    if u0 is not None:
        prev_scheme = BoxScheme(grid, base_model, boundary0, boundaryT)
        w = prev_scheme.to_deviation(u0)
    report = None
    last_good = 0.0
    for k in range(1, steps + 1):
        theta = k / steps
        b0, bT = _at_theta(boundary0, boundaryT, theta)
        scheme = BoxScheme(grid, base_model, b0, bT)
        if w is not None and prev_scheme is not None:
            w = rebase(w, prev_scheme, scheme)
        try:
            report = newton_iterate(scheme, w, cfg)
        except NoConvergence as exc:
            exc.trace = theta_trace
            exc.detail["last_good_theta"] = last_good
            raise
        theta_trace.append(TraceEntry(theta, report.iterations, report.residual_norm,
                                      int(report.clamping_active_at_solution)))
        w, prev_scheme, last_good = report.deviation, scheme, theta
    traces = [theta_trace]
    if deltas:
        delta_trace = ContinuationTrace("delta")
        delta_trace.append(TraceEntry(deltas[0], report.iterations, report.residual_norm, 0))
        for d in deltas[1:] + [0.0]:
            scheme = BoxScheme(grid, model.with_delta(d), boundary0, boundaryT)
            w = rebase(w, prev_scheme, scheme)
            try:
                report = newton_iterate(scheme, w, cfg)
            except NoConvergence as exc:
                exc.trace = delta_trace
                exc.detail["last_good_delta"] = delta_trace.parameters[-1]
                raise
            delta_trace.append(TraceEntry(d, report.iterations, report.residual_norm, 0))
            w, prev_scheme = report.deviation, scheme
        traces.append(delta_trace)
    report.trace = traces[-1]
    report.traces = traces
    return report


def default_epsilon_schedule(k_max: int = 40) -> list:
    return [2.0**-k for k in range(k_max + 1)]


@dataclass
class EpsilonResult:
    reports: list
    epsilons: list
    errors: list
    converged_to_tolerance: bool

    @property
    def final(self) -> SolveReport:
        return self.reports[-1]


def terminal_error(report: SolveReport, mT) -> float:
    vals = mT.values if isinstance(mT, DensitySlice) else np.asarray(mT, dtype=float)
    return float(np.max(np.abs(report.terminal_density() - vals)))


def epsilon_continuation(m0: DensitySlice, mT, model: HamiltonianModel, grid: GridSpec,
                         cfg: NewtonConfig | None = None, schedule=None,
                         tolerance: float = 1e-6, eps_min: float = 1e-8,
                         homotopy_steps: int = 1, stop_at_tolerance: bool = True) -> EpsilonResult:
    """Penalized solves eps u(T) = m(T) - m_T along a decreasing eps schedule.

    Each solve is warm-started from the previous one.  On failure the raised
    ``NoConvergence`` carries all earlier reports.
    """
    cfg = cfg or NewtonConfig()
    sched = [float(e) for e in (schedule if schedule is not None else default_epsilon_schedule())]
    if not sched or any(e <= 0 for e in sched) or any(b >= a for a, b in zip(sched, sched[1:])):
        raise ValueError("eps schedule must be positive and strictly decreasing")
    mT_vals = mT.values if isinstance(mT, DensitySlice) else np.asarray(mT, dtype=float)
    b0 = InitialDensity(m0)
    reports, eps_done, errors = [], [], []
    trace = ContinuationTrace("epsilon")
    w, prev = None, None
    reached = False
    for eps in sched:
        if eps < eps_min:
            break
        bT = TerminalDensityPenalized(mT_vals, eps)
        try:
            if prev is None:
                rep = homotopy_solve(model, b0, bT, grid, cfg, steps=homotopy_steps)
            else:
                scheme = BoxScheme(grid, model, b0, bT)
                rep = newton_iterate(scheme, rebase(w, prev, scheme), cfg)
        except NoConvergence as exc:
            exc.reports = reports
            exc.trace = trace
            exc.detail.update({"failed_eps": eps, "epsilons": eps_done, "errors": errors})
            raise
        err = terminal_error(rep, mT_vals)
        trace.append(TraceEntry(eps, rep.iterations, rep.residual_norm,
                                int(rep.clamping_active_at_solution)))
        rep.trace = trace
        rep.traces = [trace]
        reports.append(rep)
        eps_done.append(eps)
        errors.append(err)
        w, prev = rep.deviation, rep.scheme
        if err < tolerance:
            reached = True
            if stop_at_tolerance:
                break
    return EpsilonResult(reports, eps_done, errors, reached)


__all__ = [
    "ContinuationTrace",
    "EpsilonResult",
    "NewtonConfig",
    "SolveReport",
    "TraceEntry",
    "banded_solve",
    "default_epsilon_schedule",
    "epsilon_continuation",
    "homotopy_solve",
    "newton_iterate",
    "newton_solve",
    "rebase",
    "terminal_error",
    "write_iteration_log",
]
