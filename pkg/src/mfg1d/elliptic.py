"""Discrete form of the elliptic problem for u after eliminating m = H^-1(u_x, u_t).

The solver works with a conservative box scheme.  Densities live on the half
time levels t_{k+1/2}:

    m_{k+1/2,i} = H^-1( (cx_k + cx_{k+1}) / 2 , (u_{k+1,i} - u_{k,i}) / dt )

where cx_j is the centered x-gradient at level j.  The boundary data enter as
density levels: m0 below t = 0 and m_T = g^-1(u(T)) (or eps u(T) + m_T for the
penalized terminal condition) above t = T.  Row (j, i) is the finite-volume
continuity balance over the time cell around t_j:

    (upper_i - lower_i) / tau_j - (F_{i+1/2} - F_{i-1/2}) / dx = 0,
    F = me H_p(pe, me),

with tau = dt inside and dt/2 on the two boundary cells, pe the edge gradient
(interpolated to the cell center on the boundary cells) and me the average of
the four neighbouring densities.  Summing the rows over i shows the scheme
conserves discrete mass exactly.  Its linearization at the flat state of
H = p^2/2 - m is the five-point operator -(D_tt + D_xx).

``quasilinear_residual`` evaluates the pointwise form -Tr(A(Du) D^2u) with
the boundary rows -u_t + H(u_x, m0) and u_t - H(u_x, g^-1(u)).  It is kept as
an independent consistency check of converged solutions.

Unknowns are ordered lexicographically by (time level, x index).  The solver
unknown is the deviation w = u - (slope (t - T) + offset) from the flat
equilibrium so that small deviations are not swamped by round-off in u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ClampOverflow, DomainError
from .grid import DensitySlice, Field, GridSpec, _dt, _dtt, _dx, _dxx
from .hamiltonian import HamiltonianModel, TerminalCost

M_FLOOR = 1e-8
M_CEIL = 1e8
CLAMP_FRACTION = 0.25


# ---------------------------------------------------------------------------
# boundary kinds


@dataclass(frozen=True)
class InitialDensity:
    m0: DensitySlice


@dataclass(frozen=True)
class TerminalCostBoundary:
    cost: TerminalCost


@dataclass(frozen=True)
class TerminalDensityPenalized:
    """eps u(x,T) = m(x,T) - m_T(x).  ``mT`` may be a signed array."""

    mT: np.ndarray
    eps: float

    def __post_init__(self):
        vals = self.mT.values if isinstance(self.mT, DensitySlice) else self.mT
        arr = np.array(vals, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "mT", arr)
        if not self.eps > 0:
            raise ValueError("penalization eps must be positive")

    def __eq__(self, other):
        return (
            isinstance(other, TerminalDensityPenalized)
            and self.eps == other.eps
            and np.array_equal(self.mT, other.mT)
        )

    def __hash__(self):
        return hash((self.eps, self.mT.tobytes()))


@dataclass(frozen=True)
class Obliqueness:
    margin: float
    passed: bool


def check_obliqueness(boundary) -> Obliqueness:
    """-B_s times the outward normal; identically 1 for all supported kinds."""
    if not isinstance(boundary, (InitialDensity, TerminalCostBoundary, TerminalDensityPenalized)):
        raise TypeError(f"unknown boundary kind {type(boundary).__name__}")
    # B = -s + H(p, m0) at t = 0 with normal -e_t, B = s - H(...) at t = T with +e_t
    return Obliqueness(1.0, True)


# ---------------------------------------------------------------------------
# the coefficient matrix A(p, s)


@dataclass(frozen=True)
class CoefficientMatrix:
    a_xx: np.ndarray | float
    a_xt: np.ndarray | float
    a_tt: np.ndarray | float

    @property
    def det(self):
        return self.a_xx * self.a_tt - self.a_xt * self.a_xt

    def as_array(self) -> np.ndarray:
        return np.array([[self.a_xx, self.a_xt], [self.a_xt, self.a_tt]], dtype=float)


def coefficient_matrix(model: HamiltonianModel, p, m) -> CoefficientMatrix:
    m_arr = np.asarray(m, dtype=float)
    if np.any(~(m_arr > 0)):
        raise DomainError("density must be positive")
    hp = model.H_p(p, m)
    hm = model.H_m(p, m)
    hpp = model.H_pp(p, m)
    hmp = model.H_mp(p, m)
    v = hp + 0.5 * m_arr * hmp
    diag = 0.25 * m_arr**2 * hmp**2 + m_arr * hm * hpp
    a_xx = v * v - diag
    a_xt = -v
    a_tt = np.ones_like(a_xx)
    if np.ndim(a_xx) == 0:
        return CoefficientMatrix(float(a_xx), float(a_xt), 1.0)
    return CoefficientMatrix(a_xx, a_xt, a_tt)


# ---------------------------------------------------------------------------
# the box scheme


def unit_mass_deviation(values) -> np.ndarray:
    """values - 1, with a round-off-sized mass defect projected out.

    The scheme conserves discrete mass exactly, so a defect of 1e-17 in the
    data would otherwise persist as a spurious density plateau.
    """
    d = np.asarray(values, dtype=float) - 1.0
    mean = d.mean()
    if abs(mean) > 1e-12:
        return d
    d = d - mean
    # move the exact remaining sum onto the smallest entry, where it is representable
    k = int(np.argmin(np.abs(d)))
    for _ in range(2):
        d[k] -= math.fsum(d)
    return d


@dataclass
class SchemeState:
    """Intermediate quantities of one residual evaluation."""

    deviation_levels: np.ndarray  # (n_t + 1, n_x) m - 1 at m0, m_{1/2}, ..., m_T
    dm_ds: np.ndarray  # (n_t - 1, n_x)
    dm_dp: np.ndarray  # (n_t - 1, n_x)
    dmT_dz: np.ndarray  # (n_x,)
    clamped: np.ndarray  # (n_t, n_x) bool over half levels then terminal level
    pe: np.ndarray  # (n_t, n_x) effective edge gradients
    me: np.ndarray  # (n_t, n_x) edge densities
    flux: np.ndarray  # (n_t, n_x)
    residual: np.ndarray  # (n_t, n_x)

    @property
    def clamp_count(self) -> int:
        return int(self.clamped.sum())

    @property
    def clamp_fraction(self) -> float:
        return float(self.clamped.mean())

    @property
    def levels(self) -> np.ndarray:
        return 1.0 + self.deviation_levels

    def nodal_deviation(self) -> np.ndarray:
        """m - 1 on the nodes: data at t = 0 and T, cubic interpolation of
        the four nearest density levels inside."""
        lv = self.deviation_levels
        idx, wts = _nodal_weights(lv.shape[0] - 1)
        out = np.einsum("jk,jki->ji", wts, lv[idx])
        out[0] = lv[0]
        out[-1] = lv[-1]
        return out

    def nodal_density(self) -> np.ndarray:
        return 1.0 + self.nodal_deviation()


@lru_cache(maxsize=32)
def _nodal_weights(n_t: int):
    """Level indices (n_t, 4) and Lagrange weights interpolating density
    levels at t = 0, (k + 1/2) dt, T onto the time nodes."""
    pos = np.concatenate(([0.0], np.arange(n_t - 1) + 0.5, [n_t - 1.0]))
    idx = np.empty((n_t, 4), dtype=int)
    wts = np.empty((n_t, 4))
    for j in range(n_t):
        near = np.sort(np.argsort(np.abs(pos - j), kind="stable")[:4])
        s = pos[near]
        for a in range(4):
            others = np.delete(s, a)
            wts[j, a] = np.prod((j - others) / (s[a] - others))
        idx[j] = near
    idx.setflags(write=False)
    wts.setflags(write=False)
    return idx, wts


@dataclass(frozen=True, eq=False)
class BoxScheme:
    grid: GridSpec
    model: HamiltonianModel
    initial: InitialDensity
    terminal: TerminalCostBoundary | TerminalDensityPenalized
    m_floor: float = M_FLOOR
    m_ceil: float = M_CEIL
    clamp_fraction: float = CLAMP_FRACTION

    def __post_init__(self):
        if not isinstance(self.initial, InitialDensity):
            raise TypeError("the t = 0 boundary must be an InitialDensity")
        if not isinstance(self.terminal, (TerminalCostBoundary, TerminalDensityPenalized)):
            raise TypeError("the t = T boundary must be a terminal cost or penalized density")
        n_x = self.grid.n_x
        if self.initial.m0.n_x != n_x:
            raise ValueError("m0 does not match the grid")
        if isinstance(self.terminal, TerminalDensityPenalized) and self.terminal.mT.size != n_x:
            raise ValueError("m_T does not match the grid")

    @cached_property
    def _m0_deviation(self) -> np.ndarray:
        return unit_mass_deviation(self.initial.m0.values)

    @cached_property
    def _mT_deviation(self) -> np.ndarray:
        return unit_mass_deviation(self.terminal.mT)

    # -- reference profile -------------------------------------------------
    @property
    def slope(self) -> float:
        return float(self.model.H(0.0, 1.0))

    @property
    def offset(self) -> float:
        if isinstance(self.terminal, TerminalCostBoundary):
            return float(self.terminal.cost.g(1.0))
        return 0.0

    def reference(self) -> np.ndarray:
        """slope (t - T) + offset as a column of shape (n_t, 1)."""
        t = self.grid.t
        return (self.slope * (t - self.grid.horizon) + self.offset)[:, None]

    def to_deviation(self, u) -> np.ndarray:
        vals = u.values if isinstance(u, Field) else np.asarray(u, dtype=float)
        return vals.reshape(self.grid.shape) - self.reference()

    def to_u(self, w) -> np.ndarray:
        return np.asarray(w, dtype=float).reshape(self.grid.shape) + self.reference()

    # -- constant linear operators -----------------------------------------
    @cached_property
    def operators(self) -> dict:
        g = self.grid
        n_x, n_t = g.n_x, g.n_t
        h, k = g.dx, g.dt
        n_h = n_t - 1
        N = n_x * n_t
        Ix = sp.identity(n_x, format="csr")
        shift_p = sp.diags([1.0, 1.0], [1, -(n_x - 1)], shape=(n_x, n_x), format="csr")  # i -> i+1
        shift_m = sp.diags([1.0, 1.0], [-1, n_x - 1], shape=(n_x, n_x), format="csr")  # i -> i-1
        cdx = (shift_p - shift_m) / (2.0 * h)
        fdx = (shift_p - Ix) / h
        # half-level time difference and average, (n_h * n_x) x N
        e_lo = sp.eye(n_h, n_t, 0, format="csr")
        e_hi = sp.eye(n_h, n_t, 1, format="csr")
        S = sp.kron((e_hi - e_lo) / k, Ix, format="csr")
        P = sp.kron(0.5 * (e_lo + e_hi), cdx, format="csr")
        # terminal level selector, n_x x N
        E_T = sp.kron(sp.eye(1, n_t, n_t - 1), Ix, format="csr")
        # effective edge gradient, N x N
        tw = sp.identity(n_t, format="lil")
        tw[0, 0] = 0.75
        tw[0, 1] = 0.25
        tw[n_t - 1, n_t - 1] = 0.75
        tw[n_t - 1, n_t - 2] = 0.25
        G = sp.kron(tw.tocsr(), fdx, format="csr")
        # edge density from density levels, N x ((n_t + 1) n_x)
        lv_lo = sp.eye(n_t, n_t + 1, 0, format="csr")
        lv_hi = sp.eye(n_t, n_t + 1, 1, format="csr")
        Avg = sp.kron(0.25 * (lv_lo + lv_hi), Ix + shift_p, format="csr")
        tau = np.full(n_t, k)
        tau[0] = tau[-1] = 0.5 * k
        Tdiff = sp.kron(sp.diags(1.0 / tau) @ (lv_hi - lv_lo), Ix, format="csr")
        Div = sp.kron(sp.identity(n_t), (Ix - shift_m) / h, format="csr")
        # map from (half levels, terminal) derivative blocks into the level stack
        Lift = sp.vstack(
            [sp.csr_matrix((n_x, (n_h + 1) * n_x)), sp.identity((n_h + 1) * n_x, format="csr")],
            format="csr",
        )
        return dict(S=S, P=P, E_T=E_T, G=G, Avg=Avg, Tdiff=Tdiff, Div=Div, Lift=Lift, tau=tau, N=N)

    # -- assembly -------------------------------------------------------------
    def _terminal_deviation(self, wT):
        term = self.terminal
        if isinstance(term, TerminalCostBoundary):
            mu, ok = term.cost.inverse_increment(wT)
            m = 1.0 + mu
            good = ok & (m >= self.m_floor) & (m <= self.m_ceil)
            d = np.zeros_like(wT)
            d[good] = 1.0 / term.cost.dg(m[good])
        else:
            mu = term.eps * wT + self._mT_deviation
            m = 1.0 + mu
            good = np.isfinite(m) & (m >= self.m_floor) & (m <= self.m_ceil)
            d = np.where(good, term.eps, 0.0)
        mu = self._clip_deviation(mu, good)
        return mu, d, ~good

    def _clip_deviation(self, mu, good):
        mu = np.nan_to_num(mu, nan=-1.0)
        clipped = np.clip(1.0 + mu, self.m_floor, self.m_ceil) - 1.0
        return np.where(good, mu, clipped)

    def state(self, w, check_clamp: bool = True) -> SchemeState:
        g = self.grid
        w = np.asarray(w, dtype=float).reshape(g.shape)
        h, k = g.dx, g.dt
        model = self.model
        cx = (np.roll(w, -1, axis=1) - np.roll(w, 1, axis=1)) / (2.0 * h)
        p_h = 0.5 * (cx[:-1] + cx[1:])
        sigma = (w[1:] - w[:-1]) / k
        mu_h, ok = model.inverse_increment(p_h, sigma)
        m_h = 1.0 + mu_h
        good = ok & (m_h >= self.m_floor) & (m_h <= self.m_ceil)
        mu_h = self._clip_deviation(mu_h, good)
        m_h = 1.0 + mu_h
        hm = model.H_m(p_h, m_h)
        hp = model.H_p(p_h, m_h)
        dm_ds = np.where(good, 1.0 / hm, 0.0)
        dm_dp = np.where(good, -hp / hm, 0.0)
        mu_T, dmT, clampT = self._terminal_deviation(w[-1])
        dev = np.vstack([self._m0_deviation[None, :], mu_h, mu_T[None, :]])
        clamped = np.vstack([~good, clampT[None, :]])
        if check_clamp and clamped.mean() > self.clamp_fraction:
            raise ClampOverflow(
                f"{clamped.mean():.1%} of density nodes clamped", float(clamped.mean())
            )
        pe = (np.roll(w, -1, axis=1) - w) / h
        pe_eff = pe.copy()
        pe_eff[0] = 0.75 * pe[0] + 0.25 * pe[1]
        pe_eff[-1] = 0.75 * pe[-1] + 0.25 * pe[-2]
        lo, hi = dev[:-1], dev[1:]
        me = 1.0 + 0.25 * (lo + np.roll(lo, -1, axis=1) + hi + np.roll(hi, -1, axis=1))
        flux = me * model.H_p(pe_eff, me)
        tau = self.operators["tau"][:, None]
        res = (hi - lo) / tau - (flux - np.roll(flux, 1, axis=1)) / h
        return SchemeState(dev, dm_ds, dm_dp, dmT, clamped, pe_eff, me, flux, res)

    def residual(self, w, check_clamp: bool = True) -> np.ndarray:
        return self.state(w, check_clamp).residual.ravel()

    def jacobian(self, w, state: SchemeState | None = None) -> sp.csr_matrix:
        if state is None:
            state = self.state(w)
        ops = self.operators
        model = self.model
        dmh = sp.diags(state.dm_ds.ravel()) @ ops["S"] + sp.diags(state.dm_dp.ravel()) @ ops["P"]
        dmT = sp.diags(state.dmT_dz) @ ops["E_T"]
        dlevels = ops["Lift"] @ sp.vstack([dmh, dmT], format="csr")
        pe, me = state.pe.ravel(), state.me.ravel()
        a = me * model.H_pp(pe, me)
        b = model.H_p(pe, me) + me * model.H_mp(pe, me)
        dflux = sp.diags(a) @ ops["G"] + sp.diags(b) @ (ops["Avg"] @ dlevels)
        J = ops["Tdiff"] @ dlevels - ops["Div"] @ dflux
        return J.tocsr()

    def residual_and_jacobian(self, w):
        st = self.state(w)
        return st, self.jacobian(w, st)

    def refine_mass_modes(self, w, sweeps: int = 3) -> np.ndarray:
        """Re-solve the per-level mean modes of w with compensated sums.

        Summing the rows over x shows that the exact discrete solution has the
        same deviation mass on every density level.  Newton only resolves that
        neutral mode to the round-off of the early, O(1) levels, which then
        persists unchanged to late levels.  Adjusting w by one constant per
        level leaves all gradients and fluxes unchanged and restores the
        level masses from the terminal level backward.
        """
        g = self.grid
        w = np.array(w, dtype=float).reshape(g.shape)
        target = math.fsum(self._m0_deviation)
        for _ in range(sweeps):
            st = self.state(w, check_clamp=False)
            dev = st.deviation_levels
            c = np.zeros(g.n_t)
            sT = float(np.sum(st.dmT_dz))
            if sT != 0.0:
                c[-1] = -(math.fsum(dev[-1]) - target) / sT
            for k in range(g.n_t - 2, -1, -1):
                sk = float(np.sum(st.dm_ds[k]))
                if sk == 0.0:
                    c[k] = c[k + 1]
                    continue
                defect = math.fsum(dev[k + 1]) - target
                # sigma_k moves by (c[k+1] - c[k]) / dt
                c[k] = c[k + 1] + g.dt * defect / sk
            w = w + c[:, None]
        return w

    def uniform_deviation(self) -> np.ndarray:
        return np.zeros(self.grid.shape)


# ---------------------------------------------------------------------------
# functional interface in terms of u


def _scheme(u: Field, model, boundary0, boundaryT, **kw) -> BoxScheme:
    return BoxScheme(u.grid, model, boundary0, boundaryT, **kw)


def assemble_residual(u: Field, model, boundary0, boundaryT, **kw) -> np.ndarray:
    """Residual of the box scheme at u, flattened by (t level, x index)."""
    sch = _scheme(u, model, boundary0, boundaryT, **kw)
    return sch.residual(sch.to_deviation(u))


def assemble_jacobian(u: Field, model, boundary0, boundaryT, **kw) -> sp.csr_matrix:
    sch = _scheme(u, model, boundary0, boundaryT, **kw)
    return sch.jacobian(sch.to_deviation(u))


def bandwidth(J) -> tuple[int, int]:
    """(lower, upper) bandwidth of a sparse matrix."""
    coo = sp.coo_matrix(J)
    if coo.nnz == 0:
        return 0, 0
    d = coo.row - coo.col
    return int(max(d.max(), 0)), int(max(-d.min(), 0))


def _clamped_inverse(model, p, s, m_floor=M_FLOOR, m_ceil=M_CEIL):
    m, ok = model.inverse_array(p, s)
    return np.clip(m, m_floor, m_ceil), ok & (m >= m_floor) & (m <= m_ceil)


def quasilinear_residual(u: Field, model, boundary0, boundaryT) -> np.ndarray:
    """Pointwise -Tr(A Du D^2u) inside, oblique boundary rows at t = 0, T.

    Uses the centered operators of the grid module; returns shape (n_t, n_x).
    """
    g = u.grid
    vals = u.values
    ux = _dx(vals, g.dx)
    ut = _dt(vals, g.dt)
    uxx = _dxx(vals, g.dx)
    utt = _dtt(vals, g.dt)
    uxt = _dt(ux, g.dt)
    m, _ = _clamped_inverse(model, ux, ut)
    A = coefficient_matrix(model, ux, m)
    res = -(A.a_xx * uxx + 2.0 * A.a_xt * uxt + A.a_tt * utt)
    m0 = boundary0.m0.values
    res[0] = -ut[0] + model.H(ux[0], m0)
    if isinstance(boundaryT, TerminalCostBoundary):
        mT, _ = boundaryT.cost.inverse_array(vals[-1])
        mT = np.clip(mT, M_FLOOR, M_CEIL)
    else:
        mT = np.clip(boundaryT.eps * vals[-1] + boundaryT.mT, M_FLOOR, M_CEIL)
    res[-1] = ut[-1] - model.H(ux[-1], mT)
    return res


def pointwise_density(u: Field, model) -> tuple[np.ndarray, np.ndarray]:
    """m = H^-1(u_x, u_t) from the centered stencils; returns (m, ok)."""
    g = u.grid
    ux = _dx(u.values, g.dx)
    ut = _dt(u.values, g.dt)
    return model.inverse_array(ux, ut)
