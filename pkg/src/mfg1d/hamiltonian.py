"""Hamiltonian models H(p, m), terminal costs g(m) and assumption checks.

Every evaluator is vectorized over numpy arrays.  Two built-in families are
provided:

* ``SeparatedPower``: H(p, m) = ((1 + p^2)^(gamma/2) - 1) / gamma - f(m).
  At gamma = 2 this is exactly p^2/2 - f(m).
* ``Congestion``: H(p, m) = p^2 / (2 (m + c0)^alpha) - f(m).

``Custom`` models supply a full derivative table.  A model may carry a
density shift ``delta`` so that it evaluates H(p, m + delta); this is the
regularization used for densities that nearly vanish.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import DomainError, NoRoot, OutOfRange, UnsupportedDerivative

ORDERS = ("H", "H_p", "H_m", "H_pp", "H_mp", "H_mpp")

_MAX_DOUBLINGS = 60
_BISECT_RTOL = 1e-14


class Family(str, enum.Enum):
    SEPARATED_POWER = "SeparatedPower"
    CONGESTION = "Congestion"
    CUSTOM = "Custom"


# ---------------------------------------------------------------------------
# scalar monotone maps f (coupling) and g (terminal cost)


@dataclass(frozen=True)
class Coupling:
    """Increasing coupling f with kind ``linear`` (a m + b), ``power``
    (a m^beta + b) or ``log`` (a log m + b); ``a`` and ``beta`` positive."""

    kind: str = "linear"
    a: float = 1.0
    b: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "power", "log"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if not self.a > 0:
            raise ValueError("coupling slope a must be positive")
        if self.kind == "power" and not self.beta > 0:
            raise ValueError("coupling exponent beta must be positive")

    def f(self, m):
        m = np.asarray(m, dtype=float)
        if self.kind == "linear":
            return self.a * m + self.b
        if self.kind == "power":
            return self.a * m**self.beta + self.b
        return self.a * np.log(m) + self.b

    def df(self, m):
        m = np.asarray(m, dtype=float)
        if self.kind == "linear":
            return np.full_like(m, self.a)
        if self.kind == "power":
            return self.a * self.beta * m ** (self.beta - 1.0)
        return self.a / m

    def inverse(self, y):
        """Return f^-1(y), with 0 where y <= f(0+) (no positive preimage)."""
        y = np.asarray(y, dtype=float)
        z = (y - self.b) / self.a
        if self.kind == "log":
            return np.exp(z)
        with np.errstate(invalid="ignore"):
            pos = np.where(z > 0, z, 0.0)
            if self.kind == "power":
                pos = pos ** (1.0 / self.beta)
        return pos

    def increment(self, mu, base: float = 1.0):
        """f(base + mu) - f(base) without cancellation."""
        mu = np.asarray(mu, dtype=float)
        if self.kind == "linear":
            return self.a * mu
        if self.kind == "power":
            return self.a * base**self.beta * np.expm1(self.beta * np.log1p(mu / base))
        return self.a * np.log1p(mu / base)

    def increment_inverse(self, y, base: float = 1.0):
        """mu with f(base + mu) - f(base) = y; -base where no positive preimage."""
        y = np.asarray(y, dtype=float)
        with np.errstate(invalid="ignore", over="ignore"):
            if self.kind == "linear":
                mu = y / self.a
            elif self.kind == "power":
                z = y / (self.a * base**self.beta)
                mu = np.where(z > -1.0, base * np.expm1(np.log1p(np.maximum(z, -1.0)) / self.beta), -base)
            else:
                mu = base * np.expm1(y / self.a)
        return np.maximum(mu, -base)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b, "beta": self.beta}


@dataclass(frozen=True)
class DerivativeTable:
    """Callbacks for a custom Hamiltonian; each takes arrays (p, m)."""

    H: Callable
    H_p: Callable
    H_m: Callable
    H_pp: Callable
    H_mp: Callable
    H_mpp: Callable
    inverse: Callable | None = None


def _decreasing_root(phi, dphi, shape):
    """Vectorized root of a strictly decreasing phi on (0, inf).

    Returns ``m`` with ``m = 0`` where phi < 0 on the whole search range (root
    would sit at 0+) and ``m = inf`` where phi > 0 throughout.
    """
    with np.errstate(all="ignore"):
        one = np.ones(shape)
        v1 = phi(one)
        up = v1 > 0
        lo = np.ones(shape)
        hi = np.ones(shape)
        fail_low = np.zeros(shape, dtype=bool)
        fail_high = np.zeros(shape, dtype=bool)
        # bracket expansion from m = 1
        act = up.copy()
        for _ in range(_MAX_DOUBLINGS):
            if not act.any():
                break
            hi = np.where(act, hi * 2.0, hi)
            act = act & (phi(hi) > 0)
        fail_high |= act
        lo = np.where(up, hi / 2.0, lo)
        act = ~up & ~(v1 == 0)
        for _ in range(_MAX_DOUBLINGS):
            if not act.any():
                break
            lo = np.where(act, lo / 2.0, lo)
            act = act & ~(phi(lo) > 0)
        fail_low |= act
        hi = np.where(~up & ~(v1 == 0), lo * 2.0, hi)
        exact = v1 == 0
        # geometric bisection of the bracket
        for _ in range(200):
            if np.all((hi / lo - 1.0 <= _BISECT_RTOL) | exact | fail_low | fail_high):
                break
            mid = np.sqrt(lo * hi)
            pos = phi(mid) > 0
            lo = np.where(pos, mid, lo)
            hi = np.where(pos, hi, mid)
        m = np.sqrt(lo * hi)
        # one Newton polish, kept only if it stays inside the bracket
        step = phi(m) / dphi(m)
        cand = m - step
        good = np.isfinite(cand) & (cand >= lo * (1 - 1e-12)) & (cand <= hi * (1 + 1e-12))
        m = np.where(good, cand, m)
        m = np.where(exact, 1.0, m)
        m = np.where(fail_low, 0.0, m)
        m = np.where(fail_high, np.inf, m)
        m = np.where(np.isnan(m), 0.0, m)
    return m


@dataclass(frozen=True)
class TerminalCost:
    """Increasing terminal cost g: ``linear`` a m + b, ``log`` a log m + b,
    ``power`` a m^beta + b, or ``custom`` with callbacks."""

    kind: str = "linear"
    a: float = 1.0
    b: float = 0.0
    beta: float = 1.0
    g_fn: Callable | None = field(default=None, compare=False)
    dg_fn: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("linear", "log", "power", "custom"):
            raise ValueError(f"unknown terminal cost kind {self.kind!r}")
        if self.kind == "custom":
            if self.g_fn is None or self.dg_fn is None:
                raise ValueError("custom terminal cost needs g_fn and dg_fn")
        elif not self.a > 0:
            raise ValueError("terminal cost slope a must be positive")
        if self.kind == "power" and not self.beta > 0:
            raise ValueError("terminal cost exponent beta must be positive")

    def g(self, m):
        m = np.asarray(m, dtype=float)
        if self.kind == "linear":
            return self.a * m + self.b
        if self.kind == "log":
            return self.a * np.log(m) + self.b
        if self.kind == "power":
            return self.a * m**self.beta + self.b
        return np.asarray(self.g_fn(m), dtype=float)

    def dg(self, m):
        m = np.asarray(m, dtype=float)
        if self.kind == "linear":
            return np.full_like(m, self.a)
        if self.kind == "log":
            return self.a / m
        if self.kind == "power":
            return self.a * self.beta * m ** (self.beta - 1.0)
        return np.asarray(self.dg_fn(m), dtype=float)

    def inverse_array(self, z):
        """Vectorized g^-1; returns (m, ok) with m = 0 / inf where z is out of range."""
        z = np.asarray(z, dtype=float)
        if self.kind == "custom":
            m = _decreasing_root(lambda x: z - self.g(x), lambda x: -self.dg(x), z.shape)
        else:
            y = (z - self.b) / self.a
            if self.kind == "log":
                with np.errstate(over="ignore"):
                    m = np.exp(y)
            else:
                with np.errstate(invalid="ignore"):
                    m = np.where(y > 0, y, 0.0)
                    if self.kind == "power":
                        m = m ** (1.0 / self.beta)
        ok = np.isfinite(m) & (m > 0)
        return m, ok

    def inverse_increment(self, z):
        """mu with g(1 + mu) - g(1) = z; returns (mu, ok)."""
        z = np.asarray(z, dtype=float)
        with np.errstate(invalid="ignore", over="ignore"):
            if self.kind == "linear":
                mu = z / self.a
            elif self.kind == "log":
                mu = np.expm1(z / self.a)
            elif self.kind == "power":
                y = z / self.a
                mu = np.where(y > -1.0, np.expm1(np.log1p(np.maximum(y, -1.0)) / self.beta), -1.0)
            else:
                m, _ = self.inverse_array(self.g(1.0) + z)
                mu = m - 1.0
        mu = np.where(np.isnan(mu), -1.0, mu)
        ok = np.isfinite(mu) & (mu > -1.0)
        return mu, ok

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b, "beta": self.beta}


def g_inverse(cost: TerminalCost, z: float) -> float:
    """Return m > 0 with g(m) = z."""
    m, ok = cost.inverse_array(np.asarray(float(z)))
    if not bool(ok):
        raise OutOfRange(f"z = {z!r} is outside the range of g")
    return float(m)


# ---------------------------------------------------------------------------
# Hamiltonian models


@dataclass(frozen=True)
class HamiltonianModel:
    family: Family = Family.SEPARATED_POWER
    gamma: float = 2.0
    alpha: float = 1.0
    c0: float = 0.0
    coupling: Coupling = field(default_factory=Coupling)
    table: DerivativeTable | None = field(default=None, compare=False)
    delta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not self.gamma > 1:
            raise ValueError("gamma must exceed 1")
        if self.family is Family.CONGESTION:
            if not 0 < self.alpha < 2:
                raise ValueError("congestion exponent alpha must lie in (0, 2)")
            if self.c0 < 0:
                raise ValueError("congestion offset c0 must be nonnegative")
            if self.gamma != 2.0:
                raise ValueError("the congestion family is quadratic (gamma = 2)")
        if self.family is Family.CUSTOM and self.table is None:
            raise ValueError("custom models need a derivative table")
        if self.delta < 0:
            raise ValueError("density shift delta must be nonnegative")

    # -- constructors -------------------------------------------------------
    @classmethod
    def separated_power(cls, gamma: float = 2.0, coupling: Coupling | None = None):
        return cls(Family.SEPARATED_POWER, gamma=gamma, coupling=coupling or Coupling())

    @classmethod
    def congestion(cls, alpha: float = 1.0, c0: float = 0.0, coupling: Coupling | None = None):
        return cls(Family.CONGESTION, alpha=alpha, c0=c0, coupling=coupling or Coupling())

    @classmethod
    def custom(cls, table: DerivativeTable, gamma: float = 2.0):
        return cls(Family.CUSTOM, gamma=gamma, table=table)

    def with_delta(self, delta: float) -> "HamiltonianModel":
        return replace(self, delta=float(delta))

    # -- evaluation ---------------------------------------------------------
    def _args(self, p, m):
        p = np.asarray(p, dtype=float)
        m = np.asarray(m, dtype=float)
        if np.any(~(m > 0)):
            raise DomainError("density must be positive")
        return p, m + self.delta

    def _kinetic(self, p):
        if self.gamma == 2.0:
            return 0.5 * p * p
        g = self.gamma
        return np.expm1(0.5 * g * np.log1p(p * p)) / g

    def H(self, p, m):
        p, m = self._args(p, m)
        if self.family is Family.SEPARATED_POWER:
            return self._kinetic(p) - self.coupling.f(m)
        if self.family is Family.CONGESTION:
            return 0.5 * p * p / (m + self.c0) ** self.alpha - self.coupling.f(m)
        return np.asarray(self.table.H(p, m), dtype=float)

    def H_p(self, p, m):
        p, m = self._args(p, m)
        if self.family is Family.SEPARATED_POWER:
            if self.gamma == 2.0:
                return p + 0.0 * m
            return p * (1.0 + p * p) ** (0.5 * self.gamma - 1.0) + 0.0 * m
        if self.family is Family.CONGESTION:
            return p / (m + self.c0) ** self.alpha
        return np.asarray(self.table.H_p(p, m), dtype=float)

    def H_m(self, p, m):
        p, m = self._args(p, m)
        if self.family is Family.SEPARATED_POWER:
            return -self.coupling.df(m) + 0.0 * p
        if self.family is Family.CONGESTION:
            a = self.alpha
            return -0.5 * a * p * p / (m + self.c0) ** (a + 1.0) - self.coupling.df(m)
        return np.asarray(self.table.H_m(p, m), dtype=float)

    def H_pp(self, p, m):
        p, m = self._args(p, m)
        if self.family is Family.SEPARATED_POWER:
            g = self.gamma
            if g == 2.0:
                return np.ones(np.broadcast(p, m).shape)
            q = 1.0 + p * p
            return q ** (0.5 * g - 2.0) * (1.0 + (g - 1.0) * p * p) + 0.0 * m
        if self.family is Family.CONGESTION:
            return (m + self.c0) ** (-self.alpha) + 0.0 * p
        return np.asarray(self.table.H_pp(p, m), dtype=float)

    def H_mp(self, p, m):
        p, m = self._args(p, m)
        if self.family is Family.SEPARATED_POWER:
            return np.zeros(np.broadcast(p, m).shape)
        if self.family is Family.CONGESTION:
            a = self.alpha
            return -a * p / (m + self.c0) ** (a + 1.0)
        return np.asarray(self.table.H_mp(p, m), dtype=float)

    def H_mpp(self, p, m):
        p, m = self._args(p, m)
        if self.family is Family.SEPARATED_POWER:
            return np.zeros(np.broadcast(p, m).shape)
        if self.family is Family.CONGESTION:
            a = self.alpha
            return -a / (m + self.c0) ** (a + 1.0) + 0.0 * p
        return np.asarray(self.table.H_mpp(p, m), dtype=float)

    # -- inverse in m --------------------------------------------------------
    def inverse_array(self, p, s):
        """Vectorized m = H^-1(p, s).

        Returns ``(m, ok)``.  Where no positive root exists, ``m`` is 0 if the
        root would lie below every positive density and ``inf`` if above.
        """
        p, s = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(s, dtype=float))
        d = self.delta
        if self.family is Family.SEPARATED_POWER:
            shifted = self.coupling.inverse(self._kinetic(p) - s)
        elif self.family is Family.CUSTOM and self.table.inverse is not None:
            shifted = np.asarray(self.table.inverse(p, s), dtype=float)
        else:
            base = replace(self, delta=0.0)

            def phi(x):
                return base.H(p, x) - s

            def dphi(x):
                return base.H_m(p, x)

            shifted = _decreasing_root(phi, dphi, p.shape)
        with np.errstate(invalid="ignore"):
            m = shifted - d if d else shifted
        m = np.where(m > 0, m, 0.0)
        ok = np.isfinite(m) & (m > 0)
        return m, ok

    def H_increment(self, p, mu):
        """H(p, 1 + mu) - H(0, 1), evaluated without cancellation."""
        p = np.asarray(p, dtype=float)
        mu = np.asarray(mu, dtype=float)
        base = 1.0 + self.delta
        if self.family is Family.SEPARATED_POWER:
            return self._kinetic(p) - self.coupling.increment(mu, base)
        if self.family is Family.CONGESTION:
            kin = 0.5 * p * p / (base + mu + self.c0) ** self.alpha
            return kin - self.coupling.increment(mu, base)
        return self.H(p, 1.0 + mu) - self.H(0.0, 1.0)

    def inverse_increment(self, p, sigma):
        """mu with H(p, 1 + mu) = H(0, 1) + sigma; returns (mu, ok).

        Agrees with ``inverse_array`` but keeps full relative precision in mu
        when the state is close to (p, m) = (0, 1).  mu = -1 marks a root
        below every positive density, mu = inf a root above all of them.
        """
        p, sigma = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(sigma, dtype=float))
        base = 1.0 + self.delta
        if self.family is Family.SEPARATED_POWER:
            mu = self.coupling.increment_inverse(self._kinetic(p) - sigma, base)
        else:
            m, ok = self.inverse_array(p, float(self.H(0.0, 1.0)) + sigma)
            mu = m - 1.0
            if self.family is Family.CONGESTION:
                with np.errstate(all="ignore"):
                    for _ in range(2):
                        fin = ok & np.isfinite(mu)
                        hm = self.H_m(p[fin], 1.0 + mu[fin])
                        mu[fin] = mu[fin] - (self.H_increment(p[fin], mu[fin]) - sigma[fin]) / hm
        mu = np.where(np.isnan(mu), -1.0, mu)
        ok = np.isfinite(mu) & (mu > -1.0)
        return mu, ok

    def summary(self) -> dict:
        return {
            "family": self.family.value,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "c0": self.c0,
            "coupling": self.coupling.to_dict(),
            "delta": self.delta,
        }


def evaluate(model: HamiltonianModel, p, m, order: str = "H"):
    """Evaluate H or one of its partials named in ``ORDERS``."""
    if order not in ORDERS:
        raise UnsupportedDerivative(order)
    out = getattr(model, order)(p, m)
    if np.ndim(out) == 0:
        return float(out)
    return out


def h_inverse(model: HamiltonianModel, p: float, s: float) -> float:
    """Density m > 0 with H(p, m) = s."""
    m, ok = model.inverse_array(float(p), float(s))
    if not bool(ok):
        raise NoRoot(f"no positive density with H({p!r}, m) = {s!r}")
    return float(m)


def lambda_star(model: HamiltonianModel) -> float:
    """The ergodic constant -H(0, 1)."""
    return -float(model.H(0.0, 1.0))


# ---------------------------------------------------------------------------
# assumption checks


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool
    worst_margin: float
    witness: tuple[float, float] | None
    required: bool = True

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "required": self.required,
            "worst_margin": self.worst_margin,
            "witness": None if self.witness is None else list(self.witness),
        }


@dataclass(frozen=True)
class AssumptionReport:
    box: tuple[float, float, float, float]
    samples: int
    c0: float
    checks: dict
    e1_c0_min: float | None
    h1_c0_min: float | None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values() if c.required)

    def failures(self) -> list[AssumptionCheck]:
        return [c for c in self.checks.values() if c.required and not c.passed]

    def to_dict(self) -> dict:
        return {
            "box": list(self.box),
            "samples": self.samples,
            "c0": self.c0,
            "passed": self.passed,
            "checks": {k: v.to_dict() for k, v in sorted(self.checks.items())},
            "e1_c0_min": self.e1_c0_min,
            "h1_c0_min": self.h1_c0_min,
        }


def _worst(name, margin, P, M, required=True):
    margin = np.where(np.isfinite(margin), margin, -np.inf)
    k = int(np.argmin(margin))
    worst = float(margin.flat[k])
    passed = bool(worst >= 0)
    witness = (float(P.flat[k]), float(M.flat[k]))
    return AssumptionCheck(name, passed, worst, witness, required)


def check_assumptions(
    model: HamiltonianModel,
    cost: TerminalCost | None,
    box: tuple[float, float, float, float],
    samples: int = 41,
    c0: float = 10.0,
) -> AssumptionReport:
    """Sample (H1), H_m < 0, (E1) and g' > 0 on ``box = (p_lo, p_hi, m_lo, m_hi)``.

    The radial condition H_p p >= 0 is reported but not required.  Also
    estimated: the smallest constants for which (E1) and (H1) hold on the
    samples (``None`` when no constant works).
    """
    p_lo, p_hi, m_lo, m_hi = (float(v) for v in box)
    if samples < 2:
        raise ValueError("need at least two samples per axis")
    if not (m_lo > 0 and m_hi >= m_lo and p_hi >= p_lo):
        raise DomainError("box must lie in R x (0, inf)")
    ps = np.linspace(p_lo, p_hi, samples)
    ms = np.linspace(m_lo, m_hi, samples)
    P, M = np.meshgrid(ps, ms, indexing="ij")
    hm = model.H_m(P, M)
    hpp = model.H_pp(P, M)
    hmp = model.H_mp(P, M)
    hp = model.H_p(P, M)
    inv_c0 = 1.0 / c0
    checks = {}
    growth = (1.0 + np.abs(P)) ** (model.gamma - 2.0)
    checks["H1"] = _worst("H1", hpp - inv_c0 * growth, P, M)
    checks["Hm"] = _worst("Hm", -hm, P, M)
    lhs = -4.0 * M * hm * hpp
    cross = M * M * hmp * hmp
    checks["E1"] = _worst("E1", lhs - (1.0 + inv_c0) * cross, P, M)
    checks["radial"] = _worst("radial", hp * P, P, M, required=False)
    if cost is not None:
        dg = cost.dg(ms)
        checks["G1"] = _worst("G1", dg, np.zeros_like(ms), ms)

    # smallest C0 with lhs >= (1 + 1/C0) cross everywhere
    e1_min: float | None
    with np.errstate(divide="ignore", invalid="ignore"):
        nz = cross > 0
        if np.any(lhs <= 0):
            e1_min = None
        elif not nz.any():
            e1_min = 0.0
        else:
            rho = float(np.min(lhs[nz] / cross[nz]))
            e1_min = 1.0 / (rho - 1.0) if rho > 1.0 else None
        if np.any(hpp <= 0):
            h1_min = None
        else:
            h1_min = float(np.max(growth / hpp))
    if e1_min is not None and not math.isfinite(e1_min):
        e1_min = None
    return AssumptionReport((p_lo, p_hi, m_lo, m_hi), samples, float(c0), checks, e1_min, h1_min)
