"""Periodic space-time grid, sampled fields and finite-difference operators.

Field values are stored with shape ``(n_t, n_x)``: row ``j`` is the time level
t_j = j * dt and column ``i`` the point x_i = i / n_x of the torus.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch


@dataclass(frozen=True)
class GridSpec:
    n_x: int
    n_t: int
    horizon: float

    def __post_init__(self):
        if int(self.n_x) != self.n_x or self.n_x < 8:
            raise ValueError("n_x must be an integer >= 8")
        if int(self.n_t) != self.n_t or self.n_t < 8:
            raise ValueError("n_t must be an integer >= 8")
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ValueError("horizon must be positive")

    @property
    def dx(self) -> float:
        return 1.0 / self.n_x

    @property
    def dt(self) -> float:
        return self.horizon / (self.n_t - 1)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n_x) / self.n_x

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n_t) * self.dt

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_t, self.n_x)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (X, T) arrays of shape (n_t, n_x)."""
        T, X = np.meshgrid(self.t, self.x, indexing="ij")
        return X, T

    @classmethod
    def with_step(cls, n_x: int, dt: float, horizon: float) -> "GridSpec":
        """Grid whose time step is as close to ``dt`` as the horizon allows."""
        n_t = max(8, int(round(horizon / dt)) + 1)
        return cls(n_x, n_t, horizon)


class Field:
    """A finite real array of shape (n_t, n_x) bound to a grid."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: GridSpec, values):
        arr = np.array(values, dtype=float)
        if arr.shape != grid.shape:
            raise ValueError(f"field shape {arr.shape} does not match grid {grid.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("fields may not contain NaN or Inf")
        arr.setflags(write=False)
        self.grid = grid
        self.values = arr

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "Field":
        X, T = grid.mesh()
        return cls(grid, np.broadcast_to(fn(X, T), grid.shape))

    def level(self, j: int) -> np.ndarray:
        return self.values[j]

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def _same(self, other: "Field"):
        if other.grid != self.grid:
            raise GridMismatch("fields live on different grids")

    def __add__(self, other):
        if isinstance(other, Field):
            self._same(other)
            return Field(self.grid, self.values + other.values)
        return Field(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, Field):
            self._same(other)
            return Field(self.grid, self.values - other.values)
        return Field(self.grid, self.values - other)

    def __mul__(self, scalar):
        return Field(self.grid, self.values * float(scalar))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Field(n_t={self.grid.n_t}, n_x={self.grid.n_x}, T={self.grid.horizon})"

    # -- CSV --------------------------------------------------------------
    def to_csv(self) -> str:
        g = self.grid
        X, T = g.mesh()
        buf = io.StringIO()
        buf.write("x,t,value\n")
        rows = np.column_stack([X.ravel(), T.ravel(), self.values.ravel()])
        np.savetxt(buf, rows, fmt="%.17g", delimiter=",")
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())

    @classmethod
    def load_csv(cls, path, horizon: float | None = None) -> "Field":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        xs = np.unique(data[:, 0])
        ts = np.unique(data[:, 1])
        n_x, n_t = len(xs), len(ts)
        if n_x * n_t != data.shape[0]:
            raise ValueError("CSV is not a full tensor grid")
        T = float(ts[-1]) if horizon is None else float(horizon)
        grid = GridSpec(n_x, n_t, T)
        return cls(grid, data[:, 2].reshape(n_t, n_x))


@dataclass(frozen=True)
class DensitySlice:
    """A probability density sampled on the torus (rectangle-rule mass 1)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.ndim != 1 or arr.size < 8:
            raise ValueError("a density slice needs at least 8 samples")
        if not np.all(np.isfinite(arr)):
            raise ValueError("density values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n_x(self) -> int:
        return self.values.size

    @property
    def dx(self) -> float:
        return 1.0 / self.n_x

    @property
    def mass(self) -> float:
        return float(np.sum(self.values) * self.dx)

    @classmethod
    def normalized(cls, values) -> "DensitySlice":
        arr = np.asarray(values, dtype=float)
        return cls(arr / (np.sum(arr) / arr.size))

    @classmethod
    def from_function(cls, n_x: int, fn, normalize: bool = True) -> "DensitySlice":
        x = np.arange(n_x) / n_x
        vals = np.broadcast_to(np.asarray(fn(x), dtype=float), (n_x,))
        return cls.normalized(vals) if normalize else cls(vals)

    def __eq__(self, other):
        return isinstance(other, DensitySlice) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


# ---------------------------------------------------------------------------
# difference operators on arrays of shape (n_t, n_x)


def _dx(a: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(a, -1, axis=1) - np.roll(a, 1, axis=1)) / (2.0 * h)


def _dxx(a: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(a, -1, axis=1) - 2.0 * a + np.roll(a, 1, axis=1)) / (h * h)


def _dt(a: np.ndarray, k: float) -> np.ndarray:
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - a[:-2]) / (2.0 * k)
    out[0] = (-3.0 * a[0] + 4.0 * a[1] - a[2]) / (2.0 * k)
    out[-1] = (3.0 * a[-1] - 4.0 * a[-2] + a[-3]) / (2.0 * k)
    return out


def _dtt(a: np.ndarray, k: float) -> np.ndarray:
    # four-point one-sided rows keep second order at t = 0 and t = T
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - 2.0 * a[1:-1] + a[:-2]) / (k * k)
    out[0] = (2.0 * a[0] - 5.0 * a[1] + 4.0 * a[2] - a[3]) / (k * k)
    out[-1] = (2.0 * a[-1] - 5.0 * a[-2] + 4.0 * a[-3] - a[-4]) / (k * k)
    return out


def dx(field: Field) -> Field:
    return Field(field.grid, _dx(field.values, field.grid.dx))


def dxx(field: Field) -> Field:
    return Field(field.grid, _dxx(field.values, field.grid.dx))


def dt(field: Field) -> Field:
    return Field(field.grid, _dt(field.values, field.grid.dt))


def dtt(field: Field) -> Field:
    return Field(field.grid, _dtt(field.values, field.grid.dt))


def dxt(field: Field) -> Field:
    g = field.grid
    return Field(g, _dt(_dx(field.values, g.dx), g.dt))


def integrate_x(values) -> float | np.ndarray:
    """Rectangle rule on the torus along the last axis (per level for 2-D input)."""
    arr = np.asarray(values, dtype=float)
    return np.sum(arr, axis=-1) / arr.shape[-1]


def level_masses(field: Field) -> np.ndarray:
    return integrate_x(field.values)


def resample(density: DensitySlice, new_n_x: int) -> DensitySlice:
    """Periodic linear interpolation onto ``new_n_x`` points, renormalized."""
    if new_n_x < 8:
        raise ValueError("new_n_x must be >= 8")
    old = density.values
    n = old.size
    xq = np.arange(new_n_x) / new_n_x * n
    i0 = np.floor(xq).astype(int) % n
    w = xq - np.floor(xq)
    vals = (1.0 - w) * old[i0] + w * old[(i0 + 1) % n]
    return DensitySlice.normalized(vals)
