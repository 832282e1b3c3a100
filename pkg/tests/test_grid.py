import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfg1d.grid import (
    DensitySlice,
    Field,
    GridSpec,
    dt,
    dtt,
    dx,
    dxt,
    dxx,
    integrate_x,
    level_masses,
    resample,
)


def test_grid_geometry():
    g = GridSpec(16, 11, 2.0)
    assert g.dx == 1.0 / 16
    assert g.dt == pytest.approx(0.2)
    assert g.t[-1] == 2.0 and g.t[0] == 0.0
    assert np.allclose(np.diff(g.x), g.dx)
    assert g.shape == (11, 16)


@pytest.mark.parametrize("kw", [dict(n_x=7, n_t=8, horizon=1.0), dict(n_x=8, n_t=4, horizon=1.0),
                                dict(n_x=8, n_t=8, horizon=0.0), dict(n_x=-8, n_t=8, horizon=1.0)])
def test_grid_validation(kw):
    with pytest.raises(ValueError):
        GridSpec(**kw)


def test_field_rejects_nonfinite():
    g = GridSpec(8, 8, 1.0)
    vals = np.zeros(g.shape)
    vals[3, 2] = np.nan
    with pytest.raises(ValueError):
        Field(g, vals)
    with pytest.raises(ValueError):
        Field(g, np.zeros((8, 9)))


def test_dx_of_sine():
    g = GridSpec(64, 8, 1.0)
    u = Field.from_function(g, lambda x, t: np.sin(2 * np.pi * x))
    h = g.dx
    err = abs(dx(u).values[0, 0] - 2 * np.pi)
    # exact truncation of the centered stencil: 2 pi - sin(2 pi h) / h
    assert err == pytest.approx(2 * np.pi - np.sin(2 * np.pi * h) / h, rel=1e-9)
    assert err <= (2 * np.pi) ** 3 * h**2 / 6
    assert err <= 1.01e-2


def test_constant_field_derivatives_vanish():
    g = GridSpec(12, 9, 3.0)
    u = Field(g, np.full(g.shape, 4.2))
    for op in (dx, dxx, dt, dtt, dxt):
        assert np.max(np.abs(op(u).values)) <= 1e-12


def test_time_stencils_exact_on_quadratics():
    g = GridSpec(8, 10, 1.7)
    u = Field.from_function(g, lambda x, t: 3 * t**2 - 2 * t + 1 + 0 * x)
    assert np.allclose(dtt(u).values, 6.0, atol=1e-9)
    assert np.allclose(dt(u).values, 6 * g.t[:, None] - 2, atol=1e-10)
    v = Field.from_function(g, lambda x, t: t**2 + 0 * x)
    assert np.allclose(dtt(v).values, 2.0, atol=1e-9)


def test_space_stencils_exact_on_resolved_modes():
    # the periodic centered stencil is exact on the Nyquist-free discrete sine's symbol
    g = GridSpec(32, 8, 1.0)
    k = 3
    u = Field.from_function(g, lambda x, t: np.sin(2 * np.pi * k * x) + 0 * t)
    symbol = np.sin(2 * np.pi * k * g.dx) / g.dx
    assert np.allclose(dx(u).values, symbol * np.cos(2 * np.pi * k * g.x), atol=1e-12)


def test_dxt_is_mixed_derivative():
    g = GridSpec(64, 65, 1.0)
    u = Field.from_function(g, lambda x, t: np.sin(2 * np.pi * x) * t**2)
    # t^2 is differenced exactly, so only the x-symbol sin(2 pi h)/h remains
    symbol = np.sin(2 * np.pi * g.dx) / g.dx
    exact = symbol * np.cos(2 * np.pi * g.x)[None, :] * 2 * g.t[:, None]
    assert np.max(np.abs(dxt(u).values - exact)) <= 1e-10


@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**16))
def test_dx_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    g = GridSpec(10, 8, 1.0)
    u, v = Field(g, rng.normal(size=g.shape)), Field(g, rng.normal(size=g.shape))
    lhs = dx(u * a + v * b).values
    rhs = a * dx(u).values + b * dx(v).values
    assert np.allclose(lhs, rhs, atol=1e-10)


@given(vals=arrays(float, (9, 12), elements=st.floats(-1e3, 1e3)))
def test_discrete_divergence_theorem(vals):
    g = GridSpec(12, 9, 1.0)
    u = Field(g, vals)
    assert np.max(np.abs(integrate_x(dx(u).values))) <= 1e-9 * (1 + np.max(np.abs(vals)))


def test_integrate_x_examples():
    x = np.arange(16) / 16
    assert integrate_x(np.ones(16)) == 1.0
    assert abs(integrate_x(np.sin(2 * np.pi * x))) <= 1e-14
    m = np.random.default_rng(0).uniform(0, 2, 16)
    m *= 16 / m.sum()
    assert integrate_x(m) == pytest.approx(1.0, abs=1e-14)


def test_density_slice_normalization():
    d = DensitySlice.normalized(np.linspace(1, 3, 20))
    assert abs(d.mass - 1.0) <= 1e-12
    with pytest.raises(ValueError):
        DensitySlice(np.ones(4))


def test_resample_examples():
    uni = DensitySlice(np.ones(16))
    assert np.allclose(resample(uni, 40).values, 1.0)
    smooth = DensitySlice.from_function(32, lambda x: 1 + 0.5 * np.cos(2 * np.pi * x))
    back = resample(resample(smooth, 128), 32)
    assert np.max(np.abs(back.values - smooth.values)) <= 1e-2
    assert abs(resample(smooth, 50).mass - 1.0) <= 1e-12
    with pytest.raises(ValueError):
        resample(smooth, 4)


def test_csv_round_trip(tmp_path):
    g = GridSpec(9, 8, 2.5)
    rng = np.random.default_rng(3)
    u = Field(g, rng.normal(size=g.shape) * 1e3)
    path = tmp_path / "u.csv"
    u.save_csv(path)
    text = path.read_text()
    assert text.splitlines()[0] == "x,t,value"
    # t-major ordering
    second = text.splitlines()[2].split(",")
    assert float(second[1]) == 0.0 and float(second[0]) == pytest.approx(g.dx)
    back = Field.load_csv(path, horizon=2.5)
    assert back.grid == g
    assert np.array_equal(back.values, u.values)


def test_level_masses():
    g = GridSpec(8, 8, 1.0)
    f = Field(g, np.ones(g.shape) * np.arange(1, 9)[:, None])
    assert np.allclose(level_masses(f), np.arange(1, 9))
