import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from stablekit.examples import get_model
from stablekit.flow import solve_flow
from stablekit.frozen import (FrozenState, bound_kernel, f_kernel, frozen_density, integrated_cut_exponent,
                              stable_density, zero_order, zero_order_row)
from stablekit.model import NumericalParams

P = NumericalParams()
CAUCHY = get_model("const-cauchy")


def test_cut_exponent_zero_frequency():
    for name in ("const-cauchy", "var-alpha-1d", "rotation-sde"):
        m = get_model(name)
        xi = 0.0 if m.dim == 1 else np.zeros(2)
        assert abs(complex(integrated_cut_exponent(m, P, np.zeros(m.dim), 0.5, xi))) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(-20, 20), st.floats(0.01, 1.0), st.floats(-2, 2))
def test_cut_exponent_conjugate_symmetry(xi, t, z):
    m = get_model("var-alpha-1d")
    a = complex(integrated_cut_exponent(m, P, [z], t, xi))
    b = complex(integrated_cut_exponent(m, P, [z], t, -xi))
    assert abs(a - b.conjugate()) <= 1e-12 * max(1.0, abs(a))


def test_cut_exponent_cauchy_cross_check():
    p = P.resolve(CAUCHY)
    zeta = float(p.zeta(1.0))
    lam, xi, t = CAUCHY.lambda_min, 1.0, 1.0
    full_re = t * lam * math.pi * abs(xi) / 2
    cut_re = integrated_cut_exponent(CAUCHY, P, [0.0], t, xi).real

    def outer(r):
        a = r ** zeta
        inner = 1.0 / a - quad(lambda u: u ** -2, a, np.inf, weight="cos", wvar=xi)[0]
        return lam * inner

    ref = quad(outer, 0, t, epsabs=1e-12, epsrel=1e-11, limit=200)[0]
    assert abs((full_re - cut_re) - ref) < 1e-6


@pytest.mark.parametrize("name,z,t", [("const-cauchy", 0.0, 1.0), ("var-alpha-1d", 0.3, 0.1), ("truncated-noise", 0.0, 0.5),
                                      ("rotation-sde", (0.5, 0.0), 0.5)])
def test_frozen_density_mass(name, z, t):
    m = get_model(name)
    f = frozen_density(m, P, z, t)
    assert abs(f.mass() - 1.0) <= 1e-2
    assert f.values.min() >= -1e-4 * f.max()


def test_frozen_density_symmetric():
    f = frozen_density(get_model("const-alpha"), P, [0.0], 0.3)
    v = f.values
    # dual grid: index k <-> -(n//2) + k, so the mirror of index k is n - k
    assert np.max(np.abs(v[1:] - v[1:][::-1])) <= 1e-8 * f.max()


def test_frozen_density_origin_oracle():
    f = frozen_density(CAUCHY, P, [0.0], 1.0)
    n, xi_max = f.meta["n_freq"], f.meta["xi_max"]
    fine = np.linspace(0.0, xi_max, 10 * n + 1)
    char = np.exp(-integrated_cut_exponent(CAUCHY, P, [0.0], 1.0, fine)).real
    ref = np.trapezoid(char, fine) / math.pi
    val = float(f(np.array([0.0]))[0])
    assert abs(val - ref) <= 1e-6 * ref


def test_frozen_density_rejects_bad_time():
    with pytest.raises(ValueError):
        frozen_density(CAUCHY, P, [0.0], 1.5)


def test_stable_density_cauchy():
    g = stable_density(CAUCHY, [0.0], 1.0)
    assert abs(float(g(np.array([0.0]))[0]) - 1 / math.pi) < 1e-4
    x = np.linspace(-5, 5, 11)
    assert np.allclose(g(x), 1 / (math.pi * (1 + x ** 2)), atol=1e-4)


def test_stable_density_even():
    g = stable_density(get_model("const-alpha"), [0.0], 1.0)
    w = np.linspace(0.1, 15, 50)
    assert np.allclose(g(w), g(-w), atol=1e-10)


def test_stable_density_tail_ratio():
    m = get_model("const-alpha")
    g = stable_density(m, [0.0], 1.0)
    w = np.linspace(2, 20, 60)
    ratio = g(w) * (1 + w) ** (1 + m.alpha_min)
    assert ratio.min() > 0
    assert ratio.max() / ratio.min() < 10


def test_zero_order_without_drift():
    m = get_model("const-alpha")
    f = frozen_density(m, P, [0.4], 0.5)
    for x in (-1.0, 0.0, 0.7):
        assert abs(zero_order(m, P, [x], [0.4], 0.5) - float(f(np.array([0.4 - x]))[0])) < 1e-12


def test_zero_order_row_matches_pointwise():
    m = get_model("var-alpha-1d", {"drift": 1.0})
    ys = np.array([-0.5, 0.2, 0.9])
    row = zero_order_row(m, P, [0.1], ys, 0.2)
    for y, v in zip(ys, row):
        assert abs(v - zero_order(m, P, [0.1], [y], 0.2)) <= 1e-7 * max(v, 1e-3)


def test_zero_order_mass_bound():
    m = get_model("var-alpha-1d", {"drift": 1.0})
    ys = np.linspace(-12, 12, 241)
    xs = (-2.0, 0.0, 1.5)
    sups = []
    for t in (0.05, 0.1, 0.25, 0.5, 1.0):
        cache = {}
        masses = [np.trapezoid(zero_order_row(m, P, [x], ys, t, cache), ys) for x in xs]
        sups.append(max(masses))
    assert max(sups) <= 1.5
    assert min(sups) >= 0.5


def test_sup_bound_scaling_stable():
    # max_x p_t^{z,cut}(x) t^{d/alpha} stays in a bounded band as t -> 0
    m = get_model("var-alpha-1d")
    a = float(m.alpha_at(m.points([0.0]))[0])
    vals = [frozen_density(m, P, [0.0], t).max() * t ** (1 / a) for t in (0.01, 0.03, 0.1, 0.3, 1.0)]
    assert max(vals) / min(vals) < 2


def test_f_kernel_examples():
    assert f_kernel(0.3, 0.7, 1.0, 0.0) == pytest.approx(0.3 ** -0.7)
    assert f_kernel(0.3, 0.7, 1.0, np.zeros(2), d=2) == pytest.approx(0.3 ** -1.4)
    x = np.linspace(-4, 4, 9)
    assert np.allclose(f_kernel(1.0, 0.6, 2.0, x), np.exp(-2.0 * np.abs(x)))
    assert np.allclose(bound_kernel("f", P, 1.0, x, a=0.6), np.exp(-np.abs(x)))
    with pytest.raises(ValueError):
        bound_kernel("K2", P, 1.0, x)


def _k1_mass(p, t, z, zmin, c):
    """Closed form of the y-integral of K1 in d = 1."""
    r = t ** p.delta_K1
    near = 2 / c * (1 - math.exp(-c * r * t ** -z))
    far = t ** -p.N_K1 * 2 / c * math.exp(-c * r * t ** -zmin)
    return near + far


def test_k1_integral_bounded():
    m = get_model("var-alpha-1d", {"drift": 1.0})
    p = P.resolve(m)
    zmin = float(p.zeta(m.alpha_max))
    z = float(p.zeta(float(m.alpha_at(m.points(0.3))[0])))
    for t in (0.01, 0.1, 0.5, 1.0):
        chi = solve_flow(m, p, [0.3], t, "forward").final()[0, 0]
        r = t ** p.delta_K1
        f = lambda y: float(bound_kernel("K1", p, t, y - chi, zeta=z, zeta_min=zmin))
        val = sum(quad(f, a, b, epsabs=1e-12, epsrel=1e-10, limit=400)[0]
                  for a, b in ((-np.inf, chi - r), (chi - r, chi), (chi, chi + r), (chi + r, np.inf)))
        ref = _k1_mass(p, t, z, zmin, p.c_decay)
        assert abs(val - ref) <= 1e-6 * ref
    # the constant is finite: the far part peaks at an interior t and vanishes as t -> 0
    ts = np.geomspace(1e-16, 1.0, 400)
    vals = np.array([_k1_mass(p, t, z, zmin, p.c_decay) for t in ts])
    assert np.all(np.isfinite(vals))
    k = int(np.argmax(vals))
    assert 0 < k < len(ts) - 1
    assert vals[0] < 2 / p.c_decay + 1e-6


def test_frozen_state_sigma0_positive():
    s = FrozenState.of(get_model("rotation-sde"), [0.2, 1.4])
    assert s.sigma0() > 0
    assert s.dim == 2
