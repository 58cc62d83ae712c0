import math
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import gammaln

from stablekit.examples import get_model
from stablekit.flow import solve_flow
from stablekit.frozen import bound_kernel, principal_term
from stablekit.model import NumericalParams
from stablekit.parametrix import (condition_integrals, density_at, neumann_density, phi_kernel, residual_norms)
from stablekit.spacetime import SingularityError, SpaceTimeField, convolve_direct, early_nodes, spacetime_convolve

P = NumericalParams()


def _random_field(rng, M=4, shape=(4, 4), rate=0.0, early=False, zero=False):
    h = 0.25 / M * 4
    vals = rng.normal(size=(M,) + shape)
    e = rng.normal(size=(3,) + shape) if early else None
    z = rng.normal(size=shape) if zero else None
    return SpaceTimeField(h, vals, 0.3, rate, zero=z, early=e)


def test_convolve_constants():
    M, n = 8, 5
    one = SpaceTimeField(0.125, np.ones((M, n, n)), 0.2)
    out = spacetime_convolve(one, one)
    for k, t in enumerate(one.times):
        assert np.allclose(out.values[k], t * n * 0.2, atol=1e-13)


def test_convolve_inverse_sqrt():
    M = 16
    h = 1.0 / M
    t = h * np.arange(1, M + 1)
    a = SpaceTimeField(h, np.ones((M, 1, 1)), 1.0, zero=np.ones((1, 1)))
    b = SpaceTimeField(h, t[:, None, None] ** -0.5, 1.0, rate=-0.5)
    out = spacetime_convolve(a, b)
    assert np.allclose(out.values[:, 0, 0], 2 * np.sqrt(t), atol=1e-6)


@pytest.mark.parametrize("rates", [(0.0, 0.0), (-0.3, -0.6), (0.0, -0.5)])
@pytest.mark.parametrize("early", [False, True])
def test_convolve_matches_direct(rates, early):
    rng = np.random.default_rng(11)
    a = _random_field(rng, rate=rates[0], zero=rates[0] == 0.0)
    b = _random_field(rng, rate=rates[1], early=early and rates[1] != 0.0)
    fast = spacetime_convolve(a, b).values
    slow = convolve_direct(a, b)
    assert np.max(np.abs(fast - slow)) <= 1e-10 * max(1.0, np.abs(slow).max())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-3, 3), st.floats(-3, 3))
def test_convolve_bilinear(seed, c1, c2):
    rng = np.random.default_rng(seed)
    a1, a2 = _random_field(rng), _random_field(rng)
    b = _random_field(rng, rate=-0.4)
    lin = SpaceTimeField(a1.h, c1 * a1.values + c2 * a2.values, a1.dz)
    lhs = spacetime_convolve(lin, b).values
    rhs = c1 * spacetime_convolve(a1, b).values + c2 * spacetime_convolve(a2, b).values
    assert np.allclose(lhs, rhs, atol=1e-10 * max(1.0, np.abs(rhs).max()))


def test_convolve_associative():
    # smooth-in-time fields: the three-fold convolution is mesh-consistent
    M, h = 32, 1.0 / 32
    t = h * np.arange(1, M + 1)
    rng = np.random.default_rng(5)
    A, B, C = (rng.normal(size=(2, 3, 3)) for _ in range(3))

    def fld(X):
        return SpaceTimeField(h, X[0] + t[:, None, None] * X[1], 0.5, zero=X[0].copy())

    a, b, c = fld(A), fld(B), fld(C)
    left = spacetime_convolve(spacetime_convolve(a, b), c).values
    right = spacetime_convolve(a, spacetime_convolve(b, c)).values
    assert np.max(np.abs(left - right)) <= 1e-3 * np.abs(left).max()


def test_singularity_record_checked():
    with pytest.raises(SingularityError):
        SpaceTimeField(0.1, np.ones((2, 1, 1)), 1.0, rate=-1.0)


def test_field_save_load(tmp_path):
    rng = np.random.default_rng(2)
    f = _random_field(rng, M=3, shape=(2, 5), rate=-0.25)
    f.meta = {"kind": "test"}
    f.save(str(tmp_path / "fld"), {"seed": 1})
    g = SpaceTimeField.load(str(tmp_path / "fld"))
    assert np.array_equal(f.values, g.values)
    assert (g.h, g.dz, g.rate, g.meta) == (f.h, f.dz, f.rate, f.meta)


def test_early_nodes_inside_first_step():
    e = early_nodes(0.1, -0.7)
    assert np.all((e > 0) & (e < 0.1))


def test_phi_constant_coefficients():
    m = get_model("const-alpha")
    r = phi_kernel(m, P, 0.3, [0.1], [0.5])
    for k in ("A2", "A3", "A4", "A5", "A6", "B2"):
        assert r.terms[k] == 0.0
    assert r.value == pytest.approx(r.terms["A1"] + r.terms["B1"], abs=1e-15)
    with pytest.raises(ValueError):
        phi_kernel(m, P, 0.0, [0.1], [0.5])


def test_phi_a1_bound_held_out():
    m = get_model("var-alpha-1d")
    p = P.resolve(m)
    zmin = float(p.zeta(m.alpha_max))
    rng = np.random.default_rng(8)
    ratios = []
    for _ in range(100):
        t, x, y = rng.uniform(0.02, 1.0), rng.uniform(-3, 3), rng.uniform(-3, 3)
        cache = {}
        r = phi_kernel(m, p, t, [x], [y], cache)
        fz = next(iter(cache.values()))
        q = float(fz.fields[(0,)](np.array([fz.kappa[0] - x]))[0])
        chi = solve_flow(m, p, [x], t, "forward").final()[0, 0]
        zx = float(p.zeta(float(m.alpha_at(m.points(x))[0])))
        k1 = float(bound_kernel("K1", p, t, y - chi, zeta=zx, zeta_min=zmin))
        ratios.append(abs(r.terms["A1"]) / (t ** (-1 + p.s_frak * m.alpha_min) * (max(q, 0.0) + k1)))
    C = max(ratios[:50])
    assert max(ratios[50:]) <= 2 * C


@lru_cache(maxsize=None)
def _cauchy_all_rows(n=256):
    # enough terms for the series to settle at t = 0.5 (norms decay only after k ~ 4)
    m = get_model("const-cauchy")
    y = np.linspace(-16, 16, n, endpoint=False)
    dens, rep = neumann_density(m, replace(P, K_max=12), [0.25, 0.5], y, y)
    return y, dens, rep


def test_chapman_kolmogorov_cauchy():
    y, dens, _ = _cauchy_all_rows()
    dz = y[1] - y[0]
    p25, p50 = density_at(dens, 0.25), density_at(dens, 0.5)
    comp = p25 @ p25 * dz
    inner = np.abs(y) <= 4
    sel = np.ix_(inner, inner)
    assert np.max(np.abs(comp[sel] - p50[sel]) / p50[sel]) <= 0.05


def test_nonnegative_and_mass():
    y, dens, _ = _cauchy_all_rows()
    for t in (0.25, 0.5):
        P_t = density_at(dens, t)
        assert P_t.min() >= -1e-3 * P_t.max()
        inner = np.abs(y) <= 4
        mass = P_t[inner].sum(axis=1) * (y[1] - y[0])
        # Cauchy mass of the truncated domain [y_0, y_N)
        x = y[inner]
        ref = (np.arctan((y[-1] + (y[1] - y[0]) / 2 - x) / t) + np.arctan((x - y[0] + (y[1] - y[0]) / 2) / t)) / math.pi
        assert np.all(np.abs(mass - ref) <= 2e-2)


def test_neumann_tail_shape():
    _, _, rep = _cauchy_all_rows()
    s = rep.series
    C, eps = s["C"], s["eps_phi"]
    norms = np.array(s["norms"])
    for j, t in enumerate(rep.times):
        for k in range(1, norms.shape[0]):
            ratio = norms[k, j] / norms[k - 1, j]
            bound = math.exp(math.log(C) + gammaln(eps) + gammaln(k * eps) - gammaln((k + 1) * eps)) * t ** eps
            assert ratio <= bound


def test_grid_refinement_mass():
    m = get_model("var-alpha-1d")
    masses = []
    for n in (256, 512):
        y = np.linspace(-16, 16, n, endpoint=False)
        dens, _ = neumann_density(m, P, [0.5], [0.0], y)
        masses.append(np.trapezoid(density_at(dens, 0.5)[0], y))
    assert abs(masses[0] - masses[1]) < 5e-3


def test_neumann_rejects_off_grid_start():
    y = np.linspace(-4, 4, 64, endpoint=False)
    with pytest.raises(ValueError):
        neumann_density(get_model("const-alpha"), P, [0.5], [0.01], y)
    with pytest.raises(ValueError):
        neumann_density(get_model("const-alpha"), P, [1.5], [0.0], y)


def _principal_field(m, y, xs, times):
    h = times[0]
    vals = []
    for t in h * np.arange(1, int(round(times[-1] / h)) + 1):
        vals.append([principal_term(m, [x], t, y - solve_flow(m, P, [x], t, "forward").at(t)[0, 0]) for x in xs])
    idx = [int(round(t / h)) for t in times]
    meta = {"axes": [y.tolist()], "x": [[x] for x in xs], "t_list": list(times), "t_index": idx}
    return SpaceTimeField(h, np.array(vals), y[1] - y[0], meta=meta)


def test_residual_of_principal_term_is_zero():
    m = get_model("var-alpha-1d")
    y = np.linspace(-8, 8, 128, endpoint=False)
    f = _principal_field(m, y, [0.0, 1.0], [0.25, 0.5])
    rep = residual_norms(f, m, P)
    assert max(rep.inf1) == 0.0 and max(rep.sup) == 0.0


def test_residual_holder():
    m = get_model("var-alpha-1d")
    y = np.linspace(-16, 16, 256, endpoint=False)
    dens, rep = neumann_density(m, P, [0.25, 0.5], [0.0], y)
    extent = y[-1] - y[0]
    for a, b in zip(rep.inf1, rep.sup):
        assert 0 <= a <= extent * b


def test_condition_unit_threshold():
    m = get_model("const-alpha")
    v = condition_integrals(m, "e34", 1.0, [0.0], m.alpha_min)
    assert abs(v.value - m.lambda_min / m.alpha_min) <= 1e-6
    r = get_model("rotation-sde")
    with pytest.raises(NotImplementedError):
        condition_integrals(r, "e34", 1.0, [0.0, 0.0], 1.5)
    with pytest.raises(ValueError):
        condition_integrals(m, "e99", 1.0, [0.0], 1.5)


def test_condition_e34_exponent():
    m = get_model("const-alpha")
    v = condition_integrals(m, "e34", 0.5, [0.3], m.alpha_min)
    assert v.exponent >= -m.alpha_max / m.alpha_min - 0.1


def test_condition_e36_exponent():
    m = get_model("var-alpha-1d")
    v = condition_integrals(m, "e36", 0.5, [0.3], (0.9 / m.alpha_max, m.alpha_max))
    assert v.exponent > -1
