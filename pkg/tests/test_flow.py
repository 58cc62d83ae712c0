import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from stablekit.examples import get_model
from stablekit.expr import parse_expr
from stablekit.flow import (Mollifier, compensated_drift, integrate_field, mollified_drift, solve_flow,
                            w_correction)
from stablekit.model import ModelSpec, NumericalParams, eps_b, intrinsic_drift
from stablekit.sphere import SphericalMeasure

P = NumericalParams()


def _one_sided(alpha=0.5, lam=1.0, drift="0"):
    return ModelSpec(dim=1, alpha=parse_expr(repr(alpha)), lam=parse_expr(repr(lam)),
                     sigma=SphericalMeasure(np.array([[1.0]]), np.array([1.0])), drift=(parse_expr(drift),),
                     alpha_min=alpha, alpha_max=alpha, lambda_min=lam, lambda_max=lam)


def test_compensated_drift_symmetric():
    m = get_model("var-alpha-1d", {"drift": 0.7})
    x = np.linspace(-3, 3, 7)
    for t in (0.01, 0.3, 2.0):
        assert np.allclose(compensated_drift(m, x[:, None], t)[:, 0], 0.7 * np.sin(x), atol=1e-14)


def test_compensated_drift_large_t():
    m = _one_sided(0.5, drift="2")
    assert compensated_drift(m, [0.3], 1.0)[0] == 2.0
    assert compensated_drift(m, [0.3], 5.0)[0] == 2.0


def test_compensated_drift_one_sided():
    m = _one_sided(0.5)
    assert abs(compensated_drift(m, [0.0], 0.25)[0] + 1.5) < 1e-12
    with pytest.raises(ValueError):
        compensated_drift(m, [0.0], 0.0)


def test_compensated_drift_alpha_one_log_branch():
    m = _one_sided(1.0)
    assert abs(compensated_drift(m, [0.0], 0.1)[0] - math.log(0.1)) < 1e-12


def test_mollifier_normalization():
    for d in (1, 2):
        mol = Mollifier(d)
        for h in (0.01, 0.3, 2.0):
            if d == 1:
                val = quad(lambda v: float(mol(v, h)), -h, h, epsabs=1e-13)[0]
            else:
                val = quad(lambda r: 2 * math.pi * r * float(mol(np.array([r, 0.0]), h)), 0, h, epsabs=1e-13)[0]
            assert abs(val - 1.0) < 1e-8
        assert float(mol(np.array([1.0] + [0.0] * (d - 1)), 1.0)) == 0.0


def test_mollified_constant_drift():
    m = _one_sided(1.5, drift="0.8")
    for t in (0.01, 0.5):
        assert abs(mollified_drift(m, P, [1.3], t)[0] - compensated_drift(m, [1.3], t)[0]) < 1e-14


@settings(max_examples=40, deadline=None)
@given(st.floats(-4, 4), st.floats(0.01, 1.0))
def test_mollified_lipschitz_bound(x, t):
    m = get_model("var-alpha-1d", {"drift": 1.0})
    p = P.resolve(m)
    h = t ** (1 / float(p.theta(m.alpha_at(m.points(x)))[0]))
    assert abs(mollified_drift(m, p, [x], t)[0] - math.sin(x)) <= h + 1e-12


def test_mollified_rate_var_alpha():
    m = get_model("var-alpha-1d", {"drift": 1.0})
    xs = np.linspace(-3, 3, 41)[:, None]
    a_min = m.alpha_min
    ts = np.geomspace(0.01, 1.0, 8)
    err = [np.max(np.abs(compensated_drift(m, xs, t) - mollified_drift(m, P, xs, t))) for t in ts]
    slope = np.polyfit(np.log(ts), np.log(err) - np.log(ts) / a_min, 1)[0]
    assert slope >= -1 + eps_b(m) / 2


def test_flow_constant_field():
    m = _one_sided(1.5, drift="0.5")
    m = ModelSpec(**{**m.__dict__, "sigma": SphericalMeasure.symmetric_1d()})
    fwd = solve_flow(m, P, [0.2], 0.8, "forward")
    bwd = solve_flow(m, P, [0.2], 0.8, "backward")
    assert abs(fwd.at(0.8)[0, 0] - (0.2 + 0.8 * 0.5)) < 1e-10
    assert abs(bwd.at(0.8)[0, 0] - (0.2 - 0.8 * 0.5)) < 1e-10
    assert fwd.seeds[0, 0] == 0.2


def test_flow_linear_field():
    sol = integrate_field(lambda s, y: -y, np.array([[1.0], [2.0]]), 1.0, 0.5)
    for t in (0.1, 0.5, 1.0):
        assert np.allclose(sol.at(t)[:, 0], np.array([1.0, 2.0]) * math.exp(-t), atol=1e-6)


def test_backward_flow_sqrt_bound():
    m = get_model("var-alpha-1d", {"drift": 2.0})
    ys = np.linspace(-3, 3, 13)
    C = max(np.max(np.abs(mollified_drift(m, P, ys[:, None], t))) for t in (0.01, 0.1, 1.0))
    for t in (0.01, 0.1, 0.4, 1.0):
        k = solve_flow(m, P, ys[:, None], t, "backward").final()[:, 0]
        assert np.all(np.abs(k - ys) <= 2 * C * math.sqrt(t))


def test_anchored_flow_semigroup():
    m = get_model("var-alpha-1d", {"drift": 1.5})
    t = 0.6
    whole = solve_flow(m, P, [0.4], t, "anchored").at(t)[0, 0]
    # anchored field at time u is B_{t-u}: split [0, t] at u = 0.25
    y = solve_flow(m, P, [0.4], t, "anchored").at(0.25)[0]
    field = lambda s, z: mollified_drift(m, P, z, t - 0.25 - s)
    rest = integrate_field(field, y[None, :], t - 0.25, eps_b(m), singular_end="end").final()[0, 0]
    assert abs(whole - rest) < 1e-6


def _fit_comparability(m, pts, eps_k):
    """Smallest C making both comparability inequalities hold on the sample set."""
    eb = eps_b(m)
    best = 0.0
    for x, y, t, s in pts:
        chi = solve_flow(m, P, [x], t, "forward").at(s)[0, 0]
        kap_t = solve_flow(m, P, [y], t, "backward")
        k_t, k_ts = kap_t.at(t)[0, 0], kap_t.at(t - s)[0, 0]
        a = float(m.alpha_at(m.points(x))[0])
        lhs, ref = abs(k_ts - chi), abs(k_t - x)
        for C in np.geomspace(1e-3, 1e3, 121):
            e = math.exp(C * t ** eb)
            slack = C * t ** (1 / a + eps_k)
            if ref / e - slack <= lhs <= e * ref + slack:
                best = max(best, C)
                break
        else:
            return math.inf
    return best


@pytest.mark.parametrize("name,over", [("var-alpha-1d", {"drift": 1.5}), ("const-cauchy", {}), ("truncated-noise", {})])
def test_flow_comparability(name, over):
    m = get_model(name, over)
    eps_k = m.eta * min(m.nu.eps_nu if m.has_nu else math.inf, eps_b(m)) / 8
    rng = np.random.default_rng(3)
    train = [(rng.uniform(-3, 3), rng.uniform(-3, 3), t, t * rng.uniform(0.05, 0.95))
             for t in rng.uniform(0.01, 1.0, 12)]
    C = _fit_comparability(m, train, eps_k)
    assert math.isfinite(C)
    held = [(rng.uniform(-3, 3), rng.uniform(-3, 3), t, t * rng.uniform(0.05, 0.95))
            for t in rng.uniform(0.01, 1.0, 12)]
    assert _fit_comparability(m, held, eps_k) <= max(2 * C, 1e-3)


def test_w_examples():
    m = _one_sided(0.5)
    assert abs(w_correction(m, 1.0, 0.5, [0.0])[0] - 1.0) < 1e-12
    assert np.all(w_correction(get_model("var-alpha-1d"), 0.5, 0.1, [0.3]) == 0)
    with pytest.raises(ValueError):
        w_correction(m, 0.5, 0.5, [0.0])


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 1.9), st.floats(0.05, 3.0), st.floats(0.05, 1.0), st.floats(-2, 2))
def test_w_integral_identity(alpha, lam, t, x):
    m = _one_sided(alpha, lam)
    ups = intrinsic_drift(m, [x])[0]
    val = quad(lambda s: w_correction(m, t, s, [x])[0], 0, t, epsabs=1e-13, epsrel=1e-11, limit=200)[0]
    assert abs(val - ups) <= 1e-8 * max(1.0, abs(ups))
