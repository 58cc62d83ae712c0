import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stablekit.examples import get_model
from stablekit.expr import parse_expr
from stablekit.model import ModelSpec, NumericalParams, stable_exponent
from stablekit.montecarlo import (PathEnsemble, ThinningError, bin_masses, estimate_density, near_diagonal_mass,
                                  renewal_check, sample_stable, simulate_paths, total_variation)
from stablekit.sphere import SphericalMeasure

SYM = SphericalMeasure.symmetric_1d()
ONE_SIDED = SphericalMeasure(np.array([[1.0]]), np.array([1.0]))


def _ecf(x, xi):
    return np.exp(1j * xi * x[:, 0]).mean()


def _model(alpha, sigma, lam=1.0):
    return ModelSpec(dim=1, alpha=parse_expr(repr(alpha)), lam=parse_expr(repr(lam)), sigma=sigma,
                     drift=(parse_expr("0"),), alpha_min=alpha, alpha_max=alpha, lambda_min=lam, lambda_max=lam)


@pytest.mark.parametrize("alpha", [0.5, 0.8, 1.0, 1.2, 1.5, 1.9])
@pytest.mark.parametrize("sigma", [SYM, ONE_SIDED], ids=["sym", "one-sided"])
def test_sample_cf(alpha, sigma):
    n = 40_000
    x = sample_stable(alpha, sigma, 0.7, n, seed=3)
    m = _model(alpha, sigma, 0.7)
    for xi in (0.3, 1.0, 2.5):
        psi, _ = stable_exponent(m, [0.0], xi)
        assert abs(_ecf(x, xi) - np.exp(-complex(psi))) <= 3 / math.sqrt(n)


def test_cauchy_cf_example():
    n = 100_000
    x = sample_stable(1.0, SYM, 2 / math.pi, n, seed=1)
    assert abs(_ecf(x, 1.0) - math.exp(-1)) <= 3 / math.sqrt(n)


def test_symmetric_sign_mean():
    n = 50_000
    x = sample_stable(1.3, SYM, 1.0, n, seed=4)
    assert abs(np.sign(x).mean()) <= 3 / math.sqrt(n)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.3, 1.9), st.floats(0.2, 5.0))
def test_stability_scaling(alpha, c):
    n = 20_000
    x = sample_stable(alpha, SYM, 1.0, n, seed=9) * c ** (1 / alpha)
    m = _model(alpha, SYM, c)
    for xi in (0.4, 1.1):
        psi, _ = stable_exponent(m, [0.0], xi)
        assert abs(_ecf(x, xi) - np.exp(-complex(psi))) <= 3 / math.sqrt(n)


def test_sample_rejects_alpha():
    for a in (0.0, 2.0, -1.0):
        with pytest.raises(ValueError):
            sample_stable(a, SYM, 1.0, 10, 0)


def test_seed_determinism():
    for name in ("var-alpha-1d", "resetting", "truncated-noise", "rotation-sde"):
        m = get_model(name)
        x0 = np.zeros(m.dim)
        a = simulate_paths(m, x0, 0.3, 0.01, 500, seed=12)
        b = simulate_paths(m, x0, 0.3, 0.01, 500, seed=12)
        c = simulate_paths(m, x0, 0.3, 0.01, 500, seed=13)
        assert np.array_equal(a.terminal, b.terminal)
        assert not np.array_equal(a.terminal, c.terminal)


def test_zero_noise_follows_drift():
    m = get_model("var-alpha-1d", {"drift": 1.0})
    m = replace(m, lam=parse_expr("1e-14"), lambda_min=1e-14, lambda_max=1e-14)
    x0, t = 0.7, 1.0
    exact = 2 * math.atan(math.tan(x0 / 2) * math.exp(t))
    errs = []
    for h in (0.02, 0.01):
        ens = simulate_paths(m, x0, t, h, 20, seed=0)
        errs.append(np.max(np.abs(ens.terminal[:, 0] - exact)))
    assert errs[0] < 0.05
    assert errs[1] < 0.6 * errs[0]


def test_thinning_error():
    m = get_model("resetting")
    with pytest.raises(ThinningError):
        simulate_paths(m, 0.0, 1.0, 1.0, 10, seed=0)
    with pytest.raises(ValueError):
        simulate_paths(m, 0.0, 0.1, 0.2, 10, seed=0)


def test_weak_order_cauchy():
    m = get_model("const-cauchy")
    n, t = 100_000, 0.5
    edges = np.linspace(-6, 6, 65)

    def hist(h, seed):
        x = simulate_paths(m, 0.0, t, h, n, seed).terminal[:, 0]
        return np.histogram(x, edges)[0] / n

    coarse, fine, fine2 = hist(t / 20, 1), hist(t / 40, 2), hist(t / 40, 3)
    floor = total_variation(fine, fine2)
    assert total_variation(coarse, fine) <= 1.5 * floor


def _ensemble(x):
    return PathEnsemble(np.asarray(x, float).reshape(len(x), -1), 0, 1.0, 1.0, {})


def test_histogram_uniform_flat():
    n = 200_000
    x = np.random.default_rng(1).uniform(-1, 1, n)
    f = estimate_density(_ensemble(x), (-1.0, 1.0, 20))
    sigma = np.sqrt(n * 0.05 * 0.95) / (n * 0.1)
    assert np.all(np.abs(f.values - 0.5) <= 4 * sigma)
    assert f.mass() <= 1 + 1e-12


def test_histogram_cauchy_error():
    n = 100_000
    x = sample_stable(1.0, SYM, 2 / math.pi, n, seed=5)[:, 0]
    with pytest.warns(RuntimeWarning):
        f = estimate_density(_ensemble(x), (-10.0, 10.0, 40))
    assert f.mass() <= 1 + 1e-12
    edges = np.linspace(-10, 10, 41)
    p = np.diff(np.arctan(edges)) / math.pi
    se = np.sqrt(p * (1 - p) / n) / 0.5
    assert np.mean(np.abs(f.values - p / 0.5)) <= 2 * np.mean(se)


def test_histogram_empty():
    with pytest.raises(ValueError):
        estimate_density(PathEnsemble(np.zeros((0, 1)), 0, 1.0, 1.0, {}), (-1.0, 1.0, 4))


@settings(max_examples=30, deadline=None)
@given(st.floats(-1, 1), st.floats(0.5, 2), st.integers(2, 12), st.floats(0, 0.5))
def test_bin_masses_exact_for_linear(b, a, bins, shift):
    y = np.linspace(-2, 2, 41)
    edges = np.linspace(-1.5 + shift, 1.5 - shift, bins + 1)
    masses = bin_masses(a + b * y, y, edges)
    ref = a * np.diff(edges) + 0.5 * b * np.diff(edges ** 2)
    assert np.allclose(masses, ref, atol=1e-12)


def test_ensemble_csv(tmp_path):
    ens = simulate_paths(get_model("const-cauchy"), 0.0, 0.2, 0.02, 5, seed=7)
    ens.to_csv(str(tmp_path / "p.csv"))
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "path,x1" and len(rows) == 6
    assert (tmp_path / "p.csv.json").exists()


def test_renewal_requires_split():
    y = np.linspace(-8, 8, 64, endpoint=False)
    with pytest.raises(ValueError):
        renewal_check(get_model("const-cauchy"), 0.5, (y, np.linspace(-4, 4, 9)), n=100)


def test_renewal_without_tail():
    m = get_model("truncated-noise", {"amp": 0.0})
    m = replace(m, tail_split=parse_expr("1e300"))
    y = np.linspace(-16, 16, 128, endpoint=False)
    rep = renewal_check(m, 0.5, (y, np.linspace(-4, 4, 17)), n=100, mass_times=())
    assert rep.tail_rate == 0.0
    assert rep.l1 == 0.0 and rep.sup == 0.0
    assert rep.lhs == rep.rhs


def test_renewal_state_dependent_rate_rejected():
    m = get_model("truncated-noise", {"amp": 0.3})
    m = replace(m, lam=parse_expr("1 + 0.5*tanh(x1)"), lambda_min=0.5, lambda_max=1.5)
    y = np.linspace(-8, 8, 64, endpoint=False)
    with pytest.raises(ValueError):
        renewal_check(m, 0.5, (y, np.linspace(-4, 4, 9)), n=100)


def test_near_diagonal_mass_cauchy():
    y = np.linspace(-16, 16, 512, endpoint=False)
    out = near_diagonal_mass(get_model("const-cauchy"), NumericalParams(), (0.05, 0.1), 0.0, y)
    assert all(v >= 0.2 for v in out.values())
