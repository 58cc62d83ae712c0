"""One-dimensional radial integrals behind the stable and cut exponents.

For a single atom with direction l and unit intensity the Levy measure is
``rho^{-1-alpha} d rho`` along l, so every exponent reduces to a function of
``s = xi . l``.  The building block is

    J1(sigma; beta) = int_0^1 (e^{i sigma v} - 1 - i sigma v) v^{-1-beta} dv,   beta < 2,

evaluated by Gauss-Jacobi quadrature for moderate |sigma| and by the
incomplete-gamma continuation with an asymptotic tail for large |sigma|.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from numpy.polynomial import Chebyshev
from scipy.interpolate import CubicSpline
from scipy.special import gamma, gammaln, roots_jacobi

EULER_GAMMA = 0.5772156649015329
ALPHA_ONE_TOL = 1e-9
SIGMA_SWITCH = 40.0
_GJ_NODES = 72


@lru_cache(maxsize=256)
def _gauss_jacobi(beta: float):
    x, w = roots_jacobi(_GJ_NODES, 0.0, 1.0 - beta)
    v = 0.5 * (1.0 + x)
    w = w * 0.5 ** (2.0 - beta)
    return v, w


def _phase_remainder(x):
    """(e^{ix} - 1 - ix) / x^2, stable for small x."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape, dtype=complex)
    small = np.abs(x) < 1e-3
    xs = x[small]
    out[small] = -0.5 - 1j * xs / 6 + xs ** 2 / 24
    xl = x[~small]
    re = -2.0 * np.sin(0.5 * xl) ** 2
    im = np.sin(xl) - xl
    out[~small] = (re + 1j * im) / xl ** 2
    return out


def _tail_integral(p: float, sigma):
    """int_1^inf e^{i sigma v} v^p dv (Abel sense) for sigma > 0 large, asymptotic series."""
    z = 1j * sigma
    term = np.ones_like(z)
    total = np.ones_like(z)
    for k in range(1, 30):
        term = term * (-(p - k + 1)) / z
        total = total + term
        if np.all(np.abs(term) < 1e-17 * np.abs(total)):
            break
    return -np.exp(z) / z * total


def _j1_large(sigma, beta: float):
    """J1 for sigma > 0 via the full-range integral minus the tail on (1, inf)."""
    z = -1j * sigma
    tail = _tail_integral(-1.0 - beta, sigma)
    if abs(beta - 1.0) < 1e-6:
        # limit of Gamma(-beta) z^beta + i sigma/(beta - 1) at beta = 1
        main = z * (EULER_GAMMA - 1.0 + np.log(z))
        return main - tail + 1.0
    if abs(beta) < 1e-8:
        raise ValueError("J1 continuation undefined at beta = 0")
    main = gamma(-beta) * np.exp(beta * np.log(z))
    return main - tail + 1.0 / beta + 1j * sigma / (beta - 1.0)


def j1(sigma, beta: float) -> np.ndarray:
    """J1(sigma; beta) = int_0^1 (e^{i sigma v} - 1 - i sigma v) v^{-1-beta} dv."""
    if not beta < 2.0:
        raise ValueError("J1 requires beta < 2")
    sigma = np.asarray(sigma, dtype=float)
    flat = sigma.ravel()
    a = np.abs(flat)
    out = np.empty(flat.shape, dtype=complex)
    mid = a <= SIGMA_SWITCH
    if np.any(mid):
        v, w = _gauss_jacobi(float(beta))
        h = _phase_remainder(a[mid, None] * v[None, :])
        out[mid] = a[mid] ** 2 * (h @ w)
    if np.any(~mid):
        out[~mid] = _j1_large(a[~mid], float(beta))
    neg = flat < 0
    out[neg] = np.conj(out[neg])
    return out.reshape(sigma.shape)


def atom_exponent(s, alpha: float) -> np.ndarray:
    """int_0^inf (1 - e^{i rho s} + i rho s 1{rho<=1}) rho^{-1-alpha} d rho in closed form."""
    s = np.asarray(s, dtype=float)
    a = np.abs(s)
    sg = np.sign(s)
    if abs(alpha - 1.0) < ALPHA_ONE_TOL:
        with np.errstate(divide="ignore", invalid="ignore"):
            im = np.where(a > 0, s * (np.log(a) - 1.0 + EULER_GAMMA), 0.0)
        return 0.5 * np.pi * a + 1j * im
    re = gamma(1 - alpha) * math.cos(0.5 * math.pi * alpha) / alpha * a ** alpha
    # imaginary part -s [Gamma(2-a) sin(pi a/2) |s|^{a-1}/a - 1] / (1-a), written with
    # expm1 so the removable singularity at alpha = 1 loses little precision
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        L = gammaln(2 - alpha) + math.log(math.sin(0.5 * math.pi * alpha)) + (alpha - 1) * np.log(a) - math.log(alpha)
        im = np.where(a > 0, -s * np.expm1(L) / (1 - alpha), 0.0)
    return re + 1j * im


def atom_exponent_quad(s: float, alpha: float) -> complex:
    """Independent radial quadrature of :func:`atom_exponent` (slow oracle)."""
    from scipy.integrate import quad

    if s == 0:
        return 0j

    def f_re(r):
        return (1 - math.cos(r * s)) * r ** (-1 - alpha)

    def f_im(r):
        return (r * s - math.sin(r * s)) * r ** (-1 - alpha)

    opts = dict(limit=500, epsabs=1e-14, epsrel=1e-12)
    n_pan = max(1, int(abs(s)))
    edges = np.linspace(0.0, 1.0, n_pan + 1)
    re = sum(quad(f_re, a, b, **opts)[0] for a, b in zip(edges[:-1], edges[1:]))
    im = sum(quad(f_im, a, b, **opts)[0] for a, b in zip(edges[:-1], edges[1:]))
    # tail on (1, inf): Fourier-weighted quadrature for the oscillating parts
    re += 1.0 / alpha - quad(lambda r: r ** (-1 - alpha), 1, np.inf, weight="cos", wvar=abs(s))[0]
    im += -math.copysign(1.0, s) * quad(lambda r: r ** (-1 - alpha), 1, np.inf, weight="sin", wvar=abs(s))[0]
    return complex(re, im)


def drift_moment_integral(t: float, alpha: float, zeta: float) -> float:
    """int_0^t int_{r^{1/alpha}}^{r^zeta} rho^{-alpha} d rho dr in closed form."""
    if t <= 0:
        return 0.0
    if abs(alpha - 1.0) < ALPHA_ONE_TOL:
        s_frak = 1.0 - zeta
        return s_frak * t * (1.0 - math.log(t))
    e = 1.0 + zeta * (1.0 - alpha)
    return (t ** e / e - alpha * t ** (1.0 / alpha)) / (1.0 - alpha)


def drift_moment(r, alpha: float, zeta: float):
    """int_{r^{1/alpha}}^{r^zeta} rho^{-alpha} d rho."""
    r = np.asarray(r, dtype=float)
    if abs(alpha - 1.0) < ALPHA_ONE_TOL:
        return (zeta - 1.0) * np.log(r)
    return (r ** (zeta * (1 - alpha)) - r ** ((1 - alpha) / alpha)) / (1 - alpha)


class CutSymbol:
    """Per-atom cut exponents for one (alpha, zeta) pair with J1 in Chebyshev form.

    ``integrated(s, t)`` is ``int_0^t psi_r^{cut}(s) dr`` and ``instant(s, r)``
    is ``psi_r^{cut}(s)``, both for unit intensity along one direction.
    """

    def __init__(self, alpha: float, zeta: float, table_step: float = 0.02, degree: int = 64):
        self.alpha = float(alpha)
        self.zeta = float(zeta)
        self._b1 = self.alpha
        self._b2 = self.alpha - 1.0 / self.zeta
        # J1 is entire in sigma: a Chebyshev interpolant is exact to ~1e-13 and
        # cheap to build; a cubic spline of it is cheap to evaluate
        grid = np.arange(0.0, SIGMA_SWITCH + table_step, table_step)
        self._grid_max = grid[-1]
        dom = [0.0, self._grid_max]
        c1 = Chebyshev.interpolate(lambda s: j1(s, self._b1), degree, domain=dom)
        c2 = Chebyshev.interpolate(lambda s: j1(s, self._b2), degree, domain=dom)
        self._spl1 = CubicSpline(grid, c1(grid))
        self._spl2 = CubicSpline(grid, c2(grid))

    def _j(self, spl, beta, sigma):
        sigma = np.asarray(sigma, dtype=float)
        a = np.abs(sigma)
        out = np.empty(sigma.shape, dtype=complex)
        inside = a <= self._grid_max
        out[inside] = spl(a[inside])
        if np.any(~inside):
            out[~inside] = _j1_large(a[~inside], beta)
        neg = sigma < 0
        out[neg] = np.conj(out[neg])
        out[a == 0] = 0.0
        return out

    def j_alpha(self, sigma):
        return self._j(self._spl1, self._b1, sigma)

    def j_zeta(self, sigma):
        return self._j(self._spl2, self._b2, sigma)

    def integrated(self, s, t: float):
        s = np.asarray(s, dtype=float)
        T = t ** self.zeta
        sig = s * T
        core = -(t ** (1.0 - self.zeta * self.alpha)) * (self.j_alpha(sig) - self.j_zeta(sig))
        return core - 1j * s * drift_moment_integral(t, self.alpha, self.zeta)

    def instant(self, s, r: float):
        s = np.asarray(s, dtype=float)
        T = r ** self.zeta
        core = -(T ** (-self.alpha)) * self.j_alpha(s * T)
        return core - 1j * s * drift_moment(r, self.alpha, self.zeta)


@lru_cache(maxsize=2048)
def cut_symbol(alpha: float, zeta: float) -> CutSymbol:
    return CutSymbol(alpha, zeta)


def integrated_cut_quad(s: float, t: float, alpha: float, zeta: float) -> complex:
    """Slow oracle: the time integral of the cut exponent by nested quadrature."""
    from scipy.integrate import quad

    def inner(r):
        T = r ** zeta
        c = r ** (1.0 / alpha)

        def fre(rho):
            return (1 - math.cos(rho * s)) * rho ** (-1 - alpha)

        def fim(rho):
            comp = rho * s if rho <= c else 0.0
            return (-math.sin(rho * s) + comp) * rho ** (-1 - alpha)

        pts = [c] if c < T else None
        re = quad(fre, 0, T, points=pts, limit=200, epsabs=1e-13, epsrel=1e-12)[0]
        im = quad(fim, 0, T, points=pts, limit=200, epsabs=1e-13, epsrel=1e-12)[0]
        return re, im

    re = quad(lambda r: inner(r)[0], 0, t, limit=200, epsabs=1e-12, epsrel=1e-11)[0]
    im = quad(lambda r: inner(r)[1], 0, t, limit=200, epsabs=1e-12, epsrel=1e-11)[0]
    return complex(re, im)
