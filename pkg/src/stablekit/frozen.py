"""Frozen-coefficient exponents and densities by discrete Fourier inversion."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline
from scipy.special import gamma

from .model import ALPHA_ONE_TOL, ModelSpec, NumericalParams, intrinsic_drift
from .symbols import atom_exponent, cut_symbol

TRUNC_TARGET = 1e-10
TRUNC_ERROR = 1e-6


class TruncationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FrozenState:
    """Coefficients of the principal kernel frozen at one point."""

    alpha: float
    lam: float
    directions: tuple[tuple[float, ...], ...]
    weights: tuple[float, ...]

    @classmethod
    def of(cls, model: ModelSpec, z) -> "FrozenState":
        Z = model.points(z)[:1]
        dirs = model.directions_at(Z)[0]
        return cls(
            float(model.alpha_at(Z)[0]),
            float(model.lam_at(Z)[0]),
            tuple(tuple(float(v) for v in d) for d in dirs),
            tuple(float(w) for w in model.weights),
        )

    @property
    def dim(self) -> int:
        return len(self.directions[0])

    def atoms(self):
        for d, w in zip(self.directions, self.weights):
            yield np.array(d), self.lam * w

    def sigma0(self, n_dirs: int = 64) -> float:
        """Lower constant in Re psi(xi) >= sigma0 |xi|^alpha."""
        a = self.alpha
        coef = 0.5 * math.pi if abs(a - 1) < ALPHA_ONE_TOL else gamma(1 - a) * math.cos(0.5 * math.pi * a) / a
        if self.dim == 1:
            V = np.array([[1.0], [-1.0]])
        else:
            th = np.linspace(0, 2 * np.pi, n_dirs, endpoint=False)
            V = np.stack([np.cos(th), np.sin(th)], axis=-1)
        dirs = np.array(self.directions)
        vals = (np.abs(V @ dirs.T) ** a) @ np.array(self.weights)
        return float(self.lam * coef * vals.min())

    def drift(self) -> np.ndarray:
        return self.lam * np.array(self.weights) @ np.array(self.directions)


def _xi_dot(xi: np.ndarray, l: np.ndarray) -> np.ndarray:
    return xi[..., 0] * l[0] if len(l) == 1 else xi @ l


def _as_freq(xi, d: int) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if d == 1 and (xi.ndim == 0 or xi.shape[-1] != 1):
        xi = xi[..., None]
    return xi


def cut_exponent_state(state: FrozenState, zeta: float, t: float, xi: np.ndarray) -> np.ndarray:
    out = np.zeros(xi.shape[:-1], dtype=complex)
    sym = cut_symbol(state.alpha, zeta)
    for l, c in state.atoms():
        out += c * sym.integrated(_xi_dot(xi, l), t)
    return out


def instant_cut_exponent_state(state: FrozenState, zeta: float, r: float, xi: np.ndarray) -> np.ndarray:
    out = np.zeros(xi.shape[:-1], dtype=complex)
    sym = cut_symbol(state.alpha, zeta)
    for l, c in state.atoms():
        out += c * sym.instant(_xi_dot(xi, l), r)
    return out


def full_exponent_state(state: FrozenState, xi: np.ndarray, with_drift: bool = True) -> np.ndarray:
    out = np.zeros(xi.shape[:-1], dtype=complex)
    for l, c in state.atoms():
        out += c * atom_exponent(_xi_dot(xi, l), state.alpha)
    if with_drift:
        out -= 1j * (xi @ state.drift())
    return out


def integrated_cut_exponent(model: ModelSpec, params: NumericalParams, z, t: float, xi) -> np.ndarray:
    """int_0^t psi_r^{z,cut}(xi) dr (closed radial-time reduction per atom)."""
    if not 0 < t <= 1:
        raise ValueError("integrated_cut_exponent requires t in (0, 1]")
    params = params.resolve(model)
    state = FrozenState.of(model, z)
    zeta = float(params.zeta(state.alpha))
    return cut_exponent_state(state, zeta, t, _as_freq(xi, model.dim))


@dataclass(frozen=True)
class FrequencyGrid:
    """Symmetric frequency grid with n nodes per axis and its dual spatial grid."""

    n: int
    xi_max: float
    dim: int = 1

    @property
    def dxi(self) -> float:
        return 2 * self.xi_max / self.n

    @property
    def dx(self) -> float:
        return 2 * math.pi / (self.n * self.dxi)

    def axis(self) -> np.ndarray:
        """Frequencies in FFT order."""
        return np.fft.fftfreq(self.n, 1.0 / self.n) * self.dxi

    def nodes(self) -> np.ndarray:
        ax = self.axis()
        if self.dim == 1:
            return ax[:, None]
        a, b = np.meshgrid(ax, ax, indexing="ij")
        return np.stack([a, b], axis=-1)

    def space_axis(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.dx


@dataclass
class DensityField:
    """Scalar field on a regular grid (natural ordering, axis-wise spacing)."""

    values: np.ndarray
    origin: np.ndarray
    spacing: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.values.ndim

    def axis(self, k: int = 0) -> np.ndarray:
        return self.origin[k] + self.spacing[k] * np.arange(self.values.shape[k])

    def points(self) -> np.ndarray:
        axes = [self.axis(k) for k in range(self.dim)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack(g, axis=-1)

    def mass(self) -> float:
        return float(self.values.sum() * np.prod(self.spacing))

    def max(self) -> float:
        return float(self.values.max())

    def __call__(self, x) -> np.ndarray:
        """Cubic interpolation; zero outside the grid."""
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            x1 = x[..., 0] if (x.ndim and x.shape[-1] == 1 and x.ndim > 1) else x
            idx = (x1 - self.origin[0]) / self.spacing[0]
            out = ndimage.map_coordinates(self._coeffs(), [np.atleast_1d(idx).ravel()], order=3, mode="constant", cval=0.0, prefilter=False)
            return out.reshape(np.shape(x1))
        idx = (x - self.origin) / self.spacing
        flat = idx.reshape(-1, 2).T
        out = ndimage.map_coordinates(self._coeffs(), flat, order=3, mode="constant", cval=0.0, prefilter=False)
        return out.reshape(x.shape[:-1])

    def _coeffs(self):
        c = self.meta.get("_spline")
        if c is None:
            c = ndimage.spline_filter(self.values, order=3, mode="constant")
            self.meta["_spline"] = c
        return c

    def export_meta(self) -> dict:
        m = {k: v for k, v in self.meta.items() if not k.startswith("_")}
        m.update(origin=self.origin.tolist(), spacing=self.spacing.tolist(), shape=list(self.values.shape), mass=self.mass())
        return m

    def to_csv(self, path: str):
        pts = self.points().reshape(-1, self.dim)
        vals = np.clip(self.values.ravel(), 0.0, None)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k + 1}" for k in range(self.dim)] + ["density"])
            for p, v in zip(pts, vals):
                w.writerow([repr(float(c)) for c in p] + [repr(float(v))])
        with open(path + ".json", "w") as fh:
            json.dump(self.export_meta(), fh, indent=2, sort_keys=True)


def invert(char: np.ndarray, grid: FrequencyGrid, meta: dict | None = None) -> DensityField:
    """Density from characteristic-function samples on ``grid`` (FFT order)."""
    vals = np.fft.fftn(char).real * (grid.dxi / (2 * math.pi)) ** grid.dim
    vals = np.fft.fftshift(vals)
    origin = np.full(grid.dim, -(grid.n // 2) * grid.dx)
    return DensityField(vals, origin, np.full(grid.dim, grid.dx), dict(meta or {}))


def _edge_max(char: np.ndarray, grid: FrequencyGrid) -> float:
    ax = np.abs(grid.axis())
    edge = ax >= 0.95 * grid.xi_max
    a = np.abs(char)
    if grid.dim == 1:
        return float(a[edge].max())
    return float(max(a[edge, :].max(), a[:, edge].max()))


def _choose_xi_max(state: FrozenState, t: float, extra: float = 0.0) -> float:
    s0 = state.sigma0()
    return ((math.log(1 / TRUNC_TARGET) + extra) / (s0 * t)) ** (1.0 / state.alpha)


def _invert_adaptive(fn, state: FrozenState, t: float, n: int, extra: float, meta: dict, deriv=None) -> DensityField:
    xi_max = _choose_xi_max(state, t, extra)
    for attempt in range(2):
        grid = FrequencyGrid(n, xi_max, state.dim)
        nodes = grid.nodes()
        char = np.exp(-fn(nodes))
        edge = _edge_max(char, grid)
        if edge <= TRUNC_TARGET:
            break
        xi_max *= 2
    meta = dict(meta, xi_max=xi_max, edge_char=edge, n_freq=n)
    if edge > TRUNC_ERROR:
        raise TruncationError(f"characteristic function at the grid edge is {edge:.2e} > {TRUNC_ERROR}")
    if edge > TRUNC_TARGET:
        meta["truncation_warning"] = f"edge value {edge:.2e} above {TRUNC_TARGET}"
        warnings.warn(meta["truncation_warning"], RuntimeWarning, stacklevel=3)
    if deriv is not None:
        char = char * deriv(nodes)
    return invert(char, grid, meta)


def frozen_density(model: ModelSpec, params: NumericalParams, z, t: float, n: int | None = None, deriv: int | tuple = 0) -> DensityField:
    """p_t^{z,cut} on the dual grid of an automatically sized frequency grid.

    ``deriv`` selects a spatial derivative: an integer order in d = 1 or a
    multi-index in d = 2 (computed spectrally).
    """
    if not 0 < t <= 1:
        raise ValueError("frozen_density requires t in (0, 1]")
    params = params.resolve(model)
    state = FrozenState.of(model, z)
    zeta = float(params.zeta(state.alpha))
    n = n or params.n_freq
    tail = 2 * state.lam * t ** (1 - zeta * state.alpha) / (state.alpha * (1 - zeta * state.alpha))
    dfn = None
    if deriv not in (0, (0, 0)):
        orders = (deriv,) if model.dim == 1 else tuple(deriv)

        def dfn(nodes):
            out = np.ones(nodes.shape[:-1], dtype=complex)
            for k, o in enumerate(orders):
                out = out * (-1j * nodes[..., k]) ** o
            return out

    meta = dict(kind="frozen-cut", z=np.atleast_1d(np.asarray(z, float)).tolist(), t=t, alpha=state.alpha, zeta=zeta, deriv=deriv)
    return _invert_adaptive(lambda xi: cut_exponent_state(state, zeta, t, xi), state, t, n, tail, meta, dfn)


def stable_density(model: ModelSpec, z, t: float, n: int | None = None) -> DensityField:
    """Inversion of exp(-t psi^{z,upsilon}) (full exponent including intrinsic drift)."""
    if not 0 < t <= 1:
        raise ValueError("stable_density requires t in (0, 1]")
    state = FrozenState.of(model, z)
    n = n or (4096 if model.dim == 1 else 512)
    meta = dict(kind="stable", z=np.atleast_1d(np.asarray(z, float)).tolist(), t=t, alpha=state.alpha)
    return _invert_adaptive(lambda xi: t * full_exponent_state(state, xi), state, t, n, 0.0, meta)


def principal_term(model: ModelSpec, x, t: float, w, n: int | None = None) -> np.ndarray:
    """t^{-d/alpha(x)} g^x(w / t^{1/alpha(x)}) at displacements w = y - chi_t(x)."""
    state = FrozenState.of(model, x)
    s = t ** (1.0 / state.alpha)
    n = n or (4096 if model.dim == 1 else 512)
    # density of s G where G ~ g^x has characteristic exponent psi^{x,upsilon}(s xi)
    fld = _invert_adaptive(lambda xi: full_exponent_state(state, s * xi), state, s ** state.alpha, n, 0.0, dict(kind="principal", t=t))
    return fld(w)


def zero_order(model: ModelSpec, params: NumericalParams, x, y, t: float, cache: dict | None = None) -> float:
    """p0_t(x, y) = p_t^{y,cut}(kappa_t(y) - x), with frozen fields cached per (y, t)."""
    from .flow import solve_flow

    params = params.resolve(model)
    cache = {} if cache is None else cache
    key = (tuple(np.atleast_1d(np.asarray(y, float)).tolist()), float(t))
    if key not in cache:
        kappa = solve_flow(model, params, y, t, "backward").final()[0]
        cache[key] = (kappa, frozen_density(model, params, y, t))
    kappa, fld = cache[key]
    w = kappa - model.points(x)[0]
    return float(fld(w if model.dim > 1 else w[0]))


def zero_order_row(model: ModelSpec, params: NumericalParams, x, ys, t: float, cache: dict | None = None) -> np.ndarray:
    """p0_t(x, y) for many y at once (one vectorized backward flow)."""
    from .flow import solve_flow

    params = params.resolve(model)
    cache = {} if cache is None else cache
    Y = model.points(ys)
    keys = [(tuple(y.tolist()), float(t)) for y in Y]
    todo = [i for i, k in enumerate(keys) if k not in cache]
    if todo:
        kap = solve_flow(model, params, Y[todo], t, "backward").final()
        for j, i in enumerate(todo):
            cache[keys[i]] = (kap[j], frozen_density(model, params, Y[i], t))
    X = model.points(x)[0]
    out = np.empty(len(keys))
    for i, k in enumerate(keys):
        kappa, fld = cache[k]
        w = kappa - X
        out[i] = float(fld(w if model.dim > 1 else w[0]))
    return out


def f_kernel(t: float, a: float, c: float, x, d: int = 1) -> np.ndarray:
    """f_{t,a,c}(x) = t^{-ad} exp(-c |x| t^{-a})."""
    x = np.asarray(x, dtype=float)
    r = np.abs(x) if d == 1 and (x.ndim == 0 or x.shape[-1] != 1) else np.linalg.norm(np.atleast_1d(x), axis=-1)
    return t ** (-a * d) * np.exp(-c * r * t ** (-a))


def bound_kernel(kind: str, params: NumericalParams, t: float, disp, zeta: float | None = None,
                 zeta_min: float | None = None, d: int = 1, a: float | None = None) -> np.ndarray:
    """Diagnostic kernels: ``f`` (needs a), ``K0`` (disp = kappa_t(y) - x, zeta = zeta(y)),
    ``K1`` (disp = y - chi_t(x), zeta = zeta(x), zeta_min)."""
    c = params.c_decay
    if kind == "f":
        return f_kernel(t, a, c, disp, d)
    if kind == "K0":
        return f_kernel(t, zeta, c, disp, d)
    if kind == "K1":
        disp = np.asarray(disp, dtype=float)
        r = np.abs(disp) if d == 1 and (disp.ndim == 0 or disp.shape[-1] != 1) else np.linalg.norm(np.atleast_1d(disp), axis=-1)
        near = r <= t ** params.delta_K1
        return np.where(near, f_kernel(t, zeta, c, disp, d), t ** (-params.N_K1) * f_kernel(t, zeta_min, c, disp, d))
    raise ValueError(f"unknown kernel kind {kind!r}")
