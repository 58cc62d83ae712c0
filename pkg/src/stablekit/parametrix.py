"""Error kernel, Neumann series for the transition density, residual and condition integrals."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.special import gammaln, roots_legendre

from .flow import compensated_drift, mollified_drift, solve_flow
from .frozen import FrequencyGrid, FrozenState, _choose_xi_max, cut_exponent_state, invert, principal_term
from .model import ModelSpec, NumericalParams, radial_moment
from .phigrid import Grid1DAssembler, Grid2DAssembler, UnsupportedModelError
from .spacetime import SingularityError, SpaceTimeField, convolve_direct, early_nodes, spacetime_convolve, time_mesh

__all__ = [
    "SpaceTimeField", "spacetime_convolve", "convolve_direct", "SingularityError", "UnsupportedModelError",
    "SeriesDivergenceError", "QuadratureError", "CouplingError", "PhiTerms", "ResidualReport",
    "ConditionValue", "phi_kernel", "neumann_density", "residual_norms", "condition_integrals", "density_at",
]

TERMS = ("A1", "A2", "A3", "A4", "A5", "A6", "B1", "B2")
FIELD_EXTENT = 40.0
QUAD_RTOL = 1e-3


class SeriesDivergenceError(ArithmeticError):
    pass


class QuadratureError(ArithmeticError):
    def __init__(self, term: str, message: str):
        super().__init__(f"{term}: {message}")
        self.term = term


class CouplingError(ValueError):
    pass


# Pointwise error kernel


@dataclass
class PhiTerms:
    value: float
    terms: dict[str, float]

    def __float__(self) -> float:
        return self.value

    def to_json(self) -> dict:
        return {"value": self.value, "terms": dict(self.terms)}


@dataclass
class _Frozen:
    kappa: np.ndarray
    B: np.ndarray
    fields: dict
    dx: float
    radius: float
    scale: float


def _multi_indices(d: int, order: int):
    if d == 1:
        return [(k,) for k in range(order + 1)]
    return [(i, k - i) for k in range(order + 1) for i in range(k, -1, -1)]


def _frozen_fields(model: ModelSpec, params: NumericalParams, y, t: float, cache: dict) -> _Frozen:
    """q = p_t^{y,cut} and its spectral derivatives up to order 3, oversampled for interpolation."""
    key = (tuple(np.atleast_1d(np.asarray(y, float)).tolist()), float(t))
    if key in cache:
        return cache[key]
    d = model.dim
    y_pt = model.points(y)[0]
    kappa = solve_flow(model, params, y_pt, t, "backward").at(t)[0]
    B = np.atleast_1d(mollified_drift(model, params, kappa, t))
    state = FrozenState.of(model, y_pt)
    zeta = float(params.zeta(state.alpha))
    tail = 2 * state.lam * t ** (1 - zeta * state.alpha) / (state.alpha * (1 - zeta * state.alpha))
    n = params.n_freq
    xi0 = _choose_xi_max(state, t, tail)
    os = int(min(8, max(1, n * math.pi / xi0 // FIELD_EXTENT)))
    grid = FrequencyGrid(n, os * xi0, d)
    nodes = grid.nodes()
    char = np.exp(-cut_exponent_state(state, zeta, t, nodes))
    fields = {}
    for mi in _multi_indices(d, 3):
        mult = np.ones(nodes.shape[:-1], dtype=complex)
        for k, o in enumerate(mi):
            if o:
                mult = mult * (-1j * nodes[..., k]) ** o
        fields[mi] = invert(char * mult, grid)
    q = fields[(0,) * d]
    big = np.abs(q.values) > 1e-13 * np.abs(q.values).max()
    pts = q.points().reshape(-1, d)[big.ravel()]
    radius = float(np.linalg.norm(pts, axis=1).max()) + 2 * grid.dx
    out = _Frozen(kappa, B, fields, grid.dx, radius, t ** (1.0 / state.alpha))
    cache[key] = out
    return out


def _ev(fld, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(pts)
    return fld(pts[:, 0]) if pts.shape[1] == 1 else fld(pts)


def _panels(a: float, b: float, hmax: float, geometric: bool) -> np.ndarray:
    if b <= a:
        return np.array([a, a])
    edges = [a]
    x = a
    if geometric:
        while x < b and x < hmax:
            x = min(2 * x, b)
            edges.append(x)
    n = int(math.ceil((b - x) / hmax)) if b > x else 0
    if n:
        edges.extend(np.linspace(x, b, n + 1)[1:].tolist())
    return np.array(edges)


def _gauss(edges: np.ndarray, n: int):
    g, gw = roots_legendre(n)
    mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * (edges[1:] - edges[:-1])
    return (mid[:, None] + half[:, None] * g).ravel(), (half[:, None] * gw).ravel()


def _checked(term: str, fn, edges: np.ndarray) -> float:
    """Gauss rule with 8 and 16 points per panel; raises when they disagree."""
    r8, w8 = _gauss(edges, 8)
    r16, w16 = _gauss(edges, 16)
    v8 = float(fn(r8) @ w8)
    f16 = fn(r16)
    v16 = float(f16 @ w16)
    scale = float(np.abs(f16) @ w16)
    if abs(v8 - v16) > QUAD_RTOL * scale + 1e-12:
        raise QuadratureError(term, f"radial quadrature unresolved ({v8:.6g} vs {v16:.6g})")
    return v16


class _Local:
    """Values of q and its derivatives at one displacement w."""

    def __init__(self, fz: _Frozen, w: np.ndarray):
        self.fz = fz
        self.w = w
        d = len(w)
        f = fz.fields
        self.q = float(_ev(f[(0,) * d], w[None])[0])
        if d == 1:
            self.grad = np.array([_ev(f[(1,)], w[None])[0]])
            self.H = np.array([[_ev(f[(2,)], w[None])[0]]])
            self.D3 = {(0, 0, 0): float(_ev(f[(3,)], w[None])[0])}
        else:
            v = {mi: float(_ev(f[mi], w[None])[0]) for mi in _multi_indices(2, 3)}
            self.grad = np.array([v[(1, 0)], v[(0, 1)]])
            self.H = np.array([[v[(2, 0)], v[(1, 1)]], [v[(1, 1)], v[(0, 2)]]])
            self.D3 = {"c": (v[(3, 0)], v[(2, 1)], v[(1, 2)], v[(0, 3)])}

    def at(self, pts: np.ndarray) -> np.ndarray:
        d = len(self.w)
        return _ev(self.fz.fields[(0,) * d], pts)

    def d2(self, l: np.ndarray) -> float:
        return float(l @ self.H @ l)

    def d3(self, l: np.ndarray) -> float:
        if len(l) == 1:
            return self.D3[(0, 0, 0)] * l[0] ** 3
        c30, c21, c12, c03 = self.D3["c"]
        a, b = l
        return c30 * a ** 3 + 3 * c21 * a * a * b + 3 * c12 * a * b * b + c03 * b ** 3

    def second_difference(self, l: np.ndarray, alpha: float, R: float, term: str) -> float:
        """int_0^R (q(w - rho l) - q(w) + rho l.grad q(w)) rho^{-1-alpha} d rho."""
        rho_t = min(R, 2 * self.fz.dx)
        h2, h3 = self.d2(l), self.d3(l)
        out = 0.5 * h2 * rho_t ** (2 - alpha) / (2 - alpha) - h3 / 6 * rho_t ** (3 - alpha) / (3 - alpha)
        if R <= rho_t:
            return out
        slope = float(l @ self.grad)

        def fn(rho):
            pts = self.w[None, :] - rho[:, None] * l[None, :]
            return (self.at(pts) - self.q + rho * slope) * rho ** (-1 - alpha)

        edges = _panels(rho_t, R, 0.25 * self.fz.scale, True)
        return out + _checked(term, fn, edges)

    def tail_shift(self, l: np.ndarray, alpha: float, R: float, term: str) -> float:
        """int_R^inf q(w - rho l) rho^{-1-alpha} d rho over the support of q."""
        p = float(l @ self.w)
        perp2 = float(self.w @ self.w) - p * p
        rq = self.fz.radius
        if perp2 >= rq * rq:
            return 0.0
        half = math.sqrt(rq * rq - perp2)
        lo, hi = max(R, p - half), p + half
        if hi <= lo:
            return 0.0

        def fn(rho):
            pts = self.w[None, :] - rho[:, None] * l[None, :]
            return self.at(pts) * rho ** (-1 - alpha)

        edges = _panels(lo, hi, 0.25 * self.fz.scale, False)
        return _checked(term, fn, edges)


def phi_kernel(model: ModelSpec, params: NumericalParams, t: float, x, y, p0_cache: dict | None = None) -> PhiTerms:
    """Phi_t(x, y) and its terms A1..A6, B1, B2 by real-space radial quadrature."""
    if not 0 < t <= 1:
        raise ValueError("phi_kernel requires t in (0, 1]")
    params = params.resolve(model)
    cache = {} if p0_cache is None else p0_cache
    if model.has_nu and model.nu.cut_at(model.points(x)) is not None:
        raise UnsupportedModelError("cut perturbation kernels are not supported by phi_kernel")
    X = model.points(x)
    Y = model.points(y)
    fz = _frozen_fields(model, params, Y[0], t, cache)
    w = fz.kappa - X[0]
    loc = _Local(fz, w)

    ax, lx = float(model.alpha_at(X)[0]), float(model.lam_at(X)[0])
    ay, ly = float(model.alpha_at(Y)[0]), float(model.lam_at(Y)[0])
    dx_dirs, dy_dirs = model.directions_at(X)[0], model.directions_at(Y)[0]
    if dx_dirs.shape != dy_dirs.shape:
        raise CouplingError("sigma(x) and sigma(y) do not share an atom index")
    wts = model.weights
    R = t ** float(params.zeta(ay))
    cx, cy = t ** (1.0 / ax), t ** (1.0 / ay)
    grad_x = -loc.grad  # gradient of p0 in x

    T = dict.fromkeys(TERMS, 0.0)
    T["A1"] = -loc.q * lx * R ** (-ax) / ax
    T["B1"] = sum(lx * wi * loc.tail_shift(l, ax, R, "B1") for wi, l in zip(wts, dx_dirs))
    bt = np.atleast_1d(compensated_drift(model, X[0], t))
    T["A3"] = float((bt - fz.B) @ grad_x)
    if model.has_nu and model.nu.n_atoms:
        U, Mass = model.nu.atoms_at(X)
        for u, m in zip(U[0], Mass[0]):
            if np.linalg.norm(u) > cx:
                T["A2"] -= m * loc.q
                T["B2"] += m * float(loc.at((w - u)[None])[0])
            else:
                T["A4"] += m * (float(loc.at((w - u)[None])[0]) - loc.q + float(u @ loc.grad))
    same = ax == ay and lx == ly and np.array_equal(dx_dirs, dy_dirs)
    if not same:
        T["A5"] = sum(
            wi * (lx * loc.second_difference(lxi, ax, R, "A5") - ly * loc.second_difference(lyi, ay, R, "A5"))
            for wi, lxi, lyi in zip(wts, dx_dirs, dy_dirs)
        )
    mx = float(radial_moment(ax, cx, R))
    my = float(radial_moment(ay, cy, R))
    T["A6"] = sum(wi * (lx * mx * float(lxi @ grad_x) - ly * my * float(lyi @ grad_x)) for wi, lxi, lyi in zip(wts, dx_dirs, dy_dirs))
    T = {k: float(v) for k, v in T.items()}
    return PhiTerms(float(sum(T.values())), T)


# Neumann series on grids


def _parse_axes(model: ModelSpec, y_grid):
    if model.dim == 1:
        ax = np.asarray(y_grid, dtype=float).reshape(-1)
        return (ax,), ax[:, None]
    axes = tuple(np.asarray(a, dtype=float) for a in y_grid)
    g = np.meshgrid(*axes, indexing="ij")
    return axes, np.stack([a.ravel() for a in g], axis=-1)


def _row_indices(nodes: np.ndarray, x_grid, d: int, spacing: float) -> np.ndarray:
    X = np.asarray(x_grid, dtype=float).reshape(-1, d)
    rows = []
    for x in X:
        dist = np.linalg.norm(nodes - x, axis=1)
        j = int(np.argmin(dist))
        if dist[j] > 1e-6 * spacing:
            raise ValueError(f"x point {x.tolist()} is not a node of the y grid")
        rows.append(j)
    return np.array(rows)


def _norm_rows(N: int, rows: np.ndarray, count: int) -> np.ndarray:
    stride = np.linspace(0, N - 1, min(count, N)).round().astype(int)
    return np.unique(np.concatenate([rows, stride]))


def _tail_bound(t: float, C: float, eps: float, K: int, n_terms: int = 60) -> float:
    """sum_{k > K} t^{-1 + k eps} (C Gamma(eps))^k / Gamma(k eps)."""
    if not (eps > 0 and C > 0):
        return math.inf
    lg = math.log(C) + gammaln(eps)
    total = 0.0
    for k in range(K + 1, K + 1 + n_terms):
        total += math.exp((-1 + k * eps) * math.log(t) + k * lg - gammaln(k * eps))
    return total


def neumann_density(model: ModelSpec, params: NumericalParams, t_list, x_grid, y_grid, min_steps: int = 16,
                    norm_rows: int = 16):
    """p_t(x, y) = sum_k (p0 * Phi^{*k})_t(x, y) on a uniform time mesh.

    ``y_grid`` is a 1-d array of equispaced nodes (d = 1) or a pair of axes
    (d = 2); ``x_grid`` lists start points, each of which must be a node.
    Returns the density field (rows = x points) and its residual report.
    """
    params = params.resolve(model)
    t_req = sorted({float(t) for t in np.atleast_1d(t_list)})
    if t_req[-1] > 1 + 1e-12:
        raise ValueError("the parametrix pipeline covers t <= 1")
    h, M, idx = time_mesh(t_req, min_steps)
    axes, nodes = _parse_axes(model, y_grid)
    spacing = float(axes[0][1] - axes[0][0])
    dz = spacing ** model.dim
    rows = _row_indices(nodes, x_grid, model.dim, spacing)
    asm = Grid1DAssembler(model, params, axes[0]) if model.dim == 1 else Grid2DAssembler(model, params, axes)
    rate = -(1.0 - params.s_frak * model.alpha_min)
    early = early_nodes(h, rate)
    times = np.concatenate([h * np.arange(1, M + 1), early])
    mask = np.arange(len(times)) < M
    phi, p0, _ = asm.assemble(times, rows, mask)
    N = nodes.shape[0]
    Phi = SpaceTimeField(h, phi[:M], dz, rate, early=phi[M:], meta={"kind": "phi"})
    U = SpaceTimeField(h, p0[:M], dz, 0.0, zero=np.eye(N)[rows] / dz, meta={"kind": "p0"})
    nr = _norm_rows(N, rows, norm_rows)
    V = SpaceTimeField(h, phi[:M][:, nr, :], dz, rate, early=phi[M:][:, nr, :])
    del phi

    sel = np.array(idx) - 1
    t1 = Phi.times
    n1_all = np.abs(V.values).sum(axis=2).max(axis=1) * dz
    fit = np.polyfit(np.log(t1), np.log(n1_all), 1)
    eps_phi, C_phi = 1.0 + float(fit[0]), math.exp(float(fit[1]))

    total = U.values.copy()
    cur = U
    norms = [n1_all[sel].tolist()]
    rising = 0
    last_ratio = 0.0
    K = 0
    for k in range(1, params.K_max + 1):
        cur = spacetime_convolve(cur, Phi)
        total += cur.values
        K = k
        nk = max(norms[-1])
        if nk < params.tol_series or k == params.K_max:
            break
        V = spacetime_convolve(V, Phi)
        nxt = (np.abs(V.values).sum(axis=2).max(axis=1) * dz)[sel]
        # growth with shrinking ratios is the pre-asymptotic phase of factorial decay
        ratio = max(nxt) / nk if nk > 0 else math.inf
        rising = rising + 1 if ratio > 1 and ratio >= last_ratio else 0
        last_ratio = ratio
        norms.append(nxt.tolist())
        if rising >= 3:
            raise SeriesDivergenceError(f"series norm increased for {rising} consecutive terms: {[max(n) for n in norms]}")

    meta = {
        "kind": "density", "dim": model.dim, "model": model.name, "t_list": t_req, "t_index": list(idx),
        "axes": [a.tolist() for a in axes], "rows": rows.tolist(), "x": nodes[rows].tolist(),
    }
    dens = SpaceTimeField(h, total, dz, 0.0, zero=U.zero, meta=meta)
    series = {
        "terms": K, "norms": norms, "C": C_phi, "eps_phi": eps_phi, "eps_phi_formula": params.s_frak * model.alpha_min,
        "tail_bound": [_tail_bound(t, C_phi, eps_phi, K) for t in t_req], "norm_rows": len(nr),
    }
    report = residual_norms(dens, model, params, series=series)
    return dens, report


def density_at(field: SpaceTimeField, t: float) -> np.ndarray:
    """Rows p_t(x, .) of a density field at a requested time."""
    k = int(round(t / field.h))
    if abs(k * field.h - t) > 1e-9 * max(t, 1.0) or not 1 <= k <= field.M:
        raise ValueError(f"t = {t} is not a node of the time mesh")
    return field.node(k)


# Residual


@dataclass
class ResidualReport:
    times: list[float]
    inf1: list[float]
    sup: list[float]
    eps_R: float
    eps_R_band: float
    eps_R_sup: float
    eps_R_sup_band: float
    series: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "times": self.times, "norm_inf1": self.inf1, "norm_sup": self.sup,
            "eps_R": {"value": self.eps_R, "band": self.eps_R_band},
            "eps_R_sup": {"value": self.eps_R_sup, "band": self.eps_R_sup_band},
            "series": self.series, "grid": self.grid,
        }

    def dumps(self) -> str:
        return json.dumps(_finite(self.to_json()), indent=2, sort_keys=True)


def _finite(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else str(obj)
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _slope(t, v) -> tuple[float, float]:
    t, v = np.asarray(t, float), np.asarray(v, float)
    ok = v > 0
    if ok.sum() < 2:
        return math.nan, math.nan
    lt, lv = np.log(t[ok]), np.log(v[ok])
    if ok.sum() == 2:
        return float((lv[1] - lv[0]) / (lt[1] - lt[0])), math.nan
    coef, cov = np.polyfit(lt, lv, 1, cov=True)
    return float(coef[0]), float(2 * math.sqrt(max(cov[0, 0], 0.0)))


def _trapezoid(vals: np.ndarray, spacing: float, shape) -> np.ndarray:
    """Tensor trapezoid of (rows, nodes) values over a grid of ``shape``."""
    v = vals.reshape((vals.shape[0],) + tuple(shape))
    trap = np.trapezoid if hasattr(np, "trapezoid") else np.trapz
    while v.ndim > 1:
        v = trap(v, dx=spacing, axis=1)
    return v


def residual_norms(field: SpaceTimeField, model: ModelSpec, params: NumericalParams, series: dict | None = None) -> ResidualReport:
    """Norms of R_t = p_t - t^{-d/alpha(x)} g^x((y - chi_t(x)) / t^{1/alpha(x)}) at the requested times."""
    params = params.resolve(model)
    meta = field.meta
    axes = [np.asarray(a) for a in meta["axes"]]
    spacing = float(axes[0][1] - axes[0][0])
    g = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([a.ravel() for a in g], axis=-1)
    X = np.asarray(meta["x"], dtype=float)
    times = list(meta["t_list"])
    inf1, sup = [], []
    for t, k in zip(times, meta["t_index"]):
        P = field.node(k)
        R = np.empty_like(P)
        for i, x in enumerate(X):
            chi = solve_flow(model, params, x, t, "forward").at(t)[0]
            disp = nodes - chi
            R[i] = P[i] - principal_term(model, x, t, disp[:, 0] if model.dim == 1 else disp)
        inf1.append(float(_trapezoid(np.abs(R), spacing, [len(a) for a in axes]).max()))
        sup.append(float(np.abs(R).max()))
    e1, b1 = _slope(times, inf1)
    scaled = [s * t ** (model.dim / model.alpha_min) for s, t in zip(sup, times)]
    e2, b2 = _slope(times, scaled)
    grid = {"axes": [[float(a[0]), float(a[-1]), len(a)] for a in axes], "h": field.h, "M": field.M, "x": X.tolist()}
    return ResidualReport(times, inf1, sup, e1, b1, e2, b2, dict(series or {}), grid)


# Condition integrals


@dataclass
class ConditionValue:
    kind: str
    t: float
    value: float
    exponent: float
    sweep_t: list[float]
    sweep_values: list[float]

    def to_json(self) -> dict:
        return {"kind": self.kind, "t": self.t, "value": self.value, "exponent": self.exponent,
                "sweep": [[a, b] for a, b in zip(self.sweep_t, self.sweep_values)]}


def _condition_1d(model: ModelSpec, kind: str, t: float, v: float, aux) -> float:
    """Normalized by the ball volume: the t = 1, threshold 1 value is the mu tail mass."""
    dirs = model.directions_at(model.points(v))[0][:, 0] if model.constant_state else None

    def integrand(x):
        X = np.array([[x]])
        a_x = float(model.alpha_at(X)[0])
        lam = float(model.lam_at(X)[0])
        if kind == "e32":
            a, thr = a_x, t ** (1.0 / a_x - aux)
        elif kind == "e34":
            a, thr = float(aux), t ** (1.0 / float(aux))
        else:
            a, thr = float(aux[1]), t ** float(aux[0])
        s = t ** (1.0 / a)
        ls = dirs if dirs is not None else model.directions_at(X)[0][:, 0]
        val = 0.0
        for wi, l in zip(model.weights, ls):
            c = l * (v - x)
            lo, hi = max(thr, c - s), c + s
            if hi > lo:
                val += lam * wi * (lo ** (-a_x) - hi ** (-a_x)) / a_x
        if model.has_nu and model.nu.n_atoms:
            U, Mass = model.nu.atoms_at(X)
            for u, m in zip(U[0][:, 0], Mass[0]):
                if abs(u) >= thr and abs(v - x - u) <= s:
                    val += m
        return val * t ** (-1.0 / a) / 2.0

    c = 2.0 + 2 * t ** (1.0 / model.alpha_min)
    opts = dict(limit=400, epsabs=1e-12, epsrel=1e-9)
    total = quad(integrand, v - c, v + c, points=[v], **opts)[0]
    total += quad(integrand, v + c, np.inf, **opts)[0] + quad(integrand, -np.inf, v - c, **opts)[0]
    return total


def _condition_const(model: ModelSpec, kind: str, t: float, aux) -> float:
    """x-independent kernel: the x-ball volume factors out (Fubini)."""
    X = model.points(np.zeros(model.dim))
    a = float(model.alpha_at(X)[0])
    lam = float(model.lam_at(X)[0])
    if kind == "e32":
        thr = t ** (1.0 / a - aux)
    elif kind == "e34":
        thr = t ** (1.0 / float(aux))
    else:
        thr = t ** aux[0]
    return lam * thr ** (-a) / a


def condition_integrals(model: ModelSpec, kind: str, t: float, v, aux, n_sweep: int = 6) -> ConditionValue:
    """Left-hand side of the remainder-theorem condition ``kind`` at t, divided by the unit-ball volume,
    with the fitted power of t over the sweep t 2^{-j}, j < n_sweep."""
    if kind not in ("e32", "e34", "e36"):
        raise ValueError(f"unknown condition kind {kind!r}")
    if kind == "e36" and np.ndim(aux) == 0:
        raise ValueError("kind e36 needs aux = (r, alpha)")
    if model.dim == 1:
        v0 = float(np.atleast_1d(v)[0])

        def fn(s):
            return _condition_1d(model, kind, s, v0, aux)
    elif model.constant_state and not model.has_nu:
        def fn(s):
            return _condition_const(model, kind, s, aux)
    else:
        raise UnsupportedModelError("condition integrals in d = 2 need an x-independent kernel without perturbation")
    ts = [t * 2.0 ** (-j) for j in range(n_sweep)]
    vals = [fn(s) for s in ts]
    expo, _ = _slope(ts, vals)
    return ConditionValue(kind, t, vals[0], expo, ts, vals)
