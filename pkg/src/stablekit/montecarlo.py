"""Monte Carlo oracle: stable sampling, Euler paths of the generator, histograms, renewal identity."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma, roots_legendre

from .frozen import DensityField
from .model import ALPHA_ONE_TOL, ModelSpec, NumericalParams, _eval_on, radial_moment
from .sphere import SphericalMeasure

EULER_GAMMA = 0.5772156649015329


class ThinningError(ValueError):
    pass


# Stable increments


def _cms_skewed(alpha: np.ndarray, c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Totally skewed samples Y with E exp(i s Y) = exp(-c * atom_exponent(s, alpha)).

    Chambers-Mallows-Stuck in the S1 parametrisation with beta = 1; scale and
    shift are matched to the exponent compensated on jumps of size <= 1.
    """
    n = alpha.shape[0]
    V = rng.uniform(-0.5 * math.pi, 0.5 * math.pi, n)
    W = rng.exponential(1.0, n)
    out = np.empty(n)
    one = np.abs(alpha - 1.0) < ALPHA_ONE_TOL
    a = alpha[~one]
    if a.size:
        v, w, cc = V[~one], W[~one], c[~one]
        tan = np.tan(0.5 * math.pi * a)
        B = np.arctan(tan) / a
        S = (1.0 + tan * tan) ** (0.5 / a)
        X = S * np.sin(a * (v + B)) / np.cos(v) ** (1.0 / a) * (np.cos(v - a * (v + B)) / w) ** ((1.0 - a) / a)
        sig = (cc * gamma(1.0 - a) * np.cos(0.5 * math.pi * a) / a) ** (1.0 / a)
        out[~one] = sig * X - cc / (1.0 - a)
    if one.any():
        v, w, cc = V[one], W[one], c[one]
        half = 0.5 * math.pi
        X = ((half + v) * np.tan(v) - np.log(half * w * np.cos(v) / (half + v))) / half
        sig = half * cc
        out[one] = sig * X + sig * np.log(sig) / half + cc * (1.0 - EULER_GAMMA)
    return out


def sample_stable(alpha: float, atoms: SphericalMeasure, lam: float, n: int, seed) -> np.ndarray:
    """n samples (n, d) of the law with exponent lam * sum_i w_i atom_exponent(xi . l_i, alpha)."""
    if not 0 < alpha < 2:
        raise ValueError("alpha must lie in (0, 2)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dirs = np.asarray(atoms.directions, dtype=float)
    out = np.zeros((n, dirs.shape[1]))
    a = np.full(n, float(alpha))
    for l, w in zip(dirs, atoms.weights):
        if w > 0:
            out += _cms_skewed(a, np.full(n, lam * w), rng)[:, None] * l[None, :]
    return out


def _increments(alpha: np.ndarray, lam: np.ndarray, dirs: np.ndarray, weights: np.ndarray, h: float,
                rng: np.random.Generator) -> np.ndarray:
    """One frozen-state increment per path; dirs (n, k, d)."""
    n, k, d = dirs.shape
    out = np.zeros((n, d))
    for i in range(k):
        if weights[i] > 0:
            out += _cms_skewed(alpha, h * lam * weights[i], rng)[:, None] * dirs[:, i, :]
    return out


# Paths


@dataclass
class PathEnsemble:
    terminal: np.ndarray
    seed: int
    h: float
    t: float
    scheme: dict
    skeletons: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.terminal.shape[0]

    def to_csv(self, path: str):
        d = self.terminal.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path"] + [f"x{k + 1}" for k in range(d)])
            for i, row in enumerate(self.terminal):
                w.writerow([i] + [repr(float(v)) for v in row])
        with open(path + ".json", "w") as fh:
            json.dump(self.header(), fh, indent=2, sort_keys=True)

    def header(self) -> dict:
        return {"n": self.n, "seed": self.seed, "h": self.h, "t": self.t, "scheme": self.scheme, **self.meta}


def _truncation_drift(model: ModelSpec, X: np.ndarray, alpha: np.ndarray, lam: np.ndarray, dirs: np.ndarray, R: np.ndarray):
    """int_{R < |u| <= 1} u mu(x, du): the compensator of the removed jumps."""
    mean = np.einsum("k,nkd->nd", model.weights, dirs)
    mom = np.where(R < 1.0, radial_moment(alpha, np.minimum(R, 1.0), 1.0), 0.0)
    return (lam * mom)[:, None] * mean


def simulate_paths(model: ModelSpec, x0, t: float, h: float, n: int, seed: int, keep_paths: bool = False,
                   max_reject: int = 1000) -> PathEnsemble:
    """Euler scheme with the full generator frozen at the current state.

    Per step: drift b(X) h, a stable increment with exponent h psi^{X}, and at
    most one perturbation jump chosen by thinning against the atom masses of
    nu(X, .).  A cut part of nu (jumps of mu beyond R(X) removed) is realised
    by resampling increments whose size exceeds R(X).
    """
    if not 0 < h <= t:
        raise ValueError("step size must satisfy 0 < h <= t")
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    d = model.dim
    x0 = np.asarray(x0, dtype=float)
    X = np.broadcast_to(model.points(x0) if x0.ndim < 2 else x0, (n, d)).astype(float).copy()
    steps = int(round(t / h))
    if abs(steps * h - t) > 1e-9 * t:
        steps = int(math.ceil(t / h))
    hs = np.full(steps, t / steps)
    skel = [X.copy()] if keep_paths else None
    nu = model.nu if model.has_nu else None
    cut = nu is not None and nu.cut_radius is not None
    for hk in hs:
        alpha = model.alpha_at(X)
        lam = model.lam_at(X)
        dirs = model.directions_at(X)
        if dirs.ndim == 2:
            dirs = np.broadcast_to(dirs, (n,) + dirs.shape)
        step = _increments(alpha, lam, dirs, model.weights, hk, rng)
        if cut:
            R = nu.cut_at(X)
            bad = np.linalg.norm(step, axis=1) > R
            tries = 0
            while bad.any():
                tries += 1
                if tries > max_reject:
                    raise ThinningError("truncation rejection did not terminate; reduce h")
                idx = np.where(bad)[0]
                redo = _increments(alpha[idx], lam[idx], dirs[idx], model.weights, hk, rng)
                ok = np.linalg.norm(redo, axis=1) <= R[idx]
                step[idx[ok]] = redo[ok]
                bad[idx[ok]] = False
            step += hk * _truncation_drift(model, X, alpha, lam, dirs, R)
        if model.has_drift:
            step += model.drift_at(X) * hk
        if nu is not None and nu.n_atoms:
            U, M = nu.atoms_at(X)
            if np.any(M < 0):
                raise ThinningError("negative atom masses are not supported by thinning")
            p = hk * M
            tot = p.sum(axis=1)
            if np.any(tot > 1.0):
                raise ThinningError(f"thinning acceptance probability {tot.max():.3g} > 1; reduce h")
            small = np.linalg.norm(U, axis=2) <= 1.0
            step -= hk * np.einsum("nk,nkd->nd", M * small, U)
            u = rng.uniform(size=n)
            edges = np.cumsum(p, axis=1)
            k = (u[:, None] >= edges).sum(axis=1)
            jump = k < U.shape[1]
            rows = np.where(jump)[0]
            step[rows] += U[rows, k[rows]]
        X = X + step
        if keep_paths:
            skel.append(X.copy())
    scheme = {"name": "euler-frozen-full", "steps": steps, "nu": "thinning" if nu is not None else None,
              "truncation": "rejection" if cut else None}
    return PathEnsemble(X, int(seed), float(t / steps), float(t), scheme,
                        np.stack(skel, axis=1) if keep_paths else None,
                        {"model": model.name, "x0": x0.tolist() if x0.ndim < 2 else "array"})


# Histograms


def _edges(grid, d: int):
    """Histogram grid as (lo, hi, bins) per axis, or explicit edge arrays."""
    if d == 1 and len(grid) == 3 and np.isscalar(grid[0]):
        grid = [grid]
    out = []
    for g in grid:
        if len(g) == 3 and np.isscalar(g[2]) and float(g[2]).is_integer() and g[1] > g[0]:
            out.append(np.linspace(float(g[0]), float(g[1]), int(g[2]) + 1))
        else:
            out.append(np.asarray(g, dtype=float))
    return out


def estimate_density(ens: PathEnsemble, grid) -> DensityField:
    """Histogram density counts / (n * cell volume); bins given as (lo, hi, bins) per axis."""
    if ens.n == 0:
        raise ValueError("empty ensemble")
    d = ens.terminal.shape[1]
    edges = _edges(grid, d)
    counts, _ = np.histogramdd(ens.terminal, bins=edges)
    widths = [e[1] - e[0] for e in edges]
    vol = float(np.prod(widths))
    vals = counts / (ens.n * vol)
    lo_q, hi_q = np.quantile(ens.terminal, [0.005, 0.995], axis=0)
    covered = all(e[0] <= lo and e[-1] >= hi for e, lo, hi in zip(edges, lo_q, hi_q))
    meta = {"kind": "histogram", "n": ens.n, "covered_fraction": float(counts.sum() / ens.n), "quantile_box_covered": covered}
    if not covered:
        warnings.warn("histogram grid does not cover the 0.5%-99.5% quantile box", RuntimeWarning, stacklevel=2)
    origin = np.array([e[0] + 0.5 * w for e, w in zip(edges, widths)])
    return DensityField(vals, origin, np.array(widths), meta)


def bin_masses(density: np.ndarray, nodes: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin masses of the piecewise-linear interpolant of a density on equispaced 1-d nodes."""
    p = np.asarray(density, dtype=float)
    dz = nodes[1] - nodes[0]
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * dz)])
    e = np.clip(np.asarray(edges, dtype=float), nodes[0], nodes[-1])
    i = np.minimum(((e - nodes[0]) / dz).astype(int), len(nodes) - 2)
    s = (e - nodes[i]) / dz
    at = cdf[i] + dz * (p[i] * s + 0.5 * (p[i + 1] - p[i]) * s * s)
    return np.diff(at)


def total_variation(p_bins: np.ndarray, q_bins: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p_bins) - np.asarray(q_bins)).sum())


# Renewal identity


@dataclass
class RenewalReport:
    t: float
    x0: float
    tail_rate: float
    l1: float
    sup: float
    l1_relative: float
    near_mass: dict
    bins: list
    lhs: list
    rhs: list
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "t": self.t, "x0": self.x0, "tail_rate": self.tail_rate, "l1": self.l1, "sup": self.sup,
            "l1_relative": self.l1_relative, "near_diagonal_mass": self.near_mass,
            "bins": self.bins, "lhs": self.lhs, "rhs": self.rhs, **self.meta,
        }


def near_diagonal_mass(model: ModelSpec, params: NumericalParams, t_list, x0: float, y: np.ndarray) -> dict:
    """int_{|x - y| <= t^{1/alpha(x)}} p_t(x0, y) dy from the parametrix density."""
    from .parametrix import density_at, neumann_density

    field, _ = neumann_density(model, params, t_list, [x0], y)
    a = float(model.alpha_at(model.points(x0))[0])
    out = {}
    for t in sorted({float(s) for s in t_list}):
        P = density_at(field, t)[0]
        out[repr(t)] = float(P[np.abs(y - x0) <= t ** (1.0 / a)].sum() * field.dz)
    return out


def _tail_jumps(model: ModelSpec, Z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One jump from mu(z, . & {|u| > R(z)}) normalised to a probability law."""
    R = _eval_on(model.tail_split, Z)
    alpha = model.alpha_at(Z)
    dirs = model.directions_at(Z)
    if dirs.ndim == 2:
        dirs = np.broadcast_to(dirs, (len(Z),) + dirs.shape)
    k = rng.choice(len(model.weights), size=len(Z), p=model.weights)
    rho = R * rng.uniform(size=len(Z)) ** (-1.0 / alpha)
    return rho[:, None] * dirs[np.arange(len(Z)), k]


def tail_rate(model: ModelSpec, X: np.ndarray) -> np.ndarray:
    R = _eval_on(model.tail_split, X)
    a = model.alpha_at(X)
    return model.lam_at(X) * R ** (-a) / a


def renewal_check(model: ModelSpec, t: float, grid, params: NumericalParams | None = None, x0: float = 0.0,
                  n: int = 100_000, seed: int = 0, steps: int = 100, n_s: int = 8,
                  mass_times=(0.05, 0.1)) -> RenewalReport:
    """Both sides of p_t = e^{-L t} p_t^trunc + int_0^t e^{-L s} (p_{t-s} * Ups^tail p_s^trunc) ds.

    Left side: parametrix density of the full model.  Right side: Monte Carlo
    of the convolution structure (truncated paths, one tail jump, full paths),
    with L the state-independent tail rate and Ups^tail the unnormalised tail
    kernel.  ``grid`` is (y nodes, histogram edges).
    """
    from .parametrix import density_at, neumann_density

    if model.tail_split is None:
        raise ValueError("renewal_check needs a model with a tail split")
    if model.dim != 1:
        raise ValueError("renewal_check supports d = 1")
    params = (params or NumericalParams()).resolve(model)
    y, edges = grid
    y = np.asarray(y, dtype=float)
    edges = np.asarray(edges, dtype=float)
    Lrate = tail_rate(model, y[:, None])
    L = float(Lrate[0])
    if np.max(np.abs(Lrate - L)) > 1e-9 * max(L, 1e-300):
        raise ValueError("the renewal identity needs a state-independent tail rate")
    trunc = model.truncated()
    full = model.without_nu()

    field, _ = neumann_density(full, params, [t], [x0], y)
    lhs = bin_masses(density_at(field, t)[0], y, edges)

    near = near_diagonal_mass(model.without_nu(), params, mass_times, x0, y) if mass_times else {}
    width = edges[1] - edges[0]
    if L == 0.0:
        # no tail jumps: the truncated model is the full one and both sides coincide
        return RenewalReport(t, x0, L, 0.0, 0.0, 0.0, near, edges.tolist(), lhs.tolist(), lhs.tolist(),
                             {"n": 0, "seed": seed, "steps": steps, "n_s": 0})

    rng = np.random.default_rng(seed)
    h = t / steps
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(2 * n_s + 1)
    # first term: no tail jump up to t
    n0 = n // 2
    e0 = simulate_paths(trunc, x0, t, h, n0, int(seeds[0]))
    rhs = math.exp(-L * t) * np.histogram(e0.terminal[:, 0], edges)[0] / n0
    # second term: last tail jump at time t - s, Gauss-Legendre nodes in s
    g, gw = roots_legendre(n_s)
    s_nodes = 0.5 * t * (g + 1)
    s_w = 0.5 * t * gw
    per = max(1, (n - n0) // n_s)
    for j, (s, w) in enumerate(zip(s_nodes, s_w)):
        a = simulate_paths(full, x0, t - s, min(h, t - s), per, int(seeds[1 + 2 * j]))
        Z = a.terminal
        Z = Z + _tail_jumps(model, Z, rng)
        b = simulate_paths(trunc, Z, s, min(h, s), per, int(seeds[2 + 2 * j]))
        rhs = rhs + w * L * math.exp(-L * s) * np.histogram(b.terminal[:, 0], edges)[0] / per
    diff = lhs - rhs
    l1 = float(np.abs(diff).sum())
    sup = float(np.abs(diff).max() / width)
    return RenewalReport(t, x0, L, l1, sup, l1 / float(np.abs(lhs).sum()), near,
                         edges.tolist(), lhs.tolist(), rhs.tolist(),
                         {"n": n, "seed": seed, "steps": steps, "n_s": n_s})
