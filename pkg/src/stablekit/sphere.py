"""Finite-atom measures on the unit sphere and their Wasserstein-1 distance."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog

ATOL_NORM = 1e-12


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


@dataclass(frozen=True)
class Rotation:
    """Named x-dependent rotation of the atom directions (d = 2 only).

    ``radial-smoothstep``: identity for ``|x| <= inner``; for ``|x| >= outer``
    the rotation taking e1 to ``x/|x|``; in between the rotation angle is
    ``smoothstep((|x|-inner)/(outer-inner))`` times the angle of ``x``
    (geodesic interpolation in SO(2)).
    """

    name: str = "radial-smoothstep"
    inner: float = 1.0
    outer: float = 2.0

    def angle(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != 2:
            raise ValueError("rotations are defined for d = 2 only")
        if self.name != "radial-smoothstep":
            raise ValueError(f"unknown rotation {self.name!r}")
        r = np.hypot(x[..., 0], x[..., 1])
        phi = np.arctan2(x[..., 1], x[..., 0])
        s = _smoothstep((r - self.inner) / (self.outer - self.inner))
        return s * phi

    def matrix(self, x) -> np.ndarray:
        th = self.angle(x)
        c, s = np.cos(th), np.sin(th)
        out = np.empty(th.shape + (2, 2))
        out[..., 0, 0] = c
        out[..., 0, 1] = -s
        out[..., 1, 0] = s
        out[..., 1, 1] = c
        return out

    def to_json(self) -> dict:
        return {"name": self.name, "inner": self.inner, "outer": self.outer}


@dataclass(frozen=True)
class SphericalMeasure:
    """Probability measure with finitely many atoms on the unit sphere.

    ``directions`` has shape (k, d), ``weights`` shape (k,).  An optional
    ``rotation`` makes the measure x-dependent while keeping the atom index
    shared across states, so two states can be compared atom by atom.
    """

    directions: np.ndarray
    weights: np.ndarray
    rotation: Rotation | None = None

    def __post_init__(self):
        dirs = np.atleast_2d(np.asarray(self.directions, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if dirs.shape[0] != w.shape[0]:
            raise ValueError("directions and weights differ in length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > ATOL_NORM):
            raise ValueError("atom directions must have unit norm")
        if self.rotation is not None and dirs.shape[1] != 2:
            raise ValueError("rotation requires d = 2")
        dirs.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.directions.shape[0]

    @classmethod
    def from_atoms(cls, atoms, rotation=None, normalize=False) -> "SphericalMeasure":
        dirs = np.array([np.asarray(a[0], dtype=float).reshape(-1) for a in atoms])
        w = np.array([float(a[1]) for a in atoms])
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        if normalize:
            w = w / w.sum()
        return cls(dirs, w, rotation)

    @classmethod
    def symmetric_1d(cls) -> "SphericalMeasure":
        return cls(np.array([[1.0], [-1.0]]), np.array([0.5, 0.5]))

    def directions_at(self, x) -> np.ndarray:
        """Atom directions at state(s) ``x``: shape (k, d) or (n, k, d)."""
        if self.rotation is None:
            if np.ndim(x) >= 2:
                n = np.shape(x)[0]
                return np.broadcast_to(self.directions, (n,) + self.directions.shape)
            return self.directions
        R = self.rotation.matrix(x)
        out = np.einsum("...ij,kj->...ki", R, self.directions)
        return out[0] if np.ndim(x) < 2 else out

    def at(self, x) -> "SphericalMeasure":
        """Frozen (x-independent) copy of the measure at state ``x``."""
        return SphericalMeasure(self.directions_at(np.asarray(x, dtype=float)), self.weights)

    def mean_direction(self, x=None) -> np.ndarray:
        dirs = self.directions if x is None else self.directions_at(x)
        return np.einsum("k,...kd->...d", self.weights, dirs)

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        """True if the atom set is invariant under ``l -> -l`` with equal weights."""
        dirs, w = self.directions, self.weights
        for i in range(self.n_atoms):
            j = np.where(np.linalg.norm(dirs + dirs[i], axis=1) < tol)[0]
            if len(j) == 0 or abs(w[j].sum() - w[i]) > tol:
                return False
        return True

    def to_json(self) -> dict:
        return {
            "atoms": [{"dir": d.tolist(), "weight": float(w)} for d, w in zip(self.directions, self.weights)],
            "rotation": None if self.rotation is None else self.rotation.to_json(),
        }


def _cost(P: SphericalMeasure, Q: SphericalMeasure) -> np.ndarray:
    return np.linalg.norm(P.directions[:, None, :] - Q.directions[None, :, :], axis=2)


def _tree_path(basis, m, src, dst):
    """Edges (cells) on the basis-tree path between graph nodes src and dst."""
    adj = {}
    for i, j in basis:
        adj.setdefault(i, []).append((m + j, (i, j)))
        adj.setdefault(m + j, []).append((i, (i, j)))
    prev = {src: None}
    stack = [src]
    while stack:
        u = stack.pop()
        for v, cell in adj.get(u, []):
            if v not in prev:
                prev[v] = (u, cell)
                stack.append(v)
    path, u = [], dst
    while prev[u] is not None:
        u, cell = prev[u]
        path.append(cell)
    return path[::-1]


def _polish(cost, a, b, plan):
    """Transportation-simplex pivots from the solver's plan until all reduced costs are nonnegative.

    The solver stops at a tolerance of about 1e-7 on reduced costs; near-tied
    costs then leave a gap of the same order, which the exact pivots remove.
    """
    m, n = cost.shape
    flow = {}
    parent = list(range(m + n))

    def root(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    order = sorted(((i, j) for i in range(m) for j in range(n)), key=lambda c: (plan[c] <= 1e-12, cost[c]))
    for i, j in order:
        ri, rj = root(i), root(m + j)
        if ri != rj:
            parent[ri] = rj
            flow[(i, j)] = 0.0
        if len(flow) == m + n - 1:
            break
    basis = sorted(flow)
    A = np.zeros((m + n, len(basis)))
    for col, (i, j) in enumerate(basis):
        A[i, col] = A[m + j, col] = 1.0
    x = np.linalg.lstsq(A, np.concatenate([a, b]), rcond=None)[0]
    flow = {c: max(float(v), 0.0) for c, v in zip(basis, x)}
    tol = 1e-14 * max(1.0, float(cost.max()))
    for _ in range(10 * m * n):
        pot = {0: 0.0}
        while len(pot) < m + n:
            for i, j in flow:
                if i in pot and m + j not in pot:
                    pot[m + j] = cost[i, j] - pot[i]
                elif m + j in pot and i not in pot:
                    pot[i] = cost[i, j] - pot[m + j]
        enter = next(((i, j) for i in range(m) for j in range(n)
                      if (i, j) not in flow and cost[i, j] - pot[i] - pot[m + j] < -tol), None)
        if enter is None:
            break
        # cycle: enter (+), then the tree path from column enter[1] back to row enter[0] alternates -, +, ...
        path = _tree_path(list(flow), m, m + enter[1], enter[0])
        minus, plus = path[0::2], path[1::2]
        theta = min(flow[c] for c in minus)
        leave = min(c for c in minus if flow[c] == theta)
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        del flow[leave]
        flow[enter] = theta
    return float(sum(cost[c] * v for c, v in flow.items()))


def w1_sphere(P: SphericalMeasure, Q: SphericalMeasure) -> float:
    """Wasserstein-1 distance with chordal cost ``|l1 - l2|``.

    Solved as a transportation linear program, then finished with exact
    transportation-simplex pivots so that the value is optimal to rounding.
    """
    if P.dim != Q.dim:
        raise ValueError(f"dimension mismatch: {P.dim} vs {Q.dim}")
    cost = _cost(P, Q)
    a, b = P.weights, Q.weights
    m, n = cost.shape
    if m == 1 or n == 1:
        return float(np.sum(cost * np.outer(a, b)))
    A_eq = np.zeros((m + n, m * n))
    for i in range(m):
        A_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A_eq[m + j, j::n] = 1.0
    res = linprog(cost.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport solve failed: {res.message}")
    return _polish(cost, a, b, res.x.reshape(m, n))


def w1_enumerate(P: SphericalMeasure, Q: SphericalMeasure) -> float:
    """Brute-force W1: minimum cost over all basic feasible transport plans.

    Every basic feasible solution is supported on ``m + n - 1`` cells whose
    equality system has a unique nonnegative solution; this enumerates all
    such cell subsets.  Exponential, meant for a handful of atoms.
    """
    if P.dim != Q.dim:
        raise ValueError(f"dimension mismatch: {P.dim} vs {Q.dim}")
    cost = _cost(P, Q)
    a, b = P.weights, Q.weights
    m, n = cost.shape
    cells = [(i, j) for i in range(m) for j in range(n)]
    rhs = np.concatenate([a, b])
    best = math.inf
    for subset in itertools.combinations(cells, m + n - 1):
        A = np.zeros((m + n, m + n - 1))
        for col, (i, j) in enumerate(subset):
            A[i, col] = 1.0
            A[m + j, col] = 1.0
        if np.linalg.matrix_rank(A) < m + n - 1:
            continue
        x, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        if np.max(np.abs(A @ x - rhs)) > 1e-12 or np.any(x < -1e-13):
            continue
        best = min(best, float(sum(cost[i, j] * x[c] for c, (i, j) in enumerate(subset))))
    return best
