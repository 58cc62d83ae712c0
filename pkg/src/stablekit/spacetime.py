"""Kernels on a uniform time mesh and their space-time convolution.

A field holds matrices F(t_k) at t_k = k h, k = 1..M.  Between nodes it is
modelled as ``u^r (linear in u)`` where ``r`` is the recorded singularity
exponent; on the first interval it is either linear from a known value at
t = 0, a pure power ``(u/h)^r F(h)``, or sampled at graded Gauss-Jacobi
nodes.  Convolutions integrate these models exactly up to Gauss-Jacobi
quadrature of the smooth remainder.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

GAUSS_ORDER = 10


class SingularityError(ValueError):
    pass


def time_mesh(t_list, min_steps: int = 16) -> tuple[float, int, list[int]]:
    """Uniform step h, node count M and the node index of each requested time."""
    ts = [float(t) for t in t_list]
    if not ts or min(ts) <= 0:
        raise ValueError("time list must be non-empty and positive")
    fr = [Fraction(t).limit_denominator(10 ** 6) for t in ts]
    g = fr[0]
    for f in fr[1:]:
        g = Fraction(math.gcd(g.numerator * f.denominator, f.numerator * g.denominator), g.denominator * f.denominator)
    T = max(fr)
    per = max(1, math.ceil(min_steps * g / T))
    h = g / per
    M = int(T / h)
    return float(h), M, [int(f / h) for f in fr]


@lru_cache(maxsize=256)
def jacobi01(n: int, ea: float, eb: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights on [0, 1] for int_0^1 (1-v)^ea v^eb f(v) dv."""
    x, w = roots_jacobi(n, ea, eb)
    return 0.5 * (1 + x), w * 0.5 ** (1 + ea + eb)


def early_nodes(h: float, rate: float, n: int = 3) -> np.ndarray:
    """Graded sample times on (0, h) used for a field's first interval."""
    v, _ = jacobi01(n, 0.0, rate)
    return h * v


@dataclass
class SpaceTimeField:
    """Kernel values (M, nx, ny) on t_k = k h with its small-time model."""

    h: float
    values: np.ndarray
    dz: float
    rate: float = 0.0
    zero: np.ndarray | None = None
    early: np.ndarray | None = None  # (n_e, nx, ny) at early_nodes(h, rate, n_e)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rate <= -1:
            raise SingularityError(f"non-integrable singularity exponent {self.rate}")
        if self.zero is not None and self.rate != 0:
            raise ValueError("a value at t = 0 requires rate 0")

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(1, self.M + 1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def node(self, k: int) -> np.ndarray:
        """F(t_k); k = 0 only when a zero value is stored."""
        if k == 0:
            if self.zero is None:
                raise ValueError("no value at t = 0")
            return self.zero
        return self.values[k - 1]

    def coeffs(self, u: float) -> list[tuple[object, float]]:
        """F(u) as a list of (node key, scalar) pairs; keys are ints or ('e', g)."""
        h, r = self.h, self.rate
        j = min(int(u / h), self.M - 1)
        v = u / h - j
        if j == 0:
            if self.zero is not None:
                return [(0, 1 - v), (1, v)]
            return [(1, v ** r if r else 1.0)]
        c0 = (u / (j * h)) ** r * (1 - v)
        c1 = (u / ((j + 1) * h)) ** r * v
        return [(j, c0), (j + 1, c1)]

    def at(self, u: float) -> np.ndarray:
        out = np.zeros(self.shape)
        for k, c in self.coeffs(u):
            out += c * self.node(k)
        return out

    def norms(self) -> np.ndarray:
        """sup over rows of sum_y |F| dz at every node."""
        return np.abs(self.values).sum(axis=2).max(axis=1) * self.dz

    def save(self, stem: str, provenance: dict | None = None) -> tuple[str, str]:
        """Write ``stem.bin`` (little-endian float64, row-major values) and ``stem.json`` (header)."""
        header = {
            "dtype": "<f8", "order": "C", "shape": list(self.values.shape), "h": self.h, "dz": self.dz,
            "rate": self.rate, "times": self.times.tolist(), "has_zero": self.zero is not None,
            "meta": self.meta, "provenance": provenance or {},
        }
        self.values.astype("<f8").tofile(stem + ".bin")
        with open(stem + ".json", "w") as fh:
            json.dump(header, fh, indent=2, sort_keys=True)
        return stem + ".bin", stem + ".json"

    @classmethod
    def load(cls, stem: str) -> "SpaceTimeField":
        with open(stem + ".json") as fh:
            header = json.load(fh)
        values = np.fromfile(stem + ".bin", dtype=header["dtype"]).reshape(header["shape"])
        return cls(header["h"], values, header["dz"], header["rate"], meta=header["meta"])

    def fitted_rate(self, t_min: float = 0.0, t_max: float = math.inf) -> float:
        n = self.norms()
        t = self.times
        sel = (t >= t_min - 1e-12) & (t <= t_max + 1e-12) & (n > 0)
        if sel.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(t[sel]), np.log(n[sel]), 1)[0])


def _quad_nodes(a: SpaceTimeField, b: SpaceTimeField, k: int):
    """Quadrature nodes for (a * b)(t_k): tuples (weight, s, b sample key or None)."""
    h = a.h
    for m in range(k):
        if m == 0 and b.early is not None:
            v, w = jacobi01(b.early.shape[0], 0.0, b.rate)
            for g in range(len(v)):
                yield h * w[g] * v[g] ** (-b.rate), v[g] * h, ("e", g)
            continue
        ea = a.rate if (m == k - 1 and a.zero is None) else 0.0
        eb = b.rate if (m == 0 and b.zero is None) else 0.0
        v, w = jacobi01(GAUSS_ORDER, ea, eb)
        for g in range(len(v)):
            yield h * w[g] / ((1 - v[g]) ** ea * v[g] ** eb), (m + v[g]) * h, None


def _pair_weights(a: SpaceTimeField, b: SpaceTimeField, k: int) -> dict:
    """Quadrature coefficients {(a key, b key): w} for (a * b)(t_k)."""
    out: dict = {}
    t = k * a.h
    for w, s, bkey in _quad_nodes(a, b, k):
        cb_list = [(bkey, 1.0)] if bkey is not None else b.coeffs(s)
        for ka, ca in a.coeffs(t - s):
            for kb, cb in cb_list:
                out[(ka, kb)] = out.get((ka, kb), 0.0) + w * ca * cb
    return out


def _b_matrix(b: SpaceTimeField, key) -> np.ndarray:
    if isinstance(key, tuple):
        return b.early[key[1]]
    return b.node(key)


def spacetime_convolve(a: SpaceTimeField, b: SpaceTimeField, rate: float | None = None) -> SpaceTimeField:
    """(a * b)_t(x, y) = int_0^t sum_z a_{t-s}(x, z) b_s(z, y) dz ds on the shared mesh."""
    if a.M != b.M or abs(a.h - b.h) > 1e-14 * a.h:
        raise ValueError("fields must share the time mesh")
    if a.shape[1] != b.shape[0]:
        raise ValueError("inner spatial dimensions differ")
    out = np.empty((a.M, a.shape[0], b.shape[1]))
    for k in range(1, a.M + 1):
        groups: dict = {}
        for (ka, kb), w in _pair_weights(a, b, k).items():
            groups.setdefault(ka, []).append((kb, w))
        acc = np.zeros((a.shape[0], b.shape[1]))
        for ka, lst in groups.items():
            comb = sum(w * _b_matrix(b, kb) for kb, w in lst)
            acc += a.node(ka) @ comb
        out[k - 1] = acc * a.dz
    r = a.rate + b.rate + 1.0 if rate is None else rate
    return SpaceTimeField(a.h, out, b.dz, r, None, None, {"kind": "convolution"})


def convolve_direct(a: SpaceTimeField, b: SpaceTimeField) -> np.ndarray:
    """Reference evaluation of the same quadrature rule by explicit triple sums (slow; for tests)."""
    M = a.M
    nx, nz = a.shape
    ny = b.shape[1]
    out = np.zeros((M, nx, ny))
    for k in range(1, M + 1):
        t = k * a.h
        for w, s, bkey in _quad_nodes(a, b, k):
            A = a.at(t - s)
            B = b.early[bkey[1]] if bkey is not None else b.at(s)
            for i in range(nx):
                for j in range(ny):
                    acc = 0.0
                    for z in range(nz):
                        acc += A[i, z] * B[z, j]
                    out[k - 1, i, j] += w * acc * a.dz
    return out
