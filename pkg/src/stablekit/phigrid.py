"""Error kernel and zero-order kernel on regular grids by batched Fourier inversion.

For fixed y and t the kernel Phi_t(., y) is a function of w = kappa_t(y) - x
whose spectrum is

    [-psi^{N(x)}(xi) + i xi.b(x) + psi_t^{y,cut}(xi) - i xi.B_t(kappa)] qhat(xi),

with qhat the characteristic function of p_t^{y,cut}.  The x-dependence sits
in the multiplier only, so it is interpolated in alpha(x) (Chebyshev, d = 1)
or in the rotation angle of sigma(x) (d = 2).  All kernels are band-limited
to the grid's Nyquist band, which makes the discrete sums over grid nodes
exact inner products of the represented functions.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage
from scipy.special import roots_legendre

from .flow import drift_is_zero, mollified_drift, solve_flow
from .model import ModelSpec, NumericalParams
from .symbols import atom_exponent, cut_symbol, j1

Q_SUPPORT = 8.0


class UnsupportedModelError(NotImplementedError):
    pass


def _next_pow2(n: float) -> int:
    return 1 << max(4, int(math.ceil(math.log2(max(n, 16)))))


def far_masses(alpha: float, dw: float, n_half: int) -> np.ndarray:
    """Hat-weighted masses of rho^{-1-alpha} 1{rho > 1} at nodes j dw, j < n_half."""
    g, gw = roots_legendre(8)
    u = dw * np.arange(n_half)
    out = np.zeros(n_half)
    for side in (-1, 1):
        lo = np.where(side < 0, u - dw, u)
        hi = np.where(side < 0, u, u + dw)
        lo = np.maximum(lo, 1.0)
        hi = np.maximum(hi, 1.0)
        mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
        rho = mid[:, None] + half[:, None] * g[None, :]
        hat = 1.0 - np.abs(rho - u[:, None]) / dw
        out += (half[:, None] * gw[None, :] * rho ** (-1 - alpha) * hat).sum(axis=1)
    out[0] = 0.0
    return out


def atom_multiplier(alpha: float, xi: np.ndarray, dw: float, n: int) -> np.ndarray:
    """Exponent of one unit atom along +1 at xi >= 0 (rfft layout), far jumps as grid masses.

    The near part (rho <= 1) is exact; jumps with 1 < rho < n dw / 2 are the
    hat-weighted cell masses, so the circular convolution does not wrap the
    heavy tail; jumps beyond that leave the domain (killing).
    """
    m = far_masses(alpha, dw, n // 2)
    full = np.zeros(n)
    full[: n // 2] = m
    F = n * np.fft.ifft(full)[: len(xi)]
    return -j1(xi, alpha) + 1.0 / alpha - F


def cheb_nodes(lo: float, hi: float, n: int) -> np.ndarray:
    if n == 1 or hi - lo < 1e-14:
        return np.array([0.5 * (lo + hi)])
    k = np.arange(n)
    return 0.5 * (lo + hi) + 0.5 * (hi - lo) * np.cos((2 * k + 1) * np.pi / (2 * n))


def lagrange_matrix(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Barycentric Lagrange basis values L[i, c] = l_c(x_i)."""
    n = len(nodes)
    if n == 1:
        return np.ones((len(x), 1))
    w = np.array([1.0 / np.prod([nodes[c] - nodes[j] for j in range(n) if j != c]) for c in range(n)])
    diff = x[:, None] - nodes[None, :]
    exact = np.isclose(diff, 0.0, atol=1e-15)
    diff[exact] = 1.0
    terms = w[None, :] / diff
    L = terms / terms.sum(axis=1, keepdims=True)
    rows = exact.any(axis=1)
    L[rows] = exact[rows].astype(float)
    return L


def _cheb_count(spread: float, log_xi: float, tol: float = 1e-9) -> int:
    if spread < 1e-14:
        return 1
    a = 0.5 * spread * max(log_xi, 1.0)
    n = 2
    while n < 32:
        if 2 * (a / 2) ** n / math.factorial(n) * math.exp(a) < tol:
            break
        n += 1
    return n


class Grid1DAssembler:
    """Phi_t(z, y) for all node pairs and p0_t(x, y) for selected rows, d = 1."""

    def __init__(self, model: ModelSpec, params: NumericalParams, nodes: np.ndarray):
        if model.dim != 1:
            raise UnsupportedModelError("Grid1DAssembler requires d = 1")
        if model.has_nu and model.nu.cut_at(model.points(nodes[:1])) is not None:
            raise UnsupportedModelError("cut perturbation kernels are handled by the simulator only")
        self.model = model
        self.params = params.resolve(model)
        self.nodes = np.asarray(nodes, dtype=float)
        self.N = len(nodes)
        self.dx = float(nodes[1] - nodes[0])
        self.static = drift_is_zero(model)
        self.os = 1 if self.static else 2
        self.dw = self.dx / self.os
        width = nodes[-1] - nodes[0]
        self.n = _next_pow2(2 * (width + 2.0 + Q_SUPPORT) / self.dw)
        self.xi = 2 * np.pi * np.arange(self.n // 2 + 1) / (self.n * self.dw)
        self.band = self.xi <= np.pi / self.dx * (1 + 1e-12)

        X = model.points(self.nodes)
        self.alpha_x = model.alpha_at(X)
        self.lam_x = model.lam_at(X)
        self.b_x = model.drift_at(X)[:, 0]
        self.has_b = bool(np.any(self.b_x != 0))
        w = model.weights
        dirs = model.directions_at(X[:1])[0, :, 0]
        self.w_plus = float(sum(wi for wi, d in zip(w, dirs) if d > 0))
        self.w_minus = float(sum(wi for wi, d in zip(w, dirs) if d < 0))
        lo, hi = float(self.alpha_x.min()), float(self.alpha_x.max())
        nc = _cheb_count(hi - lo, math.log(self.xi[-1]))
        self.cheb = cheb_nodes(lo, hi, nc)
        self.L = lagrange_matrix(self.cheb, self.alpha_x)
        mult = []
        for a in self.cheb:
            e = atom_multiplier(a, self.xi, self.dw, self.n)
            mult.append(self.w_plus * e + self.w_minus * np.conj(e))
        self.mult = np.array(mult)
        self.nu_atoms = None
        if model.has_nu:
            U, Mass = model.nu.atoms_at(X)
            self.nu_atoms = (U[:, :, 0], Mass)

    # flow data
    def flows(self, times: np.ndarray):
        if self.static:
            kap = np.broadcast_to(self.nodes, (len(times), self.N)).copy()
            return kap, np.zeros_like(kap)
        sol = solve_flow(self.model, self.params, self.nodes[:, None], float(max(times)), "backward")
        kap = np.array([sol.at(t)[:, 0] for t in times])
        B = np.array([mollified_drift(self.model, self.params, kap[i][:, None], t)[:, 0] for i, t in enumerate(times)])
        return kap, B

    def _spectra(self, y: float, t: float, B: float, want_nu: bool):
        a = float(self.model.alpha_at(np.array([[y]]))[0])
        lam = float(self.model.lam_at(np.array([[y]]))[0])
        zeta = float(self.params.zeta(a))
        sym = cut_symbol(a, zeta)
        xi = self.xi
        # psi(-xi) = conj psi(xi) for a real measure
        a_int, a_inst = sym.integrated(xi, t), sym.instant(xi, t)
        integ = lam * (self.w_plus * a_int + self.w_minus * np.conj(a_int))
        inst = lam * (self.w_plus * a_inst + self.w_minus * np.conj(a_inst))
        qhat = np.exp(-integ) * self.band
        rows = [(inst - 1j * xi * B) * qhat, qhat]
        if self.has_b:
            rows.append(1j * xi * qhat)
        if want_nu:
            rows.append(-1j * xi * qhat)
        rows.extend(self.mult * qhat[None, :])
        spec = np.array(rows)
        # f(w_j) = (dxi / 2 pi) sum_k F(xi_k) e^{-i xi_k w_j}
        return np.fft.irfft(np.conj(spec), n=self.n, axis=1) / self.dw

    def _sample(self, G: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Values of fine-grid functions G (r, n) at points w."""
        pos = w / self.dw
        if self.os == 1:
            idx = np.rint(pos).astype(int) % self.n
            return G[:, idx]
        out = np.empty((G.shape[0], len(w)))
        for r in range(G.shape[0]):
            out[r] = ndimage.map_coordinates(G[r], [pos % self.n], order=3, mode="grid-wrap")
        return out

    def assemble(self, times, row_idx=None, p0_mask=None):
        """Phi (T, N, N) at all ``times`` and p0 rows (T, len(row_idx), N)."""
        times = np.asarray(times, dtype=float)
        if times.max() > 1 + 1e-12:
            raise ValueError("the cut exponent is defined for t <= 1")
        rows = np.arange(self.N) if row_idx is None else np.asarray(row_idx)
        p0_mask = np.ones(len(times), bool) if p0_mask is None else np.asarray(p0_mask)
        kap, B = self.flows(times)
        T = len(times)
        phi = np.empty((T, self.N, self.N))
        p0 = np.zeros((T, len(rows), self.N))
        want_nu = self.nu_atoms is not None
        nb = 1 if self.has_b else 0
        nn = 1 if want_nu else 0
        base = 2 + nb + nn
        constant = self.static and self.model.constant_state and not want_nu
        for ti, t in enumerate(times):
            if constant:
                G = self._spectra(float(self.nodes[0]), t, 0.0, False)
                d = np.arange(self.N)
                idx = (d[None, :] - d[:, None]) % self.n
                comb = G[0] - self.lam_x[0] * (self.L[0] @ G[base:])
                phi[ti] = comb[idx]
                p0[ti] = G[1][idx[rows]]
                continue
            for j in range(self.N):
                y = float(self.nodes[j])
                G = self._spectra(y, t, float(B[ti, j]), want_nu)
                w = kap[ti, j] - self.nodes
                S = self._sample(G, w)
                col = S[0] - self.lam_x * np.einsum("zc,cz->z", self.L, S[base:])
                if self.has_b:
                    col += self.b_x * S[2]
                if want_nu:
                    col += self._nu_part(G[1], S[1], S[2 + nb], w)
                phi[ti, :, j] = col
                if p0_mask[ti]:
                    p0[ti, :, j] = S[1][rows]
        return phi, p0, kap

    def _nu_part(self, q, q_w, dq_w, w):
        U, Mass = self.nu_atoms
        out = np.zeros(self.N)
        for k in range(U.shape[1]):
            u = U[:, k]
            shifted = self._sample(q[None, :], w - u)[0]
            comp = np.where(np.abs(u) <= 1.0, u, 0.0)
            out += Mass[:, k] * (shifted - q_w + comp * dq_w)
        return out


def symmetry_period(directions: np.ndarray, weights: np.ndarray) -> float:
    """Smallest angle 2 pi / m whose rotation maps the weighted atom set onto itself."""
    for m in (12, 8, 6, 4, 3, 2):
        a = 2 * math.pi / m
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        rot = directions @ R.T
        ok = True
        for d, w in zip(rot, weights):
            j = np.where(np.linalg.norm(directions - d, axis=1) < 1e-9)[0]
            if len(j) == 0 or abs(weights[j].sum() - w) > 1e-12:
                ok = False
                break
        if ok:
            return a
    return 2 * math.pi


def far_table(alpha: float, rho_max: float, s_max: float, n_per_unit: int = 8):
    """Tabulates e(s) = -J1(s) + 1/alpha - int_1^rho_max e^{i s rho} rho^{-1-alpha} d rho on [0, s_max]."""
    ds = math.pi / (n_per_unit * rho_max)
    s = np.arange(0.0, s_max + 2 * ds, ds)
    width = min(0.5, math.pi / (4 * max(s_max, 1e-9)))
    edges = np.arange(1.0, rho_max + width, width)
    edges[-1] = rho_max
    g, gw = roots_legendre(8)
    mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * (edges[1:] - edges[:-1])
    rho = (mid[:, None] + half[:, None] * g[None, :]).ravel()
    wts = (half[:, None] * gw[None, :]).ravel() * rho ** (-1 - alpha)
    far = np.empty(len(s), dtype=complex)
    for k in range(0, len(s), 256):
        far[k:k + 256] = np.exp(1j * s[k:k + 256, None] * rho[None, :]) @ wts
    return s, -j1(s, alpha) + 1.0 / alpha - far


class Grid2DAssembler:
    """Phi and p0 on a regular d = 2 grid for models whose states differ only by a rotation.

    With constant alpha and lambda, zero drift and no perturbation kernel,
    Phi_t(x, y) = F^{theta(x) - theta(y)}_t(R_y^T (y - x)); the profiles F are
    computed at equispaced relative angles over the symmetry period of the
    atoms and interpolated linearly in the angle and cubically in space.
    """

    n_angles = 32

    def __init__(self, model: ModelSpec, params: NumericalParams, axes: tuple[np.ndarray, np.ndarray]):
        if model.dim != 2:
            raise UnsupportedModelError("Grid2DAssembler requires d = 2")
        if not (model.constant_alpha and model.lam.is_constant and drift_is_zero(model)):
            raise UnsupportedModelError(
                "the d = 2 convolution pipeline supports constant alpha and lambda, zero drift and no perturbation kernel"
            )
        self.model = model
        self.params = params.resolve(model)
        ax0, ax1 = (np.asarray(a, dtype=float) for a in axes)
        self.dx = float(ax0[1] - ax0[0])
        if abs(float(ax1[1] - ax1[0]) - self.dx) > 1e-12 * self.dx:
            raise ValueError("the d = 2 grid needs equal spacing on both axes")
        g0, g1 = np.meshgrid(ax0, ax1, indexing="ij")
        self.points = np.stack([g0.ravel(), g1.ravel()], axis=-1)
        self.N = len(self.points)
        self.alpha = float(model.alpha_at(self.points[:1])[0])
        self.lam = float(model.lam_at(self.points[:1])[0])
        self.dirs0 = np.asarray(model.sigma.directions, dtype=float)
        self.wts = np.asarray(model.weights, dtype=float)
        rot = model.sigma.rotation
        self.theta = np.zeros(self.N) if rot is None else rot.angle(self.points)
        self.period = symmetry_period(self.dirs0, self.wts)
        self.na = 1 if rot is None else self.n_angles
        self.dw = 0.5 * self.dx
        width = float(max(ax0[-1] - ax0[0], ax1[-1] - ax1[0]))
        self.n = _next_pow2(2 * (math.sqrt(2) * width + 2.0 + Q_SUPPORT) / self.dw)
        k1 = 2 * np.pi * np.fft.fftfreq(self.n, self.dw)
        k2 = 2 * np.pi * np.arange(self.n // 2 + 1) / (self.n * self.dw)
        self.xi = np.stack(np.meshgrid(k1, k2, indexing="ij"), axis=-1)
        self.band = np.hypot(self.xi[..., 0], self.xi[..., 1]) <= np.pi / self.dx * (1 + 1e-12)
        rho_max = 0.5 * self.n * self.dw - Q_SUPPORT
        s_tab, e_tab = far_table(self.alpha, rho_max, np.pi / self.dx)
        mult = np.zeros((self.na,) + self.band.shape, dtype=complex)
        for c in range(self.na):
            phi = c * self.period / self.na
            R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
            for l, w in zip(self.dirs0 @ R.T, self.wts):
                s = (self.xi @ l)[self.band]
                e = np.interp(np.abs(s), s_tab, e_tab.real) + 1j * np.interp(np.abs(s), s_tab, e_tab.imag)
                e = np.where(s < 0, np.conj(e), e)
                mult[c][self.band] += w * e
        self.mult = mult
        self._geometry()

    def _geometry(self):
        """Rotated displacements and angle weights for every (x, y) pair."""
        P, th = self.points, self.theta
        c, s = np.cos(th), np.sin(th)
        d = P[None, :, :] - P[:, None, :]  # [x, y] -> y - x
        w0 = c[None, :] * d[..., 0] + s[None, :] * d[..., 1]
        w1 = -s[None, :] * d[..., 0] + c[None, :] * d[..., 1]
        self.coords = np.stack([w0.ravel(), w1.ravel()]) / self.dw
        u = np.mod(th[:, None] - th[None, :], self.period) / self.period * self.na
        c0 = np.floor(u).astype(int) % self.na
        f = u - np.floor(u)
        self.c0 = c0.ravel()
        self.c1 = (self.c0 + 1) % self.na
        self.f = f.ravel()

    def flows(self, times):
        kap = np.broadcast_to(self.points, (len(times),) + self.points.shape).copy()
        return kap, np.zeros_like(kap)

    def _fields(self, t: float) -> np.ndarray:
        zeta = float(self.params.zeta(self.alpha))
        sym = cut_symbol(self.alpha, zeta)
        integ = np.zeros(self.band.shape, dtype=complex)
        inst = np.zeros(self.band.shape, dtype=complex)
        for l, w in zip(self.dirs0, self.wts):
            s = self.xi @ l
            integ += self.lam * w * sym.integrated(s, t)
            inst += self.lam * w * sym.instant(s, t)
        qhat = np.where(self.band, np.exp(-integ), 0.0)
        rows = np.concatenate([(qhat * inst)[None], qhat[None], self.mult * qhat[None]])
        return np.fft.irfft2(np.conj(rows), s=(self.n, self.n), axes=(1, 2)) / self.dw ** 2

    def _interp(self, G: np.ndarray, sel=None) -> np.ndarray:
        coords = self.coords if sel is None else self.coords[:, sel]
        return ndimage.map_coordinates(G, coords, order=3, mode="grid-wrap")

    def assemble(self, times, row_idx=None, p0_mask=None):
        times = np.asarray(times, dtype=float)
        if times.max() > 1 + 1e-12:
            raise ValueError("the cut exponent is defined for t <= 1")
        rows = np.arange(self.N) if row_idx is None else np.asarray(row_idx)
        p0_mask = np.ones(len(times), bool) if p0_mask is None else np.asarray(p0_mask)
        T = len(times)
        phi = np.empty((T, self.N, self.N))
        p0 = np.zeros((T, len(rows), self.N))
        flat_rows = (rows[:, None] * self.N + np.arange(self.N)[None, :]).ravel()
        for ti, t in enumerate(times):
            F = self._fields(float(t))
            acc = self._interp(F[0])
            for c in range(self.na):
                sel0 = self.c0 == c
                sel1 = self.c1 == c
                if self.na == 1:
                    acc -= self.lam * self._interp(F[2])
                    break
                if np.any(sel0):
                    acc[sel0] -= self.lam * (1 - self.f[sel0]) * self._interp(F[2 + c], sel0)
                if np.any(sel1):
                    acc[sel1] -= self.lam * self.f[sel1] * self._interp(F[2 + c], sel1)
            phi[ti] = acc.reshape(self.N, self.N)
            if p0_mask[ti]:
                p0[ti] = self._interp(F[1], flat_rows).reshape(len(rows), self.N)
        return phi, p0, self.flows(times)[0]
