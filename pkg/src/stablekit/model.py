"""Stable-like models: coefficients, perturbation kernel, numerical parameters, validation."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .expr import Expr, ExprError, as_expr, parse_expr
from .sphere import Rotation, SphericalMeasure, w1_sphere

ALPHA_ONE_TOL = 1e-9


class ConfigError(ValueError):
    """Malformed model or parameter document; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def _points(x, d: int) -> np.ndarray:
    """Coerce ``x`` into an array of shape (n, d)."""
    xa = np.asarray(x, dtype=float)
    if xa.ndim == 0:
        xa = xa.reshape(1, 1)
    elif xa.ndim == 1:
        xa = xa.reshape(-1, 1) if d == 1 else xa.reshape(1, -1)
    if xa.shape[-1] != d:
        raise ValueError(f"points have dimension {xa.shape[-1]}, model has {d}")
    return xa


def _eval_on(e: Expr, X: np.ndarray) -> np.ndarray:
    v = e(X)
    return np.broadcast_to(np.asarray(v, dtype=float), X.shape[:1]).copy()


@dataclass(frozen=True)
class PerturbationKernel:
    """Signed perturbation kernel nu(x, du).

    ``atoms`` are pairs (jump vector expressions, signed mass expression).
    ``cut_radius`` (optional) adds the negative part ``-mu(x, . & {|u| > R(x)})``,
    which turns the principal kernel into a truncated one.
    """

    atoms: tuple[tuple[tuple[Expr, ...], Expr], ...] = ()
    beta: Expr = field(default_factory=lambda: parse_expr("0"))
    eps_nu: float = 0.5
    cut_radius: Expr | None = None

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def atoms_at(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Jump vectors (n, k, d) and signed masses (n, k) at points X (n, d)."""
        n, d = X.shape
        k = len(self.atoms)
        U = np.zeros((n, k, d))
        M = np.zeros((n, k))
        for j, (u, m) in enumerate(self.atoms):
            for c in range(d):
                U[:, j, c] = _eval_on(u[c], X)
            M[:, j] = _eval_on(m, X)
        return U, M

    def cut_at(self, X: np.ndarray) -> np.ndarray | None:
        if self.cut_radius is None:
            return None
        return _eval_on(self.cut_radius, X)

    def to_json(self) -> dict:
        return {
            "atoms_expr": [{"u": [str(c) for c in u], "mass": str(m)} for u, m in self.atoms],
            "beta": str(self.beta),
            "eps_nu": self.eps_nu,
            "cut_radius": None if self.cut_radius is None else str(self.cut_radius),
        }


@dataclass(frozen=True)
class ModelSpec:
    """Complete description of one stable-like model."""

    dim: int
    alpha: Expr
    lam: Expr
    sigma: SphericalMeasure
    drift: tuple[Expr, ...]
    nu: PerturbationKernel | None = None
    alpha_min: float = 0.0
    alpha_max: float = 0.0
    lambda_min: float = 0.0
    lambda_max: float = 0.0
    eta: float = 1.0
    h_frak: float = 1.0
    eps_balance: float = 1.0
    name: str = "custom"
    tail_split: Expr | None = None

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigError("dimension", f"must be 1 or 2, got {self.dim}")
        if self.sigma.dim != self.dim:
            raise ConfigError("sigma", f"atoms have dimension {self.sigma.dim}, model has {self.dim}")
        if len(self.drift) != self.dim:
            raise ConfigError("drift", f"expected {self.dim} components, got {len(self.drift)}")
        if self.nu is not None:
            for j, (u, _) in enumerate(self.nu.atoms):
                if len(u) != self.dim:
                    raise ConfigError(f"nu.atoms_expr[{j}].u", f"expected {self.dim} components")

    # coefficient evaluation on point sets of shape (n, d)
    def points(self, x) -> np.ndarray:
        return _points(x, self.dim)

    def alpha_at(self, x) -> np.ndarray:
        return _eval_on(self.alpha, self.points(x))

    def lam_at(self, x) -> np.ndarray:
        return _eval_on(self.lam, self.points(x))

    def drift_at(self, x) -> np.ndarray:
        X = self.points(x)
        return np.stack([_eval_on(e, X) for e in self.drift], axis=-1)

    def directions_at(self, x) -> np.ndarray:
        """Atom directions (n, k, d)."""
        X = self.points(x)
        dirs = self.sigma.directions_at(X)
        return np.array(dirs)

    @property
    def weights(self) -> np.ndarray:
        return self.sigma.weights

    @property
    def has_drift(self) -> bool:
        return not all(e.is_constant and e() == 0.0 for e in self.drift)

    @property
    def constant_alpha(self) -> bool:
        return self.alpha.is_constant

    @property
    def constant_state(self) -> bool:
        """True if alpha, lambda and sigma do not depend on x."""
        return self.alpha.is_constant and self.lam.is_constant and self.sigma.rotation is None

    @property
    def symmetric(self) -> bool:
        # a rotation acts on all atoms at once, so it preserves symmetry
        return self.sigma.is_symmetric()

    @property
    def has_nu(self) -> bool:
        return self.nu is not None and (self.nu.n_atoms > 0 or self.nu.cut_radius is not None)

    def without_nu(self) -> "ModelSpec":
        return replace(self, nu=None)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "dimension": self.dim,
            "alpha": str(self.alpha),
            "lambda": str(self.lam),
            "drift": [str(e) for e in self.drift],
            "sigma": self.sigma.to_json(),
            "nu": None if self.nu is None else self.nu.to_json(),
            "bounds": {
                "alpha_min": self.alpha_min,
                "alpha_max": self.alpha_max,
                "lambda_min": self.lambda_min,
                "lambda_max": self.lambda_max,
            },
            "eta": self.eta,
            "h_frak": self.h_frak,
            "eps_balance": self.eps_balance,
            "tail_split": None if self.tail_split is None else str(self.tail_split),
        }

    def truncated(self) -> "ModelSpec":
        """The model with jumps beyond ``tail_split`` removed (negative nu part)."""
        if self.tail_split is None:
            raise ConfigError("tail_split", "model has no tail split")
        if self.has_nu:
            raise ConfigError("nu", "truncation of a model with a perturbation kernel is not supported")
        nu = PerturbationKernel((), parse_expr("0"), 0.5, self.tail_split)
        return replace(self, nu=nu, tail_split=None, name=self.name + "/trunc")

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _req(doc: dict, key: str, path: str):
    if key not in doc:
        raise ConfigError(f"{path}.{key}" if path else key, "missing field")
    return doc[key]


def _expr_field(value, path: str, dim: int) -> Expr:
    try:
        return as_expr(value, dim)
    except (ExprError, TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def model_from_json(doc: dict[str, Any]) -> ModelSpec:
    """Build a :class:`ModelSpec` from a JSON document (already parsed)."""
    if not isinstance(doc, dict):
        raise ConfigError("$", "model document must be an object")
    d = _req(doc, "dimension", "")
    if d not in (1, 2):
        raise ConfigError("dimension", f"must be 1 or 2, got {d!r}")
    alpha = _expr_field(_req(doc, "alpha", ""), "alpha", d)
    lam = _expr_field(_req(doc, "lambda", ""), "lambda", d)
    drift_doc = doc.get("drift", ["0"] * d)
    if not isinstance(drift_doc, list) or len(drift_doc) != d:
        raise ConfigError("drift", f"expected a list of {d} expressions")
    drift = tuple(_expr_field(v, f"drift[{i}]", d) for i, v in enumerate(drift_doc))
    sdoc = _req(doc, "sigma", "")
    atoms = _req(sdoc, "atoms", "sigma")
    if not isinstance(atoms, list) or not atoms:
        raise ConfigError("sigma.atoms", "expected a non-empty list")
    dirs, wts = [], []
    for i, a in enumerate(atoms):
        try:
            dirs.append([float(v) for v in a["dir"]])
            wts.append(float(a["weight"]))
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"sigma.atoms[{i}]", "expected {dir: [..], weight: number}") from None
    rot = None
    rdoc = sdoc.get("rotation")
    if rdoc is not None:
        try:
            rot = Rotation(rdoc.get("name", "radial-smoothstep"), float(rdoc.get("inner", 1.0)), float(rdoc.get("outer", 2.0)))
        except (TypeError, ValueError, AttributeError):
            raise ConfigError("sigma.rotation", "malformed rotation") from None
    try:
        sigma = SphericalMeasure(np.array(dirs), np.array(wts), rot)
    except ValueError as exc:
        raise ConfigError("sigma.atoms", str(exc)) from None
    nu = None
    ndoc = doc.get("nu")
    if ndoc is not None:
        natoms = []
        for i, a in enumerate(ndoc.get("atoms_expr", [])):
            u = a.get("u")
            if not isinstance(u, list) or len(u) != d:
                raise ConfigError(f"nu.atoms_expr[{i}].u", f"expected {d} expressions")
            natoms.append(
                (
                    tuple(_expr_field(c, f"nu.atoms_expr[{i}].u[{k}]", d) for k, c in enumerate(u)),
                    _expr_field(_req(a, "mass", f"nu.atoms_expr[{i}]"), f"nu.atoms_expr[{i}].mass", d),
                )
            )
        cut = ndoc.get("cut_radius")
        nu = PerturbationKernel(
            tuple(natoms),
            _expr_field(ndoc.get("beta", "0"), "nu.beta", d),
            float(ndoc.get("eps_nu", 0.5)),
            None if cut is None else _expr_field(cut, "nu.cut_radius", d),
        )
    bdoc = _req(doc, "bounds", "")
    try:
        bounds = {k: float(_req(bdoc, k, "bounds")) for k in ("alpha_min", "alpha_max", "lambda_min", "lambda_max")}
    except (TypeError, ValueError):
        raise ConfigError("bounds", "bounds must be numbers") from None
    return ModelSpec(
        dim=d,
        alpha=alpha,
        lam=lam,
        sigma=sigma,
        drift=drift,
        nu=nu,
        eta=float(doc.get("eta", 1.0)),
        h_frak=float(doc.get("h_frak", 1.0)),
        eps_balance=float(doc.get("eps_balance", 1.0)),
        name=str(doc.get("name", "custom")),
        tail_split=None if doc.get("tail_split") is None else _expr_field(doc["tail_split"], "tail_split", d),
        **bounds,
    )


def eps_b(model: ModelSpec) -> float:
    """Drift-approximation exponent: a quarter of min(h_frak, eps_balance)."""
    return 0.25 * min(model.h_frak, model.eps_balance)


def proof_s_frak(model: ModelSpec) -> float:
    """Cutoff parameter value used in the existence proof (very small)."""
    eps_nu = model.nu.eps_nu if model.has_nu else math.inf
    return model.eta * min(eps_nu, eps_b(model)) / (16 * model.dim)


@dataclass(frozen=True)
class NumericalParams:
    """Numerical knobs; ``None`` entries are resolved against a model."""

    s_frak: float | None = None
    m_frak: float | None = None
    delta_K1: float | None = None
    N_K1: float = 2.0
    c_decay: float = 1.0
    K_max: int = 4
    tol_series: float = 1e-4
    n_freq: int | None = None
    tau: float | None = None

    def resolve(self, model: ModelSpec) -> "NumericalParams":
        a_max = model.alpha_max
        s = self.s_frak if self.s_frak is not None else 0.45 / a_max
        m = self.m_frak if self.m_frak is not None else 0.5 * (2.0 - a_max)
        zeta_min = 1.0 / a_max - s
        delta = self.delta_K1 if self.delta_K1 is not None else 0.5 * min(1.0 / (2 * a_max), zeta_min)
        nf = self.n_freq if self.n_freq is not None else (4096 if model.dim == 1 else 512)
        out = replace(self, s_frak=s, m_frak=m, delta_K1=delta, n_freq=nf)
        out.check(model)
        return out

    def check(self, model: ModelSpec):
        a_max = model.alpha_max
        if not 0 < self.s_frak < 1.0 / (2 * a_max):
            raise ConfigError("params.s_frak", f"must lie in (0, 1/(2 alpha_max)) = (0, {1 / (2 * a_max):.4g})")
        if not 0 < self.m_frak < 2 - a_max:
            raise ConfigError("params.m_frak", f"must lie in (0, 2 - alpha_max) = (0, {2 - a_max:.4g})")
        if not self.delta_K1 < 1.0 / (2 * a_max):
            raise ConfigError("params.delta_K1", "must be below 1/(2 alpha_max)")
        if self.K_max < 1:
            raise ConfigError("params.K_max", "must be at least 1")
        zeta_min = 1.0 / a_max - self.s_frak
        if not zeta_min > 1.0 / (2 * a_max):
            raise ConfigError("params.s_frak", "zeta_min must exceed 1/(2 alpha_max)")

    def zeta(self, alpha):
        return 1.0 / np.asarray(alpha, dtype=float) - self.s_frak

    def theta(self, alpha):
        return np.asarray(alpha, dtype=float) + 0.5 * self.m_frak

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# Closed-form pieces of the principal kernel


def mu_tail_mass(model: ModelSpec, x, r) -> np.ndarray:
    """mu(x, {|u| > r}) = lambda(x) r^{-alpha(x)} / alpha(x)."""
    a = model.alpha_at(x)
    return model.lam_at(x) * np.asarray(r, dtype=float) ** (-a) / a


def radial_moment(alpha, lo, hi):
    """int_lo^hi rho^{-alpha} d rho (signed, lo > hi allowed), log branch at alpha = 1."""
    alpha = np.asarray(alpha, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    near_one = np.abs(alpha - 1.0) < ALPHA_ONE_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        a1 = np.where(near_one, 0.5, 1.0 - alpha)
        power = (hi ** a1 - lo ** a1) / a1
        log = np.log(hi) - np.log(lo)
    return np.where(near_one, log, power)


def intrinsic_drift(model: ModelSpec, z) -> np.ndarray:
    """upsilon(z) = lambda(z) sum_i w_i l_i(z); shape (d,) for one point, (n, d) otherwise."""
    single = np.ndim(z) == 0 or (np.ndim(z) == 1 and model.dim > 1) or (np.ndim(z) == 1 and len(np.atleast_1d(z)) == 1)
    X = model.points(z)
    out = model.lam_at(X)[:, None] * np.einsum("k,nkd->nd", model.weights, model.directions_at(X))
    return out[0] if single else out


def stable_exponent(model: ModelSpec, z, xi) -> tuple[np.ndarray, np.ndarray]:
    """(psi^z(xi), psi^{z,upsilon}(xi)) at a single state z for frequencies xi (..., d)."""
    from .symbols import atom_exponent

    X = model.points(z)[:1]
    xi = np.asarray(xi, dtype=float)
    if model.dim == 1 and (xi.ndim == 0 or xi.shape[-1] != 1):
        xi = xi[..., None]
    a = float(model.alpha_at(X)[0])
    lam = float(model.lam_at(X)[0])
    dirs = model.directions_at(X)[0]
    psi = np.zeros(xi.shape[:-1], dtype=complex)
    for w, l in zip(model.weights, dirs):
        psi += lam * w * atom_exponent(xi @ l, a)
    ups = intrinsic_drift(model, X[0])
    return psi, psi - 1j * (xi @ np.atleast_1d(ups))


# Validation


@dataclass
class ConditionResult:
    name: str
    passed: bool
    value: float | None = None
    detail: str = ""

    def to_json(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": self.value, "detail": self.detail}


@dataclass
class ValidationReport:
    model: str
    results: list[ConditionResult]
    evidence_only: bool = True
    note: str = "sample-based checks: a pass is evidence on the sampled points, not a proof"

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def __getitem__(self, name: str) -> ConditionResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "passed": self.passed,
            "evidence_only": self.evidence_only,
            "note": self.note,
            "conditions": [r.to_json() for r in self.results],
        }


def default_sample_grid(d: int, n: int = 33, half_width: float = 4.0) -> np.ndarray:
    axis = np.linspace(-half_width, half_width, n)
    if d == 1:
        return axis[:, None]
    g = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([c.ravel() for c in g], axis=-1)


def _sphere_dirs(d: int, n: int = 16) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    th = 2 * np.pi * np.arange(n) / n
    return np.stack([np.cos(th), np.sin(th)], axis=-1)


def _close_pairs(X: np.ndarray, radius: float = 1.0, limit: int = 4000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    n = len(X)
    i, j = np.triu_indices(n, 1)
    dist = np.linalg.norm(X[i] - X[j], axis=1)
    keep = (dist <= radius) & (dist > 0)
    i, j = i[keep], j[keep]
    if len(i) > limit:
        sel = np.random.default_rng(seed).choice(len(i), limit, replace=False)
        i, j = i[sel], j[sel]
    return i, j


def validate_model(model: ModelSpec, params: NumericalParams | None = None, sample_grid=None) -> ValidationReport:
    """Sample-based check of the standing assumptions; failures become report entries."""
    from .flow import compensated_drift

    X = default_sample_grid(model.dim) if sample_grid is None else model.points(sample_grid)
    if len(X) == 0:
        raise ValueError("sample_grid must be non-empty")
    results: list[ConditionResult] = []

    def guarded(name, fn):
        try:
            results.append(fn())
        except (ExprError, FloatingPointError, ValueError) as exc:
            results.append(ConditionResult(name, False, None, f"evaluation failed: {exc}"))

    def m0():
        a = model.alpha_at(X)
        lam = model.lam_at(X)
        ok = (
            0 < model.alpha_min <= a.min()
            and a.max() <= model.alpha_max < 2
            and 0 < model.lambda_min <= lam.min()
            and lam.max() <= model.lambda_max
        )
        return ConditionResult(
            "M0", bool(ok), float(a.max()),
            f"alpha in [{a.min():.6g}, {a.max():.6g}], lambda in [{lam.min():.6g}, {lam.max():.6g}]; "
            f"declared alpha [{model.alpha_min}, {model.alpha_max}], lambda [{model.lambda_min}, {model.lambda_max}]",
        )

    def m1():
        V = _sphere_dirs(model.dim)
        dirs = model.directions_at(X)
        vals = np.einsum("k,nkv->nv", model.weights, np.einsum("nkd,vd->nkv", dirs, V) ** 2)
        mn = float(vals.min())
        return ConditionResult("M1", mn > 1e-12, mn, "min over x, v of sum_i w_i (v.l_i)^2")

    def m2():
        i, j = _close_pairs(X)
        if len(i) == 0:
            return ConditionResult("M2", True, 0.0, "no sample pairs within distance 1")
        a, lam = model.alpha_at(X), model.lam_at(X)
        w1 = np.zeros(len(i))
        if model.sigma.rotation is not None:
            for k, (p, q) in enumerate(zip(i, j)):
                w1[k] = w1_sphere(model.sigma.at(X[p]), model.sigma.at(X[q]))
        dist = np.linalg.norm(X[i] - X[j], axis=1)
        quot = (np.abs(a[i] - a[j]) + np.abs(lam[i] - lam[j]) + w1) / dist ** model.eta
        c = float(quot.max())
        return ConditionResult("M2", bool(np.isfinite(c)), c, f"fitted Hoelder constant with eta={model.eta}")

    def c1():
        detail = "checked by atom-map continuity only"
        if not model.has_nu or model.nu.n_atoms == 0:
            return ConditionResult("C1", True, 0.0, detail)
        i, j = _close_pairs(X, radius=0.3)
        U, M = model.nu.atoms_at(X)
        jump = float(np.max(np.abs(U[i] - U[j]).sum(axis=(1, 2)) + np.abs(M[i] - M[j]).sum(axis=1))) if len(i) else 0.0
        return ConditionResult("C1", bool(np.isfinite(jump)), jump, detail + "; max atom displacement over close pairs")

    def n0():
        # negative part of nu must be dominated by mu: atoms with negative mass are not representable
        if not model.has_nu:
            return ConditionResult("N0", True, 0.0, "no perturbation kernel")
        U, M = model.nu.atoms_at(X)
        neg = float(-M.min()) if M.size else 0.0
        ok = neg <= 0.0
        return ConditionResult("N0", ok, neg, "negative atoms must vanish; negative part allowed only via cut_radius")

    def n1():
        if not model.has_nu:
            return ConditionResult("N1", True, 0.0, "no perturbation kernel")
        radii = np.geomspace(1e-3, 1.0, 8)
        U, M = model.nu.atoms_at(X)
        a = model.alpha_at(X)
        beta = np.broadcast_to(model.nu.beta(X), a.shape) if not model.nu.beta.is_constant else np.full(a.shape, model.nu.beta())
        if np.any(beta >= a - model.nu.eps_nu + 1e-12):
            return ConditionResult("N1", False, float((beta - a).max()), "beta(x) must stay eps_nu below alpha(x)")
        norms = np.linalg.norm(U, axis=2)
        R = model.nu.cut_at(X)
        worst = 0.0
        for r in radii:
            tail = (np.abs(M) * (norms >= r)).sum(axis=1)
            if R is not None:
                tail = tail + model.lam_at(X) * np.maximum(R, r) ** (-a) / a
            worst = max(worst, float((tail * r ** beta).max()))
        return ConditionResult("N1", np.isfinite(worst), worst, "fitted C in |nu|(x,{|u|>=r}) <= C r^-beta(x)")

    def b0():
        b = model.drift_at(X)
        s = float(np.linalg.norm(b, axis=1).max())
        return ConditionResult("B0", np.isfinite(s), s, "sup |b(x)| over samples")

    def b1():
        i, j = _close_pairs(X, limit=1500)
        if len(i) == 0:
            return ConditionResult("B1", True, 0.0, "no sample pairs")
        a = model.alpha_at(X)
        gam = 1 - a + model.h_frak
        dlt = -1 + 1 / a
        dist = np.linalg.norm(X[i] - X[j], axis=1)
        worst = 0.0
        for t in np.geomspace(1e-3, 1.0, 6):
            bt = compensated_drift(model, X, t)
            num = np.linalg.norm(bt[i] - bt[j], axis=1)
            den = dist ** gam[i] + dist ** gam[j] + (t ** dlt[i] + t ** dlt[j]) * dist ** model.eps_balance
            worst = max(worst, float((num / den).max()))
        return ConditionResult("B1", np.isfinite(worst), worst, "fitted balance constant over sampled pairs and times")

    for name, fn in (("M0", m0), ("M1", m1), ("M2", m2), ("C1", c1), ("N0", n0), ("N1", n1), ("B0", b0), ("B1", b1)):
        guarded(name, fn)
    if params is not None:
        try:
            params.resolve(model)
            results.append(ConditionResult("params", True, None, "numerical parameters admissible"))
        except ConfigError as exc:
            results.append(ConditionResult("params", False, None, str(exc)))
    return ValidationReport(model.name, results)
