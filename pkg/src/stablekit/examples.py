"""Registry of builtin models."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .expr import parse_expr
from .model import ConfigError, ModelSpec, PerturbationKernel
from .sphere import Rotation, SphericalMeasure


class UnknownModelError(KeyError):
    pass


@dataclass(frozen=True)
class Parameter:
    default: float
    lo: float
    hi: float
    doc: str = ""


@dataclass(frozen=True)
class ModelTemplate:
    name: str
    parameters: dict[str, Parameter]
    build: Callable[[dict], ModelSpec]
    description: str
    expected_failures: tuple[str, ...] = ()

    def make(self, overrides: dict | None = None) -> ModelSpec:
        vals = {k: p.default for k, p in self.parameters.items()}
        for k, v in (overrides or {}).items():
            if k not in self.parameters:
                raise ConfigError(f"overrides.{k}", f"unknown parameter for {self.name!r}")
            p = self.parameters[k]
            v = float(v)
            if not p.lo <= v <= p.hi:
                raise ConfigError(f"overrides.{k}", f"{v} outside [{p.lo}, {p.hi}]")
            vals[k] = v
        return self.build(vals)

    def describe(self) -> dict:
        return {
            "name": self.name,
            "parameters": {k: {"default": p.default, "range": [p.lo, p.hi], "doc": p.doc} for k, p in self.parameters.items()},
            "description": self.description,
        }


def _sym1d() -> SphericalMeasure:
    return SphericalMeasure.symmetric_1d()


def _const_cauchy(p):
    lam = 2 / math.pi
    return ModelSpec(
        dim=1, alpha=parse_expr("1"), lam=parse_expr(repr(lam)), sigma=_sym1d(), drift=(parse_expr("0"),),
        alpha_min=1.0, alpha_max=1.0, lambda_min=lam, lambda_max=lam, name="const-cauchy",
    )


def _const_alpha(p):
    a, lam = p["alpha"], p["lam"]
    return ModelSpec(
        dim=1, alpha=parse_expr(repr(a)), lam=parse_expr(repr(lam)), sigma=_sym1d(), drift=(parse_expr("0"),),
        alpha_min=a, alpha_max=a, lambda_min=lam, lambda_max=lam, name="const-alpha",
    )


def _var_alpha(p):
    a0, amp, lo, hi = p["alpha0"], p["amp"], p["alpha_lo"], p["alpha_hi"]
    alpha = parse_expr(f"clamp({a0!r} + {amp!r}*tanh(x1), {lo!r}, {hi!r})")
    drift = parse_expr(f"{p['drift']!r}*sin(x1)") if p["drift"] else parse_expr("0")
    return ModelSpec(
        dim=1, alpha=alpha, lam=parse_expr(repr(p["lam"])), sigma=_sym1d(), drift=(drift,),
        alpha_min=max(lo, a0 - abs(amp)), alpha_max=min(hi, a0 + abs(amp)),
        lambda_min=p["lam"], lambda_max=p["lam"], name="var-alpha-1d",
    )


def _resetting(p):
    a = p["alpha"]
    mass = parse_expr("1/(1 + abs(x1))")
    nu = PerturbationKernel(
        atoms=(((parse_expr("x1"),), mass), ((parse_expr("-x1"),), mass)),
        beta=parse_expr("0"), eps_nu=min(0.5, 0.5 * a),
    )
    return ModelSpec(
        dim=1, alpha=parse_expr(repr(a)), lam=parse_expr("1"), sigma=_sym1d(), drift=(parse_expr("0"),), nu=nu,
        alpha_min=a, alpha_max=a, lambda_min=1.0, lambda_max=1.0, name="resetting",
    )


def _rotation(p):
    a, lam = p["alpha"], p["lam"]
    dirs = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    sigma = SphericalMeasure(dirs, np.full(4, 0.25), Rotation("radial-smoothstep", 1.0, 2.0))
    return ModelSpec(
        dim=2, alpha=parse_expr(repr(a)), lam=parse_expr(repr(lam)), sigma=sigma,
        drift=(parse_expr("0"), parse_expr("0")), alpha_min=a, alpha_max=a, lambda_min=lam, lambda_max=lam,
        eta=1.0, name="rotation-sde",
    )


def _truncated(p):
    a, lam0, q, amp = p["alpha"], p["lam0"], p["q"], p["amp"]
    scale = f"(1 + {amp!r}*tanh(x1))"
    lo, hi = 1 - abs(amp), 1 + abs(amp)
    return ModelSpec(
        dim=1, alpha=parse_expr(repr(a)), lam=parse_expr(f"{lam0!r}*exp({a!r}*log{scale})"), sigma=_sym1d(),
        drift=(parse_expr("0"),), alpha_min=a, alpha_max=a,
        lambda_min=lam0 * lo ** a, lambda_max=lam0 * hi ** a, name="truncated-noise",
        tail_split=parse_expr(f"{q!r}*{scale}"),
    )


REGISTRY: dict[str, ModelTemplate] = {
    t.name: t
    for t in (
        ModelTemplate("const-cauchy", {}, _const_cauchy, "constant-coefficient Cauchy process"),
        ModelTemplate(
            "const-alpha",
            {"alpha": Parameter(1.5, 0.1, 1.95, "stability index"), "lam": Parameter(1.0, 0.01, 100.0, "intensity")},
            _const_alpha, "constant-coefficient symmetric stable process",
        ),
        ModelTemplate(
            "var-alpha-1d",
            {
                "alpha0": Parameter(1.5, 0.3, 1.9, "center of alpha(x)"),
                "amp": Parameter(0.3, -0.8, 0.8, "tanh amplitude of alpha(x)"),
                "alpha_lo": Parameter(1.2, 0.1, 1.95, "lower clamp"),
                "alpha_hi": Parameter(1.8, 0.1, 1.95, "upper clamp"),
                "lam": Parameter(1.0, 0.01, 100.0, "intensity"),
                "drift": Parameter(0.0, -5.0, 5.0, "amplitude of the drift b(x) = c sin(x)"),
            },
            _var_alpha, "variable-order stable-like model",
        ),
        ModelTemplate(
            "resetting", {"alpha": Parameter(0.8, 0.1, 1.95, "stability index")}, _resetting,
            "jumps that double the state or reset it to 0",
        ),
        ModelTemplate(
            "rotation-sde",
            {"alpha": Parameter(1.5, 0.1, 1.95, "stability index"), "lam": Parameter(1.0, 0.01, 100.0, "intensity")},
            _rotation, "SDE driven by independent stable coordinates with a rotating coefficient",
        ),
        ModelTemplate(
            "truncated-noise",
            {
                "alpha": Parameter(1.5, 0.1, 1.95, "stability index"),
                "lam0": Parameter(1.0, 0.01, 100.0, "intensity of the driving noise"),
                "q": Parameter(1.0, 0.05, 10.0, "truncation level of the noise"),
                "amp": Parameter(0.3, -0.9, 0.9, "tanh amplitude of the coefficient a(x)"),
            },
            _truncated, "SDE dX = a(X) dZ driven by truncated stable noise",
        ),
    )
}


def get_model(name: str, overrides: dict | None = None) -> ModelSpec:
    try:
        template = REGISTRY[name]
    except KeyError:
        raise UnknownModelError(f"unknown model {name!r}; known: {', '.join(sorted(REGISTRY))}") from None
    return template.make(overrides)


def list_models() -> list[dict]:
    return [REGISTRY[k].describe() for k in sorted(REGISTRY)]
