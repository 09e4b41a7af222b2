"""Built-in one-dimensional McKean-Vlasov systems with closed-form checks.

``builtin(name)`` returns a fully wired :class:`NamedSystem`.  Every closed
form attached to a system is compared with the generic evaluators when the
system is first built, so a typo in either place fails loudly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from . import rng
from .dynamics import CoefficientField
from .lyapunov import (Certificate, LyapunovFunctional, TwoPointCost, coupled_generator,
                       generator_L, random_cloud, squared_norm, two_point_generator)
from .measures import EmpiricalMeasure

SELF_TEST_POINTS = 10
SELF_TEST_RTOL = 1e-8


@dataclass(frozen=True)
class ClosedForm:
    """An analytic expression checked against a generic evaluator.

    ``kind`` selects the evaluator: ``generator`` takes ``(x, mu)``,
    ``coupled_generator`` takes ``(x_bar, mu)`` and uses ``functional``,
    ``two_point_L`` / ``two_point_Lbar`` take ``(x, y, mu, nu)``, and
    ``constant`` is a plain number with nothing to evaluate.
    """

    kind: str
    expression: str
    fn: Optional[Callable] = None
    value: Optional[float] = None
    functional: Optional[LyapunovFunctional] = None


@dataclass(frozen=True)
class NamedSystem:
    name: str
    title: str
    field: CoefficientField
    V: LyapunovFunctional
    certificate: Certificate
    coefficients: dict
    lyapunov: dict
    default_init: dict
    bar_field: Optional[CoefficientField] = None
    V2: Optional[TwoPointCost] = None
    closed_forms: dict = dc_field(default_factory=dict)
    notes: tuple = ()

    def describe(self) -> dict:
        forms = {}
        for label, cf in self.closed_forms.items():
            entry = {"kind": cf.kind, "expression": cf.expression}
            if cf.value is not None:
                entry["value"] = cf.value
            forms[label] = entry
        return {
            "name": self.name,
            "title": self.title,
            "dim": self.field.dim,
            "noise_dim": self.field.noise_dim,
            "coefficients": dict(self.coefficients),
            "lyapunov": dict(self.lyapunov),
            "two_point_cost": None if self.V2 is None else self.V2.name,
            "certificate": self.certificate.to_dict(),
            "lipschitz": self.field.lipschitz,
            "growth_hint": None if self.field.growth_hint is None else list(self.field.growth_hint),
            "closed_forms": forms,
            "default_init": dict(self.default_init),
            "notes": list(self.notes),
        }


def _m1(mu: EmpiricalMeasure) -> float:
    return float(mu.points[:, 0].mean())


def _m(mu: EmpiricalMeasure, p: int) -> float:
    return float(np.mean(mu.points[:, 0] ** p))


# ---------------------------------------------------------------------------
# quadratic drift damped by the second moment


def _ex5_1() -> NamedSystem:
    root2 = math.sqrt(2.0)
    fld = CoefficientField(
        drift=lambda t, x, mu: -x * _m(mu, 2),
        diffusion=lambda t, x, mu: (root2 * x)[..., None],
        name="ex5_1",
    )
    V = LyapunovFunctional(
        value=lambda x, mu: x[:, 0] ** 4 + _m(mu, 6),
        grad_x=lambda x, mu: 4 * x**3,
        hess_x=lambda x, mu: (12 * x**2)[..., None],
        lions=lambda x, mu, y: (6 * y**5)[None],
        lions_ygrad=lambda x, mu, y: (30 * y**4)[None, :, :, None],
        name="x^4 + int y^6 dmu",
    )

    def gen(x, mu):
        m2, m6 = _m(mu, 2), _m(mu, 6)
        return -4 * x**4 * m2 + 12 * x**4 - 6 * m2 * m6 + 30 * m6

    return NamedSystem(
        name="ex5_1",
        title="cubic-moment damping with linear multiplicative noise",
        field=fld,
        V=V,
        certificate=Certificate.h2(30.0, 0.0, note="LV <= 30 V"),
        coefficients={"b": "−x ∫y² μ(dy)", "sigma": "√2 x"},
        lyapunov={"V": "x⁴ + ∫y⁶ μ(dy)", "d_mu V(z)": "6z⁵", "d_z d_mu V(z)": "30z⁴"},
        default_init={"kind": "normal", "mean": 0.0, "std": 0.5},
        closed_forms={
            "generator": ClosedForm("generator", "−4x⁴m₂ + 12x⁴ − 6m₂m₆ + 30m₆", fn=gen),
        },
        notes=("not globally Lipschitz; no polynomial growth hint",),
    )


# ---------------------------------------------------------------------------
# mean-reverting linear system


def _ex5_2_parts():
    fld = CoefficientField(
        drift=lambda t, x, mu: -3 * x + 3 * _m1(mu),
        diffusion=lambda t, x, mu: (x - _m1(mu))[..., None],
        name="ex5_2",
        lipschitz=3.0,
        growth_hint=(2.0, 328.0),
    )
    V = LyapunovFunctional(
        value=lambda x, mu: 0.25 * (x[:, 0] - _m1(mu)) ** 4,
        grad_x=lambda x, mu: (x - _m1(mu)) ** 3,
        hess_x=lambda x, mu: (3 * (x - _m1(mu)) ** 2)[..., None],
        # the Lions derivative does not depend on the atom y
        lions=lambda x, mu, y: (-(x - _m1(mu)) ** 3)[:, None, :],
        lions_ygrad=lambda x, mu, y: np.zeros((1, 1, 1, 1)),
        name="(x - m)^4 / 4",
    )
    return fld, V


def _ex5_2() -> NamedSystem:
    fld, V = _ex5_2_parts()
    return NamedSystem(
        name="ex5_2",
        title="mean-reverting drift with deviation-proportional noise",
        field=fld,
        V=V,
        certificate=Certificate.h2(0.0, 0.0, note="exact identity LV = −(3/2)(x−m)⁴ = −6V"),
        coefficients={"b": "−3x + 3∫y μ(dy)", "sigma": "x − ∫y μ(dy)"},
        lyapunov={"V": "¼(x − m)⁴", "d_mu V(z)": "−(x − m)³", "d_z d_mu V(z)": "0"},
        default_init={"kind": "normal", "mean": 1.0, "std": 0.5},
        closed_forms={
            "generator": ClosedForm("generator", "−(3/2)(x−m)⁴",
                                    fn=lambda x, mu: -1.5 * (x - _m1(mu)) ** 4),
            "generator_over_V": ClosedForm("constant", "LV / V", value=-6.0),
            "EV_decay_rate": ClosedForm("constant", "d/dt E(X−m)⁴ = −6 E(X−m)⁴", value=6.0),
            "EY2_decay_rate": ClosedForm("constant", "d/dt E(X−m)² = −5 E(X−m)²", value=5.0),
        },
        notes=("the mean m is preserved by the dynamics",
               "Lipschitz constant 3 in (|x−y| + W₂) for both coefficients"),
    )


# ---------------------------------------------------------------------------
# cubic bar equation driven by the mean-reverting law


def _ex5_3() -> NamedSystem:
    fld, V = _ex5_2_parts()
    fld = CoefficientField(fld.drift, fld.diffusion, name="ex5_3", lipschitz=fld.lipschitz,
                           growth_hint=fld.growth_hint)
    bar = CoefficientField(
        drift=lambda t, x, mu: -x**3 - 2 * (x + 0.5 * _m1(mu)),
        diffusion=lambda t, x, mu: (x + 0.5 * _m1(mu))[..., None],
        name="ex5_3_bar",
    )
    sq = LyapunovFunctional(
        value=lambda x, mu: np.sum(x * x, axis=1),
        grad_x=lambda x, mu: 2 * x,
        hess_x=lambda x, mu: np.full(x.shape + (1,), 2.0),
        lions=lambda x, mu, y: np.zeros((1, 1, 1)),
        lions_ygrad=lambda x, mu, y: np.zeros((1, 1, 1, 1)),
        name="|x|^2",
    )

    def L(x, y, mu, nu):
        u, d = x - y, _m1(mu) - _m1(nu)
        return -5 * u**2 + 4 * u * d + d**2

    def Lbar(x, y, mu, nu):
        u, d = x - y, _m1(mu) - _m1(nu)
        return -2 * u * (x**3 - y**3) - 3 * u**2 - u * d + 0.25 * d**2

    def coupled(x, mu):
        m = _m1(mu)
        return 2 * x * (-x**3 - 2 * x - m) + (x + 0.5 * m) ** 2

    return NamedSystem(
        name="ex5_3",
        title="cubic bar equation read against the mean-reverting law",
        field=fld,
        bar_field=bar,
        V=V,
        V2=squared_norm(),
        certificate=Certificate.two_point(3.0, 3.0, 2.0, 0.5,
                                          note="gamma = beta: X-marginal rate is not strict"),
        coefficients={"b": "−3x + 3∫y μ(dy)", "sigma": "x − ∫y μ(dy)",
                      "b_bar": "−x³ − 2∫(x + ½y) μ(dy)", "sigma_bar": "∫(x + ½y) μ(dy)"},
        lyapunov={"V": "¼(x − m)⁴", "V2": "|u|²"},
        default_init={"kind": "normal", "mean": 0.0, "std": 0.5},
        closed_forms={
            "two_point_L": ClosedForm("two_point_L", "−5u² + 4uΔ + Δ²  (u = x−y, Δ = m_μ − m_ν)",
                                      fn=L),
            "two_point_Lbar": ClosedForm("two_point_Lbar", "−2u(x³−y³) − 3u² − uΔ + Δ²/4",
                                         fn=Lbar),
            "coupled_generator_sq": ClosedForm("coupled_generator",
                                               "2x(−x³ − 2x − m) + (x + m/2)²  for V = |x|²",
                                               fn=coupled, functional=sq),
        },
        notes=("the Lyapunov functional is the quartic deviation of the X-equation",),
    )


_BUILDERS = {"ex5_1": _ex5_1, "ex5_2": _ex5_2, "ex5_3": _ex5_3}


def names() -> list[str]:
    return sorted(_BUILDERS)


class UnknownSystemError(KeyError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"unknown system {name!r}; valid names: {', '.join(names())}")

    def __str__(self):
        return self.args[0]


def self_test(system: NamedSystem, points: int = SELF_TEST_POINTS, seed: int = 0,
              rtol: float = SELF_TEST_RTOL) -> list[str]:
    """Compare every closed form with the generic evaluator; returns failures."""
    failures = []
    for label, cf in system.closed_forms.items():
        if cf.kind == "constant":
            continue
        for i in range(points):
            gen = rng.generator(rng.derive_seed(seed, i, 7))
            x = gen.normal(0.0, 1.5, size=1)
            mu = random_cloud(gen, 1, 16, 1.5)
            if cf.kind == "generator":
                got = generator_L(system.V, system.field, 0.0, x, mu)
                want = float(cf.fn(x[0], mu))
            elif cf.kind == "coupled_generator":
                got = coupled_generator(cf.functional, system.field, system.bar_field, 0.0, x, mu)
                want = float(cf.fn(x[0], mu))
            else:
                y = gen.normal(0.0, 1.5, size=1)
                nu = random_cloud(gen, 1, 16, 1.5)
                fld = system.field if cf.kind == "two_point_L" else system.bar_field
                got = two_point_generator(system.V2, fld, 0.0, x, y, mu, nu)
                want = float(cf.fn(x[0], y[0], mu, nu))
            if abs(got - want) > rtol * max(1.0, abs(want)):
                failures.append(f"{system.name}.{label} sample {i}: {got!r} vs {want!r}")
    return failures


@lru_cache(maxsize=None)
def builtin(name: str) -> NamedSystem:
    """Registry lookup; the closed forms are self-tested on first use."""
    if name not in _BUILDERS:
        raise UnknownSystemError(name)
    system = _BUILDERS[name]()
    failures = self_test(system)
    if failures:
        raise RuntimeError("closed-form self-test failed:\n" + "\n".join(failures))
    return system
