"""Distribution-dependent Lyapunov functionals, their generators and certificates.

Derivatives in the measure argument are taken on empirical measures by
particle lifting: for ``mu = (1/M) sum_j delta_{y_j}`` the Lions derivative at
an atom is ``M`` times the gradient of ``y_j -> V(x, mu)``.  The copy
expectation in the generator becomes the average over the cloud.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from . import rng
from .dynamics import CoefficientField, SimConfig, simulate
from .measures import EmpiricalMeasure
from .transport import CostFunction, difference_cost, quasi_wasserstein

FD_STEP = 1e-5
# second differences lose about twice as many digits to rounding
FD_STEP2 = 1e-4


class GeneratorError(ValueError):
    """A generator term came out non-finite; ``part`` names the offending term."""

    def __init__(self, part: str):
        self.part = part
        super().__init__(f"non-finite value in the {part} part of the generator")


@dataclass(frozen=True)
class LyapunovFunctional:
    """``V(x, mu)`` with optional analytic derivatives.

    All callables are vectorized over a (k, d) array of states ``x``.
    ``lions(x, mu, y)`` and ``lions_ygrad(x, mu, y)`` take atoms ``y`` of shape
    (m, d) and return arrays broadcastable to (k, m, d) and (k, m, d, d); a
    size-1 axis signals that the derivative does not depend on that argument,
    which keeps the generator linear in the cloud size.
    """

    value: Callable[[np.ndarray, EmpiricalMeasure], np.ndarray]
    grad_x: Optional[Callable] = None
    hess_x: Optional[Callable] = None
    lions: Optional[Callable] = None
    lions_ygrad: Optional[Callable] = None
    fd_step: float = FD_STEP
    fd_step2: float = FD_STEP2
    name: str = "V"

    def __call__(self, x, mu: EmpiricalMeasure) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(self.value(x[None, :], mu)[0])

    @property
    def analytic(self) -> bool:
        return None not in (self.grad_x, self.hess_x, self.lions, self.lions_ygrad)

    def without_derivatives(self) -> "LyapunovFunctional":
        """Same value map, every derivative by finite differences."""
        return LyapunovFunctional(self.value, fd_step=self.fd_step, fd_step2=self.fd_step2,
                                  name=f"{self.name}[fd]")


def _x2(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


# ---------------------------------------------------------------------------
# finite differences


def grad_x_fd(V: LyapunovFunctional, x: np.ndarray, mu: EmpiricalMeasure) -> np.ndarray:
    x = _x2(x)
    h = V.fd_step
    out = np.empty_like(x)
    for a in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[a] = h
        out[:, a] = (V.value(x + e, mu) - V.value(x - e, mu)) / (2 * h)
    return out


def hess_x_fd(V: LyapunovFunctional, x: np.ndarray, mu: EmpiricalMeasure) -> np.ndarray:
    x = _x2(x)
    h = V.fd_step2
    k, d = x.shape
    out = np.empty((k, d, d))
    f0 = V.value(x, mu)
    for a in range(d):
        ea = np.zeros(d)
        ea[a] = h
        out[:, a, a] = (V.value(x + ea, mu) - 2 * f0 + V.value(x - ea, mu)) / h**2
        for b in range(a + 1, d):
            eb = np.zeros(d)
            eb[b] = h
            mixed = (V.value(x + ea + eb, mu) - V.value(x + ea - eb, mu)
                     - V.value(x - ea + eb, mu) + V.value(x - ea - eb, mu)) / (4 * h**2)
            out[:, a, b] = out[:, b, a] = mixed
    return out


def _lifted(mu: EmpiricalMeasure, j: int, shift: np.ndarray) -> EmpiricalMeasure:
    pts = np.array(mu.points)
    pts[j] += shift
    return EmpiricalMeasure._trusted(pts)


def lions_derivative_fd(V: LyapunovFunctional, x, mu: EmpiricalMeasure, j: int) -> np.ndarray:
    """Lions derivative at atom ``j`` by central differences on the particle lift.

    Returns shape (d,) for a single ``x`` or (k, d) for a (k, d) batch.
    """
    single = np.asarray(x).ndim == 1
    xs = _x2(x)
    M, d = mu.size, mu.dim
    if not 0 <= j < M:
        raise IndexError(f"atom index {j} out of range for a cloud of {M}")
    h = V.fd_step
    out = np.empty((xs.shape[0], d))
    for a in range(d):
        e = np.zeros(d)
        e[a] = h
        diff = V.value(xs, _lifted(mu, j, e)) - V.value(xs, _lifted(mu, j, -e))
        out[:, a] = M * diff / (2 * h)
    if not np.all(np.isfinite(out)):
        raise ValueError("finite-difference Lions derivative is not finite")
    return out[0] if single else out


def lions_ygrad_fd(V: LyapunovFunctional, x, mu: EmpiricalMeasure, j: int) -> np.ndarray:
    """``d/dy`` of the Lions derivative at atom ``j``, shape (d, d) or (k, d, d).

    Differentiating the lifted gradient again would pick up a second-order
    measure term of size 1/M.  Instead every atom is split into two
    half-weight copies (the measure is unchanged) and the two copies of atom
    ``j`` are pushed apart symmetrically; the curvature of that one-parameter family is exactly the
    y-derivative of the Lions derivative divided by ``M``.
    """
    single = np.asarray(x).ndim == 1
    xs = _x2(x)
    M, d = mu.size, mu.dim
    # every atom doubled: same measure, 2M half-weight atoms
    doubled = np.concatenate([mu.points, mu.points])
    a_idx, b_idx = j, M + j
    h = V.fd_step2

    def g(s: np.ndarray) -> np.ndarray:
        pts = doubled.copy()
        pts[a_idx] += s
        pts[b_idx] -= s
        return V.value(xs, EmpiricalMeasure._trusted(pts))

    out = np.empty((xs.shape[0], d, d))
    g0 = g(np.zeros(d))
    for a in range(d):
        ea = np.zeros(d)
        ea[a] = h
        out[:, a, a] = (g(ea) - 2 * g0 + g(-ea)) / h**2
        for b in range(a + 1, d):
            eb = np.zeros(d)
            eb[b] = h
            mixed = (g(ea + eb) - g(ea - eb) - g(-ea + eb) + g(-ea - eb)) / (4 * h**2)
            out[:, a, b] = out[:, b, a] = mixed
    out *= M
    if not np.all(np.isfinite(out)):
        raise ValueError("finite-difference Lions y-derivative is not finite")
    return out[0] if single else out


# ---------------------------------------------------------------------------
# derivative dispatch


def d_x(V, x, mu):
    return V.grad_x(x, mu) if V.grad_x is not None else grad_x_fd(V, x, mu)


def d_xx(V, x, mu):
    return V.hess_x(x, mu) if V.hess_x is not None else hess_x_fd(V, x, mu)


def d_mu(V, x, mu):
    """Lions derivative at every atom of ``mu``, broadcastable to (k, M, d)."""
    if V.lions is not None:
        return V.lions(x, mu, mu.points)
    return np.stack([lions_derivative_fd(V, x, mu, j) for j in range(mu.size)], axis=1)


def d_y_mu(V, x, mu):
    """y-gradient of the Lions derivative at every atom, broadcastable to (k, M, d, d)."""
    if V.lions_ygrad is not None:
        return V.lions_ygrad(x, mu, mu.points)
    return np.stack([lions_ygrad_fd(V, x, mu, j) for j in range(mu.size)], axis=1)


def _cloud_mean_dot(coef: np.ndarray, deriv: np.ndarray) -> np.ndarray:
    """``mean_j <coef_j, deriv[:, j]>`` contracting trailing axes.

    ``coef`` has shape (m, ...) and ``deriv`` (k|1, m|1, ...).
    """
    tail = tuple(range(1, coef.ndim))
    if deriv.shape[1] == 1:
        # derivative constant across atoms: average the coefficient first
        return np.tensordot(deriv[:, 0], coef.mean(axis=0), axes=(tail, tuple(t - 1 for t in tail)))
    prod = deriv * coef[None]
    return prod.reshape(prod.shape[0], prod.shape[1], -1).sum(axis=2).mean(axis=1)


def generator_parts(V: LyapunovFunctional, state_field: CoefficientField,
                    law_field: CoefficientField, t: float, x, mu: EmpiricalMeasure) -> dict:
    """Drift, diffusion and measure terms of the generator at states ``x``.

    State terms use ``state_field`` at ``(x, mu)``; the measure term averages
    ``law_field`` over the atoms of ``mu``.
    """
    xs = _x2(x)
    k = xs.shape[0]
    b = state_field.drift(t, xs, mu)
    s = state_field.diffusion(t, xs, mu)
    a = np.einsum("kdn,ken->kde", s, s)
    drift = np.einsum("kd,kd->k", b, d_x(V, xs, mu))
    diffusion = 0.5 * np.einsum("kde,kde->k", a, d_xx(V, xs, mu))

    y = mu.points
    by = law_field.drift(t, y, mu)
    sy = law_field.diffusion(t, y, mu)
    ay = np.einsum("mdn,men->mde", sy, sy)
    L1 = np.asarray(d_mu(V, xs, mu), dtype=float)
    L2 = np.asarray(d_y_mu(V, xs, mu), dtype=float)
    measure = _cloud_mean_dot(by, L1) + 0.5 * _cloud_mean_dot(ay, L2)
    measure = np.broadcast_to(measure, (k,))

    parts = {"drift": drift, "diffusion": diffusion, "measure": measure}
    for name, val in parts.items():
        if not np.all(np.isfinite(val)):
            raise GeneratorError(name)
    return parts


def generator_L(V: LyapunovFunctional, field: CoefficientField, t: float, x,
                mu: EmpiricalMeasure):
    """Generator of the McKean-Vlasov equation applied to ``V`` at ``(x, mu)``.

    Returns a float for a single state, an array for a (k, d) batch.
    """
    parts = generator_parts(V, field, field, t, x, mu)
    total = parts["drift"] + parts["diffusion"] + parts["measure"]
    return float(total[0]) if np.asarray(x).ndim <= 1 else total


def coupled_generator(V: LyapunovFunctional, field: CoefficientField,
                      bar_field: CoefficientField, t: float, x_bar,
                      mu: EmpiricalMeasure):
    """Generator of the coupled pair (barred state, law): barred coefficients
    act on the state variable, unbarred ones inside the measure term."""
    parts = generator_parts(V, bar_field, field, t, x_bar, mu)
    total = parts["drift"] + parts["diffusion"] + parts["measure"]
    return float(total[0]) if np.asarray(x_bar).ndim <= 1 else total


# ---------------------------------------------------------------------------
# two-point costs


@dataclass(frozen=True)
class TwoPointCost:
    """Nonnegative ``V`` on R^d vanishing only at 0, used on differences ``x - y``."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "V2"
    convex_1d: bool = True
    fd_step: float = FD_STEP
    fd_step2: float = FD_STEP2

    def as_cost(self) -> CostFunction:
        return difference_cost(self.value, name=self.name, convex_1d=self.convex_1d)

    def gradient(self, u: np.ndarray) -> np.ndarray:
        if self.grad is not None:
            return self.grad(u)
        h = self.fd_step
        out = np.empty_like(u)
        for a in range(u.shape[-1]):
            e = np.zeros(u.shape[-1])
            e[a] = h
            out[..., a] = (self.value(u + e) - self.value(u - e)) / (2 * h)
        return out

    def hessian(self, u: np.ndarray) -> np.ndarray:
        if self.hess is not None:
            return self.hess(u)
        h = self.fd_step2
        d = u.shape[-1]
        out = np.empty(u.shape + (d,))
        f0 = self.value(u)
        for a in range(d):
            ea = np.zeros(d)
            ea[a] = h
            out[..., a, a] = (self.value(u + ea) - 2 * f0 + self.value(u - ea)) / h**2
            for b in range(a + 1, d):
                eb = np.zeros(d)
                eb[b] = h
                m = (self.value(u + ea + eb) - self.value(u + ea - eb)
                     - self.value(u - ea + eb) + self.value(u - ea - eb)) / (4 * h**2)
                out[..., a, b] = out[..., b, a] = m
        return out

    def without_derivatives(self) -> "TwoPointCost":
        return TwoPointCost(self.value, name=f"{self.name}[fd]", convex_1d=self.convex_1d,
                            fd_step=self.fd_step, fd_step2=self.fd_step2)


def squared_norm() -> TwoPointCost:
    """``V(u) = |u|^2``."""
    return TwoPointCost(
        value=lambda u: np.sum(u * u, axis=-1),
        grad=lambda u: 2.0 * u,
        hess=lambda u: 2.0 * np.broadcast_to(np.eye(u.shape[-1]), u.shape + (u.shape[-1],)),
        name="|u|^2",
    )


def two_point_generator(V2: TwoPointCost, field: CoefficientField, t: float, x, y,
                        mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Synchronous-coupling generator of ``V2(x - y)`` for two copies of the
    equation, one at ``(x, mu)`` and one at ``(y, nu)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    db = field.b(t, x, mu) - field.b(t, y, nu)
    ds = field.sigma(t, x, mu) - field.sigma(t, y, nu)
    u = (x - y)[None, :]
    val = float(db @ V2.gradient(u)[0] + 0.5 * np.sum(V2.hessian(u)[0] * (ds @ ds.T)))
    if not math.isfinite(val):
        raise GeneratorError("two-point")
    return val


# ---------------------------------------------------------------------------
# certificates


@dataclass(frozen=True)
class Certificate:
    """Rate constants attached to a (field, V) pair.

    ``kind`` is ``"H2"`` (lam, lam_tilde), ``"H6"`` (gamma) or ``"TwoPoint"``
    (gamma, beta, gamma_bar, beta_bar).  ``strict`` records whether the
    contraction constants satisfy gamma > beta and gamma_bar > beta_bar.
    """

    kind: str
    constants: dict
    note: str = ""

    def __post_init__(self):
        expected = {"H2": {"lam", "lam_tilde"}, "H6": {"gamma"},
                    "TwoPoint": {"gamma", "beta", "gamma_bar", "beta_bar"}}
        if self.kind not in expected:
            raise ValueError(f"unknown certificate kind {self.kind!r}")
        if set(self.constants) != expected[self.kind]:
            raise ValueError(f"{self.kind} needs constants {sorted(expected[self.kind])}")
        if any(v < 0 for v in self.constants.values()):
            raise ValueError("certificate constants must be nonnegative")

    @classmethod
    def h2(cls, lam: float, lam_tilde: float, note: str = "") -> "Certificate":
        return cls("H2", {"lam": float(lam), "lam_tilde": float(lam_tilde)}, note)

    @classmethod
    def h6(cls, gamma: float, note: str = "") -> "Certificate":
        return cls("H6", {"gamma": float(gamma)}, note)

    @classmethod
    def two_point(cls, gamma, beta, gamma_bar, beta_bar, note: str = "") -> "Certificate":
        return cls("TwoPoint", {"gamma": float(gamma), "beta": float(beta),
                                "gamma_bar": float(gamma_bar), "beta_bar": float(beta_bar)}, note)

    @property
    def strict(self) -> bool:
        c = self.constants
        if self.kind != "TwoPoint":
            return True
        return c["gamma"] > c["beta"] and c["gamma_bar"] > c["beta_bar"]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "constants": dict(self.constants), "strict": self.strict,
                "note": self.note}


def mu_digest(mu: EmpiricalMeasure) -> str:
    return hashlib.sha256(np.ascontiguousarray(mu.points).tobytes()).hexdigest()[:16]


def random_cloud(gen: np.random.Generator, dim: int = 1, max_particles: int = 64,
                 scale: float = 2.0) -> EmpiricalMeasure:
    m = int(gen.integers(1, max_particles + 1))
    center = gen.normal(0.0, scale, size=dim)
    spread = gen.uniform(0.0, scale)
    return EmpiricalMeasure._trusted(center + spread * gen.normal(size=(m, dim)))


def default_sampler(dim: int = 1, max_particles: int = 64, scale: float = 2.0,
                    two_point: bool = False, same_size: bool = True) -> Callable:
    """Random ``(x, mu)`` or ``(x, y, mu, nu)`` inputs for certificate checks.

    In the two-point case ``nu`` has the size of ``mu`` so the quasi-distance
    between them is an exact assignment problem.
    """

    def sample(gen: np.random.Generator):
        x = gen.normal(0.0, scale, size=dim)
        mu = random_cloud(gen, dim, max_particles, scale)
        if not two_point:
            return x, mu
        y = gen.normal(0.0, scale, size=dim)
        m = mu.size if same_size else int(gen.integers(1, max_particles + 1))
        nu_c = gen.normal(0.0, scale, size=dim)
        nu = EmpiricalMeasure._trusted(nu_c + gen.uniform(0, scale) * gen.normal(size=(m, dim)))
        return x, y, mu, nu

    return sample


# relative rounding slack when comparing a generator against its bound
CERT_RTOL = 1e-12


def _check_one(kind, V, fields, c, V2, sample, t):
    rows = []
    if kind == "TwoPoint":
        x, y, mu, nu = sample
        field, bar_field = fields
        wv = quasi_wasserstein(mu, nu, V2.as_cost())
        v = float(V2.value((x - y)[None, :])[0])
        for label, f, g, bb in (("L", field, c["gamma"], c["beta"]),
                                ("Lbar", bar_field, c["gamma_bar"], c["beta_bar"])):
            lhs = two_point_generator(V2, f, t, x, y, mu, nu)
            rows.append((label, x, mu, lhs, -g * v + bb * wv, {"y": y, "nu": nu}))
        return rows
    x, mu = sample
    field = fields[0]
    lhs = generator_L(V, field, t, x, mu)
    if kind == "H2":
        rhs = c["lam"] * V(x, mu) + c["lam_tilde"] * float(np.mean(V.value(mu.points, mu)))
    else:
        rhs = -c["gamma"]
    rows.append((kind, x, mu, lhs, rhs, {}))
    return rows


def check_certificate(V: LyapunovFunctional | None, fields, cert: Certificate,
                      sampler: Callable | None = None, samples: int = 1000, seed: int = 0,
                      V2: TwoPointCost | None = None, t: float = 0.0, workers: int = 1) -> dict:
    """Test a certificate's inequality on sampled inputs.

    ``fields`` is one field for H2/H6 and ``(field, bar_field)`` for TwoPoint.
    Sample ``i`` is drawn from its own seeded stream, so the report does not
    depend on ``workers``.  Violations are reported, never raised.
    """
    if isinstance(fields, CoefficientField):
        fields = (fields,)
    if cert.kind == "TwoPoint":
        if len(fields) != 2 or V2 is None:
            raise ValueError("TwoPoint certificates need (field, bar_field) and a two-point cost")
    elif V is None:
        raise ValueError(f"{cert.kind} certificates need a Lyapunov functional")
    dim = fields[0].dim
    if sampler is None:
        sampler = default_sampler(dim, two_point=cert.kind == "TwoPoint")

    def run(i: int):
        gen = rng.generator(rng.derive_seed(seed, i))
        return _check_one(cert.kind, V, fields, cert.constants, V2, sampler(gen), t)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(samples)))
    else:
        results = [run(i) for i in range(samples)]

    violations = []
    worst = math.inf
    for i, rows in enumerate(results):
        for label, x, mu, lhs, rhs, extra in rows:
            margin = rhs - lhs
            worst = min(worst, margin)
            slack = CERT_RTOL * max(1.0, abs(lhs), abs(rhs))
            if margin < -slack:
                rec = {"sample": i, "inequality": label, "x": np.asarray(x).tolist(),
                       "mu_digest": mu_digest(mu), "lhs": lhs, "rhs": rhs, "margin": margin}
                if extra:
                    rec["y"] = np.asarray(extra["y"]).tolist()
                    rec["nu_digest"] = mu_digest(extra["nu"])
                violations.append(rec)
    return {
        "kind": cert.kind,
        "constants": dict(cert.constants),
        "samples": samples,
        "violations": violations,
        "worst_margin": worst,
        "passed": not violations,
    }


def check_growth(field: CoefficientField, V: LyapunovFunctional, samples: int = 200,
                 seed: int = 0, t: float = 0.0) -> dict:
    """Sample ``|b|^(2 ell) + |sigma|^(2 ell) <= K (1 + V)`` from the field's growth hint."""
    if field.growth_hint is None:
        raise ValueError(f"field {field.name!r} carries no growth hint")
    ell, K = field.growth_hint
    sampler = default_sampler(field.dim)
    worst = math.inf
    failures = 0
    for i in range(samples):
        x, mu = sampler(rng.generator(rng.derive_seed(seed, i)))
        b = np.linalg.norm(field.b(t, x, mu))
        s = np.linalg.norm(field.sigma(t, x, mu))
        margin = K * (1 + V(x, mu)) - (b ** (2 * ell) + s ** (2 * ell))
        worst = min(worst, margin)
        failures += margin < 0
    return {"ell": ell, "K": K, "samples": samples, "failures": int(failures),
            "worst_margin": worst, "passed": failures == 0}


# ---------------------------------------------------------------------------
# Ito balance along simulated paths


@dataclass
class ItoBalance:
    residual: float
    std_error: float
    replicas: int
    ev_start: float
    ev_end: float
    generator_integral: float
    per_replica: np.ndarray = dc_field(repr=False)

    @property
    def z(self) -> float:
        return abs(self.residual) / self.std_error if self.std_error > 0 else (
            0.0 if self.residual == 0 else math.inf)

    def within(self, k: float = 3.0) -> bool:
        return abs(self.residual) <= k * self.std_error


def ito_balance(V: LyapunovFunctional, field: CoefficientField, init, cfg: SimConfig,
                replicas: int = 16) -> ItoBalance:
    """``E V(X_T, mu_T) - E V(X_0, mu_0) - sum_k E[LV(X_k, mu_k)] dt`` over replicas.

    Each replica is an independent particle system (seed derived from
    ``cfg.seed`` and the replica index); the standard error is the spread of
    the per-replica residuals.  ``init`` is a cloud or a callable
    ``seed -> cloud``.
    """
    res = np.empty(replicas)
    starts = np.empty(replicas)
    ends = np.empty(replicas)
    integrals = np.empty(replicas)
    for r in range(replicas):
        seed_r = rng.derive_seed(cfg.seed, r)
        cloud = init(seed_r) if callable(init) else init
        acc = {"int": 0.0}

        def observe(k, t, x, law, acc=acc):
            if k == 0:
                acc["start"] = float(np.mean(V.value(x, law)))
            if k == cfg.steps:
                acc["end"] = float(np.mean(V.value(x, law)))
            else:
                acc["int"] += float(np.mean(generator_L(V, field, t, x, law))) * cfg.dt

        simulate(field, cloud, cfg.with_(seed=seed_r, record_every=cfg.steps), observer=observe)
        starts[r], ends[r], integrals[r] = acc["start"], acc["end"], acc["int"]
        res[r] = acc["end"] - acc["start"] - acc["int"]
    se = float(res.std(ddof=1) / np.sqrt(replicas)) if replicas > 1 else math.inf
    return ItoBalance(float(res.mean()), se, replicas, float(starts.mean()), float(ends.mean()),
                      float(integrals.mean()), res)
