"""Interacting-particle Euler-Maruyama for McKean-Vlasov SDEs.

The law in the coefficients is replaced by the empirical measure of the
particle cloud, frozen at the start of every step.  Gaussian increments come
from :mod:`mvlab.rng`, so a run is a pure function of its inputs and seed.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import rng
from .measures import EmpiricalMeasure, pushforward_truncate, truncate_points

Drift = Callable[[float, np.ndarray, EmpiricalMeasure], np.ndarray]
Diffusion = Callable[[float, np.ndarray, EmpiricalMeasure], np.ndarray]


class BlowUpError(RuntimeError):
    """A particle left the finite numbers."""

    def __init__(self, particle: int, step: int, what: str = "state"):
        self.particle = particle
        self.step = step
        super().__init__(f"non-finite {what} for particle {particle} at step {step}")


@dataclass(frozen=True)
class CoefficientField:
    """Drift and diffusion evaluated against an empirical measure.

    ``drift(t, x, mu)`` takes a (k, d) array of states and returns (k, d);
    ``diffusion(t, x, mu)`` returns (k, d, noise_dim).  ``lipschitz`` is the
    constant L in ``|b(x,mu) - b(y,nu)| <= L(|x - y| + W_2(mu, nu))`` (same for
    sigma) when known, and ``growth_hint`` is an ``(ell, K)`` pair for
    ``|b|^(2 ell) + |sigma|^(2 ell) <= K (1 + V)``.
    """

    drift: Drift
    diffusion: Diffusion
    dim: int = 1
    noise_dim: int = 1
    name: str = "field"
    lipschitz: Optional[float] = None
    growth_hint: Optional[tuple[float, float]] = None
    law_dependent: bool = True

    def b(self, t: float, x, mu: EmpiricalMeasure) -> np.ndarray:
        """Drift at a single state vector."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self.drift(t, x[None, :], mu)[0]

    def sigma(self, t: float, x, mu: EmpiricalMeasure) -> np.ndarray:
        """Diffusion matrix (d, n) at a single state vector."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self.diffusion(t, x[None, :], mu)[0]


def zero_field(dim: int = 1, noise_dim: int = 1) -> CoefficientField:
    return CoefficientField(
        lambda t, x, mu: np.zeros_like(x),
        lambda t, x, mu: np.zeros(x.shape + (noise_dim,)),
        dim=dim, noise_dim=noise_dim, name="zero", lipschitz=0.0, law_dependent=False,
    )


def linear_field(a: float, s: float = 0.0) -> CoefficientField:
    """1-d ``b(x) = a x``, ``sigma(x) = s x`` with no law dependence."""
    return CoefficientField(
        lambda t, x, mu: a * x,
        lambda t, x, mu: (s * x)[..., None],
        name=f"linear(a={a:g}, s={s:g})", lipschitz=max(abs(a), abs(s)), law_dependent=False,
    )


def constant_field(c: float, s: float = 0.0) -> CoefficientField:
    """1-d ``b = c``, ``sigma = s``."""
    return CoefficientField(
        lambda t, x, mu: np.full_like(x, c),
        lambda t, x, mu: np.full(x.shape + (1,), s),
        name=f"constant(c={c:g}, s={s:g})", lipschitz=0.0, law_dependent=False,
    )


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    steps: int = 1000
    particles: int = 10_000
    seed: int = 0
    record_every: int = 1
    workers: int = 1
    # continue a run: times and noise counters start at this step
    start_step: int = 0

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if self.steps < 1 or self.particles < 1 or self.record_every < 1:
            raise ValueError("steps, particles and record_every must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.start_step < 0:
            raise ValueError("start_step must be >= 0")

    @property
    def horizon(self) -> float:
        return self.dt * self.steps

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


@dataclass
class Trajectory:
    times: np.ndarray
    clouds: list[EmpiricalMeasure]

    def states(self) -> np.ndarray:
        """Stacked states, shape (len(times), M, d)."""
        return np.stack([c.points for c in self.clouds])

    def summary(self, V=None) -> np.ndarray:
        """Rows ``(t, mean, second_moment[, V_mean])`` using the first coordinate."""
        rows = []
        for t, c in zip(self.times, self.clouds):
            row = [t, float(c.points[:, 0].mean()), float(np.mean(np.sum(c.points**2, axis=1)))]
            if V is not None:
                row.append(float(np.mean(V.value(c.points, c))))
            rows.append(row)
        return np.array(rows)


@dataclass
class CoupledTrajectory:
    times: np.ndarray
    bar_clouds: list[EmpiricalMeasure]
    law_clouds: list[EmpiricalMeasure]


@dataclass
class StoppedPath:
    path: Trajectory
    tau_index: np.ndarray  # first step with |X| >= n, or NEVER

    NEVER = -1


def _check_finite(x: np.ndarray, step: int, what: str = "state") -> None:
    bad = ~np.all(np.isfinite(x.reshape(x.shape[0], -1)), axis=1)
    if bad.any():
        raise BlowUpError(int(np.argmax(bad)), step, what)


def _increment(field: CoefficientField, t: float, x: np.ndarray, law: EmpiricalMeasure,
               dt: float, dW: np.ndarray) -> np.ndarray:
    b = field.drift(t, x, law)
    s = field.diffusion(t, x, law)
    return b * dt + np.einsum("kdn,kn->kd", s, dW)


def em_step(cloud: EmpiricalMeasure, field: CoefficientField, t: float, dt: float,
            noise: np.ndarray, step: int = 0) -> EmpiricalMeasure:
    """One synchronous Euler-Maruyama step; ``noise`` holds N(0, dt) increments (M, n)."""
    x = cloud.points
    noise = np.asarray(noise, dtype=float).reshape(x.shape[0], field.noise_dim)
    out = x + _increment(field, t, x, cloud, dt, noise)
    _check_finite(out, step + 1)
    return EmpiricalMeasure._trusted(out)


def _noise(cfg: SimConfig, k: int, count: int, width: int) -> np.ndarray:
    return np.sqrt(cfg.dt) * rng.step_normals(cfg.seed, cfg.start_step + k, count, width,
                                              workers=cfg.workers)


def _time(cfg: SimConfig, k: int) -> float:
    return (cfg.start_step + k) * cfg.dt


def _record_steps(cfg: SimConfig) -> set[int]:
    ks = set(range(0, cfg.steps + 1, cfg.record_every))
    ks.add(cfg.steps)
    return ks


Observer = Callable[[int, float, np.ndarray, EmpiricalMeasure], None]


def simulate(field: CoefficientField, init: EmpiricalMeasure, cfg: SimConfig,
             observer: Observer | None = None) -> Trajectory:
    """Particle approximation started from the cloud ``init``.

    ``observer(k, t, states, law)`` is called before every step and once at
    the horizon; it may not modify ``states``.
    """
    if init.dim != field.dim:
        raise ValueError(f"initial cloud has dimension {init.dim}, field expects {field.dim}")
    record = _record_steps(cfg)
    x = np.array(init.points)
    times, clouds = [], []
    for k in range(cfg.steps + 1):
        t = _time(cfg, k)
        law = EmpiricalMeasure._trusted(x)
        if k in record:
            times.append(t)
            clouds.append(law)
        if observer is not None:
            observer(k, t, law.points, law)
        if k == cfg.steps:
            break
        dW = _noise(cfg, k, x.shape[0], field.noise_dim)
        x = x + _increment(field, t, law.points, law, cfg.dt, dW)
        _check_finite(x, k + 1)
    return Trajectory(np.array(times), clouds)


def simulate_coupled(field: CoefficientField, bar_field: CoefficientField, x0,
                     mu0: EmpiricalMeasure, cfg: SimConfig, replicas: int | None = None,
                     observer: Callable | None = None,
                     replica_offset: int = 0) -> CoupledTrajectory:
    """Joint run of the law equation and replicas of the barred equation.

    The X-particles start from ``mu0``.  ``x0`` is either one state (copied
    ``replicas`` times, default one copy per X-particle) or an (R, d) array of
    replica starts.  Replica ``i`` and X-particle ``i`` use the same Brownian
    increments; replicas beyond the particle count get their own streams.
    ``replica_offset`` shifts the replicas onto noise rows
    ``offset .. offset+R-1``, so a batch of replicas can be split into
    separate runs without changing any path.
    ``observer(k, t, bar_states, law)`` sees every step.
    """
    if field.noise_dim != bar_field.noise_dim:
        raise ValueError("both equations must be driven by the same noise dimension")
    x0 = np.asarray(x0, dtype=float)
    M = mu0.size
    if x0.ndim <= 1:
        R = M if replicas is None else int(replicas)
        xb = np.tile(np.atleast_1d(x0), (R, 1))
    else:
        xb = np.array(x0)
        R = xb.shape[0]
    if xb.shape[1] != bar_field.dim or mu0.dim != field.dim:
        raise ValueError("dimension mismatch between starts and fields")
    record = _record_steps(cfg)
    x = np.array(mu0.points)
    n = field.noise_dim
    times, bars, laws = [], [], []
    for k in range(cfg.steps + 1):
        t = _time(cfg, k)
        law = EmpiricalMeasure._trusted(x)
        if k in record:
            times.append(t)
            bars.append(EmpiricalMeasure._trusted(xb))
            laws.append(law)
        if observer is not None:
            observer(k, t, xb, law)
        if k == cfg.steps:
            break
        dW = _noise(cfg, k, max(M, replica_offset + R), n)
        x_new = x + _increment(field, t, law.points, law, cfg.dt, dW[:M])
        xb = xb + _increment(bar_field, t, xb, law, cfg.dt, dW[replica_offset:replica_offset + R])
        _check_finite(x_new, k + 1)
        _check_finite(xb, k + 1, "replica state")
        x = x_new
    return CoupledTrajectory(np.array(times), bars, laws)


def truncated_field(field: CoefficientField, n: float) -> CoefficientField:
    """Coefficients read at the truncated state and the truncated law."""

    def drift(t, x, mu):
        return field.drift(t, truncate_points(x, n), pushforward_truncate(mu, n))

    def diffusion(t, x, mu):
        return field.diffusion(t, truncate_points(x, n), pushforward_truncate(mu, n))

    return CoefficientField(drift, diffusion, dim=field.dim, noise_dim=field.noise_dim,
                            name=f"{field.name}|trunc({n:g})", lipschitz=field.lipschitz,
                            growth_hint=field.growth_hint, law_dependent=field.law_dependent)


def stopped_simulate(field: CoefficientField, init: EmpiricalMeasure, cfg: SimConfig,
                     n: float) -> StoppedPath:
    """Particles freeze the first time ``|X| >= n``.

    A particle that overshoots during its exit step is frozen at the radial
    projection of its exit value, the discrete counterpart of the hitting
    point on the sphere; the law keeps reading frozen particles.
    """
    record = _record_steps(cfg)
    x = truncate_points(np.array(init.points), n)
    outside = np.linalg.norm(init.points, axis=1) >= n
    tau = np.where(outside, 0, StoppedPath.NEVER)
    times, clouds = [], []
    for k in range(cfg.steps + 1):
        t = _time(cfg, k)
        law = EmpiricalMeasure._trusted(x)
        if k in record:
            times.append(t)
            clouds.append(law)
        if k == cfg.steps:
            break
        dW = _noise(cfg, k, x.shape[0], field.noise_dim)
        active = tau == StoppedPath.NEVER
        x_new = x.copy()
        if active.any():
            moved = x[active] + _increment(field, t, x[active], law, cfg.dt, dW[active])
            _check_finite(moved, k + 1)
            exited = np.linalg.norm(moved, axis=1) >= n
            moved[exited] = truncate_points(moved[exited], n)
            x_new[active] = moved
            idx = np.flatnonzero(active)[exited]
            tau[idx] = k + 1
        x = x_new
    return StoppedPath(Trajectory(np.array(times), clouds), tau)


def first_exit_index(states: np.ndarray, n: float) -> np.ndarray:
    """Per particle, first recorded index with ``|x| >= n`` (or NEVER); states (T, M, d)."""
    hit = np.linalg.norm(states, axis=2) >= n
    any_hit = hit.any(axis=0)
    return np.where(any_hit, np.argmax(hit, axis=0), StoppedPath.NEVER)


def truncation_equivalence(field: CoefficientField, init: EmpiricalMeasure, cfg: SimConfig,
                           n: float) -> dict:
    """Compare the truncated-coefficient run with the stopped run under shared noise.

    For every particle checks, bit for bit, that the truncated state of the
    first run equals the stopped state at every step up to that particle's
    exit index (or the horizon if it never exits).
    """
    cfg1 = cfg.with_(record_every=1)
    truncated = simulate(truncated_field(field, n), init, cfg1).states()
    stopped = stopped_simulate(field, init, cfg1, n)
    ys = stopped.path.states()
    tau_trunc = first_exit_index(truncated, n)
    projected = truncate_points(truncated.reshape(-1, truncated.shape[2]), n).reshape(truncated.shape)
    T = truncated.shape[0]
    upto = np.where(stopped.tau_index == StoppedPath.NEVER, T - 1, stopped.tau_index)
    steps = np.arange(T)[:, None]
    relevant = steps <= upto[None, :]
    mismatch = np.any(projected != ys, axis=2) & relevant
    bad = np.flatnonzero(mismatch.any(axis=0))
    first_bad = {int(i): int(np.argmax(mismatch[:, i])) for i in bad[:20]}
    # a truncated particle that exits and comes back changes the truncated law
    # while its stopped twin stays frozen; from then on the two runs read
    # different measures
    inside_later = np.linalg.norm(truncated, axis=2) < n
    reentry = inside_later & (steps > np.where(tau_trunc == StoppedPath.NEVER, T, tau_trunc)[None, :])
    first_reentry = int(np.argmax(reentry.any(axis=1))) if reentry.any() else None
    return {
        "particles": int(truncated.shape[1]),
        "steps": int(T - 1),
        "radius": float(n),
        "exited": int(np.sum(stopped.tau_index != StoppedPath.NEVER)),
        "tau_agree": bool(np.array_equal(tau_trunc, stopped.tau_index)),
        "mismatched_particles": int(len(bad)),
        "first_mismatch_steps": first_bad,
        "agree_through_step": int(np.argmax(mismatch.any(axis=1))) - 1 if bad.size else int(T - 1),
        "reentered": int(np.sum(reentry.any(axis=0))),
        "first_reentry_step": first_reentry,
        "holds": bool(len(bad) == 0 and np.array_equal(tau_trunc, stopped.tau_index)),
    }
