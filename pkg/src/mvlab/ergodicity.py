"""Monte Carlo estimators for the lifted semigroup and its long-time behaviour.

``P_t f(x, mu) = E f(Xbar_t, law(X_t))`` is estimated from replicas of the
barred equation started at ``x`` and one particle approximation of the law
started at ``mu``.  All replicas in one estimate read the same law path, so
reported standard errors are conditional on that path.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng
from .dynamics import CoefficientField, SimConfig, simulate, simulate_coupled
from .lyapunov import Certificate, LyapunovFunctional, TwoPointCost, coupled_generator
from .measures import EmpiricalMeasure
from .transport import levy_prohorov_1d, optimal_plan, power_cost, quasi_wasserstein, wasserstein_p

# f(states (k, d), law) -> (k,)
TestFunction = Callable[[np.ndarray, EmpiricalMeasure], np.ndarray]

DEFAULT_INNER_REPLICAS = 64
DEFAULT_OUTER_REPLICAS = 256
DEFAULT_NESTED_BUDGET = 1 << 20


@dataclass(frozen=True)
class SemigroupEstimate:
    value: float
    std_error: float
    replicas: int
    t: float

    def to_dict(self) -> dict:
        return {"value": self.value, "std_error": self.std_error, "replicas": self.replicas,
                "t": self.t}


@dataclass(frozen=True)
class DecayFit:
    rate: float
    intercept: float
    r_squared: float
    window: tuple

    def to_dict(self) -> dict:
        return {"rate": self.rate, "intercept": self.intercept, "r_squared": self.r_squared,
                "window": list(self.window)}


@dataclass(frozen=True)
class InvariantEstimate:
    cloud: EmpiricalMeasure
    burn_in: float
    cesaro: bool
    stationarity_gap: float


def steps_for(t: float, dt: float) -> int:
    """Number of steps of size ``dt`` reaching ``t``; ``t`` must sit on the grid."""
    k = int(round(t / dt))
    if k < 0 or abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} is not a nonnegative multiple of dt = {dt}")
    return k


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("test function produced non-finite values")
    se = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return float(values.mean()), se


def estimate_Ptf(f: TestFunction, field: CoefficientField, bar_field: CoefficientField, x,
                 mu: EmpiricalMeasure, t: float, cfg: SimConfig, replicas: int | None = None,
                 replica_offset: int = 0) -> SemigroupEstimate:
    """Replica mean of ``f(Xbar_t, mu_t)``; ``t = 0`` returns ``f(x, mu)`` exactly."""
    steps = steps_for(t, cfg.dt)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    R = mu.size if replicas is None else int(replicas)
    if steps == 0:
        val = float(np.asarray(f(x[None, :], mu))[0])
        return SemigroupEstimate(val, 0.0, R, 0.0)
    traj = simulate_coupled(field, bar_field, x, mu, cfg.with_(steps=steps, record_every=steps),
                            replicas=R, replica_offset=replica_offset)
    vals = f(traj.bar_clouds[-1].points, traj.law_clouds[-1])
    value, se = _mean_se(vals)
    return SemigroupEstimate(value, se, R, t)


def check_semigroup(f: TestFunction, field: CoefficientField, bar_field: CoefficientField, x,
                    mu: EmpiricalMeasure, s: float, t: float, cfg: SimConfig,
                    outer: int = DEFAULT_OUTER_REPLICAS, inner: int = DEFAULT_INNER_REPLICAS,
                    budget: int = DEFAULT_NESTED_BUDGET, direct_replicas: int | None = None,
                    k_se: float = 3.0) -> dict:
    """Compare ``P_{s+t} f`` with the nested estimate of ``P_t (P_s f)``.

    Both estimators use one seed, so the law path over ``[0, s+t]`` is the
    same in both and the comparison only sees replica noise.  The outer
    stage runs ``outer`` replicas to time ``t``; from every realized pair
    ``(Xbar_t, mu_t)`` the inner stage runs ``inner`` replicas for time ``s``,
    all continuing the same law cloud in one batch.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    report = {"s": s, "t": t, "outer": outer, "inner": inner, "budget": budget}
    if outer * inner > budget:
        report.update(ok=False, overflow=True,
                      message=f"nested budget {budget} exceeded by {outer} x {inner} replicas")
        return report
    ks, kt = steps_for(s, cfg.dt), steps_for(t, cfg.dt)
    direct = estimate_Ptf(f, field, bar_field, x, mu, s + t, cfg, replicas=direct_replicas)

    if kt == 0:
        starts, law_t = x[None, :], mu
    else:
        out = simulate_coupled(field, bar_field, x, mu, cfg.with_(steps=kt, record_every=kt),
                               replicas=outer)
        starts, law_t = out.bar_clouds[-1].points, out.law_clouds[-1]
    n_outer = starts.shape[0]
    if ks == 0:
        g = np.asarray(f(starts, law_t), dtype=float)
        inner_used = 1
    else:
        x0 = np.repeat(starts, inner, axis=0)
        cont = cfg.with_(steps=ks, record_every=ks, start_step=cfg.start_step + kt)
        run = simulate_coupled(field, bar_field, x0, law_t, cont)
        vals = np.asarray(f(run.bar_clouds[-1].points, run.law_clouds[-1]), dtype=float)
        g = vals.reshape(n_outer, inner).mean(axis=1)
        inner_used = inner
    nested, nested_se = _mean_se(g) if n_outer > 1 else (float(g[0]), 0.0)
    if n_outer == 1 and ks > 0:
        nested_se = float(vals.std(ddof=1) / math.sqrt(inner))
    diff = abs(direct.value - nested)
    combined = math.hypot(direct.std_error, nested_se)
    report.update(
        overflow=False,
        direct=direct.to_dict(),
        nested={"value": nested, "std_error": nested_se, "outer": int(n_outer),
                "inner": int(inner_used)},
        difference=diff,
        combined_std_error=combined,
        z=diff / combined if combined > 0 else (0.0 if diff == 0 else math.inf),
        ok=bool(diff <= k_se * combined),
    )
    return report


def pushforward_conjugacy(f: TestFunction, field: CoefficientField, bar_field: CoefficientField,
                          nu: EmpiricalMeasure, mu: EmpiricalMeasure, t: float, cfg: SimConfig,
                          replicas: int = 16) -> dict:
    """``int P_t f d nu`` against ``int f d P_t*(nu x delta_mu)`` under shared noise.

    The ensemble run places ``replicas`` copies of every point of ``nu`` on
    consecutive noise rows; each per-point estimate reuses exactly those rows.
    """
    steps = steps_for(t, cfg.dt)
    run_cfg = cfg.with_(steps=max(steps, 1), record_every=max(steps, 1))
    if steps == 0:
        ens = float(np.mean(f(np.repeat(nu.points, replicas, axis=0), mu)))
    else:
        x0 = np.repeat(nu.points, replicas, axis=0)
        run = simulate_coupled(field, bar_field, x0, mu, run_cfg)
        ens = float(np.mean(f(run.bar_clouds[-1].points, run.law_clouds[-1])))
    per_point = [estimate_Ptf(f, field, bar_field, p, mu, t, cfg, replicas=replicas,
                              replica_offset=j * replicas).value
                 for j, p in enumerate(nu.points)]
    avg = float(np.mean(per_point))
    return {"averaged_Ptf": avg, "pushforward_integral": ens, "difference": abs(avg - ens)}


def fokker_planck_residual(f: LyapunovFunctional, field: CoefficientField,
                           bar_field: CoefficientField, x, mu: EmpiricalMeasure,
                           times: Sequence[float], cfg: SimConfig, replicas: int | None = None,
                           k_se: float = 3.0) -> dict:
    """Weak-form residual of the lifted forward equation on each grid interval.

    Per replica, ``f(end) - f(start) - sum_k (L1bar + L2) f dt`` over the
    interval; the residual is the replica mean with its standard error.
    """
    ticks = [steps_for(tt, cfg.dt) for tt in times]
    if sorted(ticks) != ticks or len(ticks) < 2:
        raise ValueError("times must be an increasing grid with at least two points")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    R = mu.size if replicas is None else int(replicas)
    values: dict[int, np.ndarray] = {}
    gen_sum = np.zeros(R)
    partial: dict[int, np.ndarray] = {}
    tick_set = set(ticks)

    def observe(k, t, xb, law):
        if k in tick_set:
            values[k] = np.array(f.value(xb, law), dtype=float)
            partial[k] = gen_sum.copy()
        if k < ticks[-1]:
            gen_sum[:] += coupled_generator(f, field, bar_field, t, xb, law) * cfg.dt

    simulate_coupled(field, bar_field, x, mu, cfg.with_(steps=ticks[-1], record_every=ticks[-1]),
                     replicas=R, observer=observe)
    rows = []
    for a, b in zip(ticks[:-1], ticks[1:]):
        per = values[b] - values[a] - (partial[b] - partial[a])
        res, se = _mean_se(per)
        rows.append({"t0": a * cfg.dt, "t1": b * cfg.dt, "residual": res, "std_error": se,
                     "ok": bool(abs(res) <= k_se * se) if se > 0 else None})
    return {"intervals": rows, "replicas": R}


# ---------------------------------------------------------------------------
# Feller continuity in the initial law


def feller_constant(lipschitz: float) -> float:
    """Growth rate for ``E|X - X'|^2`` under Lipschitz coefficients.

    With ``|b - b'|, |sigma - sigma'| <= L(|x - y| + W_2)`` and the particle
    coupling bounding ``W_2^2`` by ``E|X - X'|^2``, Ito gives
    ``d/dt E|X - X'|^2 <= (4L + 4L^2) E|X - X'|^2``.
    """
    return 4.0 * lipschitz + 4.0 * lipschitz**2


def _paired_start(mu_n: EmpiricalMeasure, mu: EmpiricalMeasure) -> tuple[np.ndarray, float]:
    """Reorder ``mu``'s points so index i is coupled with ``mu_n``'s point i optimally."""
    plan = optimal_plan(mu_n, mu, power_cost(2.0))
    return mu.points[plan.assignment], plan.cost


def feller_modulus(field: CoefficientField, mu_sequence: Sequence[EmpiricalMeasure],
                   mu_limit: EmpiricalMeasure, t: float, cfg: SimConfig,
                   C: float | None = None) -> dict:
    """Squared-moment Feller check ``E|X^n_t - X_t|^2 <= e^{Ct} W_2(mu_n, mu)^2``.

    Each pair of particle systems starts optimally coupled and shares noise
    index by index.
    """
    if C is None:
        if field.lipschitz is None:
            raise ValueError(f"field {field.name!r} has no Lipschitz constant; pass C")
        C = feller_constant(field.lipschitz)
    steps = steps_for(t, cfg.dt)
    run_cfg = cfg.with_(steps=max(steps, 1), record_every=max(steps, 1))
    bound = math.exp(C * t)
    rows = []
    for idx, mu_n in enumerate(mu_sequence):
        lim_pts, w2sq = _paired_start(mu_n, mu_limit)
        if steps == 0:
            lhs = float(np.mean(np.sum((mu_n.points - lim_pts) ** 2, axis=1)))
        else:
            a = simulate(field, mu_n, run_cfg).clouds[-1].points
            b = simulate(field, EmpiricalMeasure._trusted(lim_pts), run_cfg).clouds[-1].points
            lhs = float(np.mean(np.sum((a - b) ** 2, axis=1)))
        rhs = bound * w2sq
        rows.append({
            "index": idx,
            "w2_initial_sq": w2sq,
            "moment_sq": lhs,
            "rhs": rhs,
            "ratio": lhs / w2sq if w2sq > 0 else None,
            # rounding slack for the exact-equality cases (zero noise, zero drift)
            "holds": bool(lhs <= rhs * (1 + 1e-12) + 1e-300),
        })
    return {"t": t, "C": C, "exp_Ct": bound, "rows": rows, "ok": all(r["holds"] for r in rows)}


# ---------------------------------------------------------------------------
# invariant measures and decay


def estimate_invariant(field: CoefficientField, init: EmpiricalMeasure, cfg: SimConfig,
                       burn_in: float | None = None, cesaro: bool = True,
                       gap_time: float | None = None) -> InvariantEstimate:
    """Krylov-Bogolioubov (time-averaged) or terminal-cloud invariant estimate.

    Cesaro mode pools every recorded cloud after ``burn_in`` and keeps every
    K-th point of the pool (K = number of pooled clouds), so the estimate has
    the run's particle count.  The stationarity gap is ``W_2`` between the
    estimate and the estimate evolved for ``gap_time`` more.
    """
    T = cfg.horizon
    burn_in = 0.1 * T if burn_in is None else float(burn_in)
    gap_time = 0.1 * T if gap_time is None else float(gap_time)
    traj = simulate(field, init, cfg)
    if cesaro:
        keep = [c.points for tt, c in zip(traj.times, traj.clouds) if tt >= burn_in - 1e-12]
        if not keep:
            raise ValueError("burn-in leaves no recorded clouds")
        pooled = np.concatenate(keep, axis=0)
        cloud = EmpiricalMeasure._trusted(pooled[::len(keep)][: init.size])
    else:
        cloud = traj.clouds[-1]
    gap_steps = max(steps_for(round(gap_time / cfg.dt) * cfg.dt, cfg.dt), 1)
    later = simulate(field, cloud, cfg.with_(steps=gap_steps, record_every=gap_steps,
                                             seed=rng.derive_seed(cfg.seed, 1)))
    gap = wasserstein_p(cloud, later.clouds[-1], 2.0)
    return InvariantEstimate(cloud, burn_in, cesaro, gap)


def fit_decay(series: Sequence[tuple[float, float]]) -> DecayFit:
    """Least-squares line through ``(t, log v)``; ``rate`` is minus the slope."""
    arr = np.asarray(series, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
        raise ValueError("need at least three (t, value) pairs")
    t, v = arr[:, 0], arr[:, 1]
    if not np.all(v > 0):
        raise ValueError("decay fits need strictly positive values")
    y = np.log(v)
    tm, ym = t.mean(), y.mean()
    stt = np.sum((t - tm) ** 2)
    if stt == 0:
        raise ValueError("times must not all coincide")
    slope = float(np.sum((t - tm) * (y - ym)) / stt)
    intercept = float(ym - slope * tm)
    ss_tot = float(np.sum((y - ym) ** 2))
    ss_res = float(np.sum((y - (intercept + slope * t)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return DecayFit(-slope, intercept, r2, (float(t.min()), float(t.max())))


JACKKNIFE_GROUPS = 20


def cloud_mean_se(V: LyapunovFunctional, cloud: EmpiricalMeasure,
                  groups: int = JACKKNIFE_GROUPS) -> float:
    """Grouped-jackknife std error of ``mean_i V(x_i, cloud)``.

    Dropping a block of particles also changes the law argument, so the
    error of law-dependent parts such as ``int y^6 dmu`` is included.
    """
    M = cloud.size
    G = min(groups, M)
    if G < 2:
        return 0.0
    blocks = np.array_split(np.arange(M), G)
    est = np.empty(G)
    for g, drop in enumerate(blocks):
        keep = np.ones(M, dtype=bool)
        keep[drop] = False
        sub = EmpiricalMeasure._trusted(cloud.points[keep])
        est[g] = float(np.mean(V.value(sub.points, sub)))
    return float(math.sqrt((G - 1) / G * np.sum((est - est.mean()) ** 2)))


def decay_experiment(field: CoefficientField, V: LyapunovFunctional, init: EmpiricalMeasure,
                     cfg: SimConfig, window_start: float | None = None,
                     certificate: Certificate | None = None, k_se: float = 3.0) -> dict:
    """Fit the decay of ``E V(X_t, mu_t)`` after the transient.

    With an H2 certificate the moment bound ``E V_t <= e^{(lam + lam_tilde) t} E V_0``
    (the second constant enters through ``int V dmu = E V``) is checked at every
    recorded time, allowing ``k_se`` jackknife std errors of the cloud mean.
    """
    T = cfg.horizon
    window_start = 0.1 * T if window_start is None else float(window_start)
    traj = simulate(field, init, cfg)
    series = [(float(tt), float(np.mean(V.value(c.points, c)))) for tt, c in
              zip(traj.times, traj.clouds)]
    window = [(tt, v) for tt, v in series if tt >= window_start - 1e-12]
    fit = fit_decay(window)
    report = {"series": series, "fit": fit.to_dict(), "window_start": window_start}
    if certificate is not None and certificate.kind == "H2":
        c = certificate.constants
        rate = c["lam"] + c["lam_tilde"]
        ses = [cloud_mean_se(V, cl) for cl in traj.clouds]
        ev0 = series[0][1]
        margins = [ev0 * math.exp(rate * tt) * (1 + 1e-12) - v for tt, v in series]
        holds = all(m >= -k_se * se for m, se in zip(margins, ses))
        report["series_std_error"] = ses
        report["moment_bound"] = {"rate": rate, "worst_margin": min(margins), "k_se": k_se,
                                  "holds": bool(holds)}
    return report


def contraction_rhs(t: np.ndarray | float, wv_bar0: float, wv_law0: float,
                    cert: Certificate) -> np.ndarray:
    """Two-term contraction bound for the coupled pair at time ``t``.

    ``wv_bar0`` is the initial quasi-distance of the barred laws and
    ``wv_law0`` that of the X-laws.  When ``gamma_bar + beta - gamma = 0``
    the middle term takes its limiting ``t e^{-gamma_bar t}`` form.
    """
    c = cert.constants
    g, b, gb, bb = c["gamma"], c["beta"], c["gamma_bar"], c["beta_bar"]
    t = np.asarray(t, dtype=float)
    k = gb + b - g
    if k == 0:
        cross = bb * t * np.exp(-gb * t)
    else:
        cross = bb / k * (np.exp((b - g) * t) - np.exp(-gb * t))
    return wv_bar0 * np.exp(-gb * t) + wv_law0 * (np.exp(-(g - b) * t) + cross)


def contraction_experiment(field: CoefficientField, bar_field: CoefficientField,
                           V2: TwoPointCost, start_a: tuple, start_b: tuple, cfg: SimConfig,
                           cert: Certificate, k_se: float = 3.0) -> dict:
    """Two coupled systems under shared noise against the contraction bound.

    ``start_a = (x, mu)`` and ``start_b = (y, nu)``.  At each recorded time
    the replica mean of ``V2(Xbar - Ybar)`` plus ``W_V(mu_t, nu_t)`` is
    compared with the bound; the synchronous coupling can only overstate the
    barred quasi-distance, so this tests the bound conservatively.
    """
    if cert.kind != "TwoPoint":
        raise ValueError("contraction needs a TwoPoint certificate")
    (x, mu), (y, nu) = start_a, start_b
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    cost = V2.as_cost()
    a = simulate_coupled(field, bar_field, x, mu, cfg)
    b = simulate_coupled(field, bar_field, y, nu, cfg)
    wv_bar0 = float(V2.value((x - y)[None, :])[0])
    wv_law0 = quasi_wasserstein(mu, nu, cost)
    rows = []
    first_bad = None
    for i, tt in enumerate(a.times):
        diff = a.bar_clouds[i].points - b.bar_clouds[i].points
        ev2, se = _mean_se(V2.value(diff))
        wv = quasi_wasserstein(a.law_clouds[i], b.law_clouds[i], cost)
        rhs = float(contraction_rhs(tt, wv_bar0, wv_law0, cert))
        lhs = ev2 + wv
        slack = k_se * se + 1e-12 * max(1.0, rhs)
        ok = bool(lhs <= rhs + slack)
        if not ok and first_bad is None:
            first_bad = float(tt)
        rows.append({"t": float(tt), "EV2": ev2, "EV2_std_error": se, "W_V": wv, "rhs": rhs,
                     "lhs": lhs, "ok": ok})
    return {"constants": dict(cert.constants), "initial": {"W_V_bar": wv_bar0, "W_V_law": wv_law0},
            "rows": rows, "first_violation": first_bad, "ok": first_bad is None}


def omega_ratio(field: CoefficientField, mu: EmpiricalMeasure, nu: EmpiricalMeasure, t: float,
                cfg: SimConfig) -> dict:
    """Empirical ``omega(mu_t, nu_t) / omega(mu, nu)`` in one dimension, shared noise."""
    steps = max(steps_for(t, cfg.dt), 1)
    run_cfg = cfg.with_(steps=steps, record_every=steps)
    w0 = levy_prohorov_1d(mu, nu)
    wt = levy_prohorov_1d(simulate(field, mu, run_cfg).clouds[-1],
                          simulate(field, nu, run_cfg).clouds[-1])
    return {"omega_0": w0, "omega_t": wt, "ratio": wt / w0 if w0 > 0 else None}


def time_series_csv(rows: Sequence[tuple]) -> str:
    """CSV with columns ``t, quantity, value, std_error``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "quantity", "value", "std_error"])
    for t, q, v, se in rows:
        w.writerow([repr(float(t)), q, repr(float(v)), "" if se is None else repr(float(se))])
    return buf.getvalue()
