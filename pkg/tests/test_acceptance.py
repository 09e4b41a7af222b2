"""Acceptance criteria 1-12, each at its stated size and tolerance.

Every criterion records one PASS/FAIL line (shown in the terminal summary).
Criteria run at seed 0.  Criterion 12 reruns the others with a different
worker count and compares their primary outputs byte for byte.
"""
import io
import json
import math
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from mvlab import cli, rng
from mvlab.config import sample_init
from mvlab.dynamics import SimConfig, truncation_equivalence
from mvlab.ergodicity import feller_modulus
from mvlab.examples import builtin
from mvlab.lyapunov import generator_L, ito_balance, lions_derivative_fd, random_cloud
from mvlab.measures import EmpiricalMeasure, point_mass
from mvlab.transport import (check_prohorov_bound, difference_cost, optimal_plan, power_cost)
from oracles import brute_force_transport, exact_transport_check

pytestmark = pytest.mark.slow

SEED = 0
ALT_WORKERS = 4
_cache: dict = {}


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, default=lambda o: np.asarray(o).tolist()).encode()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def run_cli(workdir: Path, experiment: str, system: str, config: str, workers: int):
    """In-process CLI run; returns (exit code, output dir, seconds)."""
    cfg = workdir / f"{experiment}-{system}.toml"
    cfg.write_text(config)
    out = workdir / f"w{workers}"
    buf = io.StringIO()
    t0 = time.perf_counter()
    with redirect_stdout(buf):
        code = cli.main([experiment, "--system", system, "--config", str(cfg), "--seed",
                         str(SEED), "--workers", str(workers), "--out", str(out)])
    return code, Path(buf.getvalue().splitlines()[0]), time.perf_counter() - t0


def dir_bytes(d: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def cached(key, fn):
    if key not in _cache:
        _cache[key] = fn()
    return _cache[key]


# ---------------------------------------------------------------------------
# criteria run through the library


def crit1(workers: int):
    s = builtin("ex5_2")
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(200):
        gen = rng.generator(rng.derive_seed(SEED, i))
        x = gen.normal(0.0, 1.5, size=1)
        mu = random_cloud(gen, 1, 64, 1.5)
        want = -1.5 * (x[0] - mu.points[:, 0].mean()) ** 4
        got = generator_L(s.V, s.field, 0.0, x, mu)
        worst = max(worst, abs(got - want) / abs(want))
    secs = time.perf_counter() - t0
    return {"worst_rel_err": worst, "seconds": secs}


def crit2(workers: int):
    t0 = time.perf_counter()
    worst = {}
    for name in ("ex5_1", "ex5_2", "ex5_3"):
        V = builtin(name).V
        w = 0.0
        for i in range(100):
            gen = rng.generator(rng.derive_seed(SEED, i, 2))
            x = gen.normal(0.0, 1.5, size=1)
            mu = random_cloud(gen, 1, 64, 1.5)
            an = np.broadcast_to(V.lions(x[None, :], mu, mu.points), (1, mu.size, 1))[0, :, 0]
            for j in range(mu.size):
                fd = lions_derivative_fd(V, x, mu, j)[0]
                # relative to max(|analytic|, 1): the derivative vanishes at x = m for ex5_2
                w = max(w, abs(fd - an[j]) / max(abs(an[j]), 1.0))
        worst[name] = w
    return {"worst_rel_err": worst, "seconds": time.perf_counter() - t0}


def crit4(workers: int):
    s = builtin("ex5_1")
    cfg = SimConfig(dt=1e-3, steps=500, particles=10_000, seed=SEED, workers=workers)
    t0 = time.perf_counter()
    res = ito_balance(s.V, s.field, lambda sd: sample_init(s.default_init, 10_000, sd), cfg,
                      replicas=16)
    return {"residual": res.residual, "std_error": res.std_error, "z": res.z,
            "per_replica": res.per_replica, "seconds": time.perf_counter() - t0}


def crit6(workers: int):
    u2 = difference_cost(lambda u: np.sum(u * u, axis=-1), "u^2", convex_1d=True)
    u4 = difference_cost(lambda u: np.sum(u * u, axis=-1) ** 2, "u^4", convex_1d=True)
    costs = {
        "W_1": (power_cost(1.0), lambda a, b: abs(a - b)),
        "W_2": (power_cost(2.0), lambda a, b: (a - b) ** 2),
        "W_V(u^2)": (u2, lambda a, b: (a - b) ** 2),
        "W_V(u^4)": (u4, lambda a, b: (a - b) ** 4),
    }
    g = rng.generator(rng.derive_seed(SEED, 6))
    t0 = time.perf_counter()
    failures = {k: 0 for k in costs}
    float_gap = {k: 0.0 for k in costs}
    for inst in range(500):
        m = int(g.integers(1, 8))
        if inst % 2:
            # coarse grid: ties and coincident atoms
            x, y = g.integers(-4, 5, size=m) / 2.0, g.integers(-4, 5, size=m) / 2.0
        else:
            x, y = g.normal(size=m), g.normal(size=m)
        mu, nu = EmpiricalMeasure(x), EmpiricalMeasure(y)
        for k, (cost, exact) in costs.items():
            plan = optimal_plan(mu, nu, cost, method="monotone")
            ok, _ = exact_transport_check(x, y, exact, exact, plan.assignment)
            failures[k] += not ok
            if m <= 5:
                best = brute_force_transport(x, y, exact)
                float_gap[k] = max(float_gap[k], abs(plan.cost - best))
    return {"failures": failures, "float_gap": float_gap, "seconds": time.perf_counter() - t0}


def crit7(workers: int):
    g = rng.generator(rng.derive_seed(SEED, 7))
    t0 = time.perf_counter()
    violations, worst = 0, math.inf
    for inst in range(100):
        m = int(g.integers(1, 30))
        mu = EmpiricalMeasure(g.normal(0.0, g.uniform(0.1, 2.0), size=m))
        nu = EmpiricalMeasure(g.normal(g.normal(), g.uniform(0.1, 2.0), size=m))
        for p in (1.0, 2.0):
            rep = check_prohorov_bound(mu, nu, p)
            violations += not rep["holds"]
            worst = min(worst, rep["margin"])
    return {"violations": violations, "worst_margin": worst, "seconds": time.perf_counter() - t0}


def crit8(workers: int):
    s = builtin("ex5_1")
    init = sample_init(s.default_init, 1000, SEED)
    cfg = SimConfig(dt=1e-3, steps=1000, particles=1000, seed=SEED, workers=workers)
    t0 = time.perf_counter()
    rep = truncation_equivalence(s.field, init, cfg, 2.0)
    rep["seconds"] = time.perf_counter() - t0
    return rep


def crit10(workers: int):
    s = builtin("ex5_2")
    M = 10_000
    seq = [point_mass(1.0 / n, M) for n in (1, 2, 4, 8)]
    cfg = SimConfig(dt=1e-3, steps=1, particles=M, seed=SEED, workers=workers)
    t0 = time.perf_counter()
    rep = feller_modulus(s.field, seq, point_mass(0.0, M), 1.0, cfg)
    rep["seconds"] = time.perf_counter() - t0
    return rep


LIBRARY = {1: crit1, 2: crit2, 4: crit4, 6: crit6, 7: crit7, 8: crit8, 10: crit10}


def lib(n: int, workers: int = 1) -> dict:
    return cached(("lib", n, workers), lambda: LIBRARY[n](workers))


def strip_time(rep: dict) -> dict:
    return {k: v for k, v in rep.items() if k != "seconds"}


# ---------------------------------------------------------------------------
# criteria run through the CLI

CLI_RUNS = {
    3: ("decay", "ex5_2", """
[sim]
dt = 1e-3
T = 1.5
particles = 10000
record_every = 10
[params]
rate_range = [5.4, 6.6]
"""),
    5: ("certify", "ex5_1", "[params]\nsamples = 1000\nmax_particles = 64\n"),
    -5: ("certify", "ex5_3", "[params]\nsamples = 1000\nmax_particles = 64\n"),
    9: ("semigroup", "ex5_3", """
[sim]
dt = 1e-3
particles = 10000
[params]
f = "tanh"
x = 1.0
s = 0.25
t = 0.25
outer = 256
inner = 64
"""),
    11: ("contraction", "ex5_3", """
[sim]
dt = 1e-3
T = 2.0
particles = 10000
record_every = 50
[params]
x = 1.0
y = 0.0
mu = { kind = "point", at = 1.0 }
nu = { kind = "point", at = 0.0 }
"""),
}


def cli_run(workdir, key: int, workers: int = 1):
    exp, system, config = CLI_RUNS[key]
    return cached(("cli", key, workers), lambda: run_cli(workdir, exp, system, config, workers))


# ---------------------------------------------------------------------------


def test_criterion_01_generator_closed_form(acceptance):
    r = lib(1)
    ok = r["worst_rel_err"] <= 1e-9 and r["seconds"] < 1.0
    acceptance(1, ok, f"ex5_2 LV vs -(3/2)(x-m)^4 at 200 points: worst rel err "
                      f"{r['worst_rel_err']:.2e} (<= 1e-9), {r['seconds']:.2f}s (< 1s)")
    assert ok


def test_criterion_02_lions_fd(acceptance):
    r = lib(2)
    worst = max(r["worst_rel_err"].values())
    ok = worst <= 1e-4 and r["seconds"] < 5.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in r["worst_rel_err"].items())
    acceptance(2, ok, f"FD vs analytic Lions derivative, 100 points each: {detail} (<= 1e-4), "
                      f"{r['seconds']:.2f}s (< 5s)")
    assert ok


def test_criterion_03_decay_rate(acceptance, workdir):
    code, d, secs = cli_run(workdir, 3)
    rep = json.loads((d / "decay.json").read_text())
    fit, bound = rep["fit"], rep["checks"]["moment_bound"]
    ok = code == 0 and 5.4 <= fit["rate"] <= 6.6 and secs < 60
    acceptance(3, ok, f"ex5_2 M=1e4 dt=1e-3 T=1.5: fitted rate {fit['rate']:.3f} "
                      f"(target [5.4, 6.6]), r^2 {fit['r_squared']:.4f}, moment bound "
                      f"e^((lam+lam_tilde)t) {'holds' if bound['holds'] else 'fails'}, "
                      f"{secs:.1f}s (< 60s)")
    assert ok


def test_criterion_04_ito_balance(acceptance):
    r = lib(4)
    ok = abs(r["residual"]) <= 3 * r["std_error"] and r["seconds"] < 60
    acceptance(4, ok, f"ex5_1 T=0.5 M=1e4, 16 replicas: residual {r['residual']:.4g}, "
                      f"std error {r['std_error']:.4g}, z {r['z']:.2f} (<= 3), "
                      f"{r['seconds']:.1f}s (< 60s)")
    assert ok


def test_criterion_05_certificates(acceptance, workdir):
    parts, ok = [], True
    for key in (5, -5):
        code, d, secs = cli_run(workdir, key)
        rep = json.loads((d / "certificate.json").read_text())
        good = code == 0 and rep["violations"] == [] and rep["samples"] == 1000 and secs < 10
        ok &= good
        parts.append(f"{CLI_RUNS[key][1]} {rep['kind']}: {len(rep['violations'])} violations, "
                     f"worst margin {rep['worst_margin']:.3g}, {secs:.1f}s")
    acceptance(5, ok, "; ".join(parts) + " (0 violations, < 10s each)")
    assert ok


def test_criterion_06_transport_oracle(acceptance):
    r = lib(6)
    ok = not any(r["failures"].values()) and r["seconds"] < 10
    gaps = ", ".join(f"{k} {v:.1e}" for k, v in r["float_gap"].items())
    acceptance(6, ok, f"500 instances M<=7, monotone vs all permutations in exact arithmetic: "
                      f"non-optimal {r['failures']}; float gap to brute force {gaps}; "
                      f"{r['seconds']:.1f}s (< 10s)")
    assert ok


def test_criterion_07_prohorov_bound(acceptance):
    r = lib(7)
    ok = r["violations"] == 0 and r["seconds"] < 5
    acceptance(7, ok, f"W_p >= omega^(1+1/p), 100 pairs x p in {{1,2}}: {r['violations']} "
                      f"violations, worst margin {r['worst_margin']:.3g}, {r['seconds']:.2f}s")
    assert ok


def test_criterion_08_truncation_equivalence(acceptance):
    r = lib(8)
    ok = r["holds"] and r["seconds"] < 10
    acceptance(8, ok, f"ex5_1 n=2 M=1e3 1000 steps: {r['exited']} exits, "
                      f"{r['mismatched_particles']} particles differ before their exit, "
                      f"agreement through step {r['agree_through_step']}, {r['reentered']} "
                      f"re-entries (first at step {r['first_reentry_step']}), "
                      f"{r['seconds']:.1f}s")
    assert ok


def test_criterion_09_semigroup(acceptance, workdir):
    code, d, secs = cli_run(workdir, 9)
    rep = json.loads((d / "semigroup.json").read_text())
    ok = code == 0 and rep["difference"] <= 3 * rep["combined_std_error"] and secs < 120
    acceptance(9, ok, f"ex5_3 s=t=0.25 f=tanh: |direct - nested| {rep['difference']:.4g}, "
                      f"combined std error {rep['combined_std_error']:.4g}, z {rep['z']:.2f} "
                      f"(<= 3), {secs:.1f}s (< 120s)")
    assert ok


def test_criterion_10_feller(acceptance):
    r = lib(10)
    ok = r["ok"] and r["C"] == 48.0 and r["seconds"] < 60
    ratios = [row["ratio"] for row in r["rows"]]
    acceptance(10, ok, f"ex5_2 mu_n = delta_(1/n), n in 1,2,4,8, t=1: ratios {ratios} "
                       f"<= e^(Ct) = {r['exp_Ct']:.3g} with C = {r['C']:g}, "
                       f"{r['seconds']:.1f}s")
    assert ok


def test_criterion_11_contraction(acceptance, workdir):
    code, d, secs = cli_run(workdir, 11)
    rep = json.loads((d / "contraction.json").read_text())
    rows = rep["rows"]
    worst = max((r["lhs"] - r["rhs"]) / max(r["EV2_std_error"], 1e-300) for r in rows[1:])
    ok = code == 0 and rep["ok"] and len(rows) == 41 and secs < 120
    acceptance(11, ok, f"ex5_3 (1, delta_1) vs (0, delta_0), M=1e4, T=2: {len(rows)} recorded "
                       f"times, first violation {rep['first_violation']}, largest "
                       f"(lhs - rhs)/std error {worst:.2f} (<= 3), {secs:.1f}s (< 120s)")
    assert ok


def test_criterion_12_determinism(acceptance, workdir):
    mismatched = []
    for n in sorted(LIBRARY):
        a, b = strip_time(lib(n, 1)), strip_time(lib(n, ALT_WORKERS))
        if _json(a) != _json(b):
            mismatched.append(n)
    for key in CLI_RUNS:
        _, d1, _ = cli_run(workdir, key, 1)
        _, d4, _ = cli_run(workdir, key, ALT_WORKERS)
        if d1.name != d4.name or dir_bytes(d1) != dir_bytes(d4):
            mismatched.append(abs(key))
    ok = not mismatched
    acceptance(12, ok, f"criteria 1-11 rerun with --workers {ALT_WORKERS}: "
                       + ("all primary outputs byte-identical" if ok
                          else f"differences in criteria {sorted(set(mismatched))}"))
    assert ok
