"""Command-line experiment runner.

Every run resolves its configuration (flags over config file over defaults),
hashes it, and writes into ``<out>/<experiment>/<hash>/`` a ``manifest.json``
plus the experiment's outputs.  The same configuration always produces the
same bytes, whatever ``--workers`` is.

Exit status: 0 success, 1 violated check, 2 invalid configuration,
3 numerical blow-up.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, rng
from .config import (EXPERIMENTS, SIM_KEYS, ConfigError, load_config, load_defaults,
                     sample_init, sim_section)
from .dynamics import BlowUpError, SimConfig, simulate
from .ergodicity import (check_semigroup, contraction_experiment, decay_experiment,
                         estimate_invariant, time_series_csv)
from .examples import UnknownSystemError, builtin, names
from .lyapunov import (GeneratorError, check_certificate, default_sampler, generator_L,
                       lions_derivative_fd, random_cloud)
from .measures import EmpiricalMeasure
from .transport import (distance_report, levy_prohorov_1d, optimal_plan, power_cost,
                        truncated_w2, wasserstein_p)

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_BLOWUP = 0, 1, 2, 3

TOP_KEYS = {"experiment", "system", "sim", "init", "params", "format", "description", *SIM_KEYS}

TEST_FUNCTIONS = {
    "tanh": lambda x, mu: np.tanh(x[:, 0]),
    "one": lambda x, mu: np.ones(x.shape[0]),
    "square": lambda x, mu: np.sum(x * x, axis=1),
}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


# ---------------------------------------------------------------------------
# configuration


def resolve(args: argparse.Namespace) -> dict:
    defaults = load_defaults()
    raw = load_config(args.config) if args.config else {}
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "experiment" in raw and raw["experiment"] != args.experiment:
        raise ConfigError(
            f"config is for experiment {raw['experiment']!r}, not {args.experiment!r}")
    system = args.system or raw.get("system")
    if system is None:
        raise ConfigError(f"no system given; builtins: {', '.join(names())}")
    builtin(system)  # unknown names raise here
    sim = sim_section(raw, defaults)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        sim["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        sim["workers"] = args.workers
    fmt = args.format or raw.get("format", defaults["format"])
    if fmt not in ("csv", "json"):
        raise ConfigError(f"format must be csv or json, got {fmt!r}")
    params = raw.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("params must be a table")
    init = raw.get("init", builtin(system).default_init)
    try:
        SimConfig(**sim)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return {"experiment": args.experiment, "system": system, "sim": sim, "init": init,
            "params": params, "format": fmt, "base": str(Path(args.config).parent)
            if args.config else "."}


def run_id(resolved: dict) -> str:
    """Hash of everything that can change results (workers cannot)."""
    key = _manifest_config(resolved)
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def _manifest_config(resolved: dict) -> dict:
    cfg = json.loads(json.dumps(resolved, sort_keys=True))
    cfg["sim"].pop("workers", None)
    cfg.pop("base", None)
    return cfg


def _sim_config(resolved: dict) -> SimConfig:
    return SimConfig(**resolved["sim"])


def _init(resolved: dict, system, seed: int | None = None, spec=None,
          particles: int | None = None) -> EmpiricalMeasure:
    sim = resolved["sim"]
    return sample_init(resolved["init"] if spec is None else spec,
                       sim["particles"] if particles is None else particles,
                       sim["seed"] if seed is None else seed, system.field.dim,
                       base=Path(resolved["base"]))


def _param(params: dict, key: str, default, kind=float):
    val = params.get(key, default)
    try:
        return kind(val) if val is not None else None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for params.{key}: {val!r}") from exc


def _require_fields(system, *need):
    for n in need:
        if getattr(system, n) is None:
            raise ConfigError(f"system {system.name!r} has no {n}")


# ---------------------------------------------------------------------------
# experiments; each returns (files: dict name -> text, violated: bool, summary)


def exp_simulate(resolved, system):
    cfg = _sim_config(resolved)
    traj = simulate(system.field, _init(resolved, system), cfg)
    full = resolved["params"].get("output", "summary") == "full"
    if resolved["format"] == "json":
        body = {"times": traj.times.tolist(),
                "summary": traj.summary(system.V).tolist()}
        if full:
            body["states"] = traj.states().tolist()
        return {"trajectory.json": _dumps(body)}, False, {"recorded": len(traj.times)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if full:
        w.writerow(["t", "particle_id"] + [f"x{k + 1}" for k in range(system.field.dim)])
        for t, c in zip(traj.times, traj.clouds):
            for i, p in enumerate(c.points):
                w.writerow([repr(float(t)), i] + [repr(float(v)) for v in p])
        name = "trajectory.csv"
    else:
        w.writerow(["t", "mean", "second_moment", "V_mean"])
        for row in traj.summary(system.V):
            w.writerow([repr(float(v)) for v in row])
        name = "summary.csv"
    return {name: buf.getvalue()}, False, {"recorded": len(traj.times)}


def exp_certify(resolved, system):
    defaults = load_defaults()
    p = resolved["params"]
    samples = _param(p, "samples", defaults["certificate_samples"], int)
    max_m = _param(p, "max_particles", defaults["certificate_max_particles"], int)
    sim = resolved["sim"]
    two = system.certificate.kind == "TwoPoint"
    fields = (system.field, system.bar_field) if two else system.field
    sampler = default_sampler(system.field.dim, max_particles=max_m, two_point=two)
    report = check_certificate(system.V, fields, system.certificate, sampler=sampler,
                               samples=samples, seed=sim["seed"], V2=system.V2,
                               workers=sim["workers"])
    viol = report["violations"]
    if resolved["format"] == "json":
        vtext = _dumps(viol)
        vname = "violations.json"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "inequality", "x", "mu_digest", "lhs", "rhs", "margin"])
        for v in viol:
            w.writerow([v["sample"], v["inequality"], json.dumps(v["x"]), v["mu_digest"],
                        repr(v["lhs"]), repr(v["rhs"]), repr(v["margin"])])
        vtext = buf.getvalue()
        vname = "violations.csv"
    return ({"certificate.json": _dumps(_clean(report)), vname: vtext}, bool(viol),
            {"violations": len(viol), "worst_margin": report["worst_margin"]})


def exp_generator_check(resolved, system):
    """Analytic generator and Lions derivative against finite differences."""
    p = resolved["params"]
    points = _param(p, "points", 100, int)
    rtol = _param(p, "rtol", 1e-4)
    max_m = _param(p, "max_particles", 64, int)
    seed = resolved["sim"]["seed"]
    V, Vfd = system.V, system.V.without_derivatives()
    rows, worst_gen, worst_lions = [], 0.0, 0.0
    for i in range(points):
        gen = rng.generator(rng.derive_seed(seed, i))
        x = gen.normal(0.0, 1.5, size=system.field.dim)
        mu = random_cloud(gen, system.field.dim, max_m, 1.5)
        an = generator_L(V, system.field, 0.0, x, mu)
        fd = generator_L(Vfd, system.field, 0.0, x, mu)
        j = int(gen.integers(mu.size))
        lan = np.broadcast_to(V.lions(x[None, :], mu, mu.points),
                              (1, mu.size, mu.dim))[0, j]
        lfd = lions_derivative_fd(V, x, mu, j)
        e_gen = abs(an - fd) / max(abs(an), 1.0)
        e_l = float(np.max(np.abs(lan - lfd)) / max(float(np.max(np.abs(lan))), 1.0))
        worst_gen, worst_lions = max(worst_gen, e_gen), max(worst_lions, e_l)
        rows.append({"index": i, "x": x.tolist(), "particles": mu.size, "generator": an,
                     "generator_fd": fd, "generator_err": e_gen, "lions_err": e_l})
    bad = worst_gen > rtol or worst_lions > rtol
    report = {"points": points, "rtol": rtol, "worst_generator_err": worst_gen,
              "worst_lions_err": worst_lions, "ok": not bad}
    if resolved["format"] == "json":
        files = {"generator_check.json": _dumps({**report, "rows": rows})}
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "particles", "generator", "generator_fd", "generator_err",
                    "lions_err"])
        for r in rows:
            w.writerow([r["index"], r["particles"], repr(r["generator"]), repr(r["generator_fd"]),
                        repr(r["generator_err"]), repr(r["lions_err"])])
        files = {"generator_check.csv": buf.getvalue(), "generator_check.json": _dumps(report)}
    return files, bad, report


def exp_decay(resolved, system):
    cfg = _sim_config(resolved)
    p = resolved["params"]
    frac = load_defaults()["burn_in_fraction"]
    start = _param(p, "window_start", frac * cfg.horizon)
    report = decay_experiment(system.field, system.V, _init(resolved, system), cfg,
                              window_start=start, certificate=system.certificate)
    rate = report["fit"]["rate"]
    rng_ = p.get("rate_range")
    if rng_ is None and "EV_decay_rate" in system.closed_forms:
        r0 = system.closed_forms["EV_decay_rate"].value
        rng_ = [0.9 * r0, 1.1 * r0]
    checks = {}
    if rng_ is not None:
        lo, hi = float(rng_[0]), float(rng_[1])
        checks["rate_in_range"] = {"range": [lo, hi], "holds": bool(lo <= rate <= hi)}
    if "moment_bound" in report:
        checks["moment_bound"] = report["moment_bound"]
    violated = any(not c["holds"] for c in checks.values())
    summary = {"fit": report["fit"], "checks": checks, "window_start": start}
    ses = report.get("series_std_error", [None] * len(report["series"]))
    series = time_series_csv([(t, "EV", v, se) for (t, v), se in zip(report["series"], ses)])
    if resolved["format"] == "json":
        files = {"decay.json": _dumps({**summary, "series": report["series"]})}
    else:
        files = {"series.csv": series, "decay.json": _dumps(summary)}
    return files, violated, summary


def _cloud_param(resolved, system, key, seed_tag):
    spec = resolved["params"].get(key)
    seed = rng.derive_seed(resolved["sim"]["seed"], seed_tag)
    return _init(resolved, system, seed=seed, spec=spec)


def exp_transport(resolved, system):
    p = resolved["params"]
    mu = _cloud_param(resolved, system, "mu", 0)
    nu = _cloud_param(resolved, system, "nu", 1)
    metric = p.get("metric", "W_p")
    if mu.size != nu.size:
        raise ConfigError("transport clouds must have equal sizes")
    plan = None
    if metric == "W_p":
        order = _param(p, "p", 2.0)
        plan = optimal_plan(mu, nu, power_cost(order))
        value, label = wasserstein_p(mu, nu, order), order
    elif metric == "W_2N":
        n = _param(p, "n", 1.0)
        value, label = truncated_w2(mu, nu, n), n
    elif metric == "W_V":
        if system.V2 is None:
            raise ConfigError(f"system {system.name!r} has no two-point cost for W_V")
        cost = system.V2.as_cost()
        plan = optimal_plan(mu, nu, cost)
        value, label = plan.cost, cost.name
    elif metric == "LP":
        value, label = levy_prohorov_1d(mu, nu), None
    else:
        raise ConfigError(f"unknown metric {metric!r}; use W_p, W_2N, W_V or LP")
    include_plan = bool(p.get("plan", False))
    text = distance_report(metric, label, value, plan if include_plan else None)
    if resolved["format"] == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "p_or_cost", "value"])
        w.writerow([metric, label, repr(float(value))])
        return {"distance.csv": buf.getvalue()}, False, {"value": value}
    return {"distance.json": text + "\n"}, False, {"value": value}


def exp_semigroup(resolved, system):
    _require_fields(system, "bar_field")
    defaults = load_defaults()
    p = resolved["params"]
    cfg = _sim_config(resolved)
    fname = p.get("f", "tanh")
    if fname not in TEST_FUNCTIONS:
        raise ConfigError(f"unknown test function {fname!r}; choose from {sorted(TEST_FUNCTIONS)}")
    x = np.atleast_1d(np.asarray(p.get("x", 1.0), dtype=float))
    try:
        report = check_semigroup(
            TEST_FUNCTIONS[fname], system.field, system.bar_field, x, _init(resolved, system),
            _param(p, "s", 0.25), _param(p, "t", 0.25), cfg,
            outer=_param(p, "outer", defaults["outer_replicas"], int),
            inner=_param(p, "inner", defaults["inner_replicas"], int),
            budget=_param(p, "budget", defaults["nested_budget"], int))
    except ValueError as exc:
        if isinstance(exc, BlowUpError):
            raise
        raise ConfigError(str(exc)) from exc
    return {"semigroup.json": _dumps(_clean(report))}, not report["ok"], report


def exp_contraction(resolved, system):
    _require_fields(system, "bar_field", "V2")
    p = resolved["params"]
    cfg = _sim_config(resolved)
    M = cfg.particles
    x = p.get("x", 1.0)
    y = p.get("y", 0.0)
    mu = _init(resolved, system, spec=p.get("mu", {"kind": "point", "at": 1.0}))
    nu = _init(resolved, system, spec=p.get("nu", {"kind": "point", "at": 0.0}),
               seed=rng.derive_seed(cfg.seed, 1))
    if mu.size != M or nu.size != M:
        raise ConfigError("contraction clouds must have the configured particle count")
    report = contraction_experiment(system.field, system.bar_field, system.V2, (x, mu), (y, nu),
                                    cfg, system.certificate)
    rows = []
    for r in report["rows"]:
        rows += [(r["t"], "EV2", r["EV2"], r["EV2_std_error"]), (r["t"], "W_V", r["W_V"], None),
                 (r["t"], "rhs", r["rhs"], None)]
    summary = {k: v for k, v in report.items() if k != "rows"}
    if resolved["format"] == "json":
        files = {"contraction.json": _dumps(_clean(report))}
    else:
        files = {"series.csv": time_series_csv(rows), "contraction.json": _dumps(_clean(summary))}
    return files, not report["ok"], summary


def exp_invariant(resolved, system):
    p = resolved["params"]
    cfg = _sim_config(resolved)
    est = estimate_invariant(system.field, _init(resolved, system), cfg,
                             burn_in=_param(p, "burn_in", None),
                             cesaro=bool(p.get("cesaro", True)),
                             gap_time=_param(p, "gap_time", None))
    summary = {"burn_in": est.burn_in, "cesaro": est.cesaro,
               "stationarity_gap": est.stationarity_gap,
               "mean": est.cloud.mean().tolist(),
               "second_moment": float(np.mean(np.sum(est.cloud.points**2, axis=1)))}
    if resolved["format"] == "json":
        files = {"invariant.json": _dumps({**summary, "cloud": est.cloud.points.tolist()})}
    else:
        files = {"cloud.csv": est.cloud.to_csv(), "invariant.json": _dumps(summary)}
    return files, False, summary


RUNNERS = {
    "simulate": exp_simulate,
    "certify": exp_certify,
    "generator-check": exp_generator_check,
    "decay": exp_decay,
    "transport": exp_transport,
    "semigroup": exp_semigroup,
    "contraction": exp_contraction,
    "invariant": exp_invariant,
}


def describe_payload(system_name: str) -> dict:
    return {"experiment": "describe", "system": system_name,
            "description": builtin(system_name).describe()}


def describe_text(system_name: str) -> str:
    d = builtin(system_name).describe()
    lines = [f"{d['name']}: {d['title']}", f"  dimension {d['dim']}, noise {d['noise_dim']}"]
    lines.append("  coefficients:")
    lines += [f"    {k} = {v}" for k, v in d["coefficients"].items()]
    lines.append("  Lyapunov data:")
    lines += [f"    {k} = {v}" for k, v in d["lyapunov"].items()]
    if d["two_point_cost"]:
        lines.append(f"  two-point cost: {d['two_point_cost']}")
    c = d["certificate"]
    consts = ", ".join(f"{k}={v:g}" for k, v in c["constants"].items())
    lines.append(f"  certificate {c['kind']}({consts}) strict={c['strict']}"
                 + (f"  [{c['note']}]" if c["note"] else ""))
    if c["kind"] == "TwoPoint":
        tup = ", ".join(f"{v:g}" for v in c["constants"].values())
        lines.append(f"    (gamma, beta, gamma_bar, beta_bar) = ({tup})")
    lines.append("  closed forms:")
    for label, cf in d["closed_forms"].items():
        val = f" = {cf['value']:g}" if "value" in cf else ""
        lines.append(f"    {label}: {cf['expression']}{val}")
    if d["lipschitz"] is not None:
        lines.append(f"  Lipschitz constant {d['lipschitz']:g}")
    if d["growth_hint"] is not None:
        lines.append(f"  growth hint (ell, K) = {tuple(d['growth_hint'])}")
    lines.append(f"  default init: {json.dumps(d['default_init'])}")
    for n in d["notes"]:
        lines.append(f"  note: {n}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvlab", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"mvlab {__version__}")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--system", metavar="NAME")
        sp.add_argument("--seed", type=int, metavar="U64")
        sp.add_argument("--workers", type=int, metavar="N")
        sp.add_argument("--out", metavar="DIR", default="runs")
        sp.add_argument("--format", choices=("csv", "json"))
    return parser


def run(args: argparse.Namespace, stdout=None) -> int:
    stdout = stdout or sys.stdout
    if args.experiment == "describe":
        raw = load_config(args.config) if args.config else {}
        name = args.system or raw.get("system")
        if name is None:
            raise ConfigError(f"no system given; builtins: {', '.join(names())}")
        builtin(name)
        if (args.format or raw.get("format")) == "json":
            stdout.write(_dumps(describe_payload(name)))
        else:
            stdout.write(describe_text(name))
        return EXIT_OK
    resolved = resolve(args)
    system = builtin(resolved["system"])
    files, violated, summary = RUNNERS[args.experiment](resolved, system)
    outdir = Path(args.out) / args.experiment / run_id(resolved)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"config": _manifest_config(resolved), "version": __version__,
                "seed": resolved["sim"]["seed"], "files": sorted(files),
                "violated": violated}
    (outdir / "manifest.json").write_text(_dumps(manifest))
    for name, text in files.items():
        (outdir / name).write_text(text)
    stdout.write(f"{outdir}\n")
    stdout.write(_dumps(_clean({"experiment": args.experiment, "violated": violated,
                                "summary": summary})))
    return EXIT_VIOLATION if violated else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except (ConfigError, UnknownSystemError) as exc:
        print(f"mvlab: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BlowUpError, GeneratorError) as exc:
        print(f"mvlab: numerical blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
