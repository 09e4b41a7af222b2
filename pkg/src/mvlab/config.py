"""Defaults table, experiment configs and initial-cloud specs.

Every numeric default lives in :data:`DEFAULTS`.  Setting ``MVLAB_DEFAULTS``
to a TOML or JSON file overrides entries of that table (unknown keys are an
error).  Experiment configs use the same two formats.
"""
from __future__ import annotations

import json
import os
import sys
from copy import deepcopy
from pathlib import Path

import numpy as np

from . import rng
from .measures import EmpiricalMeasure

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DEFAULTS = {
    "dt": 1e-3,
    "steps": 1000,
    "particles": 10_000,
    "seed": 0,
    "record_every": 1,
    "workers": 1,
    "burn_in_fraction": 0.1,  # decay windows and Cesaro averages skip this share of [0, T]
    "fd_step": 1e-5,
    "fd_step2": 1e-4,
    "inner_replicas": 64,
    "outer_replicas": 256,
    "nested_budget": 1 << 20,
    "certificate_samples": 1000,
    "certificate_max_particles": 64,
    "ito_replicas": 16,
    "format": "json",
}

EXPERIMENTS = ("simulate", "certify", "generator-check", "decay", "transport", "semigroup",
               "contraction", "invariant", "describe")

SIM_KEYS = ("dt", "steps", "particles", "seed", "record_every", "workers")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit status 2)."""


def _read_mapping(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a table/object at top level")
    return data


def load_defaults() -> dict:
    table = deepcopy(DEFAULTS)
    override = os.environ.get("MVLAB_DEFAULTS")
    if override:
        extra = _read_mapping(Path(override))
        unknown = set(extra) - set(table)
        if unknown:
            raise ConfigError(f"unknown defaults keys: {sorted(unknown)}")
        table.update(extra)
    return table


def load_config(path: str | Path) -> dict:
    """Parse a TOML or JSON experiment config into a plain dict."""
    return _read_mapping(Path(path))


def sim_section(cfg: dict, defaults: dict) -> dict:
    """Simulation keys taken from ``cfg['sim']`` or the top level, else defaults."""
    sim = dict(cfg.get("sim", {}))
    for key in SIM_KEYS:
        if key not in sim and key in cfg:
            sim[key] = cfg[key]
        sim.setdefault(key, defaults[key])
    if "T" in sim or "horizon" in sim:
        T = float(sim.pop("T", sim.pop("horizon", None)))
        sim["steps"] = int(round(T / float(sim["dt"])))
    unknown = set(sim) - set(SIM_KEYS)
    if unknown:
        raise ConfigError(f"unknown sim keys: {sorted(unknown)}")
    try:
        sim["dt"] = float(sim["dt"])
        for key in ("steps", "particles", "seed", "record_every", "workers"):
            val = sim[key]
            if isinstance(val, bool) or int(val) != val:
                raise ConfigError(f"{key} must be an integer, got {val!r}")
            sim[key] = int(val)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad simulation value: {exc}") from exc
    if not 0 <= sim["seed"] < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return sim


def sample_init(spec, particles: int, seed: int, dim: int = 1,
                base: Path | None = None) -> EmpiricalMeasure:
    """Initial cloud from a named distribution or a cloud file.

    ``spec`` is a path string or a table with ``kind`` in ``normal`` (``mean``,
    ``std``), ``uniform`` (``low``, ``high``), ``point`` (``at``) or ``file``
    (``path``).  Draws come from the seed's initial-condition stream.
    """
    if isinstance(spec, str):
        spec = {"kind": "file", "path": spec}
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"init must be a cloud path or a table with 'kind', got {spec!r}")
    kind = spec["kind"]
    gen = rng.generator(seed, rng.STREAM_INIT)
    if kind == "normal":
        mean = np.broadcast_to(np.asarray(spec.get("mean", 0.0), dtype=float), (dim,))
        std = float(spec.get("std", 1.0))
        if std < 0:
            raise ConfigError("normal std must be nonnegative")
        pts = mean + std * gen.standard_normal((particles, dim))
    elif kind == "uniform":
        lo, hi = float(spec.get("low", 0.0)), float(spec.get("high", 1.0))
        if not hi > lo:
            raise ConfigError("uniform needs high > low")
        pts = gen.uniform(lo, hi, size=(particles, dim))
    elif kind == "point":
        at = np.broadcast_to(np.asarray(spec.get("at", 0.0), dtype=float), (dim,))
        pts = np.tile(at, (particles, 1))
    elif kind == "file":
        path = Path(spec["path"])
        if base is not None and not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError(f"init file {path} does not exist")
        try:
            cloud = EmpiricalMeasure.load(path)
        except ValueError as exc:
            raise ConfigError(f"bad cloud file {path}: {exc}") from exc
        if cloud.dim != dim:
            raise ConfigError(f"cloud file has dimension {cloud.dim}, system needs {dim}")
        return cloud
    else:
        raise ConfigError(f"unknown init kind {kind!r}")
    return EmpiricalMeasure(pts, dim=dim)
