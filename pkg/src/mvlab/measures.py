"""Equal-weight particle clouds standing in for laws on R^d.

Every measure in the package is a finite cloud of points with uniform
weights 1/M, so integrals are arithmetic means over the points.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Callable

import numpy as np


class EmpiricalMeasure:
    """Immutable cloud of ``M`` points in ``R^dim`` with weights ``1/M``."""

    __slots__ = ("_points",)

    def __init__(self, points, dim: int | None = None):
        arr = np.array(points, dtype=float)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            # a flat list is a cloud of 1-d points unless dim says otherwise
            arr = arr.reshape(-1, 1) if dim in (None, 1) else arr.reshape(-1, dim)
        if arr.ndim != 2:
            raise ValueError(f"points must be a (M, d) array, got shape {arr.shape}")
        if arr.shape[0] == 0:
            raise ValueError("an empirical measure needs at least one point")
        if dim is not None and arr.shape[1] != dim:
            raise ValueError(f"points have dimension {arr.shape[1]}, expected {dim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("points must be finite")
        arr.setflags(write=False)
        self._points = arr

    @classmethod
    def _trusted(cls, arr: np.ndarray) -> "EmpiricalMeasure":
        # internal constructor for arrays already known to be finite (M, d)
        obj = cls.__new__(cls)
        arr = np.array(arr, dtype=float)
        arr.setflags(write=False)
        obj._points = arr
        return obj

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def dim(self) -> int:
        return self._points.shape[1]

    @property
    def size(self) -> int:
        return self._points.shape[0]

    def __len__(self) -> int:
        return self.size

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(size={self.size}, dim={self.dim})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmpiricalMeasure):
            return NotImplemented
        return self._points.shape == other._points.shape and bool(
            np.array_equal(self._points, other._points)
        )

    __hash__ = None  # type: ignore[assignment]

    def mean(self) -> np.ndarray:
        return self._points.mean(axis=0)

    def same_multiset(self, other: "EmpiricalMeasure") -> bool:
        """True when both clouds hold the same points, ignoring order."""
        if self._points.shape != other._points.shape:
            return False
        a = self._points[np.lexsort(self._points.T[::-1])]
        b = other._points[np.lexsort(other._points.T[::-1])]
        return bool(np.array_equal(a, b))

    # serialization -----------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{k + 1}" for k in range(self.dim)])
        for row in self._points:
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self._points.tolist())

    @classmethod
    def from_csv(cls, text: str) -> "EmpiricalMeasure":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty CSV")
        header, body = rows[0], [r for r in rows[1:] if r]
        if not all(h.strip().startswith("x") for h in header):
            raise ValueError("CSV header must be x1..xd")
        return cls([[float(v) for v in r] for r in body], dim=len(header))

    @classmethod
    def from_json(cls, text: str) -> "EmpiricalMeasure":
        data = json.loads(text)
        if data and not isinstance(data[0], list):
            data = [[v] for v in data]
        return cls(data)

    @classmethod
    def load(cls, path: str | Path) -> "EmpiricalMeasure":
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".json":
            return cls.from_json(text)
        return cls.from_csv(text)


def as_measure(mu) -> EmpiricalMeasure:
    return mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)


def point_mass(x, copies: int = 1) -> EmpiricalMeasure:
    """``copies`` coincident points at ``x`` (still the Dirac measure)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return EmpiricalMeasure(np.tile(x, (copies, 1)))


def _check_radius(n: float) -> float:
    n = float(n)
    if not n > 0 or not np.isfinite(n):
        raise ValueError(f"truncation radius must be a positive finite number, got {n}")
    return n


def truncate_points(x: np.ndarray, n: float) -> np.ndarray:
    """Row-wise ``n x / max(n, |x|)`` for an (k, d) array."""
    n = _check_radius(n)
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot truncate non-finite values")
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    out = x.copy()
    outside = norms[..., 0] > n
    # points inside the ball are returned untouched, bit for bit; dividing by
    # the norm first keeps 1-d projections exactly at +-n
    out[outside] = x[outside] / norms[outside] * n
    # rounding can leave a projected point a few ulps outside in d > 1;
    # nudge it in so the map is idempotent and |result| <= n holds exactly
    over = np.linalg.norm(out, axis=-1) > n
    while over.any():
        out[over] *= 1.0 - 2.0**-52
        over = np.linalg.norm(out, axis=-1) > n
    return out


def truncate_point(x, n: float) -> np.ndarray:
    """Radial projection onto the closed ball of radius ``n``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return truncate_points(x[None, :], n)[0]


def pushforward_truncate(mu: EmpiricalMeasure, n: float) -> EmpiricalMeasure:
    """Image of ``mu`` under the radial truncation map."""
    return EmpiricalMeasure._trusted(truncate_points(mu.points, n))


def integrate(mu: EmpiricalMeasure, f: Callable[[np.ndarray], float]) -> float:
    """Mean of ``f`` over the points of ``mu``; ``f`` gets one point at a time."""
    vals = np.array([float(f(p if mu.dim > 1 else p[0])) for p in mu.points])
    if not np.all(np.isfinite(vals)):
        raise ValueError("integrand is not finite on every point")
    return float(vals.mean())


def second_moment_sq(mu: EmpiricalMeasure) -> float:
    return float(np.mean(np.sum(mu.points**2, axis=1)))


def second_moment_norm(mu: EmpiricalMeasure) -> float:
    """``sqrt(mean |y|^2)`` over the cloud."""
    return float(np.sqrt(second_moment_sq(mu)))
