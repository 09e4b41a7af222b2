"""Counter-based Gaussian noise.

The normal draw for (seed, stream, step, particle, component) is a pure
function of those integers: a Philox block keyed by the seed and positioned
by (stream, step) yields one 64-bit word per (particle, component), which is
mapped through the inverse normal CDF.  Any subset of particles can be
generated independently, so results never depend on how work is split.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1

# stream tags keep independent uses of one seed apart
STREAM_PATH = 0
STREAM_INIT = 1
STREAM_SAMPLER = 2


def _bitgen(seed: int, stream: int, step: int) -> np.random.Philox:
    key = [seed & _MASK64, (seed >> 64) & _MASK64]
    return np.random.Philox(key=key, counter=[0, 0, step & _MASK64, stream & _MASK64])


def _words_to_normals(words: np.ndarray) -> np.ndarray:
    # top 53 bits, shifted half a unit so u is never 0 or 1
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    return ndtri(u)


def normals(seed: int, stream: int, step: int, start: int, count: int, width: int) -> np.ndarray:
    """Standard normals for particles ``start .. start+count-1``, shape (count, width)."""
    bg = _bitgen(seed, stream, step)
    if start:
        # Philox emits 4 words per counter increment
        q, r = divmod(int(start) * int(width), 4)
        bg.advance(q)
        skip = r
    else:
        skip = 0
    words = bg.random_raw(count * width + skip)[skip:]
    return _words_to_normals(words).reshape(count, width)


def step_normals(seed: int, step: int, count: int, width: int, stream: int = STREAM_PATH,
                 workers: int = 1) -> np.ndarray:
    """All particles' normals for one step, optionally generated in chunks."""
    if workers <= 1 or count < 2 * workers:
        return normals(seed, stream, step, 0, count, width)
    bounds = np.linspace(0, count, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(
            lambda ab: normals(seed, stream, step, ab[0], ab[1] - ab[0], width),
            zip(bounds[:-1], bounds[1:]),
        )
        return np.concatenate(list(parts), axis=0)


def derive_seed(seed: int, *tags: int) -> int:
    """Child seed for a nested experiment, deterministic in (seed, tags)."""
    ss = np.random.SeedSequence([seed & _MASK64, *tags])
    return int(ss.generate_state(2, dtype=np.uint64).view(np.uint64)[0])


def generator(seed: int, stream: int = STREAM_SAMPLER) -> np.random.Generator:
    """Ordinary generator for sampling test inputs and initial clouds."""
    return np.random.Generator(_bitgen(seed, stream, 0))
