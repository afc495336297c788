"""Counter-based keyed random streams.

A stream is named by a tuple of non-negative integers (a seed followed by
context words).  Draw ``i`` of a stream is a pure function of the key and
``i``: the key feeds Philox, the draw index is the Philox counter.  Any
slice can therefore be produced without generating its prefix, and results
do not depend on the order in which cells or batches are visited.
"""

from __future__ import annotations

import numpy as np
from scipy.special import betaincinv, ndtri

_MASK64 = (1 << 64) - 1
# Philox4x64 emits four 64-bit words per counter increment.
_WORDS_PER_BLOCK = 4

# Stream purposes, mixed into every key so independent uses never collide.
DEVICE = 1
BIAS = 2
SENSITIVITY = 3
MEASUREMENT = 4
INIT = 5
DROPOUT = 6
SHUFFLE = 7
SPLIT = 8


def derive_seed(*words: int) -> int:
    """Hash integer words into a single 64-bit seed."""
    ss = np.random.SeedSequence([int(w) & _MASK64 for w in words])
    return int(ss.generate_state(1, np.uint64)[0])


def _generator(key: tuple[int, ...], start: int) -> np.random.Generator:
    if start < 0:
        raise ValueError("start must be non-negative")
    philox_key = np.random.SeedSequence([int(w) & _MASK64 for w in key]).generate_state(2, np.uint64)
    bitgen = np.random.Philox(key=philox_key)
    bitgen.advance(start // _WORDS_PER_BLOCK)
    gen = np.random.Generator(bitgen)
    skip = start % _WORDS_PER_BLOCK
    if skip:
        gen.random(skip)
    return gen


def uniforms(key: tuple[int, ...], count: int, start: int = 0) -> np.ndarray:
    """Uniform doubles on the open interval (0, 1) for draws ``start .. start+count-1``.

    Each double uses one 64-bit word; the half-ulp offset keeps 0 out of
    range so inverse-CDF transforms stay finite.
    """
    u = _generator(key, start).random(count)
    u += 2.0**-54
    return u


def normals(key: tuple[int, ...], count: int, start: int = 0) -> np.ndarray:
    """Standard normal draws by inverse CDF, one word per draw."""
    return ndtri(uniforms(key, count, start))


def betas(key: tuple[int, ...], count: int, a: float, b: float, start: int = 0) -> np.ndarray:
    """Beta(a, b) draws by inverse CDF, one word per draw."""
    return betaincinv(a, b, uniforms(key, count, start))


def permutation(key: tuple[int, ...], n: int) -> np.ndarray:
    """Seeded permutation of ``range(n)``; ties in the keys are broken by index."""
    return np.argsort(uniforms(key, n), kind="stable")
