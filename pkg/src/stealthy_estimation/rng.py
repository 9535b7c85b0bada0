"""Counter-based random streams: one Philox generator per (seed, stream)."""

from __future__ import annotations

import numpy as np

# logical streams, one per indicator process
NU, GAMMA, GAMMA_A, GAMMA_E, PROCESS_NOISE, MEASUREMENT_NOISE = range(6)
STREAM_NAMES = ("nu", "gamma", "gamma_a", "gamma_e", "w", "v")
MASK64 = (1 << 64) - 1


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Generator whose k-th draw depends only on (seed, stream_id, k)."""
    seed = int(seed)
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(key=[seed, int(stream_id)]))


def uniforms(seed: int, stream_id: int, start: int, count: int) -> np.ndarray:
    """Draws ``start .. start+count-1`` of a uniform stream (restartable at any offset)."""
    bg = np.random.Philox(key=[int(seed) & MASK64, int(stream_id)])
    # Philox yields 4 uint64 per counter step; advance whole blocks and discard the rest
    block, skip = divmod(int(start), 4)
    bg.advance(block)
    gen = np.random.Generator(bg)
    out = gen.random(count + skip)
    return out[skip:]
