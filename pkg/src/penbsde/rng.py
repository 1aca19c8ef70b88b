"""Counter-based Gaussian increments.

Every standard normal used by the simulators is a pure function of
``(seed, path, step, component)``. Nothing is carried between calls, so a
path can be regenerated in isolation, shared between coupled simulations by
reusing the key, or produced by any worker in any order.

The bit generator is Philox4x32-10 (Salmon et al., SC'11), written against
numpy ``uint64`` arrays so one call covers a whole block of paths.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)
ROUNDS = 10


def philox4x32(counter, key, rounds: int = ROUNDS):
    """Apply Philox4x32 to broadcastable counter words.

    Args:
        counter: sequence of four integer arrays (or scalars), each < 2**32.
        key: pair of integers < 2**32.

    Returns:
        Tuple of four ``uint64`` arrays holding the 32-bit output words.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT, p0 & _MASK
        hi1, lo1 = p1 >> _SHIFT, p1 & _MASK
        c0, c1, c2, c3 = (
            hi1 ^ c1 ^ np.uint64(k0),
            lo1,
            hi0 ^ c3 ^ np.uint64(k1),
            lo0,
        )
    return c0, c1, c2, c3


def _unit_open(hi, lo):
    # 53-bit uniform strictly inside (0, 1)
    a = (hi >> np.uint64(5)).astype(np.float64)
    b = (lo >> np.uint64(6)).astype(np.float64)
    return (a * 67108864.0 + b + 0.5) / 9007199254740992.0


def seed_key(seed: int) -> tuple[int, int]:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def standard_normals(seed: int, paths, step_start: int, step_stop: int, dim: int) -> np.ndarray:
    """Standard normals for steps ``step_start <= s < step_stop`` of the given paths.

    Component ``c`` of step ``s`` is normal number ``s * dim + c`` of the
    path's stream; each Philox block yields two of them through Box-Muller.

    Returns:
        Array of shape ``(step_stop - step_start, len(paths), dim)``.
    """
    paths = np.asarray(paths, dtype=np.uint64)
    nsteps = step_stop - step_start
    if nsteps < 0:
        raise ValueError("step_stop precedes step_start")
    key = seed_key(seed)
    first = step_start * dim
    last = step_stop * dim
    b0, b1 = first // 2, (last + 1) // 2
    blocks = np.arange(b0, b1, dtype=np.uint64)[:, None]
    w0, w1, w2, w3 = philox4x32(
        (blocks & _MASK, blocks >> _SHIFT, (paths & _MASK)[None, :], (paths >> _SHIFT)[None, :]),
        key,
    )
    r = np.sqrt(-2.0 * np.log(_unit_open(w0, w1)))
    ang = 2.0 * np.pi * _unit_open(w2, w3)
    z = np.empty((b1 - b0, 2, paths.size))
    z[:, 0] = r * np.cos(ang)
    z[:, 1] = r * np.sin(ang)
    z = z.reshape(2 * (b1 - b0), paths.size)[first - 2 * b0 : last - 2 * b0]
    return z.reshape(nsteps, dim, paths.size).transpose(0, 2, 1)


def brownian_increments(seed: int, paths, step_start: int, step_stop: int, dim: int, dt: float) -> np.ndarray:
    """Brownian increments ``sqrt(dt) * Z`` with ``Z`` from :func:`standard_normals`."""
    return np.sqrt(dt) * standard_normals(seed, paths, step_start, step_stop, dim)


def as_generator(rng_stream) -> np.random.Generator:
    """Accept a Generator, an int seed or None and return a Generator."""
    if isinstance(rng_stream, np.random.Generator):
        return rng_stream
    return np.random.default_rng(rng_stream)
