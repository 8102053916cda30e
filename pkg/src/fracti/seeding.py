"""Seed derivation and the frozen normal-variate generator.

Normal variates come from PCG64 raw 64-bit words turned into 53-bit
uniforms and paired through Box-Muller. Only the raw PCG64 stream is
relied upon, so content hashes of generated data stay stable.
"""

import hashlib

import numpy as np

from .errors import InvalidParams

SEED_LIMIT = 2 ** 64
_UNIT = 2.0 ** -53


def derive_seed(seed: int, *labels: object) -> int:
    """Derive a 64-bit child seed from a parent seed and labels."""
    text = ":".join([str(seed), *(str(label) for label in labels)])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < SEED_LIMIT:
        raise InvalidParams(f"seed must be an integer in [0, 2**64), got {seed!r}")
    return seed


def standard_normals(seed: int, count: int) -> np.ndarray:
    """Return `count` standard normal variates for `seed`."""
    if count <= 0:
        return np.zeros(0)

    pairs = (count + 1) // 2
    raw = np.random.PCG64(seed).random_raw(2 * pairs)
    # u1 in (0, 1] keeps the logarithm finite, u2 in [0, 1)
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _UNIT
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _UNIT

    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2

    normals = np.empty(2 * pairs)
    normals[0::2] = radius * np.cos(angle)
    normals[1::2] = radius * np.sin(angle)
    return normals[:count]
