"""LASPT1 tensor files and the seeded fixture generator.

File layout (all little-endian)::

    b"LASPT1"            6-byte magic
    uint32               number of dimensions r
    uint64 * r           dimension sizes
    float64 * prod(dims) row-major payload

Random fixtures come from a SplitMix64 stream: state starts at ``seed``,
each draw adds 0x9E3779B97F4A7C15 and mixes the result with the standard
SplitMix64 finaliser. The top 53 bits of each output give a uniform double
in [0, 1), which is mapped affinely onto the requested interval. Any
implementation following those three sentences reproduces the same values.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FixtureFormatError

MAGIC = b"LASPT1"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def write_tensor(path: str | os.PathLike, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[: len(MAGIC)] != MAGIC:
        raise FixtureFormatError("missing LASPT1 magic")
    offset = len(MAGIC)
    if len(blob) < offset + 4:
        raise FixtureFormatError("truncated rank field")
    (rank,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if len(blob) < offset + 8 * rank:
        raise FixtureFormatError("truncated dimension list")
    dims = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - offset != 8 * count:
        raise FixtureFormatError(
            f"payload holds {len(blob) - offset} bytes, expected {8 * count} for dims {dims}"
        )
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)


class SplitMix64:
    """Counter-based 64-bit generator; see the module docstring for the exact recipe."""

    def __init__(self, seed: int):
        self.state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self, count: int) -> np.ndarray:
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = self.state + steps * _GOLDEN
            self.state = self.state + np.uint64(count) * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, shape, low: float = -1.0, high: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape, dtype=np.int64))
        unit = (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * unit).reshape(shape)


def random_qkv(seed: int, n: int, d: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q, K, V drawn in that order from one stream, entries in [-1, 1)."""
    rng = SplitMix64(seed)
    return rng.uniform((n, d)), rng.uniform((n, d)), rng.uniform((n, d))
