"""Arithmetic over Z_{2^l}: fixed-point encoding, additive sharing, truncation.

All values are numpy uint64 arrays holding elements of Z_{2^l} (l <= 64).
Reduction is a single mask; for l = 64 the natural wraparound of uint64 is
already the ring reduction. Party 0 is the client, party 1 the server, and
x = (share0 + share1) mod 2^l throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

RING_WIDTHS = (8, 16, 32, 64)

_PACK_DTYPES = {8: "<u1", 16: "<u2", 32: "<u4", 64: "<u8"}


@dataclass(frozen=True)
class RingParams:
    """Ring width l and fixed-point fraction bits f.

    The scale budget 3*f + 2 <= l keeps a degree-2 polynomial evaluation
    (scale 3f plus sign and one guard bit) inside the ring.
    """

    l: int = 32
    f: int = 8

    def __post_init__(self) -> None:
        if self.l not in RING_WIDTHS:
            raise ConfigError(f"ring width must be one of {RING_WIDTHS}, got {self.l}")
        if self.f < 0:
            raise ConfigError("fraction bits must be non-negative")
        if 3 * self.f + 2 > self.l:
            raise ConfigError(
                f"scale budget violated: 3*{self.f}+2 > {self.l}; "
                "degree-2 evaluation would overflow"
            )


class Ring:
    """Vectorized Z_{2^l} arithmetic bound to one RingParams."""

    def __init__(self, params: RingParams):
        self.params = params
        self.l = params.l
        self.f = params.f
        self.mask = np.uint64((1 << params.l) - 1)
        self.modulus = 1 << params.l
        self.half = np.uint64(1 << (params.l - 1))

    # ------------------------------------------------------------------ core

    def reduce(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.uint64) & self.mask

    def add(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return (np.asarray(a, np.uint64) + np.asarray(b, np.uint64)) & self.mask

    def sub(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return (np.asarray(a, np.uint64) - np.asarray(b, np.uint64)) & self.mask

    def neg(self, a: np.ndarray) -> np.ndarray:
        return (np.uint64(0) - np.asarray(a, np.uint64)) & self.mask

    def mul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return (np.asarray(a, np.uint64) * np.asarray(b, np.uint64)) & self.mask

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        # uint64 matmul wraps mod 2^64, of which 2^l is a divisor.
        return (np.asarray(a, np.uint64) @ np.asarray(b, np.uint64)) & self.mask

    def scalar(self, v: int) -> np.uint64:
        return np.uint64(v % self.modulus)

    def msb(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, np.uint64) >> np.uint64(self.l - 1)).astype(np.uint8)

    # ------------------------------------------------------- signed interface

    def to_signed(self, x: np.ndarray) -> np.ndarray:
        """Two's-complement interpretation as int64."""
        x = self.reduce(x)
        if self.l == 64:
            return x.view(np.int64)
        s = x.astype(np.int64)
        return np.where(x >= self.half, s - np.int64(self.modulus), s)

    def from_signed(self, s: np.ndarray) -> np.ndarray:
        return np.asarray(s).astype(np.int64).astype(np.uint64) & self.mask

    # --------------------------------------------------------- fixed point

    def encode(self, x, scale: int | None = None) -> np.ndarray:
        """Round real values to scale-f (or given scale) ring elements."""
        scale = self.f if scale is None else scale
        v = np.round(np.asarray(x, dtype=np.float64) * float(1 << scale))
        bound = float(1 << (self.l - 1))
        if np.any(np.abs(v) >= bound):
            raise ConfigError(f"value does not fit in {self.l}-bit signed range at scale {scale}")
        return self.from_signed(v.astype(np.int64))

    def decode(self, x: np.ndarray, scale: int | None = None) -> np.ndarray:
        scale = self.f if scale is None else scale
        return self.to_signed(x).astype(np.float64) / float(1 << scale)

    # ------------------------------------------------------------- sharing

    def rand(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        """Uniform ring elements from an explicit generator."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = np.frombuffer(rng.bytes(8 * n), dtype=np.uint64) & self.mask
        return raw.reshape(shape) if shape else raw[0]

    def rand_bits(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        return rng.integers(0, 2, size=shape, dtype=np.uint8)

    def share(self, x: np.ndarray, rng: np.random.Generator):
        """Split x into two additive shares; share 0 is uniform."""
        x = self.reduce(np.asarray(x, np.uint64))
        s0 = self.rand(rng, x.shape)
        return s0, self.sub(x, s0)

    def reconstruct(self, s0: np.ndarray, s1: np.ndarray) -> np.ndarray:
        return self.add(s0, s1)

    # ----------------------------------------------------------- truncation

    def trunc_share(self, s: np.ndarray, party: int, nbits: int | None = None) -> np.ndarray:
        """Local probabilistic truncation of one share by nbits.

        Party 0 keeps floor(s0 / 2^nbits); party 1 negates the floor of its
        complement. The reconstruction lands within one unit of the true
        shifted value except for a wrap event of probability about
        |x| / 2^(l-1).
        """
        nbits = self.f if nbits is None else nbits
        s = self.reduce(s)
        if nbits == 0:
            return s
        if party == 0:
            return s >> np.uint64(nbits)
        comp = (np.uint64(0) - s) & self.mask
        return (np.uint64(0) - (comp >> np.uint64(nbits))) & self.mask

    def trunc_plain_round(self, v: np.ndarray, nbits: int | None = None) -> np.ndarray:
        """Deterministic round-to-nearest shift on ring values (reference path)."""
        nbits = self.f if nbits is None else nbits
        if nbits == 0:
            return self.reduce(v)
        s = self.to_signed(v)
        shifted = (s + np.int64(1 << (nbits - 1))) >> np.int64(nbits)
        return self.from_signed(shifted)

    def trunc_plain_floor(self, v: np.ndarray, nbits: int | None = None) -> np.ndarray:
        nbits = self.f if nbits is None else nbits
        if nbits == 0:
            return self.reduce(v)
        return self.from_signed(self.to_signed(v) >> np.int64(nbits))

    # ------------------------------------------------------------- packing

    def pack(self, x: np.ndarray) -> bytes:
        """Little-endian wire encoding, l/8 bytes per element."""
        x = self.reduce(np.asarray(x, np.uint64))
        return np.ascontiguousarray(x).astype(_PACK_DTYPES[self.l]).tobytes()

    def unpack(self, buf: bytes, shape=None) -> np.ndarray:
        arr = np.frombuffer(buf, dtype=_PACK_DTYPES[self.l]).astype(np.uint64)
        return arr.reshape(shape) if shape is not None else arr

    def nbytes(self, count: int) -> int:
        return count * (self.l // 8)


def pack_bits(bits: np.ndarray) -> bytes:
    """Pack a 0/1 uint8 array into bytes, little-endian within each byte."""
    return np.packbits(np.asarray(bits, np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_bits(buf: bytes, count: int) -> np.ndarray:
    out = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    return out[:count].astype(np.uint8)
