"""Unbiased stochastic low-precision quantization of model vectors.

Coordinates are rounded to an ``eta``-spaced grid of ``2**s`` points
starting at ``lo``: a value between grid points ``k`` and ``k+1`` lands
on ``k`` with probability ``1 - frac`` and on ``k+1`` with probability
``frac``, where ``frac`` is the fractional grid position. The result is
unbiased with per-coordinate variance at most ``eta**2 / 4``. A
bit-exact little-endian wire encoding backs the proportional
communication cost model (an s-bit exchange costs ``s/16`` of the
16-bit unquantized exchange).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QuantizerSpec",
    "QuantizedVector",
    "quantize",
    "dequantize",
    "variance_bound",
    "encode",
    "decode",
    "wire_size",
    "message_bits",
    "comm_time",
    "UNQUANTIZED_BITS",
]

MAGIC = b"QV"
WIRE_VERSION = 1
HEADER_SIZE = 16  # magic(2) + version(1) + s(1) + p(4) + eta(8)
LO_PREFIX_SIZE = 8
UNQUANTIZED_BITS = 16  # reference precision of an uncompressed exchange

_GRID_SNAP = 1e-9  # fractional positions this close to a grid point are exact


@dataclass(frozen=True)
class QuantizerSpec:
    """Grid step ``eta``, bit width ``s`` and lower edge ``lo``.

    The representable points are ``lo + k * eta`` for
    ``k = 0 .. 2**s - 1``; ``lo`` defaults to ``-eta * 2**(s-1)``, which
    centers the grid near zero.
    """

    eta: float
    s: int
    lo: float | None = None

    def __post_init__(self) -> None:
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not (1 <= self.s <= 16):
            raise ValueError(f"s must be in 1..16, got {self.s}")
        if self.lo is None:
            object.__setattr__(self, "lo", -self.eta * 2 ** (self.s - 1))

    @property
    def num_levels(self) -> int:
        return 2**self.s

    @property
    def hi(self) -> float:
        return self.lo + (self.num_levels - 1) * self.eta

    def grid(self) -> np.ndarray:
        return self.lo + self.eta * np.arange(self.num_levels)


@dataclass(eq=False, frozen=True)
class QuantizedVector:
    """Level indices on a quantizer grid, plus the clamp diagnostic.

    ``clamped`` counts coordinates that fell outside the representable
    range and were clamped to the nearest edge before rounding;
    unbiasedness does not hold for those coordinates. It is a
    diagnostic, not part of the value: equality and the wire format
    ignore it.
    """

    spec: QuantizerSpec
    levels: np.ndarray
    clamped: int = field(default=0)

    def __post_init__(self) -> None:
        levels = np.asarray(self.levels, dtype=np.uint32)
        if levels.ndim != 1:
            raise ValueError("levels must be a 1-d sequence")
        if levels.size and int(levels.max()) >= self.spec.num_levels:
            raise ValueError("level index out of range for spec")
        levels.setflags(write=False)
        object.__setattr__(self, "levels", levels)

    @property
    def p(self) -> int:
        return int(self.levels.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedVector):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.levels, other.levels)

    def __hash__(self):
        return hash((self.spec, self.levels.tobytes()))


def _stochastic_levels(x, spec: QuantizerSpec, rng: np.random.Generator):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("quantize expects a 1-d vector")
    clipped = np.clip(x, spec.lo, spec.hi)
    clamped = int(np.count_nonzero((x < spec.lo) | (x > spec.hi)))

    g = (clipped - spec.lo) / spec.eta
    k = np.floor(g)
    frac = g - k
    # snap float noise so grid-aligned inputs round deterministically
    k = np.where(frac > 1.0 - _GRID_SNAP, k + 1.0, k)
    frac = np.where((frac < _GRID_SNAP) | (frac > 1.0 - _GRID_SNAP), 0.0, frac)

    up = rng.random(x.size) < frac
    levels = np.clip(k + up, 0, spec.num_levels - 1)
    return levels, clamped


def quantize(x, spec: QuantizerSpec, rng: np.random.Generator) -> QuantizedVector:
    """Stochastically round ``x`` coordinate-wise onto the spec's grid.

    Out-of-range coordinates are clamped to the nearest edge and counted
    in the result. The expected dequantized value equals the clamped
    input; coordinates already on a grid point are reproduced exactly.
    """
    levels, clamped = _stochastic_levels(x, spec, rng)
    return QuantizedVector(spec=spec, levels=levels.astype(np.uint32), clamped=clamped)


def quantize_values(x, spec: QuantizerSpec, rng: np.random.Generator):
    """Quantize and immediately dequantize: ``(grid values, clamp count)``.

    Same draws as :func:`quantize` with identical rng state; this is the
    hot-loop path that skips building the level-index container.
    """
    levels, clamped = _stochastic_levels(x, spec, rng)
    return spec.lo + levels * spec.eta, clamped


def dequantize(q: QuantizedVector) -> np.ndarray:
    """Exact grid values ``lo + level * eta``."""
    return q.spec.lo + q.levels.astype(float) * q.spec.eta


def variance_bound(spec: QuantizerSpec, p: int) -> float:
    """Worst-case total variance ``p * eta**2 / 4`` over a p-vector."""
    if p < 0:
        raise ValueError("dimension must be non-negative")
    return p * spec.eta**2 / 4.0


def _pack_levels(levels: np.ndarray, s: int) -> bytes:
    bits = np.unpackbits(
        levels.astype("<u2").view(np.uint8).reshape(-1, 2), axis=1, bitorder="little"
    )[:, :s]
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def _unpack_levels(payload: bytes, p: int, s: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    bits = bits[: p * s].reshape(p, s)
    padded = np.zeros((p, 16), dtype=np.uint8)
    padded[:, :s] = bits
    return (
        np.packbits(padded, axis=1, bitorder="little")
        .view("<u2")
        .reshape(p)
        .astype(np.uint32)
    )


def encode(q: QuantizedVector) -> bytes:
    """Wire format: 16-byte header, 8-byte ``lo`` prefix, LSB-first packed levels.

    Header layout (little-endian): magic ``QV``, version byte, ``s``
    byte, ``p`` as uint32, ``eta`` as float64.
    """
    header = MAGIC + struct.pack("<BBId", WIRE_VERSION, q.spec.s, q.p, q.spec.eta)
    lo = struct.pack("<d", q.spec.lo)
    return header + lo + _pack_levels(q.levels, q.spec.s)


def decode(data: bytes) -> QuantizedVector:
    """Inverse of :func:`encode`; rejects bad magic, version, or short payloads."""
    if len(data) < HEADER_SIZE + LO_PREFIX_SIZE:
        raise ValueError("message shorter than header")
    if data[:2] != MAGIC:
        raise ValueError(f"bad magic {data[:2]!r}")
    version, s, p, eta = struct.unpack("<BBId", data[2:HEADER_SIZE])
    if version != WIRE_VERSION:
        raise ValueError(f"unsupported version {version}")
    if not (1 <= s <= 16):
        raise ValueError(f"invalid bit width {s}")
    (lo,) = struct.unpack("<d", data[HEADER_SIZE : HEADER_SIZE + LO_PREFIX_SIZE])
    payload = data[HEADER_SIZE + LO_PREFIX_SIZE :]
    needed = (p * s + 7) // 8
    if len(payload) < needed:
        raise ValueError(f"truncated payload: need {needed} bytes, got {len(payload)}")
    levels = _unpack_levels(payload[:needed], p, s)
    return QuantizedVector(spec=QuantizerSpec(eta=eta, s=s, lo=lo), levels=levels)


def wire_size(spec: QuantizerSpec, p: int) -> int:
    """Total encoded size in bytes for a p-vector."""
    return HEADER_SIZE + LO_PREFIX_SIZE + (p * spec.s + 7) // 8


def message_bits(spec: QuantizerSpec, p: int) -> int:
    """Payload bits ``p * s`` (fixed header excluded from the cost model)."""
    return p * spec.s


def comm_time(spec: QuantizerSpec, p: int, tc: float) -> float:
    """Transfer seconds for a quantized p-vector.

    ``tc`` is the transfer time of the same vector at the 16-bit
    reference precision, so an s-bit exchange costs ``tc * s / 16``.
    """
    if tc < 0:
        raise ValueError("tc must be >= 0")
    return tc * spec.s / UNQUANTIZED_BITS
