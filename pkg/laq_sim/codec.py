"""
Gradient-innovation codec.
Quantizes the difference between a fresh local gradient and the stored
quantization to b bits per coordinate, packs the codes MSB-first and frames
them in a little-endian wire message.
"""

import logging
import math
import struct
from dataclasses import dataclass
from typing import Final, Sequence, Union

import numpy as np

from laq_sim.constants import (
    HEADER_FORMAT, RADIUS_FORMAT, MIN_BITS, MAX_BITS, RADIUS_BITS, Errors
)
from laq_sim.exceptions import CodecError

logger = logging.getLogger(__name__)

HEADER_SIZE: Final[int] = struct.calcsize(HEADER_FORMAT)
RADIUS_SIZE: Final[int] = struct.calcsize(RADIUS_FORMAT)

CodeSequence = Union[Sequence[int], np.ndarray]


def _check_bits(bits: int) -> None:
    if isinstance(bits, bool) or not isinstance(bits, (int, np.integer)):
        raise CodecError(Errors.BITS_OUT_OF_RANGE.value.format(bits=bits))
    if not MIN_BITS <= bits <= MAX_BITS:
        raise CodecError(Errors.BITS_OUT_OF_RANGE.value.format(bits=bits))


def levels(bits: int) -> int:
    """Largest code value, 2^b - 1"""
    _check_bits(bits)
    return (1 << int(bits)) - 1


def granularity(bits: int) -> float:
    """Quantization granularity tau = 1/(2^b - 1)"""
    return 1.0 / levels(bits)


def packed_length(p: int, bits: int) -> int:
    """Bytes needed for p codes of `bits` bits each"""
    return (p * bits + 7) // 8


@dataclass(frozen=True, eq=False)
class QuantizedInnovation:
    """Radius plus b-bit codes of one gradient innovation"""
    radius: float
    codes: np.ndarray
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        if not math.isfinite(self.radius) or self.radius < 0.0:
            raise CodecError(Errors.NON_FINITE.value.format(what="radius"))
        codes = np.asarray(self.codes, dtype=np.uint64)
        if codes.ndim != 1:
            raise CodecError(Errors.SHAPE_MISMATCH.value.format(
                what="codes", expected="1-d", actual=codes.shape))
        if codes.size and int(codes.max()) > levels(self.bits):
            raise CodecError(Errors.CODE_TOO_WIDE.value.format(
                code=int(codes.max()), bits=self.bits))
        if self.radius == 0.0 and codes.any():
            raise CodecError("Zero radius requires all codes to be zero")
        object.__setattr__(self, "codes", codes)

    @property
    def tau(self) -> float:
        return granularity(self.bits)

    @property
    def dimension(self) -> int:
        return int(self.codes.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedInnovation):
            return NotImplemented
        return (self.radius == other.radius and self.bits == other.bits
                and np.array_equal(self.codes, other.codes))


def quantize_innovation(gradient: np.ndarray, center: np.ndarray,
                        bits: int) -> QuantizedInnovation:
    """Quantize gradient - center onto the uniform grid of the hypercube
    of radius ||gradient - center||_inf around center"""
    _check_bits(bits)
    gradient = np.asarray(gradient, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if gradient.ndim != 1 or gradient.size < 1:
        raise CodecError(Errors.SHAPE_MISMATCH.value.format(
            what="gradient", expected="non-empty 1-d vector", actual=gradient.shape))
    if center.shape != gradient.shape:
        raise CodecError(Errors.DIMENSION_MISMATCH.value.format(
            expected=gradient.size, actual=center.size))

    diff = gradient - center
    if not np.all(np.isfinite(diff)):
        raise CodecError(Errors.NON_FINITE.value.format(what="gradient innovation"))

    radius = float(np.max(np.abs(diff)))
    if radius == 0.0:
        return QuantizedInnovation(0.0, np.zeros(gradient.size, dtype=np.uint64), bits)

    top = levels(bits)
    tau = 1.0 / top
    # scale by 1/R before tau; 2*tau*R underflows for subnormal R.
    # floor(x + 1/2) can land on 2^b at the upper face; clamp back into range
    scaled = np.floor((diff / radius + 1.0) / (2.0 * tau) + 0.5)
    codes = np.clip(scaled, 0, top).astype(np.uint64)
    return QuantizedInnovation(radius, codes, bits)


def decode_innovation(qi: QuantizedInnovation) -> np.ndarray:
    """Reconstruct deltaQ = 2*tau*R*q - R; the new stored quantization is center + deltaQ"""
    if qi.radius == 0.0:
        return np.zeros(qi.dimension, dtype=np.float64)
    return qi.radius * (2.0 * qi.tau * qi.codes.astype(np.float64) - 1.0)


def pack_codes(codes: CodeSequence, bits: int) -> bytes:
    """Concatenate b-bit fields MSB-first, zero-padding the final byte"""
    _check_bits(bits)
    values = np.asarray(codes)
    if values.ndim != 1:
        raise CodecError(Errors.SHAPE_MISMATCH.value.format(
            what="codes", expected="1-d", actual=values.shape))
    if values.size == 0:
        return b""
    if values.dtype.kind not in "ui":
        raise CodecError(Errors.INVALID_VALUE.value.format(key="codes", value=values.dtype))
    if values.dtype.kind == "i" and np.any(values < 0):
        raise CodecError(Errors.CODE_TOO_WIDE.value.format(code=int(values.min()), bits=bits))
    values = values.astype(np.uint64)
    too_wide = values > np.uint64(levels(bits))
    if np.any(too_wide):
        raise CodecError(Errors.CODE_TOO_WIDE.value.format(
            code=int(values[np.argmax(too_wide)]), bits=bits))

    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint64)
    bit_matrix = ((values[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bit_matrix.ravel()).tobytes()


def unpack_codes(data: bytes, bits: int, p: int) -> np.ndarray:
    """Inverse of pack_codes"""
    _check_bits(bits)
    expected = packed_length(p, bits)
    raw = np.frombuffer(bytes(data), dtype=np.uint8)
    if raw.size != expected:
        raise CodecError(Errors.PACKED_LENGTH.value.format(
            actual=raw.size, p=p, bits=bits, expected=expected))

    bit_array = np.unpackbits(raw)
    used = p * bits
    if np.any(bit_array[used:]):
        raise CodecError(Errors.NONZERO_PADDING.value)

    weights = np.uint64(1) << np.arange(bits - 1, -1, -1, dtype=np.uint64)
    fields = bit_array[:used].reshape(p, bits).astype(np.uint64)
    return (fields * weights).sum(axis=1, dtype=np.uint64)


def payload_bits(p: int, bits: int) -> int:
    """Accounted size of one quantized upload: 32 radius bits plus b bits per coordinate"""
    _check_bits(bits)
    if p < 1:
        raise CodecError(Errors.DIMENSION_MISMATCH.value.format(expected=">= 1", actual=p))
    return RADIUS_BITS + bits * p


@dataclass(frozen=True)
class WireMessage:
    """One quantized upload as it travels from worker to server"""
    worker_id: int
    iteration: int
    bits: int
    dimension: int
    radius: float
    packed_codes: bytes

    @classmethod
    def from_innovation(cls, worker_id: int, iteration: int,
                        qi: QuantizedInnovation) -> 'WireMessage':
        """Frame an innovation, rounding its radius to binary32"""
        with np.errstate(over="ignore"):
            radius = float(np.float32(qi.radius))
        if not math.isfinite(radius):
            raise CodecError(Errors.RADIUS_OVERFLOW.value.format(radius=qi.radius))
        codes = qi.codes if radius > 0.0 else np.zeros(qi.dimension, dtype=np.uint64)
        return cls(worker_id, iteration, qi.bits, qi.dimension, radius,
                   pack_codes(codes, qi.bits))

    def to_innovation(self) -> QuantizedInnovation:
        codes = unpack_codes(self.packed_codes, self.bits, self.dimension)
        return QuantizedInnovation(self.radius, codes, self.bits)

    def innovation(self) -> np.ndarray:
        """Decoded deltaQ, identical on every receiver"""
        return decode_innovation(self.to_innovation())

    @property
    def accounted_bits(self) -> int:
        return payload_bits(self.dimension, self.bits)


def encode_message(message: WireMessage) -> bytes:
    """Serialize: header (worker_id u16, iteration u32, bits u8, dimension u32),
    radius binary32, packed codes; all little-endian"""
    expected = packed_length(message.dimension, message.bits)
    if len(message.packed_codes) != expected:
        raise CodecError(Errors.PACKED_LENGTH.value.format(
            actual=len(message.packed_codes), p=message.dimension,
            bits=message.bits, expected=expected))
    try:
        header = struct.pack(HEADER_FORMAT, message.worker_id, message.iteration,
                             message.bits, message.dimension)
        radius = struct.pack(RADIUS_FORMAT, message.radius)
    except (struct.error, OverflowError) as e:
        raise CodecError(f"Cannot encode message header: {e}") from e
    return header + radius + bytes(message.packed_codes)


def decode_message(buffer: bytes) -> WireMessage:
    """Parse a buffer produced by encode_message"""
    buffer = bytes(buffer)
    fixed = HEADER_SIZE + RADIUS_SIZE
    if len(buffer) < fixed:
        raise CodecError(Errors.TRUNCATED_MESSAGE.value.format(
            actual=len(buffer), expected=fixed))

    worker_id, iteration, bits, dimension = struct.unpack_from(HEADER_FORMAT, buffer, 0)
    _check_bits(bits)
    (radius,) = struct.unpack_from(RADIUS_FORMAT, buffer, HEADER_SIZE)

    expected = fixed + packed_length(dimension, bits)
    if len(buffer) != expected:
        raise CodecError(Errors.MESSAGE_LENGTH.value.format(
            dimension=dimension, expected=expected, actual=len(buffer)))

    packed = buffer[fixed:]
    unpack_codes(packed, bits, dimension)
    return WireMessage(worker_id, iteration, bits, dimension, radius, packed)
