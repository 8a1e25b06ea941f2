"""Bit sequences, a cursor-based reader/writer, and the integer-list codec.

Bits are stored most-significant first.  Every multi-bit field written by this
package goes through :class:`BitWriter` so that field layouts are defined in a
single place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BitStream",
    "BitWriter",
    "BitReader",
    "ParseError",
    "encode_ints",
    "decode_ints",
    "signed_width",
]


class ParseError(ValueError):
    """Malformed bit stream.  ``offset`` is the bit position of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (bit offset {offset})")
        self.offset = offset


@dataclass(eq=False)
class BitStream:
    """Ordered sequence of bits backed by a ``uint8`` array of 0/1 values."""

    bits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8).ravel()
        if bits.size and bits.max() > 1:
            raise ValueError("bit values must be 0 or 1")
        self.bits = bits

    def __len__(self):
        return int(self.bits.size)

    def __eq__(self, other):
        if not isinstance(other, BitStream):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __add__(self, other):
        return BitStream(np.concatenate([self.bits, other.bits]))

    @classmethod
    def from_int(cls, value, width):
        if value < 0 or value >> width:
            raise ValueError(f"{value} does not fit in {width} bits")
        return cls(np.array([(value >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.uint8))

    @classmethod
    def random(cls, n, rng):
        return cls(rng.integers(0, 2, size=n, dtype=np.uint8))

    def to_int(self):
        if not len(self):
            return 0
        return int("".join("1" if b else "0" for b in self.bits.tolist()), 2)

    def to_bytes(self):
        """32-bit big-endian bit count followed by the bits, zero padded."""
        return len(self).to_bytes(4, "big") + np.packbits(self.bits).tobytes()

    @classmethod
    def from_bytes(cls, data):
        if len(data) < 4:
            raise ParseError("missing length prefix", 0)
        n = int.from_bytes(data[:4], "big")
        body = np.frombuffer(data[4:], dtype=np.uint8)
        if body.size * 8 < n:
            raise ParseError(f"stream declares {n} bits but holds {body.size * 8}", 32)
        return cls(np.unpackbits(body)[:n])


class BitWriter:
    def __init__(self):
        self._chunks = []

    def __len__(self):
        return sum(len(c) for c in self._chunks)

    def write_uint(self, value, width):
        value = int(value)
        if width == 0:
            if value:
                raise ValueError(f"{value} does not fit in 0 bits")
            return
        self._chunks.append(BitStream.from_int(value, width).bits)

    def write_signed(self, value, width):
        """Sign-magnitude: one sign bit followed by ``width - 1`` magnitude bits."""
        value = int(value)
        self.write_uint(1 if value < 0 else 0, 1)
        self.write_uint(abs(value), width - 1)

    def write_gamma(self, value):
        """Elias-gamma code for an integer >= 1."""
        value = int(value)
        if value < 1:
            raise ValueError("gamma code needs a positive integer")
        n = value.bit_length()
        self.write_uint(0, n - 1)
        self.write_uint(value, n)

    def write_bits(self, bits):
        if isinstance(bits, BitStream):
            bits = bits.bits
        self._chunks.append(np.asarray(bits, dtype=np.uint8).ravel())

    def getvalue(self):
        if not self._chunks:
            return BitStream()
        return BitStream(np.concatenate(self._chunks))


class BitReader:
    def __init__(self, stream):
        self.bits = stream.bits if isinstance(stream, BitStream) else np.asarray(stream, dtype=np.uint8)
        self.pos = 0

    @property
    def remaining(self):
        return self.bits.size - self.pos

    def _take(self, n, what):
        if n > self.remaining:
            raise ParseError(f"truncated {what}: need {n} bits, {self.remaining} left", self.pos)
        out = self.bits[self.pos:self.pos + n]
        self.pos += n
        return out

    def read_uint(self, width, what="field"):
        if width == 0:
            return 0
        value = 0
        for b in self._take(width, what).tolist():
            value = (value << 1) | b
        return value

    def read_signed(self, width, what="field"):
        sign = self.read_uint(1, what)
        mag = self.read_uint(width - 1, what)
        if sign and mag == 0:
            raise ParseError(f"negative zero in {what}", self.pos - width)
        return -mag if sign else mag

    def read_gamma(self, what="run length"):
        start = self.pos
        zeros = 0
        while True:
            if not self.remaining:
                raise ParseError(f"truncated {what}", start)
            if self.bits[self.pos]:
                break
            zeros += 1
            self.pos += 1
        return self.read_uint(zeros + 1, what)

    def read_bits(self, n, what="bits"):
        return BitStream(self._take(n, what).copy())


def signed_width(values):
    """Sign-magnitude width that can hold every value (0 for an all-zero list)."""
    values = np.asarray(values, dtype=np.int64)
    if not values.size:
        return 0
    top = int(np.abs(values).max())
    return top.bit_length() + 1 if top else 0


def _runs(values):
    values = np.asarray(values, dtype=np.int64)
    if not values.size:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    starts = np.flatnonzero(np.r_[True, values[1:] != values[:-1]])
    lengths = np.diff(np.r_[starts, values.size])
    return values[starts], lengths


def encode_ints(writer, values, width, signed=False):
    """Write ``values`` as the shorter of a raw fixed-width list and a run-length list.

    A leading flag bit selects the branch (0 raw, 1 run-length).  Run lengths
    use Elias-gamma codes.  The element count is not written: the reader must
    know it.  Returns the branch taken.
    """
    put = writer.write_signed if signed and width else writer.write_uint
    values = np.asarray(values, dtype=np.int64)
    heads, lengths = _runs(values)
    raw_bits = width * values.size
    rle_bits = width * heads.size + sum(2 * int(n).bit_length() - 1 for n in lengths)
    if rle_bits < raw_bits:
        writer.write_uint(1, 1)
        for v, n in zip(heads.tolist(), lengths.tolist()):
            put(v, width)
            writer.write_gamma(n)
        return "rle"
    writer.write_uint(0, 1)
    for v in values.tolist():
        put(v, width)
    return "raw"


def decode_ints(reader, count, width, signed=False, what="integer list"):
    get = reader.read_signed if signed and width else reader.read_uint
    start = reader.pos
    flag = reader.read_uint(1, what)
    if not flag:
        return np.array([get(width, what) for _ in range(count)], dtype=np.int64)
    out = []
    while len(out) < count:
        v = get(width, what)
        n = reader.read_gamma(what)
        out.extend([v] * n)
    if len(out) != count:
        raise ParseError(f"{what}: runs cover {len(out)} entries, expected {count}", start)
    return np.array(out, dtype=np.int64)
