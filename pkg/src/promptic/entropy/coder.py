"""Renormalizing range coder over 16-bit quantized CDFs, plus the chunk wire format.

The coder follows the carry-propagating byte-oriented design used by LZMA:
a 32-bit ``range``, a ``low`` register with one carry bit, and a one-byte
cache with a run of pending 0xFF bytes.  Symbols outside a CDF row's support
are coded as that row's escape symbol followed by an Elias-gamma code of the
distance to the support and a sign bit, sent as equiprobable bypass bits.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from typing import Iterable, List, Sequence, Tuple

from .tables import PRECISION, CdfTable

__all__ = [
    "CorruptStreamError",
    "TruncatedStreamError",
    "RangeEncoder",
    "RangeDecoder",
    "range_encode",
    "range_decode",
    "pack_chunk",
    "unpack_chunk",
    "SENTINEL",
]

SENTINEL = 0xBEEF
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class CorruptStreamError(ValueError):
    """The byte stream cannot have been produced by the encoder."""


class TruncatedStreamError(CorruptStreamError):
    """The byte stream ends before all declared data was read."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if (low & _MASK32) < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low << 8) & _MASK32

    def encode(self, start: int, freq: int):
        """Code the interval [start, start + freq) of a 2^16 total."""
        r = self.range >> PRECISION
        self.low += start * r
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int):
        """Code ``nbits`` (<= 16) equiprobable bits."""
        r = self.range >> nbits
        self.low += value * r
        self.range = r
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        if self._next_byte() != 0:
            raise CorruptStreamError("range-coded stream must start with a zero byte")
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError("range-coded stream ended early")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _normalize(self):
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
            self.range <<= 8

    def decode(self, cdf: Sequence[int]) -> int:
        """Return the bin index whose interval contains the current code."""
        r = self.range >> PRECISION
        value = self.code // r
        if value >= 1 << PRECISION:
            raise CorruptStreamError("code value outside the coding interval")
        s = bisect_right(cdf, value) - 1
        start = cdf[s]
        self.code -= start * r
        self.range = r * (cdf[s + 1] - start)
        self._normalize()
        return s

    def decode_bits(self, nbits: int) -> int:
        r = self.range >> nbits
        value = self.code // r
        if value >> nbits:
            raise CorruptStreamError("bypass value outside the coding interval")
        self.code -= value * r
        self.range = r
        self._normalize()
        return value

    def check_finished(self):
        if self.pos != len(self.data):
            raise CorruptStreamError(
                f"{len(self.data) - self.pos} unread bytes after the last symbol"
            )


def _encode_uint(enc: RangeEncoder, value: int, nbits: int):
    while nbits > 16:
        nbits -= 16
        enc.encode_bits((value >> nbits) & 0xFFFF, 16)
    enc.encode_bits(value & ((1 << nbits) - 1), nbits)


def _decode_uint(dec: RangeDecoder, nbits: int) -> int:
    value = 0
    while nbits > 16:
        nbits -= 16
        value = (value << 16) | dec.decode_bits(16)
    return (value << nbits) | dec.decode_bits(nbits)


def _encode_escape(enc: RangeEncoder, distance: int, negative: bool):
    # Elias-gamma: (L - 1) zero bits, a one bit, then the low L - 1 bits of
    # distance; bypass bits must be grouped exactly as the decoder reads them
    length = distance.bit_length()
    for _ in range(length - 1):
        enc.encode_bits(0, 1)
    enc.encode_bits(1, 1)
    if length > 1:
        _encode_uint(enc, distance & ((1 << (length - 1)) - 1), length - 1)
    enc.encode_bits(1 if negative else 0, 1)


def _decode_escape(dec: RangeDecoder) -> Tuple[int, bool]:
    zeros = 0
    while dec.decode_bits(1) == 0:
        zeros += 1
        if zeros > 62:
            raise CorruptStreamError("escape code longer than 63 bits")
    distance = (1 << zeros) | (_decode_uint(dec, zeros) if zeros else 0)
    negative = dec.decode_bits(1) == 1
    return distance, negative


def range_encode(symbols: Iterable[int], table: CdfTable, contexts: Iterable[int]) -> bytes:
    """Entropy-code integer ``symbols``, each with the CDF row named by its context."""
    enc = RangeEncoder()
    cdfs, offsets = table.cdfs, table.offsets
    for value, ctx in zip(symbols, contexts):
        cdf = cdfs[ctx]
        escape = len(cdf) - 2
        idx = value - offsets[ctx]
        if 0 <= idx < escape:
            enc.encode(cdf[idx], cdf[idx + 1] - cdf[idx])
        else:
            enc.encode(cdf[escape], cdf[escape + 1] - cdf[escape])
            if idx < 0:
                _encode_escape(enc, -idx, True)
            else:
                _encode_escape(enc, idx - escape + 1, False)
    return enc.finish()


def range_decode(data: bytes, table: CdfTable, contexts: Sequence[int], count: int) -> List[int]:
    """Decode ``count`` symbols coded by :func:`range_encode` with the same contexts."""
    if len(contexts) < count:
        raise ValueError("fewer contexts than symbols to decode")
    dec = RangeDecoder(data)
    cdfs, offsets = table.cdfs, table.offsets
    out = []
    for i in range(count):
        ctx = contexts[i]
        cdf = cdfs[ctx]
        escape = len(cdf) - 2
        idx = dec.decode(cdf)
        if idx == escape:
            distance, negative = _decode_escape(dec)
            idx = -distance if negative else escape - 1 + distance
        out.append(idx + offsets[ctx])
    dec.check_finished()
    return out


def pack_chunk(payload: bytes) -> bytes:
    """Big-endian u32 length, payload, then the 0xBEEF sentinel."""
    return struct.pack(">I", len(payload)) + payload + struct.pack(">H", SENTINEL)


def unpack_chunk(buf: bytes, pos: int = 0) -> Tuple[bytes, int]:
    """Read one chunk starting at ``pos``; returns (payload, position after it)."""
    if len(buf) - pos < 4:
        raise TruncatedStreamError("missing chunk length")
    (length,) = struct.unpack_from(">I", buf, pos)
    end = pos + 4 + length
    if end + 2 > len(buf):
        raise TruncatedStreamError(
            f"chunk declares {length} bytes but only {max(len(buf) - pos - 4, 0)} remain"
        )
    (sentinel,) = struct.unpack_from(">H", buf, end)
    if sentinel != SENTINEL:
        raise CorruptStreamError(f"bad chunk sentinel 0x{sentinel:04X}")
    return bytes(buf[pos + 4:end]), end + 2
