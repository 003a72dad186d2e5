"""Range coder for discretized-Gaussian symbols and uniform indices.

The coder follows the carry-propagating LZMA design: a 33-bit ``low`` register,
a 32-bit ``range``, byte-wise renormalisation and a cached output byte that
absorbs carries. State is pure integer, so the emitted bytes are identical on
every platform once the frequency tables are.

Stream layout produced by :func:`encode_stream`::

    coder bytes (leading zero byte and trailing zero bytes stripped)
    u32 BE  CRC-32 of the coder bytes
    u32 BE  CRC-32 of the symbols, each packed as int32 little-endian

The first checksum catches any corrupted byte (CRC-32 detects every burst of
up to 32 bits); the second catches a decoder that ran with the wrong tables.

The decoder reads zeros past the end of the coder bytes, which is what makes
stripping trailing zeros lossless.
"""
from __future__ import annotations

import bisect
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

PRECISION = 16
TOTAL = 1 << PRECISION
SUPPORT = (-64, 63)
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_RAW_BIAS = 1 << 31


class CorruptStreamError(ValueError):
    """Payload failed its integrity check or could not be decoded."""


@dataclass(frozen=True)
class CdfTable:
    """Quantised CDF over ``[s_min, s_max]`` plus a trailing escape bin.

    ``cdf`` has ``K + 1`` entries for K = s_max - s_min + 2 bins, starting at
    0 and ending at ``2**precision``.
    """

    cdf: np.ndarray = field(repr=False)
    s_min: int = SUPPORT[0]
    s_max: int = SUPPORT[1]
    precision: int = PRECISION

    @property
    def escape(self) -> int:
        return self.s_max - self.s_min + 1

    @property
    def freqs(self) -> np.ndarray:
        return np.diff(self.cdf)

    def pmf(self) -> np.ndarray:
        return self.freqs / float(1 << self.precision)


def discretized_gaussian_pmf(mu, sigma, support=SUPPORT) -> np.ndarray:
    """Real-valued bin masses, escape mass (both tails) in the last column."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))[:, None]
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))[:, None]
    s = np.arange(support[0], support[1] + 1, dtype=np.float64)[None, :]
    upper = ndtr((s - mu + 0.5) / sigma)
    lower = ndtr((s - mu - 0.5) / sigma)
    inside = upper - lower
    tails = lower[:, :1] + (1.0 - upper[:, -1:])
    return np.concatenate([inside, np.maximum(tails, 0.0)], axis=1)


def quantize_pmf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Integer frequencies summing to 2**precision, every bin at least 1.

    Largest-remainder rounding keeps every bin within two units of its
    real-valued target.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    total = 1 << precision
    rows, K = pmf.shape
    if K == 0:
        raise ValueError("empty support")
    if K > total:
        raise ValueError("support larger than the frequency total")
    pmf = pmf / pmf.sum(axis=1, keepdims=True)
    target = pmf * total
    freq = np.maximum(np.floor(target).astype(np.int64), 1)
    remainder = target - np.floor(target)
    deficit = total - freq.sum(axis=1)
    for r in range(rows):
        d = int(deficit[r])
        if d > 0:
            order = np.argsort(-remainder[r], kind="stable")
            freq[r, order[:d]] += 1
        while d < 0:
            # take back from bins that can spare a unit, smallest remainder first
            spare = np.flatnonzero(freq[r] > 1)
            order = spare[np.argsort(remainder[r, spare], kind="stable")]
            take = order[: -d]
            freq[r, take] -= 1
            d += len(take)
    return freq


def build_cdf(mu: float, sigma: float, support=SUPPORT, precision: int = PRECISION) -> CdfTable:
    if support[1] < support[0]:
        raise ValueError("empty support")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    freq = quantize_pmf(discretized_gaussian_pmf(mu, sigma, support), precision)[0]
    cdf = np.concatenate([[0], np.cumsum(freq)])
    return CdfTable(cdf, support[0], support[1], precision)


@dataclass(frozen=True)
class CdfBank:
    """Many tables sharing one support, stored as rows of a CDF matrix."""

    cdfs: np.ndarray = field(repr=False)
    s_min: int = SUPPORT[0]
    s_max: int = SUPPORT[1]
    precision: int = PRECISION

    @classmethod
    def from_gaussians(cls, mu, sigma, support=SUPPORT, precision=PRECISION) -> "CdfBank":
        freq = quantize_pmf(discretized_gaussian_pmf(mu, sigma, support), precision)
        cdfs = np.concatenate([np.zeros((len(freq), 1), np.int64), np.cumsum(freq, axis=1)], axis=1)
        return cls(cdfs, support[0], support[1], precision)

    def table(self, i: int) -> CdfTable:
        return CdfTable(self.cdfs[i], self.s_min, self.s_max, self.precision)


@dataclass(frozen=True)
class Uniform:
    """Uniform model over ``0..size-1`` (size at most 2**16)."""

    size: int

    def __post_init__(self):
        if not 2 <= self.size <= TOTAL:
            raise ValueError(f"uniform alphabet size must be in [2, {TOTAL}]")


def _as_rows(tables, count: int):
    """Normalise table arguments to (list of CDF lists, per-symbol row index, support)."""
    if isinstance(tables, CdfTable):
        return [tables.cdf.tolist()], [0] * count, (tables.s_min, tables.s_max)
    if isinstance(tables, tuple) and len(tables) == 2 and isinstance(tables[0], CdfBank):
        bank, index = tables
        index = np.asarray(index, dtype=np.int64).ravel()
        if len(index) != count:
            raise ValueError("table index length does not match symbol count")
        return [row.tolist() for row in bank.cdfs], index.tolist(), (bank.s_min, bank.s_max)
    tables = list(tables)
    if len(tables) != count:
        raise ValueError("one table per symbol required")
    supports = {(t.s_min, t.s_max) for t in tables}
    if len(supports) > 1:
        raise ValueError("all tables must share one support")
    return [t.cdf.tolist() for t in tables], list(range(count)), supports.pop() if supports else SUPPORT


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._symbols: list[int] = []

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def _encode(self, start: int, size: int, total: int):
        r = self.range // total
        self.low += start * r
        self.range = size * r
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode(self, symbols, tables):
        symbols = np.asarray(symbols, dtype=np.int64).ravel().tolist()
        rows, index, (s_min, s_max) = _as_rows(tables, len(symbols))
        escape = s_max - s_min + 1
        enc = self._encode
        for s, i in zip(symbols, index):
            cdf = rows[i]
            total = cdf[-1]
            j = s - s_min
            if 0 <= j < escape:
                enc(cdf[j], cdf[j + 1] - cdf[j], total)
            else:
                enc(cdf[escape], cdf[escape + 1] - cdf[escape], total)
                raw = s + _RAW_BIAS
                if not 0 <= raw <= _MASK32:
                    raise ValueError(f"symbol {s} outside the 32-bit escape range")
                enc(raw >> 16, 1, TOTAL)
                enc(raw & 0xFFFF, 1, TOTAL)
        self._symbols.extend(symbols)

    def encode_uniform(self, values, model: Uniform):
        values = np.asarray(values, dtype=np.int64).ravel().tolist()
        for v in values:
            if not 0 <= v < model.size:
                raise ValueError(f"value {v} outside uniform alphabet of size {model.size}")
            self._encode(v, 1, model.size)
        self._symbols.extend(values)

    def finish(self) -> bytes:
        # settle on the value in [low, low + range) with the most trailing zero bits
        hi = self.low + self.range - 1
        for shift in (32, 24, 16, 8, 0):
            v = ((self.low + (1 << shift) - 1) >> shift) << shift
            if v <= hi:
                self.low = v
                break
        for _ in range(5):
            self._shift_low()
        out = bytes(self._out)
        if out[:1] != b"\x00":
            raise AssertionError("range coder invariant violated: nonzero lead byte")
        body = out[1:].rstrip(b"\x00")
        return body + struct.pack(">II", zlib.crc32(body), _symbol_crc(self._symbols))


TRAILER = 8


def _symbol_crc(symbols: Sequence[int]) -> int:
    return zlib.crc32(np.asarray(symbols, dtype=np.int64).astype("<i4").tobytes())


class RangeDecoder:
    def __init__(self, data: bytes):
        if len(data) < TRAILER:
            raise CorruptStreamError("payload shorter than its checksum trailer")
        self._body = bytes(data[:-TRAILER])
        self._body_crc, self._sym_crc = struct.unpack(">II", data[-TRAILER:])
        if zlib.crc32(self._body) != self._body_crc:
            raise CorruptStreamError("payload checksum mismatch")
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()
        self._symbols: list[int] = []

    def _next(self) -> int:
        p = self._pos
        self._pos = p + 1
        return self._body[p] if p < len(self._body) else 0

    def _target(self, total: int):
        r = self.range // total
        return r, min(self.code // r, total - 1)

    def _consume(self, r: int, start: int, size: int):
        self.code -= start * r
        self.range = size * r
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8

    def decode(self, count: int, tables) -> np.ndarray:
        rows, index, (s_min, s_max) = _as_rows(tables, count)
        escape = s_max - s_min + 1
        out = []
        for i in index:
            cdf = rows[i]
            r, v = self._target(cdf[-1])
            j = bisect.bisect_right(cdf, v) - 1
            self._consume(r, cdf[j], cdf[j + 1] - cdf[j])
            if j == escape:
                r, hi = self._target(TOTAL)
                self._consume(r, hi, 1)
                r, lo = self._target(TOTAL)
                self._consume(r, lo, 1)
                out.append(((hi << 16) | lo) - _RAW_BIAS)
            else:
                out.append(j + s_min)
        self._symbols.extend(out)
        return np.asarray(out, dtype=np.int64)

    def decode_uniform(self, count: int, model: Uniform) -> np.ndarray:
        out = []
        for _ in range(count):
            r, v = self._target(model.size)
            self._consume(r, v, 1)
            out.append(v)
        self._symbols.extend(out)
        return np.asarray(out, dtype=np.int64)

    def verify(self):
        if _symbol_crc(self._symbols) != self._sym_crc:
            raise CorruptStreamError("decoded symbols fail their checksum")


def encode_stream(symbols, tables) -> bytes:
    enc = RangeEncoder()
    enc.encode(symbols, tables)
    return enc.finish()


def decode_stream(data: bytes, tables, count: int) -> np.ndarray:
    dec = RangeDecoder(data)
    out = dec.decode(count, tables)
    dec.verify()
    return out


def ideal_bits(symbols, tables) -> float:
    """Sum of -log2 p(s) under the quantised tables (escape raw bits included)."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    rows, index, (s_min, s_max) = _as_rows(tables, len(symbols))
    escape = s_max - s_min + 1
    bits = 0.0
    for s, i in zip(symbols.tolist(), index):
        cdf = rows[i]
        j = s - s_min
        if not 0 <= j < escape:
            j = escape
            bits += 32.0
        bits -= np.log2((cdf[j + 1] - cdf[j]) / cdf[-1])
    return float(bits)
