"""64-bit range coder over discretized Gaussian frequency tables.

Tables cover the symbol range [-256, 256] with a 16-bit total.  Each cumulative
entry is computable on its own in O(1)::

    cdf[k] = floor(Phi((k - 256.5 - mu_frac) / sigma) * (2**16 - 513)) + k

for 1 <= k <= 512, with cdf[0] = 0 and cdf[513] = 2**16.  The ``+ k`` term gives
every symbol at least one count, and the outermost bins absorb the tails.  The
coder can therefore evaluate just the two entries it needs per symbol instead of
materializing 514-entry tables.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

SYMBOL_MIN = -256
SYMBOL_MAX = 256
NUM_SYMBOLS = SYMBOL_MAX - SYMBOL_MIN + 1
PRECISION = 16
TOTAL = 1 << PRECISION
_SPREAD = TOTAL - NUM_SYMBOLS
_RANGE_BOTTOM = np.uint64(1 << 56)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


class CorruptStreamError(ValueError):
    """The byte stream cannot have been produced by ``range_encode`` with these tables."""


@dataclass(frozen=True)
class QuantizedCDF:
    """Cumulative frequencies of one discretized Gaussian, ``cdf[i]`` for symbol ``i - 256``."""

    mu_frac: float
    sigma: float
    cdf: np.ndarray  # int64, length NUM_SYMBOLS + 1

    def freq(self, symbol: int) -> int:
        i = symbol - SYMBOL_MIN
        return int(self.cdf[i + 1] - self.cdf[i])

    def probability(self, symbol: int) -> float:
        return self.freq(symbol) / TOTAL

    def masses(self) -> np.ndarray:
        return np.diff(self.cdf) / TOTAL


@numba.njit(cache=True)
def _cdf_entry(k, mu_frac, sigma):
    if k <= 0:
        return 0
    if k >= NUM_SYMBOLS:
        return TOTAL
    b = (k - 256.5 - mu_frac) / sigma
    phi = 0.5 * math.erfc(-b * _INV_SQRT2)
    return int(math.floor(phi * _SPREAD)) + k


@numba.njit(cache=True)
def _fill_table(mu_frac, sigma, out):
    for k in range(NUM_SYMBOLS + 1):
        out[k] = _cdf_entry(k, mu_frac, sigma)


def gaussian_cdf_table(mu_frac: float, sigma: float) -> QuantizedCDF:
    if not -0.5 <= mu_frac < 0.5:
        raise ValueError(f"mu_frac must lie in [-0.5, 0.5), got {mu_frac}")
    if not sigma > 0 or not math.isfinite(sigma):
        raise ValueError(f"sigma must be positive and finite, got {sigma}")
    cdf = np.empty(NUM_SYMBOLS + 1, dtype=np.int64)
    _fill_table(float(mu_frac), float(sigma), cdf)
    return QuantizedCDF(float(mu_frac), float(sigma), cdf)


# -- encoder -----------------------------------------------------------------

@numba.njit(cache=True)
def _emit(out, pos, low, rng):
    # shift out top bytes until the range is wide again
    while rng < _RANGE_BOTTOM:
        out[pos] = np.uint8(low >> np.uint64(56))
        pos += 1
        low = low << np.uint64(8)
        rng = rng << np.uint64(8)
    return pos, low, rng


@numba.njit(cache=True)
def _carry(out, pos):
    i = pos - 1
    while out[i] == 0xFF:
        out[i] = 0
        i -= 1
    out[i] += 1


@numba.njit(cache=True)
def _encode_one(out, pos, low, rng, lo, hi):
    r = rng >> np.uint64(PRECISION)
    new_low = low + r * np.uint64(lo)
    if new_low < low:
        _carry(out, pos)
    rng = r * np.uint64(hi - lo)
    return _emit(out, pos, new_low, rng)


@numba.njit(cache=True)
def _encode_gaussian(symbols, mu_frac, sigma, out):
    low = np.uint64(0)
    rng = np.uint64(0xFFFFFFFFFFFFFFFF)
    pos = 0
    for i in range(symbols.shape[0]):
        k = symbols[i] - SYMBOL_MIN
        lo = _cdf_entry(k, mu_frac[i], sigma[i])
        hi = _cdf_entry(k + 1, mu_frac[i], sigma[i])
        pos, low, rng = _encode_one(out, pos, low, rng, lo, hi)
    return pos, low, rng


@numba.njit(cache=True)
def _encode_tables(symbols, tables, out):
    low = np.uint64(0)
    rng = np.uint64(0xFFFFFFFFFFFFFFFF)
    pos = 0
    for i in range(symbols.shape[0]):
        k = symbols[i] - SYMBOL_MIN
        pos, low, rng = _encode_one(out, pos, low, rng, tables[i, k], tables[i, k + 1])
    return pos, low, rng


def _finish(out: np.ndarray, pos: int, low: int, rng: int) -> bytes:
    """Append the shortest tail that pins a value inside [low, low + rng), then drop trailing zeros."""
    buf = bytearray(out[:pos].tobytes())
    for nbytes in range(9):
        unit = 1 << (64 - 8 * nbytes)
        v = -(-low // unit) * unit
        if v - low < rng:
            break
    if v >> 64:
        _carry_bytes(buf)
        v &= (1 << 64) - 1
    buf += (v >> (64 - 8 * nbytes)).to_bytes(nbytes, "big") if nbytes else b""
    return bytes(buf.rstrip(b"\x00"))


def _carry_bytes(buf: bytearray) -> None:
    i = len(buf) - 1
    while buf[i] == 0xFF:
        buf[i] = 0
        i -= 1
    buf[i] += 1


def _check_symbols(symbols: np.ndarray) -> None:
    if symbols.size and (symbols.min() < SYMBOL_MIN or symbols.max() > SYMBOL_MAX):
        raise ValueError(f"symbols must lie in [{SYMBOL_MIN}, {SYMBOL_MAX}]")


def _as_params(symbols, mu_frac, sigma):
    symbols = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
    n = symbols.size
    mu_frac = np.ascontiguousarray(np.broadcast_to(np.asarray(mu_frac, dtype=np.float64), (n,)))
    sigma = np.ascontiguousarray(np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,)))
    if n and (mu_frac.min() < -0.5 or mu_frac.max() >= 0.5):
        raise ValueError("mu_frac must lie in [-0.5, 0.5)")
    if n and not (np.all(sigma > 0) and np.all(np.isfinite(sigma))):
        raise ValueError("sigma must be positive and finite")
    return symbols, mu_frac, sigma


def encode_gaussian(symbols, mu_frac, sigma) -> bytes:
    """Range-code ``symbols`` against per-symbol Gaussian tables given by their parameters."""
    symbols, mu_frac, sigma = _as_params(symbols, mu_frac, sigma)
    _check_symbols(symbols)
    out = np.zeros(2 * symbols.size + 16, dtype=np.uint8)
    pos, low, rng = _encode_gaussian(symbols, mu_frac, sigma, out)
    return _finish(out, pos, int(low), int(rng))


def _stack(cdfs) -> np.ndarray:
    if len(cdfs) == 0:
        return np.zeros((0, NUM_SYMBOLS + 1), dtype=np.int64)
    return np.ascontiguousarray(np.stack([c.cdf for c in cdfs]), dtype=np.int64)


def range_encode(symbols, cdfs) -> bytes:
    symbols = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
    if symbols.size != len(cdfs):
        raise ValueError(f"got {symbols.size} symbols but {len(cdfs)} tables")
    _check_symbols(symbols)
    out = np.zeros(2 * symbols.size + 16, dtype=np.uint8)
    pos, low, rng = _encode_tables(symbols, _stack(cdfs), out)
    return _finish(out, pos, int(low), int(rng))


# -- decoder -----------------------------------------------------------------

@numba.njit(cache=True)
def _byte(data, pos):
    if pos < data.shape[0]:
        return np.uint64(data[pos])
    return np.uint64(0)


@numba.njit(cache=True)
def _decode_start(data):
    code = np.uint64(0)
    for i in range(8):
        code = (code << np.uint64(8)) | _byte(data, i)
    return code


@numba.njit(cache=True)
def _decode_norm(data, pos, code, rng):
    while rng < _RANGE_BOTTOM:
        code = (code << np.uint64(8)) | _byte(data, pos)
        pos += 1
        rng = rng << np.uint64(8)
    return pos, code, rng


@numba.njit(cache=True)
def _decode_gaussian(data, mu_frac, sigma, out):
    """Returns bytes consumed, or -1 when the stream is inconsistent with the tables."""
    rng = np.uint64(0xFFFFFFFFFFFFFFFF)
    code = _decode_start(data)
    pos = 8
    for i in range(out.shape[0]):
        r = rng >> np.uint64(PRECISION)
        v = code // r
        if v >= np.uint64(TOTAL):
            return -1
        t = np.int64(v)
        lo_k, hi_k = 0, NUM_SYMBOLS  # cdf[lo_k] <= t < cdf[hi_k]
        while hi_k - lo_k > 1:
            mid = (lo_k + hi_k) // 2
            if _cdf_entry(mid, mu_frac[i], sigma[i]) <= t:
                lo_k = mid
            else:
                hi_k = mid
        lo = _cdf_entry(lo_k, mu_frac[i], sigma[i])
        hi = _cdf_entry(lo_k + 1, mu_frac[i], sigma[i])
        out[i] = lo_k + SYMBOL_MIN
        code -= r * np.uint64(lo)
        rng = r * np.uint64(hi - lo)
        pos, code, rng = _decode_norm(data, pos, code, rng)
    return pos


@numba.njit(cache=True)
def _decode_tables(data, tables, out):
    rng = np.uint64(0xFFFFFFFFFFFFFFFF)
    code = _decode_start(data)
    pos = 8
    for i in range(out.shape[0]):
        r = rng >> np.uint64(PRECISION)
        v = code // r
        if v >= np.uint64(TOTAL):
            return -1
        t = np.int64(v)
        k = np.searchsorted(tables[i], t, side="right") - 1
        lo = tables[i, k]
        hi = tables[i, k + 1]
        out[i] = k + SYMBOL_MIN
        code -= r * np.uint64(lo)
        rng = r * np.uint64(hi - lo)
        pos, code, rng = _decode_norm(data, pos, code, rng)
    return pos


def _check_tail(data: bytes, consumed: int) -> None:
    if consumed < 0:
        raise CorruptStreamError("code value outside the coding range")
    if len(data) > consumed:
        raise CorruptStreamError(f"{len(data) - consumed} trailing bytes after the last symbol")
    if data and data[-1] == 0:
        raise CorruptStreamError("stream ends in a zero byte, which the encoder never emits")


def decode_gaussian(data: bytes, mu_frac, sigma, n: int | None = None) -> np.ndarray:
    if n is None:
        n = np.size(sigma)
    _, mu_frac, sigma = _as_params(np.zeros(n), mu_frac, sigma)
    out = np.empty(n, dtype=np.int64)
    consumed = _decode_gaussian(np.frombuffer(data, dtype=np.uint8), mu_frac, sigma, out)
    _check_tail(data, consumed)
    return out


def range_decode(data: bytes, cdfs) -> np.ndarray:
    out = np.empty(len(cdfs), dtype=np.int64)
    consumed = _decode_tables(np.frombuffer(data, dtype=np.uint8), _stack(cdfs), out)
    _check_tail(data, consumed)
    return out


def ideal_bits(symbols, mu_frac, sigma) -> float:
    """-sum log2 of the quantized-table probabilities, i.e. what an ideal coder would spend."""
    symbols, mu_frac, sigma = _as_params(symbols, mu_frac, sigma)
    freqs = np.empty(symbols.size, dtype=np.int64)
    _freqs(symbols, mu_frac, sigma, freqs)
    return float(-(np.log2(freqs) - PRECISION).sum())


@numba.njit(cache=True)
def _freqs(symbols, mu_frac, sigma, out):
    for i in range(symbols.shape[0]):
        k = symbols[i] - SYMBOL_MIN
        out[i] = _cdf_entry(k + 1, mu_frac[i], sigma[i]) - _cdf_entry(k, mu_frac[i], sigma[i])
