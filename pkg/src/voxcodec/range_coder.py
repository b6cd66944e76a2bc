"""Carry-less 32-bit range coder (Subbotin renormalization) over 16-bit
cumulative frequency tables.

Symbols outside a table's range are coded as the table's escape bin followed
by the raw 32-bit two's-complement value, sent as two uniform 16-bit symbols.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .entropy import PROB_BITS, PROB_TOTAL

TOP = 1 << 24
BOT = 1 << 16
MASK = 0xFFFFFFFF


class TruncatedStreamError(ValueError):
    pass


@dataclass(frozen=True)
class CodedStream:
    data: bytes
    symbol_count: int


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK

    def encode(self, cum_lo, freq):
        r = self.range >> PROB_BITS
        self.low += cum_lo * r
        self.range = r * freq
        self._normalize()

    def finish(self):
        for _ in range(4):
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self):
        if self.pos >= len(self.data):
            raise TruncatedStreamError("range-coded stream is truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self):
        self._r = self.range >> PROB_BITS
        value = ((self.code - self.low) & MASK) // self._r
        if value >= PROB_TOTAL:
            raise ValueError("corrupt range-coded stream")
        return value

    def consume(self, cum_lo, freq):
        self.low = (self.low + cum_lo * self._r) & MASK
        self.range = self._r * freq
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.code = ((self.code << 8) | self._byte()) & MASK
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK


def _raw32(enc, value):
    u = int(value) & MASK
    enc.encode(u >> 16, 1)
    enc.encode(u & 0xFFFF, 1)


def _read_raw32(dec):
    hi = dec.target()
    dec.consume(hi, 1)
    lo = dec.target()
    dec.consume(lo, 1)
    u = (hi << 16) | lo
    return u - (1 << 32) if u & 0x80000000 else u


def encode_symbols(symbols, tables):
    """Code ``symbols[i]`` under ``tables[i]``."""
    symbols = [int(s) for s in np.asarray(symbols).ravel()]
    if len(symbols) != len(tables):
        raise ValueError(f"{len(symbols)} symbols but {len(tables)} tables")
    enc = RangeEncoder()
    for s, t in zip(symbols, tables):
        b = t.bin_of(s)
        cum = t.cum
        enc.encode(int(cum[b]), int(cum[b + 1] - cum[b]))
        if t.is_escape(b):
            _raw32(enc, s)
    return CodedStream(enc.finish(), len(symbols))


def decode_symbols(stream, tables):
    data = stream.data if isinstance(stream, CodedStream) else bytes(stream)
    count = stream.symbol_count if isinstance(stream, CodedStream) else len(tables)
    if count != len(tables):
        raise ValueError(f"stream holds {count} symbols but {len(tables)} tables given")
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    for i, t in enumerate(tables):
        cum = t.cum
        v = dec.target()
        b = int(np.searchsorted(cum, v, side="right")) - 1
        dec.consume(int(cum[b]), int(cum[b + 1] - cum[b]))
        out[i] = _read_raw32(dec) if t.is_escape(b) else t.symbol_of(b)
    return out
