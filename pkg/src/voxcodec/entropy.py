"""Quantization, Laplace bin probabilities, rate estimates and the integer
CDF tables shared by the range encoder and decoder."""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np

from .transforms import LOG_SIGMA_MAX, LOG_SIGMA_MIN, SIGMA_MAX, SIGMA_MIN

LN2 = float(np.log(2.0))
PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS
MU_STEPS = 256
SIGMA_LEVELS = 256
MAX_SYMBOL = 2047


def round_half_away(x):
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_round(y):
    """Hard rounding (ties away from zero) to integer symbols."""
    return round_half_away(y).astype(np.int64)


def quantize_noise(y, rng):
    """Additive U(-1/2, 1/2) noise used as a differentiable rounding proxy."""
    y = np.asarray(y)
    return y + rng.uniform(-0.5, 0.5, size=y.shape).astype(y.dtype, copy=False)


# --------------------------------------------------------------------------
# Laplace bins


def laplace_log_mass(v, mu, b, grad=False):
    """Natural log of the Laplace(mu, b) mass on ``[v - 1/2, v + 1/2]``.

    With ``grad=True`` also returns the partial derivatives with respect to
    ``v``, ``mu`` and ``b``.  The two branches (interval away from / around
    the mode) are each written to avoid cancellation.
    """
    v, mu, b = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (v, mu, b)))
    if np.any(b <= 0):
        raise ValueError("Laplace scale must be positive")
    d = v - mu
    t = np.abs(d)
    u = 1.0 / b
    far = t >= 0.5
    logm = np.empty_like(t)
    tf, uf = t[far], u[far]
    logm[far] = np.log(0.5) - (tf - 0.5) * uf + np.log(-np.expm1(-uf))
    tn, un = t[~far], u[~far]
    e1 = np.expm1(-(tn + 0.5) * un)
    e2 = np.expm1((tn - 0.5) * un)
    m_near = -0.5 * (e1 + e2)
    logm[~far] = np.log(m_near)
    if not grad:
        return logm

    dl_dt = np.empty_like(t)
    dl_du = np.empty_like(t)
    dl_dt[far] = -uf
    dl_du[far] = -(tf - 0.5) + 1.0 / np.expm1(uf)
    x1, x2 = e1 + 1.0, e2 + 1.0
    dl_dt[~far] = 0.5 * un * (x1 - x2) / m_near
    dl_du[~far] = (0.5 * (tn + 0.5) * x1 - 0.5 * (tn - 0.5) * x2) / m_near
    sgn = np.sign(d)
    dv = dl_dt * sgn
    db = dl_du * (-u * u)
    return logm, dv, -dv, db


def laplace_bin_mass(n, mu, sigma):
    """P(round(Y) = n) for Y ~ Laplace(mu, sigma)."""
    return np.exp(laplace_log_mass(n, mu, sigma))


def factorized_bin_mass(n, channel, loc, scale):
    """Per-channel factorized prior: a Laplace with that channel's location
    and scale."""
    return laplace_bin_mass(n, np.asarray(loc)[channel], np.asarray(scale)[channel])


def laplace_cdf(x, mu, b):
    x, mu, b = (np.asarray(a, dtype=np.float64) for a in (x, mu, b))
    z = (x - mu) / b
    return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0)), 1 - 0.5 * np.exp(-np.maximum(z, 0)))


def rate_bits(masses):
    """Total self-information in bits."""
    masses = np.asarray(masses, dtype=np.float64)
    if masses.size == 0:
        return 0.0
    return float(-np.sum(np.log2(masses)))


def laplace_bits(v, mu, sigma):
    return float(-np.sum(laplace_log_mass(v, mu, sigma)) / LN2)


# --------------------------------------------------------------------------
# tape op


def _reduce_to(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def rate_op(tape, v, mu, sigma):
    """Scalar Var: total bits of ``v`` under Laplace(mu, sigma) bins.

    ``mu`` and ``sigma`` broadcast against ``v``; gradients are reduced back
    to their shapes.
    """
    logm, dv, dmu, db = laplace_log_mass(v.value, mu.value, sigma.value, grad=True)
    bits = np.asarray(-logm.sum() / LN2)
    shapes = (v.value.shape, mu.value.shape, sigma.value.shape)

    def back(g):
        c = -g / LN2
        return tuple(_reduce_to(c * d, s) for d, s in zip((dv, dmu, db), shapes))

    return tape.op(bits, (v, mu, sigma), back)


def channel_prior(tape, prefix):
    """(loc, scale) Vars for a factorized prior, shaped to broadcast over
    (N, C, D, H, W)."""
    loc = tape.param(prefix + ".loc")
    raw = tape.param(prefix + ".logscale")
    c = loc.value.shape[0]
    loc_b = tape.op(loc.value.reshape(1, c, 1, 1, 1), (loc,), lambda g: (g.reshape(c),))
    raw_b = tape.op(raw.value.reshape(1, c, 1, 1, 1), (raw,), lambda g: (g.reshape(c),))
    return loc_b, tape.clamped_exp(raw_b, LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def factorized_scale(logscale):
    return np.exp(np.clip(logscale, LOG_SIGMA_MIN, LOG_SIGMA_MAX))


# --------------------------------------------------------------------------
# parameter quantization shared by encoder and decoder

_LOG_STEP = (LOG_SIGMA_MAX - LOG_SIGMA_MIN) / (SIGMA_LEVELS - 1)


def quantize_mu(mu):
    """Index on the 1/256 location grid."""
    return round_half_away(np.asarray(mu, dtype=np.float64) * MU_STEPS).astype(np.int64)


def quantize_sigma(sigma):
    """Index into the 256-entry geometric scale grid over [1e-2, 64]."""
    s = np.clip(np.asarray(sigma, dtype=np.float64), SIGMA_MIN, SIGMA_MAX)
    idx = np.floor((np.log(s) - LOG_SIGMA_MIN) / _LOG_STEP + 0.5).astype(np.int64)
    return np.clip(idx, 0, SIGMA_LEVELS - 1)


def mu_value(mu_idx):
    return np.asarray(mu_idx, dtype=np.float64) / MU_STEPS


def sigma_value(sigma_idx):
    return np.exp(LOG_SIGMA_MIN + np.asarray(sigma_idx, dtype=np.float64) * _LOG_STEP)


# --------------------------------------------------------------------------
# CDF tables


@dataclass(frozen=True)
class CdfTable:
    """Cumulative counts over bins ``[esc_lo, lo, ..., hi, esc_hi]``.

    ``cum`` has ``nbins + 1`` entries, starting at 0 and ending at 2^16.
    """

    lo: int
    hi: int
    cum: np.ndarray

    @property
    def nbins(self):
        return self.hi - self.lo + 3

    @property
    def counts(self):
        return np.diff(self.cum)

    def bin_of(self, symbol):
        if symbol < self.lo:
            return 0
        if symbol > self.hi:
            return self.nbins - 1
        return symbol - self.lo + 1

    def is_escape(self, b):
        return b == 0 or b == self.nbins - 1

    def symbol_of(self, b):
        return self.lo + b - 1

    def bits(self, symbol):
        """Code length of ``symbol`` including a 32-bit escape payload."""
        b = self.bin_of(symbol)
        extra = 32 if self.is_escape(b) else 0
        return PROB_BITS - np.log2(float(self.cum[b + 1] - self.cum[b])) + extra

    def to_bytes(self):
        """i16 lo, i16 hi, then the nbins - 1 interior cumulative counts as u16."""
        inner = self.cum[1:-1]
        return struct.pack("<hh", self.lo, self.hi) + inner.astype("<u2").tobytes()

    @classmethod
    def from_bytes(cls, data):
        lo, hi = struct.unpack("<hh", data[:4])
        inner = np.frombuffer(data[4:], dtype="<u2").astype(np.int64)
        if inner.size != hi - lo + 2:
            raise ValueError("CDF table size does not match its symbol range")
        return cls(lo, hi, np.concatenate([[0], inner, [PROB_TOTAL]]))

    def __eq__(self, other):
        return (isinstance(other, CdfTable) and self.lo == other.lo and self.hi == other.hi
                and np.array_equal(self.cum, other.cum))

    def __hash__(self):
        return hash((self.lo, self.hi, self.cum.tobytes()))


def counts_from_masses(masses):
    """Integer counts summing to 2^16, each at least 1.

    Initial counts are ``max(1, round(mass * (2^16 - nbins)))``.  The
    residual is then settled one count at a time: each extra count goes to
    the bin whose count is furthest below its ideal ``mass * 2^16`` (and
    each surplus count is taken from the bin furthest above it, never below
    1), ties going to the lower bin index.
    """
    masses = np.asarray(masses, dtype=np.float64)
    n = masses.size
    if n == 0:
        raise ValueError("empty symbol range")
    if n > PROB_TOTAL // 2:
        raise ValueError(f"too many bins ({n}) for {PROB_BITS}-bit precision")
    masses = np.maximum(masses, 0)
    masses = masses / masses.sum()
    counts = np.maximum(1, round_half_away(masses * (PROB_TOTAL - n))).astype(np.int64)
    ideal = masses * PROB_TOTAL
    deficit = PROB_TOTAL - int(counts.sum())
    rem = (ideal - counts).tolist()
    if deficit > 0:
        heap = [(-r, i) for i, r in enumerate(rem)]
        heapq.heapify(heap)
        for _ in range(deficit):
            r, i = heapq.heappop(heap)
            counts[i] += 1
            heapq.heappush(heap, (r + 1.0, i))
    elif deficit < 0:
        heap = [(r, i) for i, r in enumerate(rem) if counts[i] > 1]
        heapq.heapify(heap)
        for _ in range(-deficit):
            r, i = heapq.heappop(heap)
            counts[i] -= 1
            if counts[i] > 1:
                heapq.heappush(heap, (r + 1.0, i))
    return counts


def table_masses(mu, sigma, lo, hi):
    """Bin masses for ``[esc_lo, lo..hi, esc_hi]`` under Laplace(mu, sigma)."""
    sym = np.arange(lo, hi + 1, dtype=np.float64)
    inner = laplace_bin_mass(sym, mu, sigma)
    below = laplace_cdf(lo - 0.5, mu, sigma)
    above = 1.0 - laplace_cdf(hi + 0.5, mu, sigma)
    return np.concatenate([[below], inner, [above]])


def build_cdf_table(mu_idx, sigma_idx, lo, hi):
    """Deterministic table from quantized parameters (grid indices)."""
    lo, hi = int(lo), int(hi)
    if hi < lo:
        raise ValueError(f"empty symbol range [{lo}, {hi}]")
    masses = table_masses(mu_value(mu_idx), sigma_value(sigma_idx), lo, hi)
    counts = counts_from_masses(masses)
    return CdfTable(lo, hi, np.concatenate([[0], np.cumsum(counts)]))


def cdf_from_counts(counts, lo):
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != PROB_TOTAL or np.any(counts < 1):
        raise ValueError("counts must be positive and sum to 2^16")
    return CdfTable(int(lo), int(lo) + counts.size - 3, np.concatenate([[0], np.cumsum(counts)]))


def symbol_range(symbols):
    """Observed (min, max), clipped to the table range limit."""
    symbols = np.asarray(symbols)
    if symbols.size == 0:
        return 0, 0
    lo = int(np.clip(symbols.min(), -MAX_SYMBOL, MAX_SYMBOL))
    hi = int(np.clip(symbols.max(), -MAX_SYMBOL, MAX_SYMBOL))
    return lo, hi


class TableCache:
    """Memo of tables keyed by (mu index, sigma index); tables are pure
    functions of these so caching cannot change the output."""

    def __init__(self, lo, hi):
        self.lo, self.hi = lo, hi
        self._cache = {}

    def get(self, mu_idx, sigma_idx):
        key = (int(mu_idx), int(sigma_idx))
        t = self._cache.get(key)
        if t is None:
            t = build_cdf_table(key[0], key[1], self.lo, self.hi)
            self._cache[key] = t
        return t

    def tables(self, mu, sigma):
        mi = quantize_mu(mu).ravel()
        si = quantize_sigma(sigma).ravel()
        return [self.get(a, b) for a, b in zip(mi, si)]
