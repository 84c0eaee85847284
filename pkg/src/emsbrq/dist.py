"""Information-density distributions on a uniform value grid.

Every distribution here lives on the lattice ``{k * step : k integer}`` (nats).  Each
atom of the exact block law is placed on the nearest grid point; ``spread`` records
the largest displacement accumulated so far, which is what the pessimistic and
optimistic evaluations shift thresholds by.  Keeping all grids aligned to the same
lattice means sums of grid values are again grid values and threshold lookups can
be done with integer arithmetic.

Unconditioned (independent-output) laws are stored *tilted*: ``mass[j]`` holds
``P(X = x_j) * exp(x_j)``.  The tilt composes exactly under convolution and keeps the
numbers in range even when the untilted tail probabilities are far below the
smallest double.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from . import kernels
from .channel import LN2, ChannelParams

ROUNDING_MODES = ("pessimistic", "optimistic", "nearest")
CONDITIONED = "conditioned"
UNCONDITIONED = "unconditioned"
ORACLE_GUARD = 10**7


def _check_rounding(rounding):
    if rounding not in ROUNDING_MODES:
        raise ValueError(f"rounding must be one of {ROUNDING_MODES}, got {rounding!r}")


def index_above(t: float, step: float) -> int:
    """Smallest integer k with k * step > t."""
    if math.isinf(t):
        return -(2**62) if t < 0 else 2**62
    k = math.floor(t / step) + 1
    while (k - 1) * step > t:
        k -= 1
    while k * step <= t:
        k += 1
    return k


def index_at_or_above(t: float, step: float) -> int:
    """Smallest integer k with k * step >= t."""
    if math.isinf(t):
        return -(2**62) if t < 0 else 2**62
    k = math.ceil(t / step)
    while (k - 1) * step >= t:
        k -= 1
    while k * step < t:
        k += 1
    return k


@dataclass(frozen=True, eq=False)
class BlockMeasure:
    state: int
    measure: str = CONDITIONED

    def __post_init__(self):
        if self.state not in (0, 1):
            raise ValueError(f"state must be 0 or 1, got {self.state}")
        if self.measure not in (CONDITIONED, UNCONDITIONED):
            raise ValueError(f"unknown measure {self.measure!r}")


@dataclass(frozen=True, eq=False)
class GridPmf:
    """Probability mass on grid values ``(offset + j) * step``.

    ``truncated_mass`` is mass dropped from the lower edge (or sitting at -inf); all
    of it lies at grid values ``<= truncated_below``.  For tilted PMFs it is in
    tilted units and ``neg_inf_prob`` carries the untilted probability of -inf atoms.
    """

    step: float
    offset: int
    mass: np.ndarray
    truncated_mass: float = 0.0
    truncated_below: float = -math.inf
    spread: float = 0.0
    tilted: bool = False
    neg_inf_prob: float = 0.0

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        m = np.ascontiguousarray(self.mass, dtype=np.float64)
        if m.ndim != 1:
            raise ValueError("mass must be one-dimensional")
        if len(m) and m.min() < 0:
            raise ValueError("mass entries must be nonnegative")
        m.setflags(write=False)
        object.__setattr__(self, "mass", m)
        object.__setattr__(self, "offset", int(self.offset))

    @property
    def origin(self) -> float:
        return self.offset * self.step

    @cached_property
    def values(self) -> np.ndarray:
        return (self.offset + np.arange(len(self.mass))) * self.step

    @cached_property
    def total(self) -> float:
        return float(self.mass.sum())

    @property
    def min_value(self) -> float:
        return self.offset * self.step if len(self.mass) else -math.inf

    @property
    def max_value(self) -> float:
        return (self.offset + len(self.mass) - 1) * self.step if len(self.mass) else -math.inf

    def probabilities(self) -> np.ndarray:
        """Untilted probability of every bin."""
        if not self.tilted:
            return self.mass.copy()
        with np.errstate(divide="ignore"):
            return np.exp(np.log(self.mass) - self.values)

    def mean(self) -> float:
        if self.tilted:
            raise ValueError("mean of a tilted PMF is not defined here")
        if self.truncated_mass:
            raise ValueError("mean undefined with truncated mass")
        return float(self.mass @ self.values)

    def to_csv(self, path) -> None:
        """Debug dump of ``bin_value,mass`` rows."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("bin_value,mass\n")
            for x, m in zip(self.values.tolist(), self.probabilities().tolist()):
                fh.write(f"{x!r},{m!r}\n")


def point_mass(step: float, value: float = 0.0) -> GridPmf:
    k = int(round(value / step))
    return GridPmf(step, k, np.ones(1), spread=abs(k * step - value))


def _atom_values(n_uses: int, delta: float, k: np.ndarray) -> np.ndarray:
    """Information density of a length-n_uses pattern with k flips (nats)."""
    base = n_uses * LN2
    if delta == 0.0:
        return np.where(k == 0, base, -np.inf)
    return base + k * math.log(delta) + (n_uses - k) * math.log1p(-delta)


def _log_binom_pmf(n: int, p: float, k: np.ndarray) -> np.ndarray:
    logc = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    if p == 0.0:
        return np.where(k == 0, 0.0, -np.inf)
    return logc + k * math.log(p) + (n - k) * math.log1p(-p)


def block_atoms(params: ChannelParams, state: int, measure: str, blocks: int = 1):
    """Exact atoms ``(values, probabilities)`` of the group sum over ``blocks`` blocks."""
    BlockMeasure(state, measure)
    n = blocks * params.T
    k = np.arange(n + 1)
    delta = params.delta(state)
    logp = _log_binom_pmf(n, delta if measure == CONDITIONED else 0.5, k)
    return _atom_values(n, delta, k), np.exp(logp)


def group_info_pmf(params: ChannelParams, state: int, blocks: int, measure: str,
                   step: float, tilted: bool | None = None) -> GridPmf:
    """Law of the summed information density of ``blocks`` blocks in one state.

    The flip count over all ``blocks * T`` uses is binomial, so the group sum is
    placed on the grid with a single rounding per atom.
    """
    BlockMeasure(state, measure)
    if blocks < 0:
        raise ValueError("blocks must be nonnegative")
    if tilted is None:
        tilted = measure == UNCONDITIONED
    if tilted and measure == CONDITIONED:
        raise ValueError("tilted storage is only used for the unconditioned measure")
    if blocks == 0:
        return replace(point_mass(step), tilted=tilted)
    n = blocks * params.T
    delta = params.delta(state)
    k = np.arange(n + 1)
    v = _atom_values(n, delta, k)
    logp = _log_binom_pmf(n, delta if measure == CONDITIONED else 0.5, k)
    finite = np.isfinite(v) & np.isfinite(logp)
    neg_inf = float(np.exp(logp[~np.isfinite(v)]).sum())
    k, v, logp = k[finite], v[finite], logp[finite]
    idx = np.rint(v / step).astype(np.int64)
    x = idx * step
    spread = float(np.max(np.abs(x - v)))
    w = np.exp(logp + x) if tilted else np.exp(logp)
    lo = int(idx.min())
    mass = np.zeros(int(idx.max()) - lo + 1)
    np.add.at(mass, idx - lo, w)
    pmf = GridPmf(step, lo, mass, spread=spread, tilted=tilted)
    if neg_inf:
        if tilted:
            pmf = replace(pmf, neg_inf_prob=neg_inf)
        else:
            pmf = replace(pmf, truncated_mass=neg_inf, truncated_below=-math.inf)
    return pmf


def block_info_pmf(params: ChannelParams, bm: BlockMeasure, step: float,
                   tilted: bool | None = None) -> GridPmf:
    """Law of one block's information density ``T ln2 + k ln d + (T-k) ln(1-d)``.

    ``k`` is Binomial(T, d) under the conditioned measure and Binomial(T, 1/2) under
    the unconditioned one.  Unconditioned laws are tilted unless ``tilted=False``.
    """
    return group_info_pmf(params, bm.state, 1, bm.measure, step, tilted)


def trim(p: GridPmf) -> GridPmf:
    """Drop exact-zero bins at both edges (lossless)."""
    m = p.mass
    if len(m) and m[0] != 0.0 and m[-1] != 0.0:
        return p
    nz = np.flatnonzero(m)
    if len(nz) == 0:
        return replace(p, offset=0, mass=np.zeros(0))
    a, b = int(nz[0]), int(nz[-1])
    if a == 0 and b == len(p.mass) - 1:
        return p
    return replace(p, offset=p.offset + a, mass=p.mass[a:b + 1])


def prune(p: GridPmf, tol: float) -> GridPmf:
    """Move lower-edge bins with cumulative mass below ``tol`` into ``truncated_mass``."""
    p = trim(p)
    if tol <= 0 or len(p.mass) == 0:
        return p
    c = np.cumsum(p.mass)
    j = int(np.searchsorted(c, tol, side="left"))
    if j == 0:
        return p
    j = min(j, len(p.mass) - 1)
    dropped = float(c[j - 1])
    return trim(replace(
        p,
        offset=p.offset + j,
        mass=p.mass[j:],
        truncated_mass=p.truncated_mass + dropped,
        truncated_below=max(p.truncated_below, (p.offset + j - 1) * p.step),
    ))


def convolve(a: GridPmf, b: GridPmf) -> GridPmf:
    """Law of the independent sum."""
    if a.step != b.step:
        raise ValueError(f"step mismatch: {a.step} vs {b.step}")
    if a.tilted != b.tilted:
        raise ValueError("cannot convolve tilted with untilted PMFs")
    a, b = trim(a), trim(b)
    if len(a.mass) == 0 or len(b.mass) == 0:
        mass = np.zeros(0)
        offset = 0
    else:
        if np.count_nonzero(a.mass) < np.count_nonzero(b.mass):
            a, b = b, a
        idx = np.flatnonzero(b.mass).astype(np.int64)
        mass = kernels.scatter_convolve(a.mass, idx, np.ascontiguousarray(b.mass[idx]),
                                        len(a.mass) + len(b.mass) - 1)
        offset = a.offset + b.offset
    sa, sb = a.total, b.total
    trunc = (sa + a.truncated_mass) * (sb + b.truncated_mass) - sa * sb
    below = -math.inf
    if a.truncated_mass:
        below = max(below, a.truncated_below + b.max_value)
    if b.truncated_mass:
        below = max(below, b.truncated_below + a.max_value)
    return GridPmf(
        a.step, offset, mass,
        truncated_mass=max(trunc, 0.0),
        truncated_below=below,
        spread=a.spread + b.spread,
        tilted=a.tilted,
        neg_inf_prob=1.0 - (1.0 - a.neg_inf_prob) * (1.0 - b.neg_inf_prob),
    )


def convolve_all(pmfs: Sequence[GridPmf], step: float) -> GridPmf:
    out = point_mass(step)
    if pmfs and pmfs[0].tilted:
        out = replace(out, tilted=True)
    for p in pmfs:
        out = convolve(out, p)
    return out


def _shift(p: GridPmf, rounding: str) -> float:
    _check_rounding(rounding)
    return {"pessimistic": -p.spread, "optimistic": p.spread, "nearest": 0.0}[rounding]


def _tilted_sum(p: GridPmf, lo: int) -> float:
    """Untilted probability of bins lo..end."""
    if lo >= len(p.mass):
        return 0.0
    m = p.mass[max(lo, 0):]
    x = p.values[max(lo, 0):]
    with np.errstate(divide="ignore"):
        return float(np.exp(np.log(m) - x).sum())


def ccdf(p: GridPmf, t: float, rounding: str = "pessimistic") -> float:
    """P(X > t) for the unrounded variable behind ``p``.

    ``pessimistic`` returns an upper bound (every bin that may hold a value above
    ``t`` counts, truncated mass included when it might lie above ``t``);
    ``optimistic`` a lower bound; ``nearest`` treats the grid values as exact.
    """
    tt = t + _shift(p, rounding)
    lo = index_above(tt, p.step) - p.offset
    if p.tilted:
        val = _tilted_sum(p, lo)
    else:
        val = float(p.mass[max(lo, 0):].sum()) if lo < len(p.mass) else 0.0
    if rounding == "pessimistic" and p.truncated_mass and p.truncated_below > tt:
        val += p.truncated_mass * (math.exp(-tt) if p.tilted else 1.0)
    return val


def cdf(p: GridPmf, t: float, rounding: str = "pessimistic") -> float:
    """P(X <= t); ``pessimistic`` is an upper bound, ``optimistic`` a lower bound."""
    if p.tilted:
        raise ValueError("cdf is only provided for untilted PMFs")
    tt = t - _shift(p, rounding)
    hi = index_above(tt, p.step) - p.offset
    val = float(p.mass[:max(hi, 0)].sum())
    if p.truncated_mass:
        if rounding == "pessimistic" or p.truncated_below <= tt:
            val += p.truncated_mass
    return val


@dataclass(frozen=True, eq=False)
class ClippedExpTable:
    """Tables for ``h(t) = E[exp(-|X - t|^+)] = F(t) + G(t)``.

    ``F(t) = P(X <= t)`` and ``G(t) = E[exp(t - X); X > t]``.  Built in one backward
    pass: ``R[j] = sum_{i >= j} m_i exp(x_j - x_i)``.
    """

    pmf: GridPmf
    cum: np.ndarray = field(repr=False)
    suffix: np.ndarray = field(repr=False)

    def first_above(self, t: np.ndarray | float) -> np.ndarray:
        p = self.pmf
        t = np.asarray(t, dtype=float)
        k = np.floor(t / p.step).astype(np.int64) + 1
        k -= ((k - 1) * p.step > t)
        k += (k * p.step <= t)
        return k - p.offset

    def below(self, t) -> np.ndarray:
        j = np.clip(self.first_above(t), 0, len(self.cum))
        c = np.concatenate(([0.0], self.cum))
        return c[j]

    def above(self, t) -> np.ndarray:
        p = self.pmf
        t = np.asarray(t, dtype=float)
        j = self.first_above(t)
        n = len(self.suffix)
        jc = np.clip(j, 0, n)
        r = np.concatenate((self.suffix, [0.0]))[jc]
        x = (p.offset + jc) * p.step
        with np.errstate(under="ignore"):
            return r * np.exp(np.minimum(t - x, 0.0))

    def __call__(self, t) -> np.ndarray:
        return self.below(t) + self.above(t)

    @cached_property
    def cum_ext(self) -> np.ndarray:
        """``cum_ext[j] = P(bins < j)``; length ``len(pmf) + 1``."""
        return np.concatenate(([0.0], self.cum))

    def grid_values(self) -> np.ndarray:
        """``h`` at every bin value of the PMF."""
        r = np.exp(-self.pmf.step)
        nxt = np.concatenate((self.suffix[1:], [0.0]))
        return self.cum + r * nxt


def clipped_exp_functional(p: GridPmf) -> ClippedExpTable:
    p = trim(p)
    return ClippedExpTable(
        pmf=p,
        cum=np.cumsum(p.mass),
        suffix=kernels.suffix_discount(np.ascontiguousarray(p.mass), math.exp(-p.step)),
    )


def exact_two_group_ccdf(params: ChannelParams, n0: int, n1: int,
                         measures: Sequence[str], t: float) -> float:
    """Exact ``P(sum of block densities > t)`` by double summation over flip totals.

    Blocks sharing state and measure pool into one binomial flip count.  Test oracle
    only; refuses configurations whose double sum exceeds ``10**7`` terms.
    """
    T = params.T
    if (n0 * T + 1) * (n1 * T + 1) > ORACLE_GUARD:
        raise ValueError("configuration too large for the exact oracle")
    if t == -math.inf:
        return 1.0
    parts = []
    for state, count, measure in ((0, n0, measures[0]), (1, n1, measures[1])):
        n = count * T
        k = np.arange(n + 1)
        p = params.delta(state) if measure == CONDITIONED else 0.5
        if count == 0:
            parts.append((np.zeros(1), np.ones(1)))
            continue
        parts.append((_atom_values(n, params.delta(state), k), np.exp(_log_binom_pmf(n, p, k))))
    (v0, p0), (v1, p1) = parts
    total = v0[:, None] + v1[None, :]
    return float((p0[:, None] * p1[None, :])[total > t].sum())


@dataclass
class FirstPassageResult:
    """Hitting-time law; ``stop_prob[k]`` is P(stop at block k + 1)."""

    stop_prob: np.ndarray
    residual: list
    expected_stop: float
    tail_prob: float

    @property
    def horizon(self) -> int:
        return len(self.stop_prob)


def crossing_index(p: GridPmf, level: float, rounding: str) -> int:
    """First local bin index counted as having reached ``level``."""
    _check_rounding(rounding)
    lv = level + {"pessimistic": p.spread, "optimistic": -p.spread, "nearest": 0.0}[rounding]
    return index_at_or_above(lv, p.step) - p.offset


def first_passage_step(residual: GridPmf, block: GridPmf, level: float,
                       rounding: str = "pessimistic", prune_tol: float = 0.0):
    """Advance one block: returns ``(stop_mass, new_residual)``."""
    d = convolve(residual, block)
    k = crossing_index(d, level, rounding)
    k = min(max(k, 0), len(d.mass))
    stop = float(d.mass[k:].sum())
    rest = trim(replace(d, mass=d.mass[:k]))
    if prune_tol:
        rest = prune(rest, prune_tol)
    return stop, rest


def first_passage(blocks: Sequence[GridPmf], levels: Sequence[float],
                  rounding: str = "pessimistic", prune_tol: float = 0.0) -> FirstPassageResult:
    """Iterated convolution with absorption at cumulative levels ``Gamma_k``.

    Under ``pessimistic`` rounding a bin stops only if every value it may represent
    has reached the level, so stopping is never overstated.
    """
    if len(levels) < len(blocks):
        raise ValueError("need one level per block")
    if not blocks:
        raise ValueError("need at least one block")
    residual = point_mass(blocks[0].step)
    stops, residuals = [], []
    for block, level in zip(blocks, levels):
        s, residual = first_passage_step(residual, block, level, rounding, prune_tol)
        stops.append(s)
        residuals.append(residual)
    stop = np.array(stops)
    tail = residual.total + residual.truncated_mass
    horizon = len(blocks)
    expected = float(np.arange(1, horizon + 1) @ stop + horizon * tail)
    return FirstPassageResult(stop, residuals, expected, tail)


def reverse_dot(u: np.ndarray, v: np.ndarray, J: int, right: float = 0.0,
                left_ratio: float = 0.0) -> float:
    """``sum_i u[i] v_ext[J - i]`` for a table ``v`` extended off its ends.

    ``v_ext[j] = right`` for ``j >= len(v)`` and ``v[0] * left_ratio**(-j)`` for
    ``j < 0``.  With every law on one lattice this turns a threshold lookup per atom
    into a single dot product against a reversed slice.
    """
    n_u, n_v = len(u), len(v)
    if n_u == 0 or n_v == 0:
        return 0.0
    i_lo = max(0, J - n_v + 1)
    i_hi = min(n_u - 1, J)
    s = 0.0
    if i_lo <= i_hi:
        s = float(np.dot(u[i_lo:i_hi + 1], v[J - i_hi:J - i_lo + 1][::-1]))
    if right and i_lo > 0:
        s += right * float(u[:min(i_lo, n_u)].sum())
    if left_ratio and J + 1 < n_u:
        start = max(J + 1, 0)
        k = np.arange(start - J, n_u - J, dtype=float)
        with np.errstate(under="ignore"):
            s += v[0] * float(u[start:] @ np.power(left_ratio, k))
    return s


def mix(pmfs: Sequence[GridPmf], coeffs: Sequence[float]) -> GridPmf:
    """Linear combination ``sum c_i p_i`` of untilted laws on one lattice."""
    if not pmfs:
        raise ValueError("need at least one PMF")
    step = pmfs[0].step
    if any(p.step != step or p.tilted for p in pmfs):
        raise ValueError("mix needs untilted PMFs on one lattice")
    live = [(trim(p), c) for p, c in zip(pmfs, coeffs) if len(trim(p).mass)]
    trunc = math.fsum(c * p.truncated_mass for p, c in zip(pmfs, coeffs))
    below = max((p.truncated_below for p in pmfs if p.truncated_mass), default=-math.inf)
    spread = max(p.spread for p in pmfs)
    if not live:
        return GridPmf(step, 0, np.zeros(0), trunc, below, spread)
    lo = min(p.offset for p, _ in live)
    hi = max(p.offset + len(p.mass) for p, _ in live)
    out = np.zeros(hi - lo)
    for p, c in live:
        out[p.offset - lo:p.offset - lo + len(p.mass)] += c * p.mass
    return GridPmf(step, lo, out, trunc, below, spread)
