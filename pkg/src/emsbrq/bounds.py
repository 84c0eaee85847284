"""Achievability bounds for expandable-message-space codes and their inversions.

All bounds are evaluated for a fixed realized state sequence.  Message set sizes are
real numbers ``M_n >= 1`` carried as ``ln M_n`` so products never overflow.

Rounding modes (see :mod:`emsbrq.dist`):

* ``pessimistic`` - every threshold comparison is resolved against the caller, so
  the result is an upper bound on the exact value of the bound;
* ``optimistic`` - the mirror image, a lower bound;
* ``nearest`` - grid values are taken as exact.

Exponential weights ``exp(gamma - i)`` are evaluated through the tilted masses
``P_u * exp(x_grid) = P_c * exp(x_grid - i)``, which carry the exact exponent, so
only threshold comparisons are affected by the grid.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dist
from .channel import LN2, ChannelParams
from .dist import CONDITIONED, UNCONDITIONED, GridPmf

DEFAULT_STEP = 1e-5
DEFAULT_PRUNE_TOL = 0.0
SF_PRUNE_TOL = 1e-15
MAX_BISECT = 200
_SIGN = {"pessimistic": 1.0, "optimistic": -1.0, "nearest": 0.0}


def log_expm1(x: float) -> float:
    """``ln(e^x - 1)`` for ``x >= 0`` without overflow (``-inf`` at 0)."""
    if x < 0:
        raise ValueError("log_expm1 needs x >= 0")
    if x == 0:
        return -math.inf
    if x > 30:
        return x + math.log1p(-math.exp(-x))
    return math.log(math.expm1(x))


def _check_states(states) -> tuple:
    st = tuple(int(s) for s in states)
    if any(s not in (0, 1) for s in st):
        raise ValueError(f"states must be 0 or 1, got {states}")
    return st


def _counts(states) -> tuple[int, int]:
    n1 = sum(states)
    return len(states) - n1, n1


@dataclass(frozen=True)
class MessageSchedule:
    """Per-epoch message set sizes (as ``ln M_n``) and optional threshold increments."""

    log_sizes: tuple
    gamma: tuple | None = None

    def __post_init__(self):
        ls = tuple(float(x) for x in self.log_sizes)
        if any(not math.isfinite(x) or x < 0 for x in ls):
            raise ValueError(f"every M_n must be finite and >= 1, got log sizes {ls}")
        object.__setattr__(self, "log_sizes", ls)
        if self.gamma is not None:
            g = tuple(float(x) for x in self.gamma)
            if any(not math.isfinite(x) for x in g):
                raise ValueError("gamma entries must be finite")
            object.__setattr__(self, "gamma", g)

    @classmethod
    def from_sizes(cls, sizes: Sequence[float], gamma=None) -> "MessageSchedule":
        sizes = [float(m) for m in sizes]
        if any(not m >= 1 for m in sizes):
            raise ValueError(f"every M_n must be >= 1, got {sizes}")
        return cls(tuple(math.log(m) for m in sizes), None if gamma is None else tuple(gamma))

    @property
    def N(self) -> int:
        return len(self.log_sizes)

    @property
    def sizes(self) -> tuple:
        return tuple(math.exp(x) for x in self.log_sizes)

    @property
    def log_total(self) -> float:
        return math.fsum(self.log_sizes)

    def log_product(self, i: int, k: int) -> float:
        """``ln M_i^k`` with 1-based inclusive indices; 0 for an empty range."""
        k = min(k, self.N)
        if k < i:
            return 0.0
        return math.fsum(self.log_sizes[i - 1:k])

    def log_mtilde(self, l: int, n: int) -> float:
        """``ln((M_l - 1) M_{l+1}^{min(N, n)})``; ``-inf`` when the factor vanishes."""
        if l > self.N:
            return -math.inf
        return log_expm1(self.log_sizes[l - 1]) + self.log_product(l + 1, n)

    def extend(self, log_m: float, gamma: float | None = None) -> "MessageSchedule":
        g = None
        if self.gamma is not None or gamma is not None:
            g = (self.gamma or ()) + (() if gamma is None else (gamma,))
        return MessageSchedule(self.log_sizes + (float(log_m),), g)


@dataclass(frozen=True)
class BoundBreakdown:
    """Value of a bound split into its missed-detection and per-epoch confusion parts."""

    epsilon_bound: float
    missed_detection_term: float
    confusion_terms: tuple
    method: str
    rounding: str
    threshold: float = -math.inf

    @property
    def clamped(self) -> float:
        return min(self.epsilon_bound, 1.0)

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "rounding": self.rounding,
            "epsilon_bound": self.epsilon_bound,
            "epsilon_clamped": self.clamped,
            "missed_detection_term": self.missed_detection_term,
            "confusion_terms": list(self.confusion_terms),
            "threshold": self.threshold,
        }


class DensityCache:
    """Grid laws of block-sum information densities, keyed by state counts.

    The sum over blocks in one state pools into a single binomial flip count, so
    a law depends on the state sequence only through ``(n0, n1)``.

    By default nothing is pruned beyond bins that underflow to zero.  Pruned lower
    tails are charged conservatively, and the charge for a tilted tail scales with
    ``E[exp(i_A)]`` of the prefix, so a positive ``prune_tol`` is only sensible for
    short prefixes.
    """

    def __init__(self, params: ChannelParams, step: float = DEFAULT_STEP,
                 prune_tol: float = DEFAULT_PRUNE_TOL, max_entries: int = 256):
        self.params = params
        self.step = float(step)
        self.prune_tol = prune_tol
        self.max_entries = max_entries
        self._store: OrderedDict = OrderedDict()

    def _get(self, key, build):
        if key in self._store:
            self._store.move_to_end(key)
            return self._store[key]
        val = build()
        self._store[key] = val
        if len(self._store) > self.max_entries:
            self._store.popitem(last=False)
        return val

    def group(self, state: int, count: int, measure: str) -> GridPmf:
        return self._get(("g", state, count, measure), lambda: dist.prune(
            dist.group_info_pmf(self.params, state, count, measure, self.step), self.prune_tol))

    def _pair(self, n0: int, n1: int, measure: str) -> GridPmf:
        def build():
            p = dist.convolve(self.group(0, n0, measure), self.group(1, n1, measure))
            return dist.prune(p, self.prune_tol)
        return self._get(("p", n0, n1, measure), build)

    def conditioned(self, n0: int, n1: int) -> GridPmf:
        """Law of the sum under the conditioned measure (plain probabilities)."""
        return self._pair(n0, n1, CONDITIONED)

    def tilted(self, n0: int, n1: int) -> GridPmf:
        """Unconditioned law stored tilted, i.e. ``P_c`` with exact exponent correction."""
        return self._pair(n0, n1, UNCONDITIONED)

    def prefix(self, n0: int, n1: int) -> "PrefixWeights":
        return self._get(("a", n0, n1), lambda: PrefixWeights.build(self.conditioned(n0, n1)))

    def cdf_table(self, n0: int, n1: int) -> dist.ClippedExpTable:
        return self._get(("fc", n0, n1), lambda: dist.clipped_exp_functional(self.conditioned(n0, n1)))

    def tilt_table(self, n0: int, n1: int) -> dist.ClippedExpTable:
        return self._get(("ft", n0, n1), lambda: dist.clipped_exp_functional(self.tilted(n0, n1)))


@dataclass(frozen=True, eq=False)
class PrefixWeights:
    """Conditioned prefix law with ``P(a) e^{x_a}`` stored as ``scaled * e^{log_scale}``."""

    pmf: GridPmf
    scaled: np.ndarray = field(repr=False)
    log_scale: float

    @classmethod
    def build(cls, pmf: GridPmf) -> "PrefixWeights":
        with np.errstate(divide="ignore"):
            la = np.log(pmf.mass) + pmf.values
        finite = np.isfinite(la)
        if not finite.any():
            return cls(pmf, np.zeros_like(pmf.mass), 0.0)
        m = float(la[finite].max())
        with np.errstate(under="ignore"):
            return cls(pmf, np.exp(la - m), m)


def _confusion(pre: PrefixWeights, gtab: dist.ClippedExpTable, c: float, log_extra: float) -> float:
    """``exp(log_extra) sum_a P(a) e^{x_a} G(c - x_a)`` via one reversed dot product.

    All values lie on the lattice ``k * step``, so ``c - x_a`` falls at a fixed
    offset ``log_theta`` above a lattice point and ``G(c - x_a) = theta R[J - i]``.
    """
    h = pre.pmf.step
    K = dist.index_above(c, h)
    log_theta = c - K * h
    J = K - pre.pmf.offset - gtab.pmf.offset
    dot = dist.reverse_dot(pre.scaled, gtab.suffix, J, 0.0, math.exp(-h))
    if dot <= 0.0:
        return 0.0
    return math.exp(min(log_extra + log_theta + pre.log_scale + math.log(dot), 700.0))


def _missed(pre: PrefixWeights, ftab: dist.ClippedExpTable, c: float, log_w: float) -> float:
    """``exp(log_w) sum_a P(a) P(B <= c - x_a)``."""
    h = pre.pmf.step
    J = dist.index_above(c, h) - pre.pmf.offset - ftab.pmf.offset
    cum = ftab.cum_ext
    dot = dist.reverse_dot(pre.pmf.mass, cum, J, float(cum[-1]))
    return math.exp(log_w) * dot


def _cache_for(params, step, cache) -> DensityCache:
    if cache is None:
        return DensityCache(params, step)
    if cache.params != params or cache.step != step:
        raise ValueError("cache was built for different parameters or step")
    return cache


def _prepare(states, sched: MessageSchedule, rounding: str):
    dist._check_rounding(rounding)
    st = _check_states(states)
    if len(st) != sched.N:
        raise ValueError(f"need one state per epoch: {len(st)} states, N={sched.N}")
    if sched.N == 0:
        raise ValueError("schedule must have at least one epoch")
    return st


def _log_weight(sched: MessageSchedule, n: int, log_denom: float) -> float:
    """``ln(M_{n+1}^N (M_n - 1) / (M_1^N - 1))``."""
    return sched.log_product(n + 1, sched.N) + log_expm1(sched.log_sizes[n - 1]) - log_denom


def _atoms(a: GridPmf):
    nz = np.flatnonzero(a.mass)
    return a.values[nz], a.mass[nz]


def _scaled_sum(log_scale: float, x: np.ndarray, pa: np.ndarray, g: np.ndarray) -> float:
    """``sum pa * g * exp(log_scale + x)`` evaluated without spurious overflow."""
    with np.errstate(divide="ignore", over="ignore", under="ignore", invalid="ignore"):
        e = log_scale + x + np.log(pa) + np.log(g)
        v = np.exp(e[g > 0])
    return float(v.sum())


def _truncation_charge(a: GridPmf, b_mass: float, log_w: float, s_a: float,
                       cond_b: GridPmf | None, tilt_b: GridPmf, gamma: float, shift: float) -> float:
    """Conservative charge for mass that pruning removed from A or B.

    An integrand of the form ``1{a + b <= g} + exp(g - b) 1{a + b > g}`` is at most
    ``max(1, e^a)``; pruned regions are charged at that ceiling.
    """
    charge = 0.0
    if a.truncated_mass:
        top = a.truncated_below + s_a
        charge += a.truncated_mass * math.exp(min(log_w + max(0.0, top), 700.0)) * b_mass
    x, pa = _atoms(a)
    if tilt_b.truncated_mass:
        live = x > gamma - shift - tilt_b.truncated_below - 2 * tilt_b.step
        if live.any():
            charge += tilt_b.truncated_mass * _scaled_sum(log_w + shift, x[live], pa[live],
                                                          np.ones(int(live.sum())))
    if cond_b is not None and cond_b.truncated_mass:
        charge += cond_b.truncated_mass * math.exp(log_w) * a.total
    return charge


def _zero(method, rounding, n) -> BoundBreakdown:
    return BoundBreakdown(0.0, 0.0, (0.0,) * n, method, rounding)


def ems_bound_thm1(params: ChannelParams, states, sched: MessageSchedule,
                   step: float = DEFAULT_STEP, rounding: str = "pessimistic",
                   cache: DensityCache | None = None) -> BoundBreakdown:
    """Random-coding bound on the error probability of an EMS code with a threshold decoder.

    ``eps <= P(i <= g) + sum_n M_{n+1}^N (M_n - 1)/2 * P(i_A + i_B > g)`` with
    ``g = ln((M_1^N - 1)/2)``, where ``i_A`` sums conditioned densities of blocks
    ``1..n-1`` and ``i_B`` unconditioned densities of blocks ``n..N``.
    """
    st = _prepare(states, sched, rounding)
    cache = _cache_for(params, step, cache)
    log_total = sched.log_total
    if log_total == 0.0:
        return _zero("thm1", rounding, sched.N)
    log_denom = log_expm1(log_total)
    gamma = log_denom - LN2
    sig = _SIGN[rounding]
    first = dist.cdf(cache.conditioned(*_counts(st)), gamma, rounding)
    terms = []
    for n in range(1, sched.N + 1):
        if sched.log_sizes[n - 1] == 0.0:
            terms.append(0.0)
            continue
        log_w = _log_weight(sched, n, log_denom)
        pre = cache.prefix(*_counts(st[:n - 1]))
        a = pre.pmf
        btab = cache.tilt_table(*_counts(st[n - 1:]))
        shift = sig * (a.spread + btab.pmf.spread)
        # e^g P_u(B > g - x_a) = e^{x_a + shift} G_m(c - x_a), c = g - shift
        term = _confusion(pre, btab, gamma - shift, log_w + shift)
        if rounding == "pessimistic" and (a.truncated_mass or btab.pmf.truncated_mass):
            term += _truncation_charge(a, btab.pmf.total + btab.pmf.truncated_mass, log_w,
                                       a.spread, None, btab.pmf, gamma, shift)
        terms.append(term)
    total = first + math.fsum(terms)
    return BoundBreakdown(total, first, tuple(terms), "thm1", rounding, gamma)


def ems_bound_prop1(params: ChannelParams, states, sched: MessageSchedule,
                    step: float = DEFAULT_STEP, rounding: str = "pessimistic",
                    cache: DensityCache | None = None, as_stated: bool = False) -> BoundBreakdown:
    """Equivalent single-expectation form of :func:`ems_bound_thm1`.

    Term ``n`` is ``w_n E[1{i <= g} + exp(g - i_B) 1{i > g}]`` with
    ``w_n = M_{n+1}^N (M_n - 1)/(M_1^N - 1)``, all under the conditioned measure, and
    is computed as ``w_n sum_a P(a) [F_B(g - a) + e^a G_B(g - a)]``.  The parts with
    ``F_B`` are collected into ``missed_detection_term`` so that term-by-term
    comparison with :func:`ems_bound_thm1` is possible.

    ``as_stated=True`` evaluates ``w_n E[exp(i_A - |i - g|^+)]`` instead, an
    expression that agrees with the bound only when ``N = 1`` (nearest rounding
    only).  Returns 0 when ``M_1^N = 1``.
    """
    st = _prepare(states, sched, rounding)
    if as_stated and rounding != "nearest":
        raise ValueError("as_stated evaluation is only offered with nearest rounding")
    cache = _cache_for(params, step, cache)
    log_total = sched.log_total
    if log_total == 0.0:
        return _zero("prop1", rounding, sched.N)
    log_denom = log_expm1(log_total)
    gamma = log_denom - LN2
    sig = _SIGN[rounding]
    missed, terms = [], []
    for n in range(1, sched.N + 1):
        if sched.log_sizes[n - 1] == 0.0:
            missed.append(0.0)
            terms.append(0.0)
            continue
        log_w = _log_weight(sched, n, log_denom)
        suffix = _counts(st[n - 1:])
        ftab = cache.cdf_table(*suffix)
        gtab = cache.tilt_table(*suffix)
        if as_stated:
            at = cache.tilted(*_counts(st[:n - 1]))
            x, pa = _atoms(at)
            h = ftab.below(gamma - x) + gtab.above(gamma - x)
            terms.append(_scaled_sum(log_w, x, pa, h))
            missed.append(0.0)
            continue
        pre = cache.prefix(*_counts(st[:n - 1]))
        a = pre.pmf
        s_f = sig * (a.spread + ftab.pmf.spread)
        s_g = sig * (a.spread + gtab.pmf.spread)
        miss = _missed(pre, ftab, gamma + s_f, log_w)
        term = _confusion(pre, gtab, gamma - s_g, log_w + s_g)
        if rounding == "pessimistic" and (a.truncated_mass or gtab.pmf.truncated_mass
                                          or ftab.pmf.truncated_mass):
            term += _truncation_charge(a, gtab.pmf.total + gtab.pmf.truncated_mass, log_w,
                                       a.spread, ftab.pmf, gtab.pmf, gamma, s_g)
        missed.append(miss)
        terms.append(term)
    first = math.fsum(missed)
    total = first + math.fsum(terms)
    return BoundBreakdown(total, first, tuple(terms), "prop1", rounding, gamma)


def dt_bound(params: ChannelParams, states, M1: float | None = None, step: float = DEFAULT_STEP,
             rounding: str = "pessimistic", cache: DensityCache | None = None,
             log_m1: float | None = None) -> BoundBreakdown:
    """Dependency-testing bound for one message set observed over ``len(states)`` blocks.

    Pass either ``M1`` or ``log_m1``.  Evaluated as :func:`ems_bound_thm1` with the
    schedule ``(M1, 1, ..., 1)``.
    """
    if (M1 is None) == (log_m1 is None):
        raise ValueError("pass exactly one of M1 and log_m1")
    if log_m1 is None:
        if not M1 >= 1:
            raise ValueError(f"M1 must be >= 1, got {M1}")
        log_m1 = math.log(M1)
    st = _check_states(states)
    sched = MessageSchedule((float(log_m1),) + (0.0,) * (len(st) - 1))
    b = ems_bound_thm1(params, st, sched, step, rounding, cache)
    return BoundBreakdown(b.epsilon_bound, b.missed_detection_term, b.confusion_terms, "dt",
                          rounding, b.threshold)


# --- stop-feedback (threshold crossing) bound -------------------------------------------

def _log_conditional_error(sched: MessageSchedule, gammas: Sequence[float], n: int) -> float:
    """``ln sum_{l<=n} Mtilde_l^n exp(-sum_{i=l}^n gamma_i)`` (1-based ``n``)."""
    g = np.asarray(gammas[:n], dtype=float)
    tail = np.cumsum(g[::-1])[::-1]
    vals = [sched.log_mtilde(l, n) - tail[l - 1] for l in range(1, min(n, sched.N) + 1)]
    vals = [v for v in vals if v > -math.inf]
    if not vals:
        return -math.inf
    m = max(vals)
    return m + math.log(math.fsum(math.exp(v - m) for v in vals))


def conditional_error_bounds(sched: MessageSchedule, gammas: Sequence[float], horizon: int) -> np.ndarray:
    """Per-stop-time factors ``c_n = sum_l Mtilde_l^n exp(-sum_{i=l}^n gamma_i)``."""
    return np.array([math.exp(min(_log_conditional_error(sched, gammas, n), 700.0))
                     for n in range(1, horizon + 1)])


@dataclass
class StopFeedbackBound:
    """Loosened stop-feedback bound for one state sequence."""

    stop_dist: dist.FirstPassageResult
    epsilon_bound: float
    expected_tau: float
    expected_nats: float
    per_stop_error: np.ndarray = field(repr=False)
    incomplete: bool = False

    @property
    def tail_prob(self) -> float:
        return self.stop_dist.tail_prob


def padded_gammas(sched: MessageSchedule, horizon: int) -> tuple:
    g = tuple(sched.gamma or ())
    if len(g) > horizon:
        return g[:horizon]
    return g + (0.0,) * (horizon - len(g))


def emssf_bound_loosened(params: ChannelParams, states, sched: MessageSchedule,
                         step: float = DEFAULT_STEP, rounding: str = "pessimistic",
                         prune_tol: float = SF_PRUNE_TOL, tail_tol: float = 1e-6) -> StopFeedbackBound:
    """Loosened bound ``eps <= sum_n P(tau = n) c_n`` for threshold-crossing decoding.

    ``tau`` is the first block at which the accumulated conditioned density reaches
    ``Gamma_k = gamma_1 + ... + gamma_k``; ``len(states)`` is the horizon and missing
    ``gamma`` entries are 0.  Mass still running at the horizon is reported through
    ``stop_dist.tail_prob`` and flags the result ``incomplete`` above ``tail_tol``.
    """
    dist._check_rounding(rounding)
    st = _check_states(states)
    if not st:
        raise ValueError("need at least one block")
    gam = padded_gammas(sched, len(st))
    levels = np.cumsum(gam)
    blocks = [dist.prune(dist.block_info_pmf(params, dist.BlockMeasure(s), step), prune_tol) for s in st]
    fp = dist.first_passage(blocks, levels, rounding, prune_tol)
    c = conditional_error_bounds(sched, gam, len(st))
    eps = float(fp.stop_prob @ c)
    nats = np.array([sched.log_product(1, n) for n in range(1, len(st) + 1)])
    expected_nats = float(fp.stop_prob @ nats + fp.tail_prob * nats[-1])
    return StopFeedbackBound(fp, eps, fp.expected_stop, expected_nats, c, fp.tail_prob > tail_tol)


# --- inversions -----------------------------------------------------------------------------

def _bisect_log(f_ok, lo: float, hi: float, rel: float = 1e-6) -> float:
    """Largest ``x`` in ``[lo, hi]`` with ``f_ok(x)``, assuming ``f_ok(lo)`` and monotonicity."""
    for _ in range(MAX_BISECT):
        if hi - lo <= rel * max(hi, 1.0):
            break
        mid = 0.5 * (lo + hi)
        if f_ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def solve_M_for_epsilon(params: ChannelParams, states, prefix: MessageSchedule, target_eps: float,
                        step: float = DEFAULT_STEP, rounding: str = "pessimistic",
                        cache: DensityCache | None = None, rel_tol: float = 1e-6) -> float:
    """Largest ``ln M_k`` keeping the bound for ``states`` at or below ``target_eps``.

    ``states`` has one more entry than ``prefix`` (the block being sized, usually a
    hypothesized good block).  Returns 0 (``M_k = 1``) when even ``M_k = 1`` misses
    the target.  Bisection runs on ``ln M_k`` over ``[0, T N ln 2]``.
    """
    st = _check_states(states)
    if len(st) != prefix.N + 1:
        raise ValueError("states must extend the schedule by exactly one block")
    cache = _cache_for(params, step, cache)

    def ok(lm):
        return ems_bound_thm1(params, st, prefix.extend(lm), step, rounding, cache).epsilon_bound <= target_eps

    if not ok(0.0):
        return 0.0
    hi = params.T * len(st) * LN2
    if ok(hi):
        return hi
    return _bisect_log(ok, 0.0, hi, rel_tol)


def solve_gamma_for_epsilon(prefix: MessageSchedule, target_eps: float) -> float:
    """Smallest ``gamma_k >= 0`` whose per-stop error factor ``c_k`` is at most ``target_eps``.

    ``prefix`` holds ``M_1..M_k`` and ``gamma_1..gamma_{k-1}``.  Since
    ``c_k = exp(-gamma_k) sum_l Mtilde_l^k exp(-sum_{i=l}^{k-1} gamma_i)`` the
    solution is closed form.
    """
    if not target_eps > 0:
        raise ValueError("target_eps must be positive")
    k = prefix.N
    g = list(prefix.gamma or ())
    if len(g) != k - 1:
        raise ValueError(f"need {k - 1} prior gamma values, got {len(g)}")
    log_c = _log_conditional_error(prefix, g + [0.0], k)
    if log_c == -math.inf:
        return 0.0
    return max(0.0, log_c - math.log(target_eps))


@dataclass(frozen=True)
class BetaSolution:
    log_m: float
    gamma: float
    stop_prob: float
    expanded: bool


def conditional_stop_prob(d: GridPmf, level: float, rounding: str, mass_before: float) -> float:
    if mass_before <= 0:
        return 0.0
    k = dist.crossing_index(d, level, rounding)
    k = min(max(k, 0), len(d.mass))
    return float(d.mass[k:].sum()) / mass_before


def solve_M_for_beta_from_residual(residual: GridPmf, next_block: GridPmf, level_prev: float,
                                   prefix: MessageSchedule, beta: float, target_eps: float,
                                   rounding: str = "pessimistic", tol: float = 1e-9) -> BetaSolution:
    """Size ``M_k`` so that the conditional stop probability at block ``k`` is at most ``beta``.

    ``residual`` is the sub-probability law of the accumulated density given no stop
    so far; ``next_block`` the law of block ``k`` (hypothesized state).  ``gamma_k``
    is re-solved for each trial ``M_k``.  The stop probability is piecewise constant
    in ``M_k``, so the returned point is the smallest ``ln M_k`` (to ``tol``) where
    it drops to ``beta`` or below.
    """
    d = dist.convolve(residual, next_block)
    before = residual.total + residual.truncated_mass
    return solve_M_for_beta_on(d, before, level_prev, prefix, beta, target_eps, rounding, tol)


def solve_M_for_beta_on(d: GridPmf, mass_before: float, level_prev: float, prefix: MessageSchedule,
                        beta: float, target_eps: float, rounding: str = "pessimistic",
                        tol: float = 1e-9) -> BetaSolution:
    """As :func:`solve_M_for_beta_from_residual` with the one-step law ``d`` precomputed."""
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    k = prefix.N + 1
    log_c_prev = _log_conditional_error(prefix, prefix.gamma or (), k - 1) if k > 1 else -math.inf
    c_prev = math.exp(min(log_c_prev, 700.0))
    log_eps = math.log(target_eps)
    tail = np.concatenate((np.cumsum(d.mass[::-1])[::-1], [0.0]))

    def at(lm):
        # c_k(gamma_k = 0) = e^L (c_{k-1} + 1 - e^{-L}) when M_k = e^L joins the schedule
        inner = c_prev - math.expm1(-lm)
        g = max(0.0, lm + math.log(inner) - log_eps) if inner > 0 else 0.0
        if mass_before <= 0:
            return g, 0.0
        j = min(max(dist.crossing_index(d, level_prev + g, rounding), 0), len(d.mass))
        return g, float(tail[j]) / mass_before

    g0, p0 = at(0.0)
    if p0 <= beta:
        return BetaSolution(0.0, g0, p0, False)
    lo, hi = 0.0, 1.0
    while at(hi)[1] > beta:
        lo, hi = hi, 2 * hi
        if hi > 1e6:
            raise RuntimeError("could not bracket the beta constraint")
    for _ in range(MAX_BISECT):
        if hi - lo <= tol * max(hi, 1.0):
            break
        mid = 0.5 * (lo + hi)
        if at(mid)[1] > beta:
            lo = mid
        else:
            hi = mid
    g, p = at(hi)
    return BetaSolution(hi, g, p, True)


def solve_M_for_beta(params: ChannelParams, states, prefix: MessageSchedule, beta: float,
                     target_eps: float, step: float = DEFAULT_STEP, rounding: str = "pessimistic",
                     prune_tol: float = SF_PRUNE_TOL) -> BetaSolution:
    """Convenience wrapper: ``states`` are ``s_1..s_{k-1}`` plus the hypothesized ``s_k``.

    ``prefix`` carries ``M_1..M_{k-1}`` and ``gamma_1..gamma_{k-1}``.
    """
    st = _check_states(states)
    if len(st) != prefix.N + 1:
        raise ValueError("states must extend the schedule by exactly one block")
    gam = list(prefix.gamma or ())
    if len(gam) != prefix.N:
        raise ValueError("prefix needs one gamma per epoch")
    residual = dist.point_mass(step)
    level = 0.0
    for s, g in zip(st[:-1], gam):
        level += g
        block = dist.prune(dist.block_info_pmf(params, dist.BlockMeasure(s), step), prune_tol)
        _, residual = dist.first_passage_step(residual, block, level, rounding, prune_tol)
    nxt = dist.prune(dist.block_info_pmf(params, dist.BlockMeasure(st[-1]), step), prune_tol)
    return solve_M_for_beta_from_residual(residual, nxt, level, prefix, beta, target_eps, rounding)
