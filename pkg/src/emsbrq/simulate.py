"""Monte Carlo ground truth with explicit random tree codebooks.

Codebooks are drawn from the same ensemble the bounds average over: every block of
every message prefix is an independent uniform T-bit word.  Since the bounds hold
for the ensemble average, the Monte Carlo runners draw a fresh codebook for every
trial.

Blocks are packed into ``uint32`` words (bit ``t`` = channel use ``t``), so ``T <= 32``.

Randomness is counter based: trials are processed in fixed-size chunks, and chunk
``c`` of stream ``s`` uses a Philox generator keyed by the master seed with counter
``(c, s)``.  Results are therefore identical for any processing order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.stats import beta as beta_dist

from . import bounds, kernels
from .bounds import MessageSchedule
from .channel import LN2, ChannelParams

MAX_T = 32
MAX_CODEWORDS = 2**16
MAX_TRIALS = 10**7
CHUNK = 4096
_STREAM_FEINSTEIN = 1
_STREAM_SF = 2


def _check_sizes(M) -> tuple:
    M = tuple(int(m) for m in M)
    if not M or any(m < 1 for m in M):
        raise ValueError(f"message set sizes must be positive integers, got {M}")
    return M


def prefix_counts(M) -> np.ndarray:
    """``M_1^n`` for ``n = 1..N``."""
    return np.cumprod(np.asarray(M, dtype=np.int64))


# --- indexing ---------------------------------------------------------------------------

def codeword_index(j: Sequence[int], M: Sequence[int]) -> int:
    """Flat 1-based index ``j_1 + sum_{n>=2} M_1^{n-1} (j_n - 1)``."""
    M = _check_sizes(M)
    if len(j) != len(M):
        raise ValueError("tuple length must equal the number of epochs")
    flat, scale = 0, 1
    for jn, mn in zip(j, M):
        if not 1 <= jn <= mn:
            raise ValueError(f"component {jn} outside 1..{mn}")
        flat += (jn - 1) * scale
        scale *= mn
    return flat + 1


def codeword_tuple(j_flat: int, M: Sequence[int]) -> tuple:
    """Inverse of :func:`codeword_index`."""
    M = _check_sizes(M)
    total = math.prod(M)
    if not 1 <= j_flat <= total:
        raise ValueError(f"index {j_flat} outside 1..{total}")
    r = j_flat - 1
    out = []
    for mn in M:
        r, d = divmod(r, mn)
        out.append(d + 1)
    return tuple(out)


def shared_prefix_counts(j_flat: int, M: Sequence[int]) -> np.ndarray:
    """``j'_n``: how many of the codewords ``1..j-1`` share exactly the first ``n`` blocks.

    ``j'_0 = (j-1) - floor((j-1)/M_1)``, ``j'_n = floor((j-1)/M_1^n) - floor((j-1)/M_1^{n+1})``
    and ``j'_{N-1} = floor((j-1)/M_1^{N-1})``.
    """
    M = _check_sizes(M)
    N = len(M)
    total = math.prod(M)
    if not 1 <= j_flat <= total:
        raise ValueError(f"index {j_flat} outside 1..{total}")
    r = j_flat - 1
    pref = [1] + [math.prod(M[:n]) for n in range(1, N + 1)]
    at_least = [r // pref[n] for n in range(N + 1)]
    out = [at_least[n] - (at_least[n + 1] if n + 1 < N else 0) for n in range(N)]
    return np.array(out, dtype=np.int64)


def average_floor_identity(M: Sequence[int], n: int) -> Fraction:
    """Exact ``(1/M_1^N) sum_j floor((j-1)/M_1^n)``; equals ``(M_{n+1}^N - 1)/2``."""
    M = _check_sizes(M)
    total = math.prod(M)
    p = math.prod(M[:n])
    return Fraction(sum((j - 1) // p for j in range(1, total + 1)), total)


# --- codebooks --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TreeCodebook:
    """Random tree codebook; ``levels[n][p]`` is block ``n+1`` of prefix index ``p``.

    The prefix index of ``(j_1..j_n)`` is ``codeword_index(...) - 1`` over the first
    ``n`` epochs, so the block of a full codeword ``j`` at epoch ``n`` is row
    ``(j - 1) mod M_1^n``.
    """

    T: int
    M: tuple
    seed: int
    levels: tuple = field(repr=False)

    @property
    def N(self) -> int:
        return len(self.M)

    @property
    def num_codewords(self) -> int:
        return math.prod(self.M)

    @property
    def stored_blocks(self) -> int:
        return sum(len(lv) for lv in self.levels)

    def block(self, prefix: Sequence[int]) -> int:
        n = len(prefix)
        return int(self.levels[n - 1][codeword_index(prefix, self.M[:n]) - 1])

    def codeword(self, j_flat: int) -> np.ndarray:
        """The ``N`` packed blocks of codeword ``j_flat`` (1-based)."""
        pc = prefix_counts(self.M)
        return np.array([self.levels[n][(j_flat - 1) % pc[n]] for n in range(self.N)], dtype=np.uint32)


def _block_mask(T: int) -> np.uint32:
    return np.uint32((1 << T) - 1) if T < 32 else np.uint32(0xFFFFFFFF)


def _check_T(T):
    if not 1 <= T <= MAX_T:
        raise ValueError(f"T must lie in 1..{MAX_T} for packed simulation, got {T}")


def gen_tree_codebook(seed: int, T: int, M: Sequence[int]) -> TreeCodebook:
    """Draw a tree codebook; level ``n`` comes from generator ``(seed, n)``."""
    _check_T(T)
    M = _check_sizes(M)
    if math.prod(M) > MAX_CODEWORDS:
        raise ValueError(f"M_1^N = {math.prod(M)} exceeds the desk-scale limit {MAX_CODEWORDS}")
    mask = _block_mask(T)
    levels = []
    for n, count in enumerate(prefix_counts(M).tolist()):
        rng = np.random.Generator(np.random.Philox(key=seed, counter=[n, 0, 0, 0]))
        lv = rng.integers(0, 2**32, size=count, dtype=np.uint32) & mask
        lv.setflags(write=False)
        levels.append(lv)
    return TreeCodebook(T, M, int(seed), tuple(levels))


# --- channel ----------------------------------------------------------------------------

def _noise_words(rng: np.random.Generator, deltas: np.ndarray, T: int, shape) -> np.ndarray:
    """Packed Bernoulli(delta) noise; ``deltas`` broadcasts against ``shape``."""
    u = rng.random(tuple(shape) + (T,))
    flips = u < np.asarray(deltas)[..., None]
    weights = (np.uint64(1) << np.arange(T, dtype=np.uint64))
    return (flips.astype(np.uint64) @ weights).astype(np.uint32)


def simulate_channel(block: int, state: int, params: ChannelParams, trial_seed: int) -> int:
    """Pass one packed block through the channel in ``state``."""
    _check_T(params.T)
    rng = np.random.Generator(np.random.Philox(key=trial_seed))
    z = _noise_words(rng, np.array(params.delta(state)), params.T, ())
    return int(np.uint32(block) ^ z)


def density_table(params: ChannelParams, states: Sequence[int]) -> np.ndarray:
    """``table[n, d]``: block density (nats) at Hamming distance ``d`` in state ``states[n]``."""
    T = params.T
    d = np.arange(T + 1)
    rows = []
    for s in states:
        delta = params.delta(s)
        with np.errstate(divide="ignore", invalid="ignore"):
            row = T * LN2 + np.where(d > 0, d * math.log(delta) if delta > 0 else -np.inf, 0.0) \
                + (T - d) * math.log1p(-delta)
        rows.append(row)
    return np.ascontiguousarray(np.array(rows, dtype=np.float64))


# --- decoders ---------------------------------------------------------------------------

def feinstein_decode(y: Sequence[int], states: Sequence[int], codebook: TreeCodebook,
                     gamma: float, params: ChannelParams) -> int | None:
    """Lowest 1-based index whose density exceeds ``gamma``; ``None`` is an erasure."""
    if len(y) != codebook.N or len(states) != codebook.N:
        raise ValueError("need one received block and one state per epoch")
    codes = np.concatenate(codebook.levels)[None, :].astype(np.uint32)
    yy = np.asarray(y, dtype=np.uint32)[None, :]
    out = _feinstein(codes, yy, codebook.M, density_table(params, states), gamma)
    return None if out[0] < 0 else int(out[0]) + 1


def _feinstein(codes, y, M, table, gamma):
    pc = prefix_counts(M)
    starts = np.concatenate(([0], np.cumsum(pc)[:-1])).astype(np.int64)
    if gamma == math.inf:
        return np.full(codes.shape[0], -1, dtype=np.int64)
    return kernels.feinstein_batch(np.ascontiguousarray(codes, dtype=np.uint32),
                                   np.ascontiguousarray(y, dtype=np.uint32),
                                   starts, pc.astype(np.int64), table, float(gamma))


def _lex_keys(M) -> np.ndarray:
    """Lexicographic rank (``j_1`` most significant) of every flat index."""
    total = math.prod(M)
    key = np.zeros(total, dtype=np.int64)
    r = np.arange(total)
    digits = []
    for mn in M:
        r, d = np.divmod(r, mn)
        digits.append(d)
    for d, mn in zip(digits, M):
        key = key * mn + d
    return key


@dataclass(frozen=True)
class SfDecodeResult:
    stop_block: int | None
    decoded: tuple | None
    correct: bool


def _sf_batch(cb_levels, M_full, N, y, table, levels, sent):
    """Vectorized threshold-crossing decoding for a batch of trials.

    ``cb_levels[n]`` has shape ``(trials, M_1^{min(n+1, N)})``; ``y`` is
    ``(trials, H)``.  Returns ``(stop_block, decoded_flat)`` with ``-1`` for no stop.
    """
    trials, H = y.shape
    pc = prefix_counts(M_full[:N])
    stop = np.full(trials, -1, dtype=np.int64)
    decoded = np.full(trials, -1, dtype=np.int64)
    S = np.zeros((trials, 1))
    live = np.ones(trials, dtype=bool)
    for n in range(H):
        m = min(n + 1, N)
        width = int(pc[m - 1])
        idx = np.arange(width)
        parent = idx % S.shape[1]
        d = np.bitwise_count(cb_levels[n] ^ y[:, n:n + 1])
        S = S[:, parent] + table[n][d]
        hit = (S >= levels[n]) & live[:, None]
        any_hit = hit.any(axis=1)
        if any_hit.any():
            keys = _lex_keys(M_full[:m])
            ranked = np.where(hit, keys[None, :], -1)
            best = np.argmax(ranked, axis=1)
            stop[any_hit] = n + 1
            decoded[any_hit] = best[any_hit]
            live &= ~any_hit
        if not live.any():
            break
    return stop, decoded


def emssf_decode_run(codebook: TreeCodebook, params: ChannelParams, levels: Sequence[float],
                     states: Sequence[int], trial_seed: int, horizon: int,
                     message: Sequence[int] | None = None) -> SfDecodeResult:
    """One threshold-crossing decoding run.

    The codebook must cover ``horizon`` blocks (epochs beyond the message epochs have
    ``M_n = 1``).  Every tuple of the ``min(n, N)`` messages seen so far accumulates
    its density; the first block where some tuple reaches ``levels[n]`` is the stop,
    and the lexicographically largest crossing tuple is decoded.  No crossing by
    ``horizon`` is an error.
    """
    M = codebook.M
    if len(M) < horizon or len(states) < horizon or len(levels) < horizon:
        raise ValueError("codebook, states and levels must cover the horizon")
    N = max((n + 1 for n, m in enumerate(M) if m > 1), default=1)
    rng = np.random.Generator(np.random.Philox(key=trial_seed))
    total = math.prod(M)
    if message is None:
        sent = int(rng.integers(total))
    else:
        sent = codeword_index(tuple(message) + (1,) * (len(M) - len(message)), M) - 1
    pc = prefix_counts(M)
    rows = [codebook.levels[n][None, :pc[min(n, N - 1)]] for n in range(horizon)]
    tx = np.array([codebook.levels[n][sent % pc[n]] for n in range(horizon)], dtype=np.uint32)
    deltas = np.array([params.delta(s) for s in states[:horizon]])
    y = (tx ^ _noise_words(rng, deltas, params.T, (horizon,)))[None, :]
    table = density_table(params, states[:horizon])
    stop, dec = _sf_batch(rows, M, N, y, table, np.asarray(levels[:horizon], dtype=float), None)
    if stop[0] < 0:
        return SfDecodeResult(None, None, False)
    m = min(int(stop[0]), N)
    tup = codeword_tuple(int(dec[0]) + 1, M[:m])
    true = codeword_tuple(sent % int(pc[m - 1]) + 1, M[:m])
    return SfDecodeResult(int(stop[0]), tup, tup == true)


# --- Monte Carlo ------------------------------------------------------------------------

def clopper_pearson(errors: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    a = 1.0 - level
    lo = 0.0 if errors == 0 else float(beta_dist.ppf(a / 2, errors, trials - errors + 1))
    hi = 1.0 if errors == trials else float(beta_dist.ppf(1 - a / 2, errors + 1, trials - errors))
    return lo, hi


@dataclass
class TrialReport:
    mode: str
    trials: int
    errors: int
    error_rate: float
    ci_low: float
    ci_high: float
    bound_value: float
    avg_stop_block: float | None = None
    stop_block_std: float | None = None
    expected_stop_bound: float | None = None
    seed: int = 0

    @property
    def sigma(self) -> float:
        p = self.error_rate
        return math.sqrt(max(p * (1 - p), 0.0) / self.trials) if self.trials else 0.0

    @property
    def passed(self) -> bool:
        ok = self.error_rate <= self.bound_value + 3 * self.sigma
        if self.avg_stop_block is not None and self.expected_stop_bound is not None:
            se = (self.stop_block_std or 0.0) / math.sqrt(self.trials)
            ok = ok and self.avg_stop_block <= self.expected_stop_bound + 3 * se
        return ok

    def to_json(self) -> str:
        d = asdict(self)
        d["passed"] = self.passed
        return json.dumps(d, indent=2, sort_keys=True)


def _check_trials(trials):
    if not 1 <= trials <= MAX_TRIALS:
        raise ValueError(f"trials must lie in 1..{MAX_TRIALS}")


def _chunk_rng(seed: int, chunk: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=[chunk, stream, 0, 0]))


def _random_levels(rng, trials, counts, T):
    mask = _block_mask(T)
    return [rng.integers(0, 2**32, size=(trials, c), dtype=np.uint32) & mask for c in counts]


def feinstein_trials(params: ChannelParams, states: Sequence[int], M: Sequence[int], trials: int,
                     seed: int = 0, gamma: float | None = None, bound: float | None = None,
                     step: float = bounds.DEFAULT_STEP) -> TrialReport:
    """Error rate of threshold decoding over fresh random codebooks.

    ``gamma`` defaults to ``ln((M_1^N - 1)/2)``.  ``bound`` defaults to the
    pessimistic bound evaluated at that threshold.
    """
    _check_T(params.T)
    _check_trials(trials)
    M = _check_sizes(M)
    states = bounds._check_states(states)
    if len(states) != len(M):
        raise ValueError("need one state per epoch")
    total = math.prod(M)
    if total > MAX_CODEWORDS:
        raise ValueError(f"M_1^N = {total} exceeds the desk-scale limit {MAX_CODEWORDS}")
    if gamma is None:
        gamma = math.log((total - 1) / 2) if total > 1 else -math.inf
    if bound is None:
        bound = feinstein_bound(params, states, M, gamma, step)
    pc = prefix_counts(M)
    table = density_table(params, states)
    deltas = np.array([params.delta(s) for s in states])
    errors = 0
    for c, start in enumerate(range(0, trials, CHUNK)):
        n = min(CHUNK, trials - start)
        rng = _chunk_rng(seed, c, _STREAM_FEINSTEIN)
        levels = _random_levels(rng, n, pc.tolist(), params.T)
        sent = rng.integers(total, size=n)
        tx = np.stack([levels[k][np.arange(n), sent % pc[k]] for k in range(len(M))], axis=1)
        y = tx ^ _noise_words(rng, deltas, params.T, (n, len(M)))
        dec = _feinstein(np.concatenate(levels, axis=1), y, M, table, gamma)
        errors += int(np.count_nonzero(dec != sent))
    lo, hi = clopper_pearson(errors, trials)
    return TrialReport("ems", trials, errors, errors / trials, lo, hi, bound, seed=seed)


def feinstein_bound(params, states, M, gamma, step=bounds.DEFAULT_STEP) -> float:
    """Random-coding bound for the threshold decoder at an arbitrary threshold ``gamma``.

    ``P(i <= g) + sum_n M_{n+1}^N (M_n - 1) P(i_A + i_B > g) / 2`` evaluated with
    pessimistic rounding; at the default threshold this is the usual bound.
    """
    M = _check_sizes(M)
    total = math.prod(M)
    if total == 1:
        return 0.0
    sched = MessageSchedule.from_sizes(M)
    # the bound's weights come from the averaging identity and do not depend on gamma;
    # shift the schedule's implied threshold by evaluating at the requested one
    return _threshold_bound(params, bounds._check_states(states), sched, gamma, step)


def _threshold_bound(params, states, sched, gamma, step):
    cache = bounds.DensityCache(params, step)
    first = bounds.dist.cdf(cache.conditioned(*bounds._counts(states)), gamma, "pessimistic")
    total = first
    for n in range(1, sched.N + 1):
        if sched.log_sizes[n - 1] == 0.0:
            continue
        # (M_{n+1}^N (M_n - 1)/2) e^{-g}, in logs
        log_c = sched.log_product(n + 1, sched.N) + bounds.log_expm1(sched.log_sizes[n - 1]) - LN2
        pre = cache.prefix(*bounds._counts(states[:n - 1]))
        btab = cache.tilt_table(*bounds._counts(states[n - 1:]))
        shift = pre.pmf.spread + btab.pmf.spread
        total += bounds._confusion(pre, btab, gamma - shift, log_c - gamma + shift)
    return total


def emssf_trials(params: ChannelParams, states: Sequence[int], M: Sequence[int],
                 gammas: Sequence[float], trials: int, seed: int = 0,
                 step: float = bounds.DEFAULT_STEP) -> TrialReport:
    """Threshold-crossing decoding over fresh codebooks; ``len(states)`` is the horizon."""
    _check_T(params.T)
    _check_trials(trials)
    M = _check_sizes(M)
    states = bounds._check_states(states)
    H = len(states)
    N = len(M)
    if H < N:
        raise ValueError("horizon must cover every message epoch")
    total = math.prod(M)
    if total > MAX_CODEWORDS:
        raise ValueError(f"M_1^N = {total} exceeds the desk-scale limit {MAX_CODEWORDS}")
    gam = bounds.padded_gammas(MessageSchedule.from_sizes(M, tuple(gammas)), H)
    levels = np.cumsum(gam)
    M_full = M + (1,) * (H - N)
    pc = prefix_counts(M_full)
    table = density_table(params, states)
    deltas = np.array([params.delta(s) for s in states])
    errors = 0
    stops = []
    for c, start in enumerate(range(0, trials, CHUNK)):
        n = min(CHUNK, trials - start)
        rng = _chunk_rng(seed, c, _STREAM_SF)
        cb = _random_levels(rng, n, pc.tolist(), params.T)
        sent = rng.integers(total, size=n)
        tx = np.stack([cb[k][np.arange(n), sent % pc[k]] for k in range(H)], axis=1)
        y = tx ^ _noise_words(rng, deltas, params.T, (n, H))
        stop, dec = _sf_batch(cb, M_full, N, y, table, levels, sent)
        ok = stop > 0
        m = np.minimum(np.where(ok, stop, 1), N)
        mod = prefix_counts(M)[m - 1]
        correct = ok & (dec == sent % mod)
        errors += int(np.count_nonzero(~correct))
        stops.append(np.where(ok, stop, H))
    st = np.concatenate(stops).astype(float)
    sf = bounds.emssf_bound_loosened(params, states, MessageSchedule.from_sizes(M, tuple(gammas)), step)
    lo, hi = clopper_pearson(errors, trials)
    return TrialReport("emssf", trials, errors, errors / trials, lo, hi,
                       sf.epsilon_bound + sf.tail_prob, float(st.mean()), float(st.std()),
                       sf.expected_tau, seed)


def gammas_for_epsilon(M: Sequence[float], epsilon: float) -> tuple:
    """Threshold increments holding every per-stop error factor at ``epsilon``."""
    sched = MessageSchedule(())
    out = []
    for m in M:
        sched = MessageSchedule(sched.log_sizes + (math.log(m),), tuple(out))
        out.append(float(bounds.solve_gamma_for_epsilon(sched, epsilon)))
    return tuple(out)
