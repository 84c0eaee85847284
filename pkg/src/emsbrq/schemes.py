"""End-to-end schemes: operating points averaged over all fading realizations.

Each variable-length scheme is a policy on state prefixes.  The fading tree is
enumerated exactly (no sampling); stop-feedback schemes additionally split every
node into stop and continue branches weighted by the conditional stop probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from . import bounds, dist
from .bounds import DensityCache, MessageSchedule
from .channel import LN2, ChannelParams, normal_approx_rate

SCHEMES = ("fixed", "vld", "vlsf", "brq_csit", "brq_sf")
DEFAULT_HORIZON = 20
DEFAULT_P_MIN = 1e-9
DEFAULT_MAX_EXPANSIONS = 5
DEFAULT_CURVE_STEP_PER_USE = 1e-4


def curve_step(params: ChannelParams) -> float:
    """Grid step used for sweeps: ``1e-4`` nats per channel use of one block."""
    return DEFAULT_CURVE_STEP_PER_USE * params.T


@dataclass(frozen=True)
class StateSequence:
    states: tuple
    prob: float

    def __post_init__(self):
        if any(s not in (0, 1) for s in self.states):
            raise ValueError("states must be 0 or 1")
        if not 0 < self.prob <= 1:
            raise ValueError("path probability must lie in (0, 1]")

    @classmethod
    def from_states(cls, states, q: float) -> "StateSequence":
        states = tuple(int(s) for s in states)
        p = 1.0
        for s in states:
            p *= q if s == 1 else 1.0 - q
        return cls(states, p)


@dataclass(frozen=True)
class Outcome:
    states: tuple
    weight: float
    record: object


@dataclass
class FadingTree:
    outcomes: list
    truncation_gap: float
    horizon_mass: float
    truncated_blocks: float = 0.0
    nodes: int = 0

    @property
    def total_weight(self) -> float:
        return math.fsum(o.weight for o in self.outcomes) + self.truncation_gap


Policy = Callable[[tuple, object], tuple]


def enumerate_fading_tree(q: float, policy: Policy, horizon: int, p_min: float = DEFAULT_P_MIN,
                          root_ctx=None, merge_key: Callable | None = None,
                          merge_ctx: Callable | None = None) -> FadingTree:
    """Enumerate state prefixes block by block.

    ``policy(states, ctx)`` returns ``(stop_fraction, record, child_ctx)``: the
    fraction of the prefix's weight that terminates here (emitted with ``record``)
    and the context handed to both children.  Prefixes whose weight falls below
    ``p_min``, and weight still running after ``horizon`` blocks, go to
    ``truncation_gap``.

    ``merge_key(states, ctx)`` may name prefixes whose futures are identical; those
    of equal depth and key are merged into the first one seen (weights add).  It
    returns ``None`` for prefixes that must stay separate.  ``merge_ctx(ctx_a, w_a,
    ctx_b, w_b)`` combines the contexts of merged prefixes (default: keep the first).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not 0 <= p_min < 1:
        raise ValueError("p_min must lie in [0, 1)")
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    outcomes = []
    gap = horizon_mass = trunc_blocks = 0.0
    nodes = 0
    level = [[(0,), 1.0 - q, root_ctx], [(1,), q, root_ctx]]
    while level:
        merged: dict = {}
        nxt = []
        for states, w, ctx in level:
            if w <= 0.0:
                continue
            if w < p_min:
                gap += w
                trunc_blocks += w * len(states)
                continue
            nodes += 1
            f, record, child = policy(states, ctx)
            if not 0.0 <= f <= 1.0:
                raise ValueError(f"stop fraction {f} outside [0, 1]")
            if f > 0.0:
                outcomes.append(Outcome(states, w * f, record))
            wc = w * (1.0 - f)
            if wc <= 0.0:
                continue
            if len(states) >= horizon:
                horizon_mass += wc
                gap += wc
                trunc_blocks += wc * len(states)
                continue
            for s, ps in ((0, 1.0 - q), (1, q)):
                cs = states + (s,)
                key = merge_key(cs, child) if merge_key is not None else None
                if key is None:
                    nxt.append([cs, wc * ps, child])
                elif key in merged:
                    entry = merged[key]
                    if merge_ctx is not None:
                        entry[2] = merge_ctx(entry[2], entry[1], child, wc * ps)
                    entry[1] += wc * ps
                else:
                    merged[key] = [cs, wc * ps, child]
                    nxt.append(merged[key])
        level = nxt
    return FadingTree(outcomes, gap, horizon_mass, trunc_blocks, nodes)


@dataclass(frozen=True)
class StopRecord:
    blocks: int
    nats: float
    eps: float
    stop_prob: float = 1.0
    constrained: bool = False
    expansions: int = 0


@dataclass(frozen=True)
class SchemeCurvePoint:
    scheme: str
    log_m1: float
    epsilon_target: float
    avg_blocks: float
    avg_nats: float
    rate_bits: float
    eps_certified: float
    truncation_gap: float
    T: int
    expansions_cap: int = 0
    horizon_mass: float = 0.0
    feasible: bool = True

    @property
    def M1(self) -> float:
        return math.exp(self.log_m1) if self.log_m1 < 709 else math.inf

    @property
    def avg_blocklength(self) -> float:
        return self.T * self.avg_blocks

    def as_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "log_m1": self.log_m1,
            "epsilon": self.epsilon_target,
            "avg_blocks": self.avg_blocks,
            "avg_blocklength": self.avg_blocklength,
            "avg_nats": self.avg_nats,
            "rate_bits": self.rate_bits,
            "eps_certified": self.eps_certified,
            "truncation_gap": self.truncation_gap,
            "expansions_cap": self.expansions_cap,
            "feasible": self.feasible,
        }


def _summarize(scheme, params, log_m1, eps, tree: FadingTree, cap=0) -> SchemeCurvePoint:
    w = np.array([o.weight for o in tree.outcomes])
    blocks = np.array([o.record.blocks for o in tree.outcomes], dtype=float)
    nats = np.array([o.record.nats for o in tree.outcomes])
    # truncated mass is charged its blocks so far and no delivered information
    avg_blocks = math.fsum(w * blocks) + tree.truncated_blocks
    avg_nats = math.fsum(w * nats)
    worst = max((o.record.eps for o in tree.outcomes), default=0.0)
    rate = avg_nats / (LN2 * params.T * avg_blocks) if avg_blocks > 0 else 0.0
    return SchemeCurvePoint(scheme, float(log_m1), eps, avg_blocks, avg_nats, rate,
                            worst + tree.truncation_gap, tree.truncation_gap, params.T, cap,
                            tree.horizon_mass, tree.horizon_mass <= 1e-6)


def _check_m1(log_m1):
    # M1 = 1 is accepted as the degenerate single-message code
    if not log_m1 >= 0:
        raise ValueError("M1 must be at least 1")


# --- fixed-length --------------------------------------------------------------------------

def scheme_fixed(params: ChannelParams, n_blocks: float, epsilon: float) -> SchemeCurvePoint:
    """Normal-approximation operating point of a fixed-length code over ``n_blocks`` blocks."""
    if not n_blocks > 0:
        raise ValueError("n_blocks must be positive")
    rate = normal_approx_rate(params, n_blocks * params.T, epsilon)
    nats = rate * LN2 * n_blocks * params.T
    return SchemeCurvePoint("fixed", nats, epsilon, float(n_blocks), nats, rate, epsilon, 0.0,
                            params.T, 0, 0.0, rate > 0)


def scheme_fixed_for_m1(params: ChannelParams, log_m1: float, epsilon: float) -> SchemeCurvePoint:
    """Fixed-length point carrying ``ln M1`` nats: solves ``n R(n) ln2 = ln M1`` for real ``n``."""
    if not log_m1 > 0:
        raise ValueError("M1 must exceed 1")
    T = params.T

    def excess(nb):
        return normal_approx_rate(params, nb * T, epsilon) * LN2 * nb * T - log_m1

    lo = 1.0 / T
    if excess(lo) >= 0:
        raise ValueError("M1 too small for the normal approximation")
    hi = 1.0
    while excess(hi) <= 0:
        if hi > 1e9:
            return SchemeCurvePoint("fixed", log_m1, epsilon, math.nan, math.nan, math.nan,
                                    epsilon, 0.0, T, 0, 0.0, False)
        lo, hi = hi, 2 * hi
    nb = brentq(excess, lo, hi, xtol=1e-12, rtol=1e-14)
    rate = normal_approx_rate(params, nb * T, epsilon)
    return SchemeCurvePoint("fixed", log_m1, epsilon, nb, log_m1, rate, epsilon, 0.0, T)


# --- delayed CSIT ------------------------------------------------------------------------

def _csit_policy(params, epsilon, step, cache, rounding, cap):
    memo = {}

    def bound(states, log_sizes, splits):
        # thm1 depends on the states only through the totals and the prefix counts
        # at epochs that carry new messages
        key = (_count(states), splits, log_sizes)
        if key not in memo:
            memo[key] = bounds.ems_bound_thm1(params, states, MessageSchedule(log_sizes), step,
                                              rounding, cache).epsilon_bound
        return memo[key]

    def policy(states, ctx):
        log_sizes, used, splits = ctx
        b = bound(states, log_sizes, splits)
        if b <= epsilon:
            return 1.0, StopRecord(len(states), math.fsum(log_sizes), b, expansions=used), None
        lm = 0.0
        if used < cap:
            hyp = states + (1,)
            if bound(hyp, log_sizes + (0.0,), splits) <= epsilon:
                lm = bounds.solve_M_for_epsilon(params, hyp, MessageSchedule(log_sizes), epsilon,
                                                step, rounding, cache)
        if lm > 0:
            return 0.0, None, (log_sizes + (lm,), used + 1, splits + (_count(states),))
        return 0.0, None, (log_sizes + (0.0,), used, splits)

    return policy


def _count(states) -> tuple:
    n1 = sum(states)
    return len(states) - n1, n1


def _csit_key(states, ctx):
    return _count(states), ctx


def scheme_brq_csit(params: ChannelParams, log_m1: float, epsilon: float,
                    horizon: int = DEFAULT_HORIZON, p_min: float = DEFAULT_P_MIN,
                    max_expansions: int = DEFAULT_MAX_EXPANSIONS, step: float | None = None,
                    rounding: str = "pessimistic", cache: DensityCache | None = None) -> SchemeCurvePoint:
    """Backtrack retransmission with delayed CSIT.

    After each block the transmitter evaluates the bound over the realized states
    and terminates once it is at most ``epsilon``.  Otherwise, if the bound with a
    hypothesized good next block and no new messages meets the target, the next
    block injects the largest message set that keeps it met; else it carries pure
    incremental redundancy.
    """
    _check_m1(log_m1)
    step = curve_step(params) if step is None else step
    cache = bounds._cache_for(params, step, cache)
    policy = _csit_policy(params, epsilon, step, cache, rounding, max_expansions)
    tree = enumerate_fading_tree(params.q, policy, horizon, p_min, ((float(log_m1),), 0, ()),
                                 merge_key=_csit_key)
    return _summarize("brq_csit", params, log_m1, epsilon, tree, max_expansions)


def scheme_vld(params: ChannelParams, log_m1: float, epsilon: float,
               horizon: int = DEFAULT_HORIZON, p_min: float = DEFAULT_P_MIN,
               step: float | None = None, rounding: str = "pessimistic",
               cache: DensityCache | None = None) -> SchemeCurvePoint:
    """Variable-length coding terminated by the transmitter from delayed CSIT.

    Stops at the first block where the dependency-testing bound over the realized
    states is at most ``epsilon``.
    """
    _check_m1(log_m1)
    step = curve_step(params) if step is None else step
    cache = bounds._cache_for(params, step, cache)
    memo = {}

    def policy(states, ctx):
        key = _count(states)
        if key not in memo:
            memo[key] = bounds.dt_bound(params, states, log_m1=log_m1, step=step,
                                        rounding=rounding, cache=cache).epsilon_bound
        b = memo[key]
        if b <= epsilon:
            return 1.0, StopRecord(len(states), float(log_m1), b), None
        return 0.0, None, None

    tree = enumerate_fading_tree(params.q, policy, horizon, p_min,
                                 merge_key=lambda states, ctx: _count(states))
    return _summarize("vld", params, log_m1, epsilon, tree)


# --- stop feedback -----------------------------------------------------------------------

@dataclass
class _SfContext:
    residual: dist.GridPmf
    sched: MessageSchedule
    used: int = 0
    good_step: dist.GridPmf | None = field(default=None, repr=False)
    constrained: bool = False
    absorbed: float = 0.0
    linear: bool = False


def _sf_policy(params, epsilon, beta, cap, step, rounding, prune_tol, block_laws):
    def policy(states, ctx: _SfContext):
        s = states[-1]
        k = len(states)
        before = ctx.residual.total + ctx.residual.truncated_mass
        d = ctx.good_step if (s == 1 and ctx.good_step is not None) else dist.convolve(ctx.residual, block_laws[s])
        level = math.fsum(ctx.sched.gamma)
        idx = min(max(dist.crossing_index(d, level, rounding), 0), len(d.mass))
        stop = float(d.mass[idx:].sum())
        f = min(stop / before, 1.0) if before > 0 else 0.0
        c = math.exp(min(bounds._log_conditional_error(ctx.sched, ctx.sched.gamma, k), 700.0))
        rec = StopRecord(k, ctx.sched.log_total, c, f, ctx.constrained, ctx.used)
        rest = dist.prune(replace(d, mass=d.mass[:idx]), prune_tol)
        rest_total = rest.total + rest.truncated_mass
        if f >= 1.0 or rest_total <= 0:
            return 1.0, rec, None
        # size the next block from a hypothesized good state
        good = None
        if beta < 1.0 and ctx.used < cap:
            good = dist.convolve(rest, block_laws[1])
            sol = bounds.solve_M_for_beta_on(good, rest_total, level, ctx.sched, beta, epsilon, rounding)
            lm, g, used = sol.log_m, sol.gamma, ctx.used + sol.expanded
        else:
            lm, used = 0.0, ctx.used
            g = bounds.solve_gamma_for_epsilon(ctx.sched.extend(0.0), epsilon)
        linear = beta >= 1.0 or used >= cap
        child = _SfContext(rest, ctx.sched.extend(lm, g), used, good, good is not None,
                           max(0.0, 1.0 - rest_total), linear)
        return f, rec, child

    return policy


SF_MERGE_TOL = 1e-13


def _sf_key(states, ctx: _SfContext):
    # The future is linear in the residual law unless the next sizing decision
    # reads it; before any mass is absorbed all orderings share one residual.
    if not ctx.linear and ctx.absorbed > SF_MERGE_TOL:
        return None
    # the context holds the law before the node's own block, so the last state is
    # part of the key
    return _count(states[:-1]), states[-1], ctx.sched, ctx.used


def _sf_merge(a: _SfContext, wa: float, b: _SfContext, wb: float) -> _SfContext:
    # node weight = path probability * residual mass, so mix residuals with
    # coefficients w / mass to add the joint (path, density) measures
    ma = a.residual.total + a.residual.truncated_mass
    mb = b.residual.total + b.residual.truncated_mass
    ca, cb = wa / ma, wb / mb
    res = dist.mix([a.residual, b.residual], [ca / (ca + cb), cb / (ca + cb)])
    return _SfContext(res, a.sched, a.used, None, a.constrained and b.constrained,
                      max(a.absorbed, b.absorbed), a.linear)


def _run_sf(name, params, log_m1, epsilon, beta, horizon, p_min, cap, step, rounding, prune_tol):
    _check_m1(log_m1)
    if log_m1 == 0:
        # a single message is decoded without listening
        tree = enumerate_fading_tree(params.q, lambda states, ctx: (1.0, StopRecord(1, 0.0, 0.0), None), 1)
        return tree, _summarize(name, params, log_m1, epsilon, tree, cap)
    step = curve_step(params) if step is None else step
    block_laws = {s: dist.prune(dist.block_info_pmf(params, dist.BlockMeasure(s), step), prune_tol)
                  for s in (0, 1)}
    first = MessageSchedule((float(log_m1),), ())
    g1 = bounds.solve_gamma_for_epsilon(first, epsilon)
    root = _SfContext(dist.point_mass(step), MessageSchedule((float(log_m1),), (g1,)),
                      linear=beta >= 1.0 or cap == 0)
    policy = _sf_policy(params, epsilon, beta, cap, step, rounding, prune_tol, block_laws)
    tree = enumerate_fading_tree(params.q, policy, horizon, p_min, root, merge_key=_sf_key,
                                 merge_ctx=_sf_merge)
    return tree, _summarize(name, params, log_m1, epsilon, tree, cap)


def scheme_vlsf(params: ChannelParams, log_m1: float, epsilon: float,
                horizon: int = DEFAULT_HORIZON, p_min: float = DEFAULT_P_MIN,
                step: float | None = None, rounding: str = "pessimistic",
                prune_tol: float = bounds.SF_PRUNE_TOL) -> SchemeCurvePoint:
    """Variable-length stop feedback: decode once the density reaches ``ln((M1 - 1)/eps)``."""
    return _run_sf("vlsf", params, log_m1, epsilon, 1.0, horizon, p_min, 0, step, rounding, prune_tol)[1]


def scheme_brq_sf(params: ChannelParams, log_m1: float, epsilon: float, beta: float = 0.9,
                  horizon: int = DEFAULT_HORIZON, p_min: float = DEFAULT_P_MIN,
                  max_expansions: int = DEFAULT_MAX_EXPANSIONS, step: float | None = None,
                  rounding: str = "pessimistic",
                  prune_tol: float = bounds.SF_PRUNE_TOL) -> SchemeCurvePoint:
    """Backtrack retransmission with stop feedback.

    Whenever decoding at the next block would happen with conditional probability
    above ``beta`` (assuming a good block and no new messages), that block injects a
    message set sized so the probability drops to ``beta``.  Thresholds are set so
    that each stopping time carries error at most ``epsilon``.
    """
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    return _run_sf("brq_sf", params, log_m1, epsilon, beta, horizon, p_min, max_expansions,
                   step, rounding, prune_tol)[1]


def stop_feedback_tree(params: ChannelParams, log_m1: float, epsilon: float, beta: float = 1.0,
                       horizon: int = DEFAULT_HORIZON, p_min: float = DEFAULT_P_MIN,
                       max_expansions: int = DEFAULT_MAX_EXPANSIONS, step: float | None = None,
                       rounding: str = "pessimistic") -> FadingTree:
    """The weighted outcome set behind :func:`scheme_brq_sf` (for inspection and tests)."""
    return _run_sf("brq_sf", params, log_m1, epsilon, beta, horizon, p_min, max_expansions,
                   step, rounding, bounds.SF_PRUNE_TOL)[0]


def evaluate_scheme(name: str, params: ChannelParams, log_m1: float, epsilon: float, *,
                    beta: float = 0.9, horizon: int = DEFAULT_HORIZON, p_min: float = DEFAULT_P_MIN,
                    max_expansions: int = DEFAULT_MAX_EXPANSIONS, step: float | None = None,
                    cache: DensityCache | None = None) -> SchemeCurvePoint:
    if name == "fixed":
        return scheme_fixed_for_m1(params, log_m1, epsilon)
    if name == "vld":
        return scheme_vld(params, log_m1, epsilon, horizon, p_min, step, cache=cache)
    if name == "brq_csit":
        return scheme_brq_csit(params, log_m1, epsilon, horizon, p_min, max_expansions, step, cache=cache)
    if name == "vlsf":
        return scheme_vlsf(params, log_m1, epsilon, horizon, p_min, step)
    if name == "brq_sf":
        return scheme_brq_sf(params, log_m1, epsilon, beta, horizon, p_min, max_expansions, step)
    raise ValueError(f"unknown scheme {name!r}")
