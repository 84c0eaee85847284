import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from emsbrq import bounds, dist
from emsbrq.bounds import MessageSchedule
from emsbrq.channel import PAPER_PARAMS, ChannelParams

TREE8 = ChannelParams(0.30, 0.05, 0.6, 8)
TREE8_STATES = (0, 1, 0)
TREE8_M = (4, 3, 2)
TREE8_THM1 = 0.6306824217419875  # pessimistic, step 1e-5; regression constant


# --- independent oracle ---------------------------------------------------------------------

def _atoms(params, state, conditioned):
    T, d = params.T, params.delta(state)
    k = np.arange(T + 1)
    with np.errstate(divide="ignore"):
        v = T * math.log(2) + k * np.log(d) + (T - k) * np.log1p(-d)
    return v, binom.pmf(k, T, d if conditioned else 0.5)


def _prob_sum_exceeds(params, states, conditioned_upto, t):
    """P(sum of block densities > t); blocks before ``conditioned_upto`` use the conditioned law."""
    laws = [_atoms(params, s, i < conditioned_upto) for i, s in enumerate(states)]
    total = 0.0
    for combo in itertools.product(*[range(params.T + 1)] * len(states)):
        v = sum(laws[i][0][k] for i, k in enumerate(combo))
        if v > t:
            total += math.prod(laws[i][1][k] for i, k in enumerate(combo))
    return total


def exact_thm1(params, states, M):
    """The random-coding bound evaluated by enumerating every flip-count tuple."""
    N, total = len(M), math.prod(M)
    if total == 1:
        return 0.0
    g = math.log((total - 1) / 2)
    out = 1.0 - _prob_sum_exceeds(params, states, N, g)
    for n in range(1, N + 1):
        w = math.prod(M[n:]) * (M[n - 1] - 1) / 2
        if w:
            out += w * _prob_sum_exceeds(params, states, n - 1, g)
    return out


# --- schedule -------------------------------------------------------------------------------

def test_schedule_basics():
    s = MessageSchedule.from_sizes((4, 3, 2))
    assert s.N == 3 and s.sizes == pytest.approx((4, 3, 2))
    assert s.log_total == pytest.approx(math.log(24))
    assert s.log_product(2, 3) == pytest.approx(math.log(6))
    assert s.log_product(4, 3) == 0.0
    assert s.log_mtilde(2, 2) == pytest.approx(math.log(2))
    assert s.log_mtilde(1, 5) == pytest.approx(math.log(3 * 6))
    with pytest.raises(ValueError):
        MessageSchedule.from_sizes((0.5,))
    with pytest.raises(ValueError):
        MessageSchedule((0.0,), (math.nan,))


# --- two-group bound and its single-expectation form ----------------------------------------

def test_single_codeword_is_zero():
    for f in (bounds.ems_bound_thm1, bounds.ems_bound_prop1):
        assert f(TREE8, (0, 1, 1), MessageSchedule.from_sizes((1, 1, 1))).epsilon_bound == 0.0


def test_three_level_regression_and_oracle():
    b = bounds.ems_bound_thm1(TREE8, TREE8_STATES, MessageSchedule.from_sizes(TREE8_M))
    assert b.epsilon_bound == pytest.approx(TREE8_THM1, rel=1e-12)
    assert b.epsilon_bound == pytest.approx(b.missed_detection_term + sum(b.confusion_terms), rel=1e-14)
    exact = exact_thm1(TREE8, TREE8_STATES, TREE8_M)
    assert b.epsilon_bound >= exact - 1e-12
    assert b.epsilon_bound - exact < 1e-4
    near = bounds.ems_bound_thm1(TREE8, TREE8_STATES, MessageSchedule.from_sizes(TREE8_M), rounding="nearest")
    assert near.epsilon_bound == pytest.approx(exact, abs=1e-9)


@pytest.mark.parametrize("T,states,M", [(2, (0, 1), (3, 2)), (4, (1, 0, 1), (2, 2, 3)),
                                        (3, (0,), (5,)), (6, (1, 1), (7, 1))])
def test_thm1_brackets_enumeration(T, states, M):
    p = ChannelParams(0.30, 0.05, 0.6, T)
    exact = exact_thm1(p, states, M)
    sched = MessageSchedule.from_sizes(M)
    pes = bounds.ems_bound_thm1(p, states, sched, rounding="pessimistic").epsilon_bound
    opt = bounds.ems_bound_thm1(p, states, sched, rounding="optimistic").epsilon_bound
    assert opt - 1e-12 <= exact <= pes + 1e-12
    assert bounds.ems_bound_thm1(p, states, sched, rounding="nearest").epsilon_bound == pytest.approx(exact, abs=1e-9)


def test_prop1_hand_example():
    """T=1, noiseless: i = ln2 surely and g = ln(1/2), so the bound is exp(-ln 4) = 1/4."""
    p = ChannelParams(0.0, 0.0, 0.5, 1)
    sched = MessageSchedule.from_sizes((2,))
    for f in (bounds.ems_bound_thm1, bounds.ems_bound_prop1):
        assert f(p, (1,), sched, rounding="nearest").epsilon_bound == pytest.approx(0.25, abs=1e-12)


def test_prop1_single_epoch_is_classic_dt_form():
    p = ChannelParams(0.11, 0.11, 0.5, 4)
    M1 = 4
    g = math.log((M1 - 1) / 2)
    v, pr = _atoms(p, 0, True)
    direct = float(np.sum(pr * np.exp(-np.maximum(v - g, 0.0))))
    b = bounds.ems_bound_prop1(p, (0,), MessageSchedule.from_sizes((M1,)), rounding="nearest")
    assert b.epsilon_bound == pytest.approx(direct, abs=1e-8)
    assert bounds.ems_bound_prop1(p, (0,), MessageSchedule.from_sizes((M1,)), rounding="nearest",
                                  as_stated=True).epsilon_bound == pytest.approx(direct, abs=1e-8)


def test_prop1_printed_form_differs_for_several_epochs():
    """The expectation of exp(i_A - |i - g|^+) is not the bound once N > 1."""
    p = ChannelParams(0.30, 0.05, 0.6, 2)
    sched = MessageSchedule.from_sizes((3, 2))
    exact = exact_thm1(p, (0, 1), (3, 2))
    fixed = bounds.ems_bound_prop1(p, (0, 1), sched, rounding="nearest").epsilon_bound
    printed = bounds.ems_bound_prop1(p, (0, 1), sched, rounding="nearest", as_stated=True).epsilon_bound
    assert fixed == pytest.approx(exact, abs=1e-9)
    assert exact == pytest.approx(0.667475, abs=1e-6)
    assert printed == pytest.approx(0.66382, abs=1e-5)
    with pytest.raises(ValueError):
        bounds.ems_bound_prop1(p, (0, 1), sched, as_stated=True)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.lists(st.tuples(st.integers(0, 1), st.integers(1, 6)), min_size=1, max_size=3),
       st.floats(0.01, 0.45), st.floats(0.01, 0.45), st.sampled_from(bounds.dist.ROUNDING_MODES))
def test_thm1_equals_prop1(T, cfg, a, b, rounding):
    d1, d0 = sorted((a, b))
    p = ChannelParams(d0, d1, 0.5, T)
    states = tuple(s for s, _ in cfg)
    sched = MessageSchedule.from_sizes([m for _, m in cfg])
    t1 = bounds.ems_bound_thm1(p, states, sched, rounding=rounding)
    p1 = bounds.ems_bound_prop1(p, states, sched, rounding=rounding)
    assert abs(t1.epsilon_bound - p1.epsilon_bound) <= 1e-9
    assert t1.missed_detection_term == pytest.approx(p1.missed_detection_term, abs=1e-9)


# Neither "more messages never helps" nor "a better state never hurts" holds for the
# joint bound: the threshold moves with the total message count, and a good block has
# a more negative worst-case density than a bad one.  Both directions are pinned
# against the exact enumeration.
@pytest.mark.parametrize("T,before,after,expect", [
    (1, ((0, 0, 0), (1, 1, 2)), ((1, 0, 0), (1, 1, 2)), "up"),
    (1, ((0, 0, 0), (1, 1, 4)), ((0, 0, 0), (2, 1, 4)), "down"),
    (2, ((0, 1), (1, 2)), ((1, 1), (1, 2)), "up"),
    (8, ((1, 1), (3, 3)), ((1, 1), (4, 3)), "down"),
])
def test_bound_not_monotone_counterexamples(T, before, after, expect):
    p = ChannelParams(0.3, 0.05, 0.6, T)
    a = bounds.ems_bound_thm1(p, before[0], MessageSchedule.from_sizes(before[1]), step=1e-5).epsilon_bound
    b = bounds.ems_bound_thm1(p, after[0], MessageSchedule.from_sizes(after[1]), step=1e-5).epsilon_bound
    ea, eb = exact_thm1(p, *before), exact_thm1(p, *after)
    assert a == pytest.approx(ea, abs=1e-6) and b == pytest.approx(eb, abs=1e-6)
    assert (eb > ea) if expect == "up" else (eb < ea)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(0, 1), st.integers(2, 40), st.integers(1, 10))
def test_single_epoch_bound_monotone_in_size(T, s, M, bump):
    # with one epoch the bound is E[min(1, (M-1)/2 exp(-i))]
    p = ChannelParams(0.3, 0.05, 0.6, T)
    lo = bounds.ems_bound_thm1(p, (s,), MessageSchedule.from_sizes((M,))).epsilon_bound
    hi = bounds.ems_bound_thm1(p, (s,), MessageSchedule.from_sizes((M + bump,))).epsilon_bound
    assert hi >= lo - 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.lists(st.integers(0, 1), min_size=1, max_size=3),
       st.lists(st.integers(1, 6), min_size=3, max_size=3))
def test_bound_tracks_oracle_under_perturbation(T, states, sizes):
    # whichever way a perturbation moves the bound, the grid evaluation follows the oracle
    p = ChannelParams(0.3, 0.05, 0.6, T)
    sizes = sizes[:len(states)]
    for st_, sz in ((states, sizes), ([1] * len(states), sizes), (states, [m + 1 for m in sizes])):
        got = bounds.ems_bound_thm1(p, st_, MessageSchedule.from_sizes(sz), step=1e-5).epsilon_bound
        assert got >= exact_thm1(p, st_, sz) - 1e-9
        assert got <= exact_thm1(p, st_, sz) + 1e-3


def test_input_validation():
    with pytest.raises(ValueError):
        bounds.ems_bound_thm1(TREE8, (0, 1), MessageSchedule.from_sizes(TREE8_M))
    with pytest.raises(ValueError):
        bounds.ems_bound_thm1(TREE8, (0, 2, 1), MessageSchedule.from_sizes(TREE8_M))
    with pytest.raises(ValueError):
        bounds.ems_bound_thm1(TREE8, TREE8_STATES, MessageSchedule.from_sizes(TREE8_M), rounding="up")
    cache = bounds.DensityCache(TREE8, 1e-4)
    with pytest.raises(ValueError):
        bounds.ems_bound_thm1(TREE8, TREE8_STATES, MessageSchedule.from_sizes(TREE8_M), cache=cache)


def test_breakdown_clamp_and_dict():
    b = bounds.ems_bound_thm1(ChannelParams(0.3, 0.05, 0.6, 1), (0, 0, 0), MessageSchedule.from_sizes((1, 1, 4)))
    assert b.epsilon_bound > 1 and b.clamped == 1.0
    d = b.as_dict()
    assert d["method"] == "thm1" and len(d["confusion_terms"]) == 3


# --- dependency-testing bound -------------------------------------------------------------

def test_dt_bound_basics():
    assert bounds.dt_bound(TREE8, (0, 1), M1=1).epsilon_bound == 0.0
    p = ChannelParams(0.11, 0.11, 0.5, 4)
    g = math.log(3 / 2)
    v, pc = _atoms(p, 0, True)
    _, pu = _atoms(p, 0, False)
    direct = float(pc[v <= g].sum() + 1.5 * pu[v > g].sum())  # five binomial terms each
    assert bounds.dt_bound(p, (0,), M1=4).epsilon_bound == pytest.approx(direct, abs=1e-6)
    oracle = (1 - dist.exact_two_group_ccdf(p, 1, 0, ("conditioned",) * 2, g)
              + 1.5 * dist.exact_two_group_ccdf(p, 1, 0, ("unconditioned",) * 2, g))
    assert bounds.dt_bound(p, (0,), M1=4).epsilon_bound == pytest.approx(oracle, abs=1e-6)
    with pytest.raises(ValueError):
        bounds.dt_bound(p, (0,))
    with pytest.raises(ValueError):
        bounds.dt_bound(p, (0,), M1=0.5)


@pytest.mark.parametrize("M1", [2, 5, 40, 300])
def test_dt_good_states_dominate(M1):
    p = ChannelParams(0.3, 0.05, 0.6, 8)
    assert bounds.dt_bound(p, (1, 1), M1=M1).epsilon_bound <= bounds.dt_bound(p, (0, 0), M1=M1).epsilon_bound


def test_dt_equals_thm1_single_epoch():
    sched = MessageSchedule.from_sizes((37.5,))
    assert bounds.dt_bound(TREE8, (1,), M1=37.5).epsilon_bound == \
        bounds.ems_bound_thm1(TREE8, (1,), sched).epsilon_bound


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=4), st.integers(0, 1), st.floats(2, 1e4))
def test_dt_missed_detection_observed(states, extra, M1):
    # monitored only: the first term over k+1 blocks versus k blocks; values must be probabilities
    p = ChannelParams(0.3, 0.05, 0.6, 6)
    a = bounds.dt_bound(p, states, M1=M1).missed_detection_term
    b = bounds.dt_bound(p, tuple(states) + (extra,), M1=M1).missed_detection_term
    assert 0 <= a <= 1 + 1e-12 and 0 <= b <= 1 + 1e-12


# --- stop-feedback bound ------------------------------------------------------------------

def test_sf_single_message_is_zero():
    sf = bounds.emssf_bound_loosened(TREE8, (0, 1, 0), MessageSchedule.from_sizes((1,), (0.5,)))
    assert sf.epsilon_bound == 0.0
    assert sf.stop_dist.stop_prob.sum() + sf.tail_prob == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("M1,eps0", [(4, 1e-2), (50, 1e-3), (1000, 0.1)])
def test_sf_flat_level_meets_target(M1, eps0):
    g = math.log((M1 - 1) / eps0)
    sched = MessageSchedule.from_sizes((M1,), (g,))
    sf = bounds.emssf_bound_loosened(TREE8, (0, 1, 0, 1, 1, 0, 1, 1), sched)
    assert sf.epsilon_bound <= eps0 * (1 + 1e-12)
    assert np.allclose(sf.per_stop_error, eps0, rtol=1e-12)


def test_sf_stop_law_matches_path_enumeration():
    """T=3 blocks (0,1,0) and M=(4,3): stop law and bound from all flip-count paths."""
    p = ChannelParams(0.30, 0.05, 0.6, 3)
    states = (0, 1, 0)
    gam = (1.1, 0.7, 0.0)
    levels = np.cumsum(gam)
    laws = [_atoms(p, s, True) for s in states]
    stop = np.zeros(3)
    for combo in itertools.product(range(4), repeat=3):
        s, pr = 0.0, math.prod(laws[i][1][k] for i, k in enumerate(combo))
        for n, k in enumerate(combo):
            s += laws[n][0][k]
            if s >= levels[n]:
                stop[n] += pr
                break
    sched = MessageSchedule.from_sizes((4, 3), gam)
    sf = bounds.emssf_bound_loosened(p, states, sched, rounding="nearest")
    assert sf.stop_dist.stop_prob == pytest.approx(stop, abs=1e-12)
    # Mtilde_1^1 = M_1 - 1, Mtilde_1^n = (M_1 - 1) M_2 and Mtilde_2^n = M_2 - 1 for n >= 2
    c = [3 * math.exp(-1.1), 3 * 3 * math.exp(-1.8) + 2 * math.exp(-0.7),
         3 * 3 * math.exp(-1.8) + 2 * math.exp(-0.7)]
    assert sf.per_stop_error == pytest.approx(c, rel=1e-12)
    assert sf.epsilon_bound == pytest.approx(float(stop @ np.array(c)), rel=1e-10)
    assert sf.expected_nats == pytest.approx(stop[0] * math.log(4) + (1 - stop[0]) * math.log(12), rel=1e-10)


def test_sf_incomplete_flag():
    sched = MessageSchedule.from_sizes((1e6,), (math.log(1e6 / 1e-3),))
    sf = bounds.emssf_bound_loosened(TREE8, (0, 0), sched)
    assert sf.incomplete and sf.tail_prob > 1e-6


# --- inversions ---------------------------------------------------------------------------

def test_solve_gamma_closed_forms():
    assert bounds.solve_gamma_for_epsilon(MessageSchedule.from_sizes((1,)), 1e-3) == 0.0
    assert bounds.solve_gamma_for_epsilon(MessageSchedule.from_sizes((1, 1), (0.0,)), 1e-3) == 0.0
    g1 = bounds.solve_gamma_for_epsilon(MessageSchedule.from_sizes((4,)), 1e-2)
    assert g1 == pytest.approx(math.log(3 / 1e-2), rel=1e-14)
    g2 = bounds.solve_gamma_for_epsilon(MessageSchedule.from_sizes((4, 3), (g1,)), 1e-2)
    assert g2 == pytest.approx(math.log(3 + 2 / 1e-2), rel=1e-14)
    # forward evaluation reproduces the target
    c = bounds.conditional_error_bounds(MessageSchedule.from_sizes((4, 3)), (g1, g2), 2)
    assert c == pytest.approx([1e-2, 1e-2], rel=1e-12)
    with pytest.raises(ValueError):
        bounds.solve_gamma_for_epsilon(MessageSchedule.from_sizes((4, 3)), 1e-2)
    with pytest.raises(ValueError):
        bounds.solve_gamma_for_epsilon(MessageSchedule.from_sizes((4,)), 0.0)


@given(st.floats(1.0, 1e6), st.floats(1.0, 1e6))
def test_solve_gamma_monotone_in_size(a, b):
    lo, hi = sorted((a, b))
    prev = MessageSchedule.from_sizes((5,), (2.0,))
    g_lo = bounds.solve_gamma_for_epsilon(prev.extend(math.log(lo)), 1e-3)
    g_hi = bounds.solve_gamma_for_epsilon(prev.extend(math.log(hi)), 1e-3)
    assert g_lo <= g_hi + 1e-12


def test_solve_M_for_epsilon_boundary_and_round_trip():
    prefix = MessageSchedule.from_sizes((30.0,))
    target = bounds.ems_bound_thm1(TREE8, (0, 1), prefix.extend(0.0)).epsilon_bound
    assert bounds.solve_M_for_epsilon(TREE8, (0, 1), prefix, target) == 0.0
    assert bounds.solve_M_for_epsilon(TREE8, (0, 1), prefix, target * 0.99) == 0.0
    # one prior bad block carrying no new message, then a good block sized for eps
    eps = 1e-2
    prefix = MessageSchedule.from_sizes((1.0,))
    lm = bounds.solve_M_for_epsilon(TREE8, (0, 1), prefix, eps)
    assert lm > 0
    below = bounds.ems_bound_thm1(TREE8, (0, 1), prefix.extend(lm + math.log(0.99))).epsilon_bound
    above = bounds.ems_bound_thm1(TREE8, (0, 1), prefix.extend(lm + math.log(1.01))).epsilon_bound
    at = bounds.ems_bound_thm1(TREE8, (0, 1), prefix.extend(lm)).epsilon_bound
    assert below <= at <= eps < above
    assert lm == pytest.approx(0.05171686441258227, rel=1e-5)  # regression
    with pytest.raises(ValueError):
        bounds.solve_M_for_epsilon(TREE8, (0,), prefix, eps)


def test_solve_M_for_beta_trivial_and_monotone():
    prefix = MessageSchedule.from_sizes((1e5,), (math.log(1e5 / 1e-3),))
    p = PAPER_PARAMS
    one = bounds.solve_M_for_beta(p, (1, 1), prefix, 1.0, 1e-3, step=1e-2)
    assert one.log_m == 0.0 and not one.expanded
    prev = 0.0
    for beta in (0.95, 0.9, 0.5, 0.1):
        sol = bounds.solve_M_for_beta(p, (1, 1), prefix, beta, 1e-3, step=1e-2)
        assert sol.stop_prob <= beta + 1e-12
        assert sol.log_m >= prev
        prev = sol.log_m
    with pytest.raises(ValueError):
        bounds.solve_M_for_beta(p, (1, 1), prefix, 0.0, 1e-3, step=1e-2)


def test_solve_M_for_beta_paper_point():
    """beta = 0.9 with two good blocks at T=100: forward re-evaluation of p and a frozen value."""
    p = PAPER_PARAMS
    lm1 = 60.0
    prefix = MessageSchedule((lm1,), (bounds.solve_gamma_for_epsilon(MessageSchedule((lm1,)), 1e-3),))
    assert not bounds.solve_M_for_beta(p, (0, 1), prefix, 0.9, 1e-3, step=1e-2).expanded
    sol = bounds.solve_M_for_beta(p, (1, 1), prefix, 0.9, 1e-3, step=1e-2)
    assert sol.expanded and sol.stop_prob <= 0.9
    sched = prefix.extend(sol.log_m, sol.gamma)
    sf = bounds.emssf_bound_loosened(p, (1, 1), sched, step=1e-2)
    before = 1 - sf.stop_dist.stop_prob[0]
    assert sf.stop_dist.stop_prob[1] / before == pytest.approx(sol.stop_prob, abs=1e-9)
    worse = bounds.solve_M_for_beta_on(
        dist.convolve(sf.stop_dist.residual[0], dist.prune(dist.block_info_pmf(p, dist.BlockMeasure(1), 1e-2),
                                                           bounds.SF_PRUNE_TOL)),
        before, prefix.gamma[0], prefix, 0.9, 1e-3)
    assert worse.log_m == pytest.approx(sol.log_m, rel=1e-9)
    assert sol.log_m == pytest.approx(REGRESSION_BETA_LOG_M, rel=1e-6)


REGRESSION_BETA_LOG_M = 13.323876298964024
