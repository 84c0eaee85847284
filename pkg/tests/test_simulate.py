import itertools
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom, chisquare

from emsbrq import simulate as S
from emsbrq.channel import ChannelParams

TREE8 = ChannelParams(0.30, 0.05, 0.6, 8)
TREE8_M = (4, 3, 2)
NOISELESS = ChannelParams(0.0, 0.0, 0.5, 8)


# --- indexing -------------------------------------------------------------------------------

@pytest.mark.parametrize("j,flat", [((1, 1, 1), 1), ((1, 2, 1), 5), ((4, 3, 2), 24)])
def test_codeword_index_examples(j, flat):
    assert S.codeword_index(j, TREE8_M) == flat
    assert S.codeword_tuple(flat, TREE8_M) == j


@pytest.mark.parametrize("M", [(4, 3, 2), (2, 2, 2, 2, 2, 2), (7, 1, 5), (10, 10, 10, 10)])
def test_codeword_index_bijection(M):
    seen = set()
    for j in itertools.product(*[range(1, m + 1) for m in M]):
        flat = S.codeword_index(j, M)
        assert S.codeword_tuple(flat, M) == j
        seen.add(flat)
    assert seen == set(range(1, math.prod(M) + 1))


def test_codeword_index_domain():
    for j in [(0, 1, 1), (5, 1, 1), (1, 1)]:
        with pytest.raises(ValueError):
            S.codeword_index(j, TREE8_M)
    with pytest.raises(ValueError):
        S.codeword_tuple(25, TREE8_M)
    with pytest.raises(ValueError):
        S.codeword_index((1,), (0,))


def _brute_shared(j_flat, M):
    # j'_n: earlier indices whose tuples agree with j on exactly j_1..j_n
    tj = S.codeword_tuple(j_flat, M)
    out = np.zeros(len(M), dtype=np.int64)
    for i in range(1, j_flat):
        ti = S.codeword_tuple(i, M)
        k = 0
        while ti[k] == tj[k]:
            k += 1
        out[k] += 1
    return out


@pytest.mark.parametrize("M", [(4, 3, 2), (3, 2, 2), (2, 5)])
def test_shared_prefix_counts_brute_force(M):
    for j in range(1, math.prod(M) + 1):
        got = S.shared_prefix_counts(j, M)
        assert got.sum() == j - 1
        assert np.array_equal(got, _brute_shared(j, M))
    assert not S.shared_prefix_counts(1, M).any()


@pytest.mark.parametrize("M", [(4, 3, 2), (2, 3, 5, 2), (6,)])
def test_average_floor_identity(M):
    for n in range(len(M) + 1):
        assert S.average_floor_identity(M, n) == Fraction(math.prod(M[n:]) - 1, 2)


# --- codebooks ------------------------------------------------------------------------------

def test_three_level_codebook_shape():
    cb = S.gen_tree_codebook(7, 8, TREE8_M)
    assert cb.stored_blocks == 4 + 12 + 24
    assert cb.num_codewords == 24 and cb.N == 3


def test_single_codeword_codebook():
    cb = S.gen_tree_codebook(1, 4, (1,))
    assert cb.stored_blocks == 1 and 0 <= cb.block((1,)) < 16


def test_codebook_determinism():
    a, b, c = (S.gen_tree_codebook(s, 8, TREE8_M) for s in (3, 3, 4))
    assert all(np.array_equal(x, y) for x, y in zip(a.levels, b.levels))
    assert not all(np.array_equal(x, y) for x, y in zip(a.levels, c.levels))


@pytest.mark.parametrize("M", [(4, 3, 2), (2, 2, 2, 2, 2, 2), (8, 8)])
def test_codebook_prefix_property(M):
    cb = S.gen_tree_codebook(11, 6, M)
    for j in range(1, cb.num_codewords + 1):
        tup = S.codeword_tuple(j, M)
        words = cb.codeword(j)
        for n in range(1, len(M) + 1):
            assert words[n - 1] == cb.block(tup[:n])
            # every codeword sharing the prefix also shares the block
            for k in range(1, cb.num_codewords + 1):
                if S.codeword_tuple(k, M)[:n] == tup[:n]:
                    assert cb.codeword(k)[n - 1] == words[n - 1]


def test_codebook_guards():
    with pytest.raises(ValueError):
        S.gen_tree_codebook(0, 33, (2,))
    with pytest.raises(ValueError):
        S.gen_tree_codebook(0, 8, (2**9, 2**8))


def test_codebook_bits_are_balanced():
    cb = S.gen_tree_codebook(5, 32, (2**16,))
    bits = np.unpackbits(cb.levels[0].view(np.uint8))
    assert abs(bits.mean() - 0.5) < 5 * 0.5 / math.sqrt(bits.size)


# --- channel --------------------------------------------------------------------------------

def test_noiseless_channel_is_identity():
    for seed in range(20):
        assert S.simulate_channel(0b10110010, 1, NOISELESS, seed) == 0b10110010


def test_channel_regression_vector():
    p = ChannelParams(0.3, 0.3, 0.5, 8)
    got = [S.simulate_channel(0b10110010, 0, p, s) for s in range(8)]
    assert got == [149, 30, 178, 240, 251, 166, 12, 224]


@pytest.mark.parametrize("delta", [0.05, 0.3])
def test_flip_counts_binomial(delta):
    T, n = 16, 100_000
    rng = np.random.Generator(np.random.Philox(key=2))
    z = S._noise_words(rng, np.array(delta), T, (n,))
    counts = np.bincount(np.bitwise_count(z), minlength=T + 1)
    expected = binom.pmf(np.arange(T + 1), T, delta) * n
    keep = expected > 5
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    assert chisquare(obs, exp * obs.sum() / exp.sum()).pvalue > 1e-3


def test_half_crossover_output_is_uniform():
    p = ChannelParams(0.5, 0.5, 0.5, 4)
    out = np.array([S.simulate_channel(0b1111, 0, p, s) for s in range(4000)])
    assert chisquare(np.bincount(out, minlength=16)).pvalue > 1e-3


def test_density_table():
    tab = S.density_table(TREE8, (1, 0))
    assert tab.shape == (2, 9)
    assert tab[0, 0] == pytest.approx(8 * math.log(2) + 8 * math.log(0.95))
    assert tab[1, 3] == pytest.approx(8 * math.log(2) + 3 * math.log(0.3) + 5 * math.log(0.7))
    assert S.density_table(NOISELESS, (0,))[0, 1] == -math.inf


# --- decoders -------------------------------------------------------------------------------

def test_feinstein_noiseless_decodes():
    cb = S.gen_tree_codebook(0, 8, TREE8_M)
    assert len({tuple(cb.codeword(j)) for j in range(1, 25)}) == 24
    for j in range(1, 25):
        y = [S.simulate_channel(int(b), 0, NOISELESS, j) for b in cb.codeword(j)]
        assert S.feinstein_decode(y, (0, 0, 0), cb, 24 * math.log(2) - 1, NOISELESS) == j


def test_feinstein_infinite_threshold_erases():
    cb = S.gen_tree_codebook(0, 8, TREE8_M)
    y = list(cb.codeword(3))
    assert S.feinstein_decode(y, (1, 1, 1), cb, math.inf, TREE8) is None
    with pytest.raises(ValueError):
        S.feinstein_decode(y[:2], (1, 1, 1), cb, 0.0, TREE8)


def test_sf_noiseless_crosses_at_truth():
    M = (4, 3, 1, 1)
    cb = S.gen_tree_codebook(2, 8, M)
    levels = [3.0, 8.0, 8.0, 8.0]
    for msg in [(1, 1), (4, 3), (2, 3)]:
        r = S.emssf_decode_run(cb, NOISELESS, levels, (0, 0, 0, 0), 9, 4, message=msg)
        assert r.correct and r.decoded == msg[:min(r.stop_block, 2)]


def test_sf_unreachable_level_misses():
    cb = S.gen_tree_codebook(2, 8, (4, 1))
    r = S.emssf_decode_run(cb, TREE8, [1e3, 1e3], (1, 1), 0, 2)
    assert r.stop_block is None and not r.correct
    with pytest.raises(ValueError):
        S.emssf_decode_run(cb, TREE8, [1.0], (1,), 0, 3)


# --- Monte Carlo ----------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(0, 500))
def test_clopper_pearson_contains_estimate(n, k):
    k = min(k, n)
    lo, hi = S.clopper_pearson(k, n)
    assert 0 <= lo <= k / n <= hi <= 1


def test_clopper_pearson_edges():
    assert S.clopper_pearson(0, 100)[0] == 0.0
    assert S.clopper_pearson(100, 100)[1] == 1.0
    # exact upper limit with no errors solves (1 - p)^n = alpha/2
    assert S.clopper_pearson(0, 100)[1] == pytest.approx(1 - 0.025 ** (1 / 100), rel=1e-9)


def test_feinstein_trials_respect_bound():
    r = S.feinstein_trials(TREE8, (0, 1, 0), TREE8_M, 20_000, seed=3)
    assert r.passed and r.ci_low <= r.error_rate <= r.ci_high
    assert r.bound_value == pytest.approx(0.6306824217419875, abs=1e-9)
    assert json.loads(r.to_json())["passed"] is True


def test_feinstein_trials_reproducible_and_chunked():
    a = S.feinstein_trials(TREE8, (0, 1, 0), TREE8_M, 5000, seed=1)
    b = S.feinstein_trials(TREE8, (0, 1, 0), TREE8_M, 5000, seed=1)
    assert a == b
    assert S.feinstein_trials(TREE8, (0, 1, 0), TREE8_M, 5000, seed=2).errors != a.errors


def test_single_message_never_errs():
    r = S.feinstein_trials(TREE8, (0,), (1,), 1000)
    assert r.errors == 0 and r.bound_value == 0.0 and r.passed


def test_feinstein_bound_default_matches_theorem():
    from emsbrq import bounds
    from emsbrq.bounds import MessageSchedule
    g = math.log(23 / 2)
    thm = bounds.ems_bound_thm1(TREE8, (0, 1, 0), MessageSchedule.from_sizes(TREE8_M), step=1e-5)
    assert S.feinstein_bound(TREE8, (0, 1, 0), TREE8_M, g) == pytest.approx(thm.epsilon_bound, abs=1e-12)
    # raising the threshold trades confusion for missed detection
    assert S.feinstein_bound(TREE8, (0, 1, 0), TREE8_M, g + 30) > 0.99


def test_emssf_trials_respect_bound():
    g = S.gammas_for_epsilon((4, 3), 1e-2)
    r = S.emssf_trials(TREE8, (0, 1) * 5, (4, 3), g, 20_000, seed=3)
    assert r.passed
    assert r.avg_stop_block <= r.expected_stop_bound + 3 * r.stop_block_std / math.sqrt(r.trials)


def test_gammas_for_epsilon_first_level():
    g = S.gammas_for_epsilon((4, 3), 1e-2)
    assert g[0] == pytest.approx(math.log(3 / 1e-2), rel=1e-12)


def test_trial_guards():
    with pytest.raises(ValueError):
        S.feinstein_trials(TREE8, (0, 1, 0), TREE8_M, 0)
    with pytest.raises(ValueError):
        S.feinstein_trials(TREE8, (0, 1), TREE8_M, 10)
    with pytest.raises(ValueError):
        S.emssf_trials(TREE8, (0,), (4, 3), (1.0, 1.0), 10)
