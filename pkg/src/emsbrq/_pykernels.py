"""Pure-numpy implementations of the hot loops (fallback when the extension is absent)."""

import numpy as np
from scipy.signal import lfilter


def scatter_convolve(a, b_idx, b_w, out_len):
    out = np.zeros(out_len)
    n = len(a)
    for off, w in zip(b_idx.tolist(), b_w.tolist()):
        out[off:off + n] += w * a
    return out


def suffix_discount(m, r):
    if len(m) == 0:
        return np.zeros(0)
    return lfilter([1.0], [1.0, -r], m[::-1])[::-1].copy()


def feinstein_batch(codes, y, level_start, prefix_count, table, gamma):
    trials = codes.shape[0]
    N = y.shape[1]
    total = int(prefix_count[N - 1])
    j = np.arange(total)
    dens = np.zeros((trials, total))
    for n in range(N):
        rows = codes[:, level_start[n] + j % prefix_count[n]]
        dist = np.bitwise_count(rows ^ y[:, n:n + 1])
        dens += table[n][dist]
    hit = dens > gamma
    first = np.argmax(hit, axis=1).astype(np.int64)
    first[~hit.any(axis=1)] = -1
    return first
