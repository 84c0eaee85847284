"""Two-state block-fading BSC: parameters, capacity, dispersion, normal approximation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

LN2 = math.log(2.0)


@dataclass(frozen=True)
class ChannelParams:
    """Block-fading BSC.

    Parameters
    ----------
    delta0, delta1
        Crossover probabilities of the bad (0) and good (1) state.
    q
        Probability that a block is in the good state.
    T
        Channel uses per block (coherence time).
    """

    delta0: float
    delta1: float
    q: float
    T: int

    def __post_init__(self):
        for name in ("delta0", "delta1"):
            d = getattr(self, name)
            if not 0.0 <= d <= 0.5:
                raise ValueError(f"{name}={d} outside [0, 0.5]")
        if self.delta1 > self.delta0:
            raise ValueError("delta1 must not exceed delta0 (state 1 is the good state)")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"q={self.q} outside [0, 1]")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T={self.T} must be a positive integer")
        object.__setattr__(self, "T", int(self.T))

    def delta(self, state: int) -> float:
        if state not in (0, 1):
            raise ValueError(f"state must be 0 or 1, got {state}")
        return self.delta1 if state == 1 else self.delta0

    def state_prob(self, state: int) -> float:
        return self.q if state == 1 else 1.0 - self.q


PAPER_PARAMS = ChannelParams(delta0=0.30, delta1=0.05, q=0.6, T=100)


@dataclass(frozen=True)
class SecondOrderResult:
    capacity_bits: float
    dispersion_per_use: float
    rate_bits: float
    unit: str = "bits2"


def _check_base(base):
    if base == 2:
        return LN2
    if base == "e" or base == math.e:
        return 1.0
    raise ValueError(f"base must be 2 or 'e', got {base!r}")


def binary_entropy(p: float, base=2) -> float:
    """h_b(p) with 0 log 0 = 0."""
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"p={p} outside [0, 1]")
    scale = _check_base(base)
    h = 0.0
    for x in (p, 1.0 - p):
        if x > 0.0:
            h -= x * math.log(x)
    return h / scale


def capacity(params: ChannelParams) -> float:
    """Capacity in bits per channel use."""
    q = params.q
    return 1.0 - q * binary_entropy(params.delta1) - (1.0 - q) * binary_entropy(params.delta0)


def _bsc_varentropy(delta: float, log) -> float:
    if delta in (0.0, 0.5):
        return 0.0
    return delta * (1.0 - delta) * log((1.0 - delta) / delta) ** 2


def dispersion(params: ChannelParams, unit: str = "per_use", base=2) -> float:
    """Channel dispersion; squared bits (base 2) or squared nats (base 'e')."""
    scale = _check_base(base)

    def log(x):
        return math.log(x) / scale

    q = params.q
    noise = q * _bsc_varentropy(params.delta1, log) + (1.0 - q) * _bsc_varentropy(params.delta0, log)
    dh = binary_entropy(params.delta0, base) - binary_entropy(params.delta1, base)
    v = noise + params.T * q * (1.0 - q) * dh * dh
    if unit == "per_use":
        return v
    if unit == "per_block":
        return params.T * v
    raise ValueError(f"unknown unit {unit!r}")


_STD_NORMAL = NormalDist()


def q_function(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def q_inverse(eps: float) -> float:
    """Q^{-1}(eps), the upper-tail standard normal quantile."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps={eps} outside (0, 1)")
    if eps == 0.5:
        return 0.0
    # Phi^{-1}(1 - eps) = -Phi^{-1}(eps), which keeps precision for small eps
    return -_STD_NORMAL.inv_cdf(eps)


def normal_approx_rate(params: ChannelParams, n: float, epsilon: float) -> float:
    """C - sqrt(V/n) Q^{-1}(eps) in bits per channel use; the O(log n / n) term is dropped."""
    if n < 1:
        raise ValueError(f"n={n} must be >= 1")
    qi = q_inverse(epsilon)
    c = capacity(params)
    if qi == 0.0:
        return c
    return c - math.sqrt(dispersion(params) / n) * qi


def second_order(params: ChannelParams, n: float, epsilon: float) -> SecondOrderResult:
    return SecondOrderResult(
        capacity_bits=capacity(params),
        dispersion_per_use=dispersion(params),
        rate_bits=normal_approx_rate(params, n, epsilon),
    )
