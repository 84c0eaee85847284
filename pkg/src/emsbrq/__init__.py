"""Finite-blocklength achievable rates for a two-state block-fading BSC with delayed CSIT."""

from .channel import (
    PAPER_PARAMS,
    ChannelParams,
    binary_entropy,
    capacity,
    dispersion,
    normal_approx_rate,
    q_inverse,
)
from .kernels import BACKEND

__all__ = [
    "BACKEND",
    "PAPER_PARAMS",
    "ChannelParams",
    "binary_entropy",
    "capacity",
    "dispersion",
    "normal_approx_rate",
    "q_inverse",
]
