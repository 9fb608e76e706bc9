"""Finite-blocklength link success model and per-consensus latency.

The Q-function argument is evaluated with blocklength ``n = N*T*B`` channel
uses and capacity/rate expressed per channel use (``C/B`` and ``R/B``, in
bits/s/Hz); logarithms are base 2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

LOG2E = math.log2(math.e)
T_LOW, T_HIGH = 1e-7, 10.0


class ChannelError(ValueError):
    pass


class InvalidParams(ChannelError):
    pass


class TargetOutOfRange(ChannelError):
    pass


class NonMonotoneRegime(ChannelError):
    pass


@dataclass(frozen=True)
class ChannelParams:
    bandwidth: float = 15_000.0
    capacity: float = 15_000.0
    rate: float = 10_000.0
    subcarriers: int = 1
    slot: float | None = None

    def with_slot(self, slot: float) -> "ChannelParams":
        return replace(self, slot=slot)

    def blocklength(self, slot: float | None = None) -> float:
        t = self.slot if slot is None else slot
        return self.subcarriers * t * self.bandwidth


def q_function(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def _validate(p: ChannelParams, need_slot: bool = True) -> None:
    if p.bandwidth <= 0 or p.capacity <= 0 or p.rate <= 0 or p.subcarriers < 1:
        raise InvalidParams(f"channel parameters must be positive: {p}")
    if need_slot and (p.slot is None or p.slot <= 0):
        raise InvalidParams("slot length T must be positive")


def q_argument(p: ChannelParams) -> float:
    n = p.blocklength()
    gap = (p.capacity - p.rate) / p.bandwidth
    return (n * gap + math.log2(n) / 2.0) / (LOG2E * math.sqrt(n))


def channel_success_prob(p: ChannelParams) -> float:
    """P_l = 1 - Q(arg); requires blocklength N*T*B > 1."""
    _validate(p)
    if p.blocklength() <= 1.0:
        raise InvalidParams(f"blocklength N*T*B = {p.blocklength():.4g} must exceed 1")
    return 1.0 - q_function(q_argument(p))


def min_slot(p: ChannelParams) -> float:
    """Smallest slot with blocklength above 1."""
    return max(T_LOW, 1.0 / (p.subcarriers * p.bandwidth))


def solve_channel_latency(target: float, p: ChannelParams, tol: float = 1e-9) -> float:
    """Bisection on T so that channel_success_prob hits ``target``."""
    _validate(p, need_slot=False)
    if p.capacity <= p.rate:
        raise NonMonotoneRegime("inversion needs C > R")
    lo = min_slot(p) * (1.0 + 1e-12)
    hi = T_HIGH
    f_lo = channel_success_prob(p.with_slot(lo))
    f_hi = channel_success_prob(p.with_slot(hi))
    if f_hi < f_lo:
        raise NonMonotoneRegime("success probability decreases in T")
    if not f_lo < target < f_hi:
        raise TargetOutOfRange(f"target {target} outside ({f_lo:.6f}, {f_hi:.6f})")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = channel_success_prob(p.with_slot(mid))
        if f_mid < target:
            lo = mid
        else:
            hi = mid
        if abs(f_mid - target) < tol and hi - lo < 1e-15 + 1e-12 * hi:
            break
    t = 0.5 * (lo + hi)
    if abs(channel_success_prob(p.with_slot(t)) - target) >= tol:
        raise NonMonotoneRegime(f"bisection did not converge for target {target}")
    return t


def phase_latency(n_participants: int, slot: float) -> float:
    """Two phases, each a downlink broadcast plus serialized uplinks: 2*n*T."""
    if n_participants < 1:
        raise ValueError("need at least one participant")
    return 2.0 * n_participants * slot
