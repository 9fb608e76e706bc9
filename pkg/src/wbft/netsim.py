"""Discrete-event network plumbing: event queue, simulated clock, keyed
randomness, lossy delivery, a serialized per-instance medium, Byzantine
message mutation and mock LLM responders."""
from __future__ import annotations

import hashlib
import heapq
import itertools
import random
import struct
from dataclasses import dataclass, field, replace
from statistics import NormalDist
from typing import Any, Callable, Hashable

from .channel import (ChannelParams, channel_success_prob, phase_latency,  # noqa: F401
                      solve_channel_latency)
from .core import LlmProfile, NodeId, digest

DEFAULT_TICK_SECONDS = 1e-4
_STD_NORMAL = NormalDist()
_U53 = 1.0 / (1 << 53)


# ------------------------------------------------------------------ events


@dataclass(order=True)
class Event:
    """Pops in (at, prio, seq) order; timers use prio 1 so that every message
    arriving on the same tick is handled before a deadline fires."""

    at: int
    prio: int
    seq: int
    kind: str = field(compare=False)
    data: Any = field(compare=False, default=None)


@dataclass
class SimClock:
    now: int = 0
    tick_seconds: float = DEFAULT_TICK_SECONDS

    def advance(self, t: int) -> None:
        if t < self.now:
            raise RuntimeError(f"clock would move backwards: {t} < {self.now}")
        self.now = t

    def seconds(self, ticks: int | float) -> float:
        return ticks * self.tick_seconds

    def ticks(self, seconds: float) -> int:
        return max(1, round(seconds / self.tick_seconds))


class EventQueue:
    """Min-heap of events popped in (at, prio, seq) order."""

    def __init__(self, clock: SimClock | None = None):
        self.clock = clock or SimClock()
        self._heap: list[Event] = []
        self._seq = itertools.count()

    def push(self, at: int, kind: str, data: Any = None, prio: int = 0) -> Event:
        if at < self.clock.now:
            raise RuntimeError(f"event scheduled in the past ({at} < {self.clock.now})")
        ev = Event(at, prio, next(self._seq), kind, data)
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> Event:
        ev = heapq.heappop(self._heap)
        self.clock.advance(ev.at)
        return ev

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)


# ------------------------------------------------------------- randomness


def _key_bytes(seed: int, key: tuple) -> bytes:
    return repr((seed,) + key).encode()


class KeyedDraw:
    """A single keyed draw point exposing a ``random.Random``-like surface."""

    __slots__ = ("_u", "_z")

    def __init__(self, u: float, z: float):
        self._u = u
        self._z = z

    def random(self) -> float:
        return self._u

    def gauss(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        return mu + sigma * self._z


class KeyedRng:
    """Counter-style randomness: every draw is a hash of (seed, key), so the
    outcome of a given message or node decision does not depend on how many
    other draws happened before it. This is what makes paired-seed
    comparisons across modes line up exactly."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def uniform(self, *key: Hashable) -> float:
        h = hashlib.blake2b(_key_bytes(self.seed, key), digest_size=8).digest()
        return (struct.unpack(">Q", h)[0] >> 11) * _U53

    def normal(self, *key: Hashable) -> float:
        u = self.uniform(*key)
        return _STD_NORMAL.inv_cdf(min(max(u, 1e-300), 1.0 - 1e-16))

    def draw(self, *key: Hashable) -> KeyedDraw:
        u = self.uniform(*key)
        return KeyedDraw(u, _STD_NORMAL.inv_cdf(min(max(u, 1e-300), 1.0 - 1e-16)))

    def stream(self, *key: Hashable) -> random.Random:
        h = hashlib.blake2b(_key_bytes(self.seed, key), digest_size=16).digest()
        return random.Random(int.from_bytes(h, "big"))


def _draw_uniform(rng, key) -> float:
    if isinstance(rng, KeyedRng):
        return rng.uniform(*key)
    return rng.random()


# ---------------------------------------------------------------- delivery


class Medium:
    """Serialized shared channel, one per consensus instance: each
    transmission occupies one slot of ``slot`` ticks, broadcasts included.
    A phase with one downlink broadcast and m-1 uplinks therefore lasts
    exactly m slots."""

    def __init__(self, slot: int):
        if slot < 1:
            raise ValueError("slot must be at least one tick")
        self.slot = slot
        self._busy: dict[Hashable, int] = {}

    def reserve(self, channel: Hashable, now: int) -> int:
        start = max(now, self._busy.get(channel, now))
        end = start + self.slot
        self._busy[channel] = end
        return end

    def release(self, channel: Hashable) -> None:
        self._busy.pop(channel, None)


def deliver(message: Any, src: NodeId, dst: NodeId, p_l: float, rng, *, queue: EventQueue,
            at: int, key: tuple = (), kind: str = "deliver", jitter: int = 0) -> Event | None:
    """Schedule ``message`` for ``dst`` at tick ``at`` (+ jitter) with
    probability ``p_l``; otherwise drop it and return None."""
    if _draw_uniform(rng, ("loss",) + key + (src, dst)) >= p_l:
        return None
    extra = 0
    if jitter > 0:
        extra = int(_draw_uniform(rng, ("jitter",) + key + (src, dst)) * (jitter + 1))
    return queue.push(at + extra, kind, (message, src, dst))


# --------------------------------------------------------------- Byzantine


def behavior_active(profile: LlmProfile, activation: float, rng: KeyedRng, *key) -> str:
    """Behavior a node exhibits for one decision point, or "none".

    Nodes with several behaviors cycle through them by request index
    (``key[0]``)."""
    if not profile.byzantine:
        return "none"
    if activation < 1.0 and rng.uniform("byz", profile.node, *key) >= activation:
        return "none"
    idx = key[0] if key and isinstance(key[0], int) else 0
    return profile.byzantine[idx % len(profile.byzantine)]


def fake_response(original: bytes) -> bytes:
    return b"FAKE|" + digest(original)[:8].hex().encode() + b"|q=0.000000"


def byzantine_mutate(message: Any, behavior: str, rng=None,
                     resign: Callable[[Any], Any] | None = None) -> Any:
    """Apply one Byzantine behavior to an outgoing message.

    Returns the message unchanged when the behavior does not apply to its
    type, None for silence, otherwise an altered copy. ``resign`` re-signs
    a vote/confirm so the dishonest content carries a valid signature.
    """
    if behavior in ("none", None):
        return message
    if behavior == "silent":
        return None
    if behavior == "bad-vote" and hasattr(message, "value"):
        value = 0 if _is_confirm(message) else 1 - message.value
        altered = replace(message, value=value, signature=None)
        return resign(altered) if resign else altered
    if behavior == "invalid-proof" and hasattr(message, "aggregate_tag"):
        return replace(message, aggregate_tag=digest(b"forged" + message.aggregate_tag))
    if behavior == "fake-response" and hasattr(message, "response_digest"):
        # the claimed digest stays, the payload changes
        return replace(message, response=fake_response(message.response))
    return message


def _is_confirm(message: Any) -> bool:
    return hasattr(message, "proof_digest")


# ---------------------------------------------------------- mock responders


def sample_response_quality(profile: LlmProfile, rng) -> float:
    """Normal(quality_mean, quality_stddev) clamped to [0, 100]."""
    if profile.quality_stddev == 0:
        return float(profile.quality_mean)
    q = rng.gauss(profile.quality_mean, profile.quality_stddev)
    return min(100.0, max(0.0, q))


def encode_response(node: NodeId, request: int, attempt: int, quality: float) -> bytes:
    return f"R|node={node}|req={request}|att={attempt}|q={quality:.6f}".encode()


def response_quality(payload: bytes) -> float | None:
    """Quality score carried by a mock response, None if unparseable."""
    try:
        tail = payload.rsplit(b"|q=", 1)[1]
        return float(tail)
    except (IndexError, ValueError):
        return None
