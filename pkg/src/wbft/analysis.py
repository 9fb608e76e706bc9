"""Closed-form security, liveness and latency models, Monte Carlo oracles
and metric aggregation over simulation records."""
from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .core import QUORUM_THRESHOLD, NodeId
from .weights import CompositeWeights, normal_cdf

MC_CHUNK = 10_000
ABSENT = None


class EmptyStream(ValueError):
    pass


@dataclass(frozen=True)
class SecurityModelParams:
    n: int
    mu: float
    sigma2: float
    p: float

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not 0.0 < self.p < 1.0 and self.p not in (0.0, 1.0):
            raise ValueError("p must lie in [0, 1]")
        if not self.sigma2 > 0.0:
            raise ValueError("sigma2 must be positive")
        if abs(self.mu - 1.0 / self.n) > 1e-12:
            raise ValueError(f"mu must equal 1/n = {1.0 / self.n}")

    @classmethod
    def of(cls, n: int, sigma2: float, p: float) -> "SecurityModelParams":
        return cls(n, 1.0 / n, sigma2, p)


def event_y(weights: CompositeWeights | Mapping[NodeId, float],
            votes: Mapping[NodeId, int]) -> float:
    """Affirmative weight sum_j W_j * v_j over the voting set."""
    w = weights.w if isinstance(weights, CompositeWeights) else weights
    missing = set(w) - set(votes)
    if missing:
        raise ValueError(f"votes missing for nodes {sorted(missing)}")
    return math.fsum(w[j] * (1 if votes[j] else 0) for j in w)


def security_argument(params: SecurityModelParams) -> float:
    n, s2, p = params.n, params.sigma2, params.p
    sd = math.sqrt(n * p * s2 + p * (1.0 - p) / n)
    return (QUORUM_THRESHOLD - p) / sd


def analytic_security(params: SecurityModelParams) -> float:
    """1 - Phi((2/3 - p) / sqrt(n p sigma^2 + p (1 - p) / n)).

    Phi comes from erfc, which holds double precision in both tails.
    """
    if params.p == 0.0:
        return 0.0
    return normal_cdf(-security_argument(params))


@dataclass(frozen=True)
class McEstimate:
    estimate: float
    stderr: float
    trials: int
    hits: int


def _mc_chunk(params: SecurityModelParams, rule: str, size: int, seed_seq) -> int:
    rng = np.random.default_rng(seed_seq)
    n, sd = params.n, math.sqrt(params.sigma2)
    w = rng.normal(params.mu, sd, size=(size, n))
    if rule == "truncated":
        bad = w <= 0.0
        while bad.any():
            w[bad] = rng.normal(params.mu, sd, size=int(bad.sum()))
            bad = w <= 0.0
        w /= w.sum(axis=1, keepdims=True)
    elif rule != "iid":
        raise ValueError(f"unknown weight-sampling rule {rule!r}")
    v = rng.random((size, n)) < params.p
    y = np.einsum("ij,ij->i", w, v)
    return int(np.count_nonzero(y > QUORUM_THRESHOLD))


def mc_security(params: SecurityModelParams, rule: str = "iid", trials: int = 100_000,
                seed: int = 0, workers: int = 1) -> McEstimate:
    """Frequency of Y > 2/3 under sampled weights and Bernoulli(p) votes.

    Trials run in fixed-size chunks, each seeded from the master seed and the
    chunk index, so the estimate does not depend on ``workers``.
    """
    if trials < 10_000:
        raise ValueError("mc_security needs at least 10^4 trials")
    sizes = [MC_CHUNK] * (trials // MC_CHUNK)
    if trials % MC_CHUNK:
        sizes.append(trials % MC_CHUNK)
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    jobs = list(zip(sizes, seqs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            hits = sum(ex.map(lambda a: _mc_chunk(params, rule, *a), jobs))
    else:
        hits = sum(_mc_chunk(params, rule, s, q) for s, q in jobs)
    est = hits / trials
    return McEstimate(est, math.sqrt(est * (1.0 - est) / trials), trials, hits)


def liveness_success(f: int, k: int) -> float:
    """1 - (f / (3f + 1))^k: some honest leader within k attempts."""
    if f < 0 or k < 1:
        raise ValueError("need f >= 0 and k >= 1")
    return 1.0 - (f / (3 * f + 1)) ** k


def expected_latency(participants: int, slot: float, q: float, backoff_base: float | None = None,
                     retry_max: int = 16) -> float:
    """Seconds per request: 2*m*T/q for the attempts plus the expected
    exponential backoff. Retry k (1-based) waits delta * 2^k and happens
    when the first k attempts all failed, so the wait term is
    sum over k = 1..retry_max of (1-q)^k * delta * 2^k.

    ``backoff_base`` defaults to one leader-follower round trip, 2T.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError("attempt success probability must lie in (0, 1]")
    if participants < 1:
        raise ValueError("need at least one participant")
    delta = 2.0 * slot if backoff_base is None else backoff_base
    base = 2.0 * participants * slot / q
    wait = math.fsum((1.0 - q) ** k * delta * 2.0 ** k for k in range(1, retry_max + 1))
    return base + wait


# ------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class MetricsRecord:
    mode: str
    scenario_id: str
    requests: int
    commits: int
    success_rate: float
    mean_latency: float | None
    throughput_tps: float
    mean_attempts: float
    messages_per_round: float


METRICS_COLUMNS = ("scenario_id", "mode", "requests", "commits", "success_rate", "mean_latency",
                   "throughput_tps", "mean_attempts", "messages_per_round")


def _field(r, name):
    return r[name] if isinstance(r, Mapping) else getattr(r, name)


def _truthy(v) -> bool:
    return v in (True, 1, "1", "True", "true")


def aggregate(records: Iterable, makespan_seconds: Mapping[tuple, float],
              tick_seconds: float) -> list[MetricsRecord]:
    """One MetricsRecord per (mode, scenario_id).

    ``makespan_seconds`` maps (mode, scenario_id, seed) to the simulated
    makespan of that run; throughput pools commits and makespans over seeds.
    """
    groups: dict[tuple[str, str], list] = defaultdict(list)
    for r in records:
        groups[(str(_field(r, "mode")), str(_field(r, "scenario_id")))].append(r)
    if not groups:
        raise EmptyStream("no records to aggregate")
    out = []
    for (mode, sid) in sorted(groups, key=lambda g: (g[1], g[0])):
        rs = groups[(mode, sid)]
        ok = [r for r in rs if _truthy(_field(r, "success"))]
        seeds = sorted({int(_field(r, "seed")) for r in rs})
        span = math.fsum(makespan_seconds[(mode, sid, s)] for s in seeds)
        lat = (math.fsum(int(_field(r, "latency_ticks")) for r in ok) / len(ok) * tick_seconds
               if ok else ABSENT)
        out.append(MetricsRecord(
            mode, sid, len(rs), len(ok), len(ok) / len(rs), lat,
            len(ok) / span if span > 0 else 0.0,
            sum(int(_field(r, "attempts")) for r in rs) / len(rs),
            sum(int(_field(r, "messages")) for r in rs) / len(rs)))
    return out


def metrics_row(m: MetricsRecord) -> list:
    lat = "" if m.mean_latency is None else f"{m.mean_latency:.9g}"
    return [m.scenario_id, m.mode, m.requests, m.commits, f"{m.success_rate:.6f}", lat,
            f"{m.throughput_tps:.6f}", f"{m.mean_attempts:.6f}", f"{m.messages_per_round:.6f}"]


# ---------------------------------------------------------------- liveness


def liveness_config(f: int, requests: int, seed: int = 0) -> dict:
    """Scenario for the retry experiment: n = 3f+1 equal-quality nodes with
    uniform weights, f permanently silent, lossless links and a leader drawn
    uniformly at random for every attempt."""
    n = 3 * f + 1
    profiles = [{"name": f"n{j}", "quality_mean": 80.0, "quality_stddev": 0.0}
                for j in range(n)]
    return {
        "scenario_id": f"liveness-f{f}",
        "nodes": {"profiles": profiles, "byzantine": {"activation": 1.0}},
        "consensus": {"mode": "VaaP", "recalibrate": False, "retry_max": 32},
        "hsc": {"k_max": min(5, n)},
        "channel": {"target_pl": None, "link_success": 1.0, "tick_seconds": 1e-6},
        "workload": {"requests": requests, "entry": "random", "reroute": "random",
                     "replicate": False},
        "seeds": [seed],
    }


def liveness_experiment(f: int, requests: int, seed: int = 0, k_max: int = 5) -> list[float]:
    """Empirical P(committed within k attempts) for k = 1..k_max."""
    from .config import parse_config
    from .simulation import run_simulation

    data = liveness_config(f, requests, seed)
    for j in range(f):
        data["nodes"]["profiles"][j]["byzantine"] = ["silent"]
    cfg = parse_config(data)
    res = run_simulation(cfg, seed=seed, p_l=None)
    att = np.array([r.attempts if r.success else 10**9 for r in res.records])
    return [float(np.mean(att <= k)) for k in range(1, k_max + 1)]
