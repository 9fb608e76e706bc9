"""Per-initiator voting weights built from response quality and trust."""
from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .core import NodeId

SUM_TOL = 1e-9
WEIGHT_FLOOR = 1e-12


class WeightError(ValueError):
    pass


class DegenerateVariance(WeightError):
    pass


class NonPositiveScore(WeightError):
    pass


class AlphaBetaMismatch(WeightError):
    pass


class NodeSetMismatch(WeightError):
    pass


class RejectionOverflow(WeightError):
    pass


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass(frozen=True)
class ScoreMatrix:
    nodes: tuple[str, ...]
    scores: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if not self.scores:
            raise WeightError("score matrix needs at least one volunteer row")
        for row in self.scores:
            if len(row) != len(self.nodes):
                raise WeightError("ragged score row")
            if any(not 0.0 <= s <= 100.0 for s in row):
                raise WeightError("scores must lie in [0, 100]")

    def column_means(self) -> list[float]:
        k = len(self.scores)
        return [sum(row[j] for row in self.scores) / k for j in range(len(self.nodes))]

    @classmethod
    def from_csv(cls, path: str | Path, delimiter: str | None = None) -> "ScoreMatrix":
        text = Path(path).read_text()
        if delimiter is None:
            delimiter = csv.Sniffer().sniff(text.splitlines()[0], delimiters=",;\t").delimiter
        rows = list(csv.reader(text.splitlines(), delimiter=delimiter))
        rows = [r for r in rows if any(c.strip() for c in r)]
        header = [c.strip() for c in rows[0]]
        body = rows[1:]
        try:
            scores = tuple(tuple(float(c) for c in r) for r in body)
        except ValueError as exc:
            raise WeightError(f"{path}: non-numeric score ({exc})") from None
        return cls(tuple(header), scores)


def standardize_scores(means: Sequence[float], ddof: int = 0) -> list[float]:
    """Column means -> z-scores -> standard normal CDF.

    ``ddof=0`` uses the population standard deviation of the means.
    """
    if isinstance(means, ScoreMatrix):
        means = means.column_means()
    n = len(means)
    if n < 2:
        raise DegenerateVariance("need at least two nodes")
    mean = sum(means) / n
    var = sum((m - mean) ** 2 for m in means) / (n - ddof)
    if var <= 0.0:
        raise DegenerateVariance("all column means are equal")
    sd = math.sqrt(var)
    return [normal_cdf((m - mean) / sd) for m in means]


@dataclass(frozen=True)
class QualityWeights:
    a: dict[NodeId, float]


@dataclass(frozen=True)
class TrustWeights:
    b: dict[NodeId, float]


@dataclass(frozen=True)
class CompositeWeights:
    w: dict[NodeId, float]
    alpha: float
    beta: float
    a: dict[NodeId, float] = field(default_factory=dict)
    b: dict[NodeId, float] = field(default_factory=dict)

    def __getitem__(self, node: NodeId) -> float:
        return self.w[node]

    def restricted(self, nodes: Sequence[NodeId]) -> dict[NodeId, float]:
        """Weights over a committee, renormalized to sum 1."""
        total = sum(self.w[j] for j in nodes)
        return {j: self.w[j] / total for j in nodes}


def _normalize(values: Mapping[NodeId, float]) -> dict[NodeId, float]:
    for j, v in values.items():
        if not v > 0.0:
            raise NonPositiveScore(f"node {j}: non-positive score {v}")
    total = math.fsum(values.values())
    return {j: v / total for j, v in values.items()}


def quality_weights(q: Mapping[NodeId, float]) -> QualityWeights:
    return QualityWeights(_normalize(q))


def trust_weights(t: Mapping[NodeId, float]) -> TrustWeights:
    return TrustWeights(_normalize(t))


def composite_weights(a: QualityWeights, b: TrustWeights, alpha: float,
                      beta: float) -> CompositeWeights:
    if abs(alpha + beta - 1.0) > SUM_TOL or alpha < 0 or beta < 0:
        raise AlphaBetaMismatch(f"alpha+beta must equal 1 (got {alpha}+{beta})")
    if set(a.a) != set(b.b):
        raise NodeSetMismatch("quality and trust weights cover different nodes")
    w = {j: alpha * a.a[j] + beta * b.b[j] for j in sorted(a.a)}
    return CompositeWeights(w, alpha, beta, dict(a.a), dict(b.b))


def sample_truncated_normal(n: int, mean: float, variance: float, seed: int | random.Random,
                            max_redraws: int = 10_000) -> list[float]:
    """Raw per-node draws from N(mean, variance), redrawn until inside (0, 1)."""
    if variance <= 0:
        raise WeightError("variance must be positive")
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    sd = math.sqrt(variance)
    raw = []
    for _ in range(n):
        for _ in range(max_redraws):
            x = rng.gauss(mean, sd)
            if 0.0 < x < 1.0:
                raw.append(x)
                break
        else:
            raise RejectionOverflow(f"no draw in (0,1) after {max_redraws} tries "
                                    f"for N({mean}, {variance})")
    return raw


def sample_trust_weights(n: int, mean: float, variance: float, seed: int | random.Random,
                         max_redraws: int = 10_000) -> TrustWeights:
    """Truncated-normal trust draws on (0, 1), renormalized to sum 1."""
    raw = sample_truncated_normal(n, mean, variance, seed, max_redraws)
    return trust_weights(dict(enumerate(raw)))


@dataclass(frozen=True)
class RecalibrationParams:
    penalty: float = 0.5
    reward: float = 1.02
    absent: float = 1.0
    smoothing: float = 0.2


@dataclass(frozen=True)
class RoundEvidence:
    """What an initiator observed about one peer in the last round.

    ``quality_outcome`` is a win indicator in [0, 1]; ``None`` means no
    comparison was possible (the peer did not answer).
    """

    violation: bool = False
    participated: bool = True
    quality_outcome: float | None = None


def _renormalize_floor(values: dict[NodeId, float]) -> dict[NodeId, float]:
    total = math.fsum(values.values())
    out = {j: max(v / total, WEIGHT_FLOOR) for j, v in values.items()}
    total = math.fsum(out.values())
    return {j: v / total for j, v in out.items()}


def recalibrate(prev: CompositeWeights, evidence: Mapping[NodeId, RoundEvidence],
                params: RecalibrationParams = RecalibrationParams()) -> CompositeWeights:
    """One round of trust penalty/reward and quality smoothing, then alpha/beta recombination.

    Quality moves by ``a_j <- a_j * ((1 - s) + s * o_j / mean(o))`` so identical
    outcomes leave the vector unchanged.
    """
    if set(evidence) != set(prev.w):
        raise NodeSetMismatch("evidence must cover every peer")
    a = dict(prev.a) if prev.a else dict(prev.w)
    b = dict(prev.b) if prev.b else dict(prev.w)

    for j, ev in evidence.items():
        if ev.violation:
            b[j] *= params.penalty
        elif ev.participated:
            b[j] *= params.reward
        else:
            b[j] *= params.absent

    outcomes = {j: ev.quality_outcome for j, ev in evidence.items()
                if ev.quality_outcome is not None}
    if outcomes:
        mean_o = sum(outcomes.values()) / len(outcomes)
        if mean_o > 0:
            s = params.smoothing
            for j, o in outcomes.items():
                a[j] *= (1.0 - s) + s * o / mean_o

    a = _renormalize_floor(a)
    b = _renormalize_floor(b)
    return composite_weights(QualityWeights(a), TrustWeights(b), prev.alpha, prev.beta)


def uniform_weights(nodes: Sequence[NodeId], alpha: float = 0.5) -> CompositeWeights:
    u = {j: 1.0 / len(nodes) for j in nodes}
    return composite_weights(QualityWeights(u), TrustWeights(dict(u)), alpha, 1.0 - alpha)
