import math
import random

import mpmath
import pytest

from wbft.config import load_scores
from wbft.weights import (AlphaBetaMismatch, DegenerateVariance, NodeSetMismatch,
                          NonPositiveScore, QualityWeights, RecalibrationParams, RoundEvidence,
                          ScoreMatrix, TrustWeights, composite_weights, quality_weights,
                          recalibrate, sample_truncated_normal, sample_trust_weights,
                          standardize_scores, trust_weights, uniform_weights)

PRINTED_AVG = [78.6, 79.7, 84.7, 78.6, 80.8, 77.6, 88.7, 80.8, 82.3, 83.3]
PRINTED_STD = [0.19, 0.31, 0.83, 0.19, 0.42, 0.13, 0.98, 0.42, 0.59, 0.70]
PRINTED_A = [0.04, 0.065, 0.175, 0.04, 0.088, 0.027, 0.206, 0.088, 0.124, 0.147]


def test_shipped_scores_shape_and_averages():
    m = load_scores("builtin:volunteer-scores")
    assert len(m.nodes) == 10 and len(m.scores) == 15
    # the printed averages are the column means to one decimal (some truncated)
    for got, printed in zip(m.column_means(), PRINTED_AVG):
        assert abs(got - printed) < 0.1


def test_qwen_standardized_against_high_precision_cdf():
    mean = sum(PRINTED_AVG) / 10
    sd = math.sqrt(sum((x - mean) ** 2 for x in PRINTED_AVG) / 10)
    z = (88.7 - mean) / sd
    assert z == pytest.approx(2.25, abs=0.01)
    oracle = float(mpmath.ncdf(mpmath.mpf(z)))
    assert standardize_scores(PRINTED_AVG)[6] == pytest.approx(oracle, abs=1e-14)
    assert oracle == pytest.approx(0.988, abs=1e-3)


def test_quality_weights_match_table_within_tolerance():
    m = load_scores("builtin:volunteer-scores")
    a = quality_weights(dict(enumerate(standardize_scores(m)))).a
    for j, want in enumerate(PRINTED_A):
        assert abs(a[j] - want) <= 0.005


def test_printed_weights_are_the_printed_standardization_renormalized():
    total = sum(PRINTED_STD)
    for s, w in zip(PRINTED_STD, PRINTED_A):
        assert abs(s / total - w) < 1e-3


def test_standardize_symmetric_pair():
    s = standardize_scores([70.0, 72.0])
    assert s[0] + s[1] == pytest.approx(1.0)


def test_standardize_degenerate():
    with pytest.raises(DegenerateVariance):
        standardize_scores([80.0, 80.0, 80.0])


def test_standardize_shift_invariant():
    base = standardize_scores(PRINTED_AVG)
    shifted = standardize_scores([x + 7.5 for x in PRINTED_AVG])
    assert shifted == pytest.approx(base, abs=1e-12)


def test_score_matrix_rejects_out_of_range():
    with pytest.raises(ValueError):
        ScoreMatrix(("a", "b"), ((50.0, 101.0),))


def test_score_file_parse(tmp_path):
    p = tmp_path / "s.tsv"
    p.write_text("a\tb\tc\n80\t70\t90\n")
    m = ScoreMatrix.from_csv(p)
    assert m.nodes == ("a", "b", "c") and m.column_means() == [80.0, 70.0, 90.0]


def test_quality_weights_simple():
    assert list(quality_weights({0: 1, 1: 2, 2: 3}).a.values()) == pytest.approx([1/6, 1/3, 1/2])
    assert set(quality_weights({j: 5.0 for j in range(4)}).a.values()) == {0.25}
    with pytest.raises(NonPositiveScore):
        quality_weights({0: 0.0, 1: 1.0})


def test_trust_weights_simple():
    assert trust_weights({j: 0.1 for j in range(10)}).b[3] == pytest.approx(0.1)
    assert list(trust_weights({0: 0.1, 1: 0.3}).b.values()) == pytest.approx([0.25, 0.75])


def test_composite_weights_arithmetic_and_boundaries():
    a = QualityWeights({0: 0.2, 1: 0.8})
    b = TrustWeights({0: 0.6, 1: 0.4})
    assert list(composite_weights(a, b, 0.5, 0.5).w.values()) == pytest.approx([0.4, 0.6])
    assert composite_weights(a, b, 1.0, 0.0).w == a.a
    assert composite_weights(a, b, 0.0, 1.0).w == b.b
    with pytest.raises(AlphaBetaMismatch):
        composite_weights(a, b, 0.7, 0.5)
    with pytest.raises(NodeSetMismatch):
        composite_weights(a, TrustWeights({0: 0.5, 2: 0.5}), 0.5, 0.5)


def test_sample_trust_weights_postconditions():
    tw = sample_trust_weights(10, 0.1, 0.6, seed=42)
    assert all(0 < v < 1 for v in tw.b.values())
    assert sum(tw.b.values()) == pytest.approx(1.0, abs=1e-12)
    assert sample_trust_weights(10, 0.1, 0.6, seed=42) == tw


def test_sample_trust_weights_small_variance_near_uniform():
    tw = sample_trust_weights(10, 0.1, 1e-10, seed=1)
    assert all(abs(v - 0.1) < 1e-4 for v in tw.b.values())


def test_truncation_shrinks_variance():
    raw = sample_truncated_normal(100_000, 0.1, 0.6, random.Random(3))
    mean = sum(raw) / len(raw)
    var = sum((x - mean) ** 2 for x in raw) / len(raw)
    assert var < 0.6 and all(0 < x < 1 for x in raw)


def test_trust_weights_preserve_rank():
    raw = sample_truncated_normal(10, 0.1, 0.6, random.Random(9))
    b = trust_weights(dict(enumerate(raw))).b
    assert sorted(range(10), key=lambda j: raw[j]) == sorted(range(10), key=lambda j: b[j])


def test_recalibrate_neutral_is_fixed_point():
    w = composite_weights(QualityWeights({0: 0.3, 1: 0.7}), TrustWeights({0: 0.5, 1: 0.5}),
                          0.5, 0.5)
    ev = {j: RoundEvidence(False, True, 1.0) for j in (0, 1)}
    out = recalibrate(w, ev)
    assert out.w == pytest.approx(w.w, abs=1e-12)


def test_recalibrate_penalty_monotone():
    w = uniform_weights(range(5))
    ev = {j: RoundEvidence(j == 2, True, None) for j in range(5)}
    out = recalibrate(w, ev)
    assert out.b[2] < w.b[2]
    assert all(out.b[j] >= w.b[j] for j in range(5) if j != 2)


def test_recalibrate_repeated_violations_bound():
    rho = 0.5
    w = uniform_weights(range(5))
    k = 6
    for _ in range(k):
        ev = {j: RoundEvidence(j == 0, j != 0, None) for j in range(5)}
        w = recalibrate(w, ev, RecalibrationParams(penalty=rho))
    # unnormalized trust evolves as 0.2*rho^k for the violator, 0.2*1.02^k for the rest
    bad, good = 0.2 * rho ** k, 0.2 * 1.02 ** k
    assert w.b[0] == pytest.approx(bad / (bad + 4 * good), rel=1e-9)
    assert w.b[0] <= rho ** k * 0.2 / (bad + 4 * good) * (1 + 1e-9)
    assert 0 < w.b[0] < 1
