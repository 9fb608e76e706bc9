import itertools

import numpy as np
import pytest

from wbft.hsc import (FeatureVector, HscParams, choose_k, cluster, feature_vectors,
                      normalize_latency, node_scores, run_hsc, select_ccns, wcss_curve)


def planted(n_per, centers, spread, seed):
    rng = np.random.default_rng(seed)
    vec = {}
    for c, (x, y) in enumerate(centers):
        for i in range(n_per):
            j = c * n_per + i
            vec[j] = FeatureVector(float(x + rng.normal(0, spread)), float(y + rng.normal(0, spread)))
    return vec


def test_feature_vector_arithmetic():
    v = feature_vectors({0: 0.8, 1: 0.3, 2: 0.5}, {0: 2.0, 1: 10.0, 2: 4.0}, 0.5)
    assert v[0].as_tuple() == pytest.approx((0.4, 0.0))
    assert v[2].as_tuple() == pytest.approx((0.25, 0.5 * 0.25))


def test_feature_vector_omega_one_limit():
    # omega just below 1: latency component vanishes
    v = feature_vectors({0: 0.8, 1: 0.8}, {0: 1.0, 1: 9.0}, 1 - 1e-12)
    assert v[0].as_tuple()[0] == pytest.approx(v[1].as_tuple()[0])
    assert abs(v[1].latency_component) < 1e-11


def test_equal_latencies_normalize_to_half():
    assert normalize_latency({0: 3.0, 1: 3.0}) == {0: 0.5, 1: 0.5}


def test_identical_nodes_same_cluster():
    trust = {0: 0.5, 1: 0.5, 2: 0.9, 3: 0.1}
    lat = {0: 1.0, 1: 1.0, 2: 5.0, 3: 9.0}
    c = run_hsc(trust, lat, HscParams(k_max=3))
    assert c.assignment[0] == c.assignment[1]


def test_choose_k_two_clouds():
    vec = planted(5, [(0.1, 0.1), (0.45, 0.45)], 0.005, 0)
    assert choose_k(vec, HscParams(k_max=5)) == 2


def test_choose_k_identical_points():
    vec = {j: FeatureVector(0.2, 0.2) for j in range(8)}
    assert choose_k(vec, HscParams(k_max=5)) == 1


def test_choose_k_three_clusters_matches_brute_force_elbow():
    vec = planted(10, [(0.05, 0.05), (0.45, 0.1), (0.2, 0.45)], 0.01, 1)
    params = HscParams(k_max=6)
    k = choose_k(vec, params)
    assert k == 3
    # independent brute force: exhaustive best WCSS over every partition is out of
    # reach at n=30, so compare against many random-restart Lloyd runs instead
    x = np.array([vec[j].as_tuple() for j in sorted(vec)])
    best = []
    for kk in range(1, 8):
        runs = []
        for r in range(30):
            rng = np.random.default_rng(r)
            c = x[rng.choice(len(x), kk, replace=False)]
            for _ in range(100):
                lab = ((x[:, None] - c[None]) ** 2).sum(2).argmin(1)
                c = np.array([x[lab == i].mean(0) if np.any(lab == i) else c[i] for i in range(kk)])
            runs.append(((x - c[lab]) ** 2).sum())
        best.append(min(runs))
    lam = 0.01 * best[0] / 6
    j = [w + lam * (i + 1) for i, w in enumerate(best)]
    d2 = [j[i - 1] - 2 * j[i] + j[i + 1] for i in range(1, 6)]
    assert 2 + int(np.argmax(d2)) == 3


def test_gamma_zero_is_plain_mean():
    vec = planted(5, [(0.1, 0.1), (0.4, 0.4)], 0.02, 2)
    trust = {j: 0.1 + 0.08 * j for j in vec}
    lat = {j: 1.0 + (j % 3) for j in vec}
    c = cluster(vec, trust, lat, HscParams(gamma=0.0), 2, seed=0)
    for k in range(2):
        m = c.members(k)
        mean = np.mean([vec[j].as_tuple() for j in m], axis=0)
        assert c.centroids[k].as_tuple() == pytest.approx(tuple(mean))


def test_k_equals_n_every_node_its_own_ccn():
    trust = {j: 0.1 * (j + 1) for j in range(6)}
    lat = {j: 1.0 + j for j in range(6)}
    c = run_hsc(trust, lat, HscParams(k_max=6), k=6)
    assert sorted(c.ccns) == list(range(6))


def test_weighted_centroid_shift():
    trust = {j: (0.9 if j in (0, 5) else 0.2) for j in range(10)}
    lat = {j: (1.0 if j in (0, 5) else 5.0 + j) for j in range(10)}
    vec = {}
    for j in range(10):
        base = (0.1, 0.1) if j < 5 else (0.4, 0.4)
        vec[j] = FeatureVector(base[0] + 0.01 * (j % 5), base[1] + 0.005 * (j % 5))
    c = cluster(vec, trust, lat, HscParams(gamma=1.0), 2, seed=0)
    lhat = normalize_latency(lat)
    s = node_scores(trust, lhat, 1.0)
    for k in range(2):
        m = c.members(k)
        w = np.array([s[j] for j in m])
        x = np.array([vec[j].as_tuple() for j in m])
        expect = (w[:, None] * x).sum(0) / w.sum()
        assert c.centroids[k].as_tuple() == pytest.approx(tuple(expect))
        plain = x.mean(0)
        star = [j for j in m if j in (0, 5)][0]
        # weighted centroid sits closer to the high-T/low-L member
        d_w = np.linalg.norm(np.array(c.centroids[k].as_tuple()) - x[m.index(star)])
        assert d_w < np.linalg.norm(plain - x[m.index(star)])


def test_select_ccns_dominance_and_tie():
    trust = {0: 0.9, 1: 0.5}
    lat = {0: 1.0, 1: 5.0, 2: 9.0}
    trust[2] = 0.1
    assert select_ccns({0: 0, 1: 0, 2: 1}, 2, trust, lat)[0] == 0
    trust = {0: 0.5, 1: 0.5, 2: 0.5}
    lat = {0: 2.0, 1: 2.0, 2: 2.0}
    assert select_ccns({0: 0, 1: 0, 2: 0}, 1, trust, lat) == [0]


def test_select_ccns_matches_exhaustive_argmax():
    rng = np.random.default_rng(5)
    trust = {j: float(rng.uniform(0.01, 0.99)) for j in range(20)}
    lat = {j: float(rng.uniform(1e-3, 5e-3)) for j in range(20)}
    c = run_hsc(trust, lat, HscParams(k_max=5), seed=3)
    lhat = normalize_latency(lat)
    for k in range(c.k):
        m = c.members(k)
        best = max(m, key=lambda j: (trust[j] / max(lhat[j], 1e-6), trust[j], -lhat[j], -j))
        assert c.ccns[k] == best


def test_partition_and_determinism():
    rng = np.random.default_rng(8)
    trust = {j: float(rng.uniform(0.01, 0.99)) for j in range(15)}
    lat = {j: float(rng.uniform(1e-3, 5e-3)) for j in range(15)}
    a = run_hsc(trust, lat, HscParams(), seed=11)
    b = run_hsc(trust, lat, HscParams(), seed=11)
    assert a == b
    assert sorted(itertools.chain.from_iterable(a.members(k) for k in range(a.k))) == list(range(15))
    for k, ccn in enumerate(a.ccns):
        assert a.assignment[ccn] == k
        assert a.members(k)


def test_wcss_curve_nonincreasing_for_plain_kmeans():
    vec = planted(6, [(0.1, 0.1), (0.4, 0.2), (0.2, 0.45)], 0.03, 4)
    curve = wcss_curve(vec, HscParams(gamma=0.0, k_max=6, n_init=8), seed=0)
    assert all(b <= a + 1e-12 for a, b in zip(curve, curve[1:]))


def test_params_validation():
    with pytest.raises(ValueError):
        HscParams(omega=1.0)
    with pytest.raises(ValueError):
        HscParams(gamma=-1)
