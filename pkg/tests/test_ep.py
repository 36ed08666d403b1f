import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from preroute import ep
from preroute.comm import synth_trace


def brute_force_groups(centroids):
    """Best objective over every balanced expert-to-partition map, by enumeration."""
    n_p, E = centroids.shape
    base, extra = divmod(E, n_p)
    maps = np.array(list(itertools.product(range(n_p), repeat=E)))
    sizes = np.stack([(maps == p).sum(axis=1) for p in range(n_p)], axis=1)
    ok = np.all((sizes == base) | (sizes == base + 1), axis=1) & ((sizes == base + 1).sum(axis=1) == extra)
    return max(math.fsum(float(centroids[p, e]) for e, p in enumerate(m)) for m in maps[ok])


def min_cost_partition(seq, owner, n_p):
    """argmin_p sum_t |N(t) minus p| by direct enumeration of every partition."""
    costs = []
    for p in range(n_p):
        cost = 0
        for tok in seq:
            nodes = {int(owner[e]) for e in tok}
            cost += len(nodes - {p})
        costs.append(cost)
    return costs


# -- affinity vectors ------------------------------------------------------------------
def test_affinity_examples():
    np.testing.assert_allclose(ep.affinity_vectors(np.array([[[0], [1]]]), 4), [[0.5, 0.5, 0, 0]])
    np.testing.assert_allclose(ep.affinity_vectors(np.tile([0, 1], (1, 5, 1)), 4), [[1, 1, 0, 0]])


def test_affinity_matches_naive_count():
    rng = np.random.default_rng(0)
    idx = np.sort(np.stack([[rng.choice(6, 2, replace=False) for _ in range(7)] for _ in range(5)]), axis=2)
    phi = ep.affinity_vectors(idx, 6)
    for s in range(5):
        for e in range(6):
            assert phi[s, e] == sum(e in tok for tok in idx[s].tolist()) / 7
    np.testing.assert_allclose(phi.sum(axis=1), 2.0)


# -- entropy filter -------------------------------------------------------------------------
def test_entropy_filter_examples():
    uniform = np.full((1, 128), 2 / 128)
    assert ep.affinity_entropy(uniform)[0] == pytest.approx(7.0)
    assert ep.default_entropy_threshold(128) == 6.85
    kept, dropped = ep.entropy_filter(uniform)
    assert kept.size == 0 and dropped.tolist() == [0]
    one_hot = np.zeros((1, 128))
    one_hot[0, 5] = 2.0
    assert ep.entropy_filter(one_hot)[0].tolist() == [0]
    assert ep.default_entropy_threshold(16) == pytest.approx(4 - 0.15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_entropy_filter_scale_invariant(seed, c):
    phi = np.random.default_rng(seed).random((20, 8)) ** 4
    a = ep.entropy_filter(phi, 2.5)
    b = ep.entropy_filter(c * phi, 2.5)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


# -- clustering ------------------------------------------------------------------------------
def test_separated_groups_recovered_exactly():
    pts = np.repeat(np.eye(4) * 5, 30, axis=0)
    res = ep.cluster(pts, 4, init_clusters=4, seed=0)
    assert res.wcss(pts) == 0.0
    for g in range(4):
        assert len(set(res.labels[g * 30 : (g + 1) * 30])) == 1
    assert len(set(res.labels)) == 4


def test_as_many_points_as_partitions():
    pts = np.random.default_rng(0).random((3, 5))
    res = ep.cluster(pts, 3)
    assert sorted(res.labels.tolist()) == [0, 1, 2]
    np.testing.assert_allclose(res.centroids[res.labels], pts)


def test_too_few_points_rejected():
    with pytest.raises(ValueError):
        ep.cluster(np.zeros((2, 3)), 3)


def test_wcss_beats_random_assignment_on_blobs():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        centers = rng.random((4, 6)) * 4
        pts = np.concatenate([c + 0.3 * rng.standard_normal((60, 6)) for c in centers])
        res = ep.cluster(pts, 4, init_clusters=30, seed=seed)
        rand = rng.integers(0, 4, size=len(pts))
        rand_cent = np.stack([pts[rand == c].mean(axis=0) for c in range(4)])
        assert res.wcss(pts) <= float(((pts - rand_cent[rand]) ** 2).sum())


def test_average_linkage_merges_closest_by_mass_weighting():
    cents = np.array([[0.0], [1.0], [10.0], [12.0]])
    owner = ep._average_linkage(cents, np.ones(4), 2)
    assert owner[0] == owner[1] and owner[2] == owner[3] and owner[0] != owner[2]


def test_clustering_is_deterministic():
    pts = np.random.default_rng(3).random((300, 8))
    a, b = ep.cluster(pts, 4, seed=9), ep.cluster(pts, 4, seed=9)
    np.testing.assert_array_equal(a.labels, b.labels)


# -- expert assignment ---------------------------------------------------------------------
def test_disjoint_preferences_are_honoured():
    cent = np.array([[1, 1, 1, 0, 0, 0], [0, 0, 0, 1, 1, 1]], dtype=float)
    assert ep.assign_experts(cent) == [[0, 1, 2], [3, 4, 5]]


def test_six_experts_two_partitions_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cent = rng.random((2, 6))
        groups = ep.assign_experts(cent)
        assert [len(g) for g in groups] == [3, 3]
        assert ep.group_affinity(groups, cent) == brute_force_groups(cent)


def test_uniform_affinities_any_balanced_grouping():
    cent = np.ones((3, 7))
    groups = ep.assign_experts(cent)
    assert sorted(len(g) for g in groups) == [2, 2, 3]
    assert ep.group_affinity(groups, cent) == brute_force_groups(cent) == 7.0


def test_assignment_partitions_experts():
    rng = np.random.default_rng(1)
    for E, n_p in [(8, 3), (16, 4), (9, 2), (5, 5)]:
        groups = ep.assign_experts(rng.random((n_p, E)))
        assert sorted(e for g in groups for e in g) == list(range(E))
        assert max(map(len, groups)) - min(map(len, groups)) <= 1


def test_more_partitions_than_experts_rejected():
    with pytest.raises(ValueError):
        ep.assign_experts(np.ones((5, 4)))


# -- placement -------------------------------------------------------------------------------
def test_place_sample_examples():
    owner = np.array([0, 0, 1, 1])
    local = np.array([[0, 1]] * 5)
    assert ep.place_sample(local, owner, 2) == 0
    split = np.array([[2, 3], [2, 3], [2, 3], [0, 1]])
    assert ep.place_sample(split, owner, 2) == 1


def test_place_sample_attains_enumerated_minimum():
    rng = np.random.default_rng(4)
    owner = np.repeat(np.arange(4), 4)
    for _ in range(50):
        seq = np.sort(np.stack([rng.choice(16, 2, replace=False) for _ in range(64)]), axis=1)
        costs = min_cost_partition(seq, owner, 4)
        assert costs[ep.place_sample(seq, owner, 4)] == min(costs)


def test_cost_identity():
    rng = np.random.default_rng(5)
    owner = rng.permutation(np.repeat(np.arange(3), 3))
    seq = np.sort(np.stack([rng.choice(9, 3, replace=False) for _ in range(20)]), axis=1)
    hit = ep.token_partitions(seq, owner, 3)
    for p in range(3):
        assert min_cost_partition(seq, owner, 3)[p] == hit.sum() - hit[:, p].sum()


# -- plans ---------------------------------------------------------------------------------
def test_plan_recovers_domain_locality():
    cache, domains = synth_trace(4, 1.0, 200, 16, 16, 2, seed=0)
    plan = ep.build_plan(cache.per_sequence_indices(), 16, 4, seed=0)
    owner = plan.owner()
    for s, p in enumerate(plan.assignment):
        assert set(owner[cache.sequence_decisions(s).ravel()]) == {p}
    # sequences of the same domain share a partition
    for d in range(4):
        assert len({plan.assignment[s] for s in np.flatnonzero(domains == d)}) == 1


def test_plan_bytes_are_deterministic(tmp_path):
    cache, _ = synth_trace(4, 0.7, 150, 8, 16, 2, seed=1)
    a = ep.build_plan(cache.per_sequence_indices(), 16, 4, seed=3).to_json()
    b = ep.build_plan(cache.per_sequence_indices(), 16, 4, seed=3).to_json()
    assert a == b
    (tmp_path / "p.json").write_text(a)
    assert ep.PlacementPlan.load(tmp_path / "p.json").to_json() == a


def test_filter_bypass_when_everything_is_discarded():
    cache, _ = synth_trace(4, 0.0, 40, 32, 16, 2, seed=2)
    plan = ep.build_plan(cache.per_sequence_indices(), 16, 4, threshold=0.0)
    assert plan.filter_bypassed and plan.retained == []
    assert len(plan.assignment) == 40


def test_node_granularity_spreads_experts_over_gpus():
    cache, _ = synth_trace(2, 1.0, 50, 8, 16, 2, seed=0)
    plan = ep.build_plan(cache.per_sequence_indices(), 16, 2, granularity="node", gpus_per_node=4)
    assert len(plan.gpu_layout) == 2
    for group, gpus in zip(plan.expert_groups, plan.gpu_layout):
        assert len(gpus) == 4 and sorted(e for g in gpus for e in g) == group


def test_bad_plan_json_rejected():
    with pytest.raises(ValueError):
        ep.PlacementPlan.from_json('{"format": "other"}')
