from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from preroute.folding import (
    coactivation_matrix,
    fold_grouter,
    fold_weights,
    greedy_merge,
    group_sizes,
    load_balance_groups,
    load_mapping,
    mapping_matrix,
    random_groups,
    save_mapping,
)
from preroute.grouter import SCORE_LAYER, Grouter, GrouterConfig, freeze, grouter_forward


def pair_count_oracle(indices, E):
    p = np.zeros((E, E), dtype=int)
    for row in indices:
        for a, b in combinations(sorted(set(int(x) for x in row)), 2):
            p[a, b] += 1
            p[b, a] += 1
    return p


def naive_fold(w, m):
    rows, n_src = w.shape
    n_tgt = m.shape[1]
    out = np.zeros((rows, n_tgt))
    for r in range(rows):
        for j in range(n_tgt):
            acc = 0.0
            for i in range(n_src):
                acc += w[r, i] * m[i, j]
            out[r, j] = acc
    return out


def greedy_oracle(P, sizes):
    """Independent restatement of the selection loop with explicit tie-breaking."""
    left = list(range(len(P)))
    groups = []
    for size in sizes:
        g = [left.pop(0)]
        while len(g) < size:
            best = max(left, key=lambda e: (sum(P[m][e] for m in g), -e))
            left.remove(best)
            g.append(best)
        groups.append(g)
    return groups


# -- co-activation ----------------------------------------------------------------
def test_coactivation_single_token():
    p = coactivation_matrix(np.array([[0, 1]]), 4)
    expected = np.zeros((4, 4), int)
    expected[0, 1] = expected[1, 0] = 1
    np.testing.assert_array_equal(p, expected)


def test_coactivation_top1_is_zero():
    assert not coactivation_matrix(np.array([[0], [2], [2]]), 3).any()


def test_coactivation_matches_pair_counting():
    rng = np.random.default_rng(0)
    idx = np.sort(np.stack([rng.choice(8, 3, replace=False) for _ in range(200)]), axis=1)
    np.testing.assert_array_equal(coactivation_matrix(idx, 8), pair_count_oracle(idx, 8))


# -- group sizes -------------------------------------------------------------------
@pytest.mark.parametrize("es, et, expected", [(128, 32, [4] * 32), (10, 4, [3, 3, 2, 2]), (5, 5, [1] * 5)])
def test_group_size_examples(es, et, expected):
    assert group_sizes(es, et) == expected


def test_group_size_arithmetic_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        et = int(rng.integers(1, 64))
        es = int(rng.integers(et, 256))
        sizes = group_sizes(es, et)
        base = es // et
        assert len(sizes) == et and sum(sizes) == es
        assert sizes.count(base + 1) == es % et
        assert sizes == sorted(sizes, reverse=True)


# -- greedy merge ----------------------------------------------------------------------
def test_greedy_block_diagonal():
    P = np.zeros((4, 4))
    P[0, 1] = P[1, 0] = P[2, 3] = P[3, 2] = 5
    assert greedy_merge(P, [2, 2]) == [[0, 1], [2, 3]]


def test_greedy_zero_affinity_is_contiguous():
    assert greedy_merge(np.zeros((6, 6)), [2, 2, 2]) == [[0, 1], [2, 3], [4, 5]]


def test_greedy_matches_independent_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        raw = rng.integers(0, 5, size=(6, 6))
        P = np.triu(raw, 1) + np.triu(raw, 1).T
        assert greedy_merge(P, [3, 3]) == greedy_oracle(P.tolist(), [3, 3])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n), st.integers(0, 2**31))))
def test_greedy_partitions_every_expert(args):
    n, et, seed = args
    raw = np.random.default_rng(seed).integers(0, 9, size=(n, n))
    sizes = group_sizes(n, et)
    groups = greedy_merge(raw + raw.T, sizes)
    assert sorted(e for g in groups for e in g) == list(range(n))
    assert [len(g) for g in groups] == sizes


def test_baseline_groupings_partition():
    sizes = group_sizes(10, 4)
    for groups in (random_groups(10, sizes, seed=3), load_balance_groups(np.arange(10.0), sizes)):
        assert sorted(e for g in groups for e in g) == list(range(10))
        assert sorted(len(g) for g in groups) == sorted(sizes)
    # the heaviest expert is paired with the lightest
    assert load_balance_groups(np.array([9.0, 1, 5, 2]), [2, 2]) == [[0, 1], [2, 3]]


# -- mapping and folding -------------------------------------------------------------------
def test_mapping_examples():
    np.testing.assert_array_equal(mapping_matrix([[0], [1], [2]]), np.eye(3, dtype=int))
    np.testing.assert_array_equal(mapping_matrix([[0, 1], [2]]), [[1, 0], [1, 0], [0, 1]])
    with pytest.raises(ValueError):
        mapping_matrix([[0, 1], [1, 2]])


def test_fold_two_into_one():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(fold_weights(w, np.array([[1], [1]])), [[3.0], [7.0]])


def test_fold_identity_is_bitwise():
    w = np.random.default_rng(0).standard_normal((5, 6))
    assert fold_weights(w, np.eye(6, dtype=int)).tobytes() == w.tobytes()


def test_fold_matches_naive_oracle_exactly():
    rng = np.random.default_rng(2)
    for _ in range(20):
        es = int(rng.integers(2, 40))
        et = int(rng.integers(1, es + 1))
        groups = random_groups(es, group_sizes(es, et), seed=int(rng.integers(1 << 30)))
        m = mapping_matrix(groups)
        w = rng.standard_normal((7, es))
        folded = fold_weights(w, m)
        np.testing.assert_array_equal(folded, naive_fold(w, m))
        assert np.all(m.sum(axis=1) == 1)


def test_folded_grouter_scores_are_group_sums():
    g = freeze(Grouter(GrouterConfig(num_experts=6, d_model=16, num_heads=2, ffn_hidden=32), seed=0))
    groups = [[0, 3], [1, 4], [2, 5]]
    f = fold_grouter(g, mapping_matrix(groups))
    assert f.frozen and f.config.num_experts == 3
    assert f.encoder_checksum() == g.encoder_checksum()
    toks = np.arange(10)
    src, dst = grouter_forward(g, toks), grouter_forward(f, toks)
    for j, grp in enumerate(groups):
        np.testing.assert_allclose(dst[:, j], src[:, grp].sum(axis=1), rtol=1e-12)
    assert g.params[SCORE_LAYER].shape == (16, 6)


def test_mapping_file_round_trip(tmp_path):
    m = mapping_matrix([[0, 2], [1], [3, 4]])
    save_mapping(tmp_path / "m.txt", m)
    np.testing.assert_array_equal(load_mapping(tmp_path / "m.txt"), m)
