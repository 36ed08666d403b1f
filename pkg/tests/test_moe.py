import numpy as np
import pytest

from preroute import autodiff as ad
from preroute.corpus import Corpus
from preroute.moe import (
    ExpertLoad,
    MoeConfig,
    MoeModel,
    RoutingDecision,
    aux_loss,
    expert_ffn,
    hash_layer_table,
    maxvio_global,
    moe_layer_forward,
    route,
    z_loss,
)
from preroute.training import TrainConfig, TrainingDiverged, train_lm


def sort_oracle(scores, k):
    """Top-k by a full descending sort; stable, so ties keep the lower index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:k])


# -- routing -------------------------------------------------------------------
def test_route_worked_example():
    d = route(np.array([0.1, 0.9, 0.5, 0.2]), 2)
    np.testing.assert_array_equal(d.indices, [[1, 2]])
    np.testing.assert_allclose(d.weights, [[0.5987, 0.4013]], atol=1e-4)
    assert d.weights[0, 0] == pytest.approx(np.exp(0.9) / (np.exp(0.9) + np.exp(0.5)), abs=1e-15)


def test_route_all_experts_is_full_softmax():
    s = np.random.default_rng(1).standard_normal((5, 6))
    d = route(s, 6)
    np.testing.assert_array_equal(d.indices, np.tile(np.arange(6), (5, 1)))
    np.testing.assert_allclose(d.weights, ad.softmax(s).data, rtol=1e-12)


def test_route_ties_and_sigmoid():
    assert route(np.zeros(4), 1).indices[0, 0] == 0
    d = route(np.array([[0.0, 2.0, 1.0]]), 2, "sigmoid")
    np.testing.assert_array_equal(d.indices, [[1, 2]])
    np.testing.assert_allclose(d.weights, [[1 / (1 + np.exp(-2.0)), 1 / (1 + np.exp(-1.0))]])


def test_route_matches_sort_oracle_with_ties():
    rng = np.random.default_rng(2)
    s = rng.integers(0, 4, size=(300, 7)).astype(float)  # many ties
    d = route(s, 3)
    for row, idx in zip(s, d.indices):
        assert list(idx) == sort_oracle(list(row), 3)


def test_route_rejects_non_finite():
    with pytest.raises(ValueError):
        route(np.array([0.0, np.nan]), 1)


# -- MoE layer -----------------------------------------------------------------
def _experts(rng, n, d=4, h=3):
    return [tuple(ad.Tensor(rng.standard_normal(s), requires_grad=True) for s in ((d, h), (d, h), (h, d))) for _ in range(n)]


def test_layer_single_expert_weight_one():
    rng = np.random.default_rng(0)
    ex = _experts(rng, 3)
    x = ad.Tensor(rng.standard_normal((5, 4)))
    y = moe_layer_forward(x, ex, np.full((5, 1), 2), np.ones((5, 1)))
    np.testing.assert_allclose(y.data, expert_ffn(x, *ex[2]).data, rtol=1e-12)


def test_layer_is_weighted_sum_and_unselected_get_no_grad():
    rng = np.random.default_rng(0)
    ex = _experts(rng, 4)
    x = ad.Tensor(rng.standard_normal((3, 4)))
    w = np.array([[0.3, 0.7]] * 3)
    y = moe_layer_forward(x, ex, np.array([[0, 2]] * 3), w)
    u, v = expert_ffn(x, *ex[0]).data, expert_ffn(x, *ex[2]).data
    np.testing.assert_allclose(y.data, 0.3 * u + 0.7 * v, rtol=1e-12)
    y.sum().backward()
    assert all(p.grad is None for p in ex[1] + ex[3])
    assert all(np.linalg.norm(p.grad) > 0 for p in ex[0] + ex[2])


def test_layer_rejects_out_of_range_expert():
    rng = np.random.default_rng(0)
    with pytest.raises(IndexError):
        moe_layer_forward(ad.Tensor(np.ones((1, 4))), _experts(rng, 2), np.array([[2]]), np.ones((1, 1)))


# -- balance losses --------------------------------------------------------------
def test_aux_loss_closed_forms():
    E = 4
    uniform = aux_loss(np.arange(8).reshape(8, 1) % E, np.zeros((8, E)), coeff=0.01)
    assert uniform.item() == pytest.approx(0.01)
    peaked = np.full((6, E), -1e3)
    peaked[:, 1] = 0.0
    assert aux_loss(np.ones((6, 1), int), peaked, coeff=0.01).item() == pytest.approx(0.01 * E)


def test_aux_loss_two_pass_oracle():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((20, 5))
    idx = route(logits, 2).indices
    hits = [0] * 5
    for row in idx:
        for e in row:
            hits[e] += 1
    f = [h / idx.size for h in hits]
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    p = [sum(probs[t, e] for t in range(20)) / 20 for e in range(5)]
    expected = 0.01 * 5 * sum(fi * pi for fi, pi in zip(f, p))
    assert aux_loss(idx, logits).item() == pytest.approx(expected, rel=1e-12)


def test_z_loss_closed_forms_and_oracle():
    assert z_loss(np.zeros((3, 8))).item() == pytest.approx(0.001 * np.log(8) ** 2)
    big = np.full((1, 4), -1e4)
    big[0, 0] = 3.0
    assert z_loss(big).item() == pytest.approx(0.001 * 9.0)
    s = np.random.default_rng(4).standard_normal((7, 5))
    lse = np.log(np.exp(s).sum(axis=1))
    assert z_loss(s).item() == pytest.approx(0.001 * np.mean(lse**2), rel=1e-12)


def test_hash_table_examples():
    np.testing.assert_array_equal(np.sort(hash_layer_table([1, 1, 1, 1], 4)[:, 0]), [0, 1, 2, 3])
    t = hash_layer_table([4, 1, 1, 1, 1], 2)[:, 0]
    loads = np.bincount(t, weights=[4, 1, 1, 1, 1], minlength=2)
    assert sorted(loads) == [4, 4] and t[0] != t[1] and len(set(t[1:])) == 1
    np.testing.assert_array_equal(hash_layer_table([3, 0, 2], 1), 0)


@pytest.mark.parametrize("load, expected", [([1, 1, 1, 1], 0.0), ([2, 1, 1], 0.5), ([4, 0, 0, 0], 3.0)])
def test_maxvio_examples(load, expected):
    assert maxvio_global(load) == pytest.approx(expected)


def test_maxvio_zero_mean_rejected():
    with pytest.raises(ZeroDivisionError):
        maxvio_global(ExpertLoad(3))


# -- model and training ------------------------------------------------------------
CFG = MoeConfig(num_experts=4, top_k=2, seq_len=16, d_model=16, expert_hidden=16)


def _corpus(n=8, L=16, seed=0):
    rng = np.random.default_rng(seed)
    return Corpus(rng.integers(0, 64, size=(n, L + 1)), np.zeros(n, dtype=np.int64))


def test_train_zero_steps_gives_initial_checkpoint_only():
    r = train_lm(CFG, _corpus(), "learned", 0, seed=1)
    assert r.log == [] and [c.step for c in r.checkpoints] == [0]


def test_training_is_bitwise_deterministic():
    a = train_lm(CFG, _corpus(), "learned", 5, seed=7)
    b = train_lm(CFG, _corpus(), "learned", 5, seed=7)
    assert [(r.loss, r.grad_norm, r.maxvio) for r in a.log] == [(r.loss, r.grad_norm, r.maxvio) for r in b.log]


def test_memorizes_a_64_token_corpus():
    rng = np.random.default_rng(0)
    corpus = Corpus(rng.integers(0, 64, size=(2, 33)), np.zeros(2, dtype=np.int64))
    cfg = MoeConfig(num_experts=4, top_k=2, seq_len=32)
    r = train_lm(cfg, corpus, "learned", 300, seed=0, train=TrainConfig(batch_size=2, warmup=20, checkpoint_every=0))
    assert r.losses()[-1] < 0.1


class FixedRouter:
    def __init__(self, weight=0.5):
        self.weight = weight

    def decide(self, seq_ids, tokens):
        n = tokens.size
        return RoutingDecision(np.tile([0, 3], (n, 1)), np.full((n, 2), self.weight))


def test_external_routing_leaves_routers_untouched():
    model0 = MoeModel(CFG, seed=0)
    r = train_lm(CFG, _corpus(), "frozen-grouter", 4, seed=0, router=FixedRouter(), init=model0)
    for name in model0.router_names():
        np.testing.assert_array_equal(r.model.params[name].data, model0.params[name].data)
    assert all(rec.router_grad_norm == 0.0 for rec in r.log)


def test_divergence_restores_last_good_checkpoint():
    with pytest.raises(TrainingDiverged) as exc:
        train_lm(CFG, _corpus(), "frozen-grouter", 3, seed=0, router=FixedRouter(np.nan))
    res = exc.value.result
    assert exc.value.step == 0
    for k, v in res.checkpoints[-1].arrays.items():
        np.testing.assert_array_equal(res.model.params[k].data, v)


def test_decision_shape_checked():
    m = MoeModel(CFG)
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 4), int), decision=RoutingDecision(np.zeros((3, 2), int), np.ones((3, 2))))


def test_config_validation():
    with pytest.raises(ValueError):
        MoeConfig(num_experts=2, top_k=3)
    with pytest.raises(ValueError):
        MoeConfig(num_experts=70000, top_k=1)
