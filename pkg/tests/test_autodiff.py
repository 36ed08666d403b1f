import numpy as np
import pytest

from preroute import autodiff as ad
from preroute.optim import AdamState, FrozenParameterError, NonFiniteGradientError, OptimConfig, Optimizer, sgd_adamw_step


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def check_grad(build, *arrays, rtol=1e-5, atol=1e-8):
    """Compare backward() with central differences for each input array."""
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*leaves).backward()
    for i, leaf in enumerate(leaves):

        def f(x, i=i):
            args = [ad.Tensor(a) for a in arrays]
            args[i] = ad.Tensor(x)
            return build(*args).item()

        num = numeric_grad(f, arrays[i].copy())
        np.testing.assert_allclose(leaf.grad, num, rtol=rtol, atol=atol)


# -- closed-form examples ------------------------------------------------------
def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(np.zeros(3)).data, np.full(3, 1 / 3))


def test_kl_identity_and_closed_form():
    p = np.array([0.2, 0.3, 0.5])
    assert ad.kl_divergence(p, p).item() == 0.0
    assert ad.kl_divergence([1.0, 0.0], [0.5, 0.5]).item() == pytest.approx(np.log(2), abs=1e-12)


def test_sum_of_squares_grad():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_detached_tensor_gets_no_grad():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    d = x.detach()
    (d * x).sum().backward()
    assert d.grad is None
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


def test_no_grad_records_nothing():
    x = ad.Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 3
    assert not y.requires_grad and y.is_leaf


def test_non_scalar_backward_rejected():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError) as exc:
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert exc.value.left == (2, 3) and exc.value.right == (2, 3)
    assert "(2, 3)" in str(exc.value)


def test_topk_ties_go_to_lowest_index():
    np.testing.assert_array_equal(ad.topk_indices(np.zeros((1, 5)), 2), [[0, 1]])


# -- finite differences on composite graphs -------------------------------------
rng = np.random.default_rng(0)


@pytest.mark.parametrize(
    "name, build, shapes",
    [
        ("matmul", lambda a, b: (a @ b).sum(), [(3, 4), (4, 2)]),
        ("batched-matmul", lambda a, b: ((a @ b) ** 2).mean(), [(2, 3, 4), (2, 4, 5)]),
        ("broadcast-add-mul", lambda a, b: ((a + b) * a).sum(), [(3, 4), (4,)]),
        ("div", lambda a, b: (a / (b * b + 1.0)).sum(), [(3,), (3,)]),
        ("exp-log", lambda a: ad.log(ad.exp(a) + 1.0).sum(), [(5,)]),
        ("sigmoid", lambda a: ad.sigmoid(a).sum(), [(6,)]),
        ("silu", lambda a: (ad.silu(a) ** 2).sum(), [(6,)]),
        ("gelu", lambda a: ad.gelu(a).sum(), [(6,)]),
        ("softmax", lambda a, w: (ad.softmax(a, axis=-1) * w).sum(), [(3, 5), (3, 5)]),
        ("log-softmax", lambda a, w: (ad.log_softmax(a, axis=0) * w).sum(), [(4, 3), (4, 3)]),
        ("logsumexp", lambda a: ad.logsumexp(a, axis=-1).sum(), [(3, 4)]),
        ("rms-norm", lambda x, w: (ad.rms_norm(x, w) ** 2).sum() * 0.5 + ad.rms_norm(x, w).sum(), [(3, 4), (4,)]),
        ("transpose-reshape", lambda a: (a.transpose(1, 0, 2).reshape(4, 6) ** 2).sum(), [(2, 4, 3)]),
        ("reduce-axis", lambda a: (a.sum(axis=1)[:3] * a.mean(axis=0)).sum(), [(4, 3)]),
        ("concat", lambda a, b: (ad.concat([a, b], axis=1) ** 3).sum(), [(2, 3), (2, 2)]),
        ("cross-entropy", lambda a: ad.cross_entropy(a, np.array([0, 2, 1])), [(3, 4)]),
        ("kl-from-logits", lambda t, s: ad.kl_from_logits(t, s), [(3, 5), (3, 5)]),
    ],
)
def test_finite_differences(name, build, shapes):
    arrays = [rng.standard_normal(s) for s in shapes]
    check_grad(build, *arrays)


def test_getitem_with_repeated_indices_accumulates():
    idx = np.array([0, 2, 2, 1])
    check_grad(lambda t: (t[idx] ** 2).sum(), rng.standard_normal((3, 2)))


def test_embedding_and_index_add():
    ids = np.array([[0, 3], [3, 1]])
    check_grad(lambda t: (ad.embedding(t, ids) ** 2).sum(), rng.standard_normal((4, 3)))
    rows = np.array([2, 0, 2])
    check_grad(lambda s: (ad.index_add(3, rows, s) ** 2).sum(), rng.standard_normal((3, 2)))


def test_kl_divergence_grad_wrt_q():
    p = np.array([[0.1, 0.6, 0.3], [0.5, 0.0, 0.5]])
    q = rng.random((2, 3)) + 0.1
    check_grad(lambda qq: ad.kl_divergence(p, qq / qq.sum(axis=-1, keepdims=True)), q)


# -- optimizer ----------------------------------------------------------------
def test_sgd_step_closed_form():
    out = sgd_adamw_step({"w": np.array(1.0)}, {"w": np.array(2.0)}, OptimConfig(mode="sgd", lr=0.1))
    assert out["w"] == pytest.approx(0.8)


def test_zero_lr_leaves_params():
    out = sgd_adamw_step({"w": np.array([1.0, -2.0])}, {"w": np.array([3.0, 4.0])}, OptimConfig(lr=0.0))
    np.testing.assert_array_equal(out["w"], [1.0, -2.0])


def test_adamw_first_step_with_zero_betas():
    cfg = OptimConfig(lr=0.1, beta1=0.0, beta2=0.0, weight_decay=0.0)
    g = np.array([2.0, -0.5])
    out = sgd_adamw_step({"w": np.zeros(2)}, {"w": g}, cfg, AdamState())
    np.testing.assert_allclose(out["w"], -0.1 * g / (np.abs(g) + cfg.eps))


def test_nan_gradient_names_parameter():
    with pytest.raises(NonFiniteGradientError, match="enc.w"):
        sgd_adamw_step({"enc.w": np.ones(2)}, {"enc.w": np.array([1.0, np.nan])}, OptimConfig())


def test_frozen_parameter_update_rejected():
    p = ad.Tensor(np.ones(2), requires_grad=True, name="w")
    p.frozen = True
    with pytest.raises(FrozenParameterError):
        Optimizer({"w": p}, OptimConfig()).step()
