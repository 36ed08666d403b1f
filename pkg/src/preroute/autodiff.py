"""Dense float64 tensors with reverse-mode differentiation.

Every op builds a new :class:`Tensor`; when any input requires a gradient the
output remembers its parents and a closure mapping the upstream gradient to
one gradient per parent.  :meth:`Tensor.backward` replays those closures in
reverse topological order.

Arrays held by a tensor are never mutated in place.  Optimizers swap
``Tensor.data`` for a fresh array, so references taken earlier (checkpoints,
snapshots) stay valid.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "add",
    "mul",
    "exp",
    "log",
    "sigmoid",
    "silu",
    "gelu",
    "softmax",
    "log_softmax",
    "rms_norm",
    "embedding",
    "index_add",
    "concat",
    "logsumexp",
    "transpose",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "topk_indices",
    "topk_mask",
    "cross_entropy",
    "kl_divergence",
    "kl_from_logits",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, left: tuple, right: tuple, detail: str = "") -> None:
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        msg = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "frozen", "name", "_parents", "_backward")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------
    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(other, self)

    def __sub__(self, other) -> Tensor:
        return add(self, neg(other))

    def __rsub__(self, other) -> Tensor:
        return add(other, neg(self))

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other) -> Tensor:
        return matmul(other, self)

    def __getitem__(self, index) -> Tensor:
        return getitem(self, index)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _node(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _node(ad * sig, (a,), lambda g: (g * sig * (1.0 + ad * (1.0 - sig)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), back)


# -- linear algebra / shape -------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, "operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, "inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, "batch dimensions differ") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), back)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(np.atleast_1d(shape)), "sizes differ") from None
    return _node(out, (a,), lambda g: (g.reshape(src),))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = _as_tensor(a)
    src = a.shape

    def back(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), back)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape, "id out of range")
    return getitem(table, ids)


def index_add(num_rows: int, index, src) -> Tensor:
    """Scatter-add rows of ``src`` into a zero tensor of ``num_rows`` rows."""
    src = _as_tensor(src)
    index = np.asarray(index)
    if index.shape != src.shape[:1]:
        raise ShapeError("index_add", index.shape, src.shape, "one index per source row")
    out = np.zeros((num_rows,) + src.shape[1:])
    np.add.at(out, index, src.data)
    return _node(out, (src,), lambda g: (g[index],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", ref, t.shape)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


# -- normalisations ---------------------------------------------------------
def logsumexp(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s
    return _node(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _node(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def rms_norm(x, weight, eps: float = 1e-6) -> Tensor:
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.shape != x.shape[-1:]:
        raise ShapeError("rms_norm", x.shape, weight.shape, "weight must match last axis")
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def back(g):
        gw = g * wd
        gx = inv * (gw - xhat * (gw * xhat).mean(axis=-1, keepdims=True))
        gweight = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, gweight

    return _node(xhat * wd, (x, weight), back)


# -- selection (not differentiable) -----------------------------------------
def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, ascending.

    Ties resolve to the lowest index.
    """
    scores = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-k: k={k} outside [1, {n}]")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def topk_mask(scores, k: int) -> np.ndarray:
    idx = topk_indices(scores, k)
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    mask = np.zeros(data.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    return mask


# -- losses -----------------------------------------------------------------
def cross_entropy(logits, targets) -> Tensor:
    """Mean token cross-entropy of ``logits`` (N, V) against integer targets (N,)."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    n = logits.shape[0]
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(n), targets))
    return -reduce_mean(picked)


def kl_divergence(p, q) -> Tensor:
    """KL(p || q) over the last axis; averaged over leading rows.

    Entries with ``p == 0`` contribute zero.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError("kl_divergence", p.shape, q.shape)
    pd, qd = p.data, q.data
    support = pd > 0
    safe_p = np.where(support, pd, 1.0)
    terms = np.where(support, pd * (np.log(safe_p) - np.log(qd)), 0.0)
    rows = terms.sum(axis=-1)
    nrows = rows.size

    def back(g):
        g = np.broadcast_to(np.asarray(g)[..., None] if np.ndim(g) else g, pd.shape) / nrows
        gp = np.where(support, np.log(safe_p) - np.log(qd) + 1.0, 0.0) * g
        gq = -pd / qd * g
        return gp, gq

    return _node(np.asarray(rows.mean()), (p, q), back)


def kl_from_logits(teacher_logits, student_logits) -> Tensor:
    """Mean over rows of KL(softmax(teacher) || softmax(student)), no temperature."""
    t, s = _as_tensor(teacher_logits), _as_tensor(student_logits)
    if t.shape != s.shape:
        raise ShapeError("kl_from_logits", t.shape, s.shape)
    log_t = log_softmax(t, axis=-1)
    log_s = log_softmax(s, axis=-1)
    rows = reduce_sum(exp(log_t) * (log_t - log_s), axis=-1)
    return reduce_mean(rows)


# -- backward pass ----------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are not kept.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
