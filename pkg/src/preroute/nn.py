"""Building blocks shared by the MoE language model and the grouter encoder."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


def init_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def init_ones(shape: tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def init_attention(rng: np.random.Generator, prefix: str, d: int) -> Params:
    std = d**-0.5
    return {
        f"{prefix}.attn_norm": init_ones((d,), f"{prefix}.attn_norm"),
        f"{prefix}.wq": init_normal(rng, (d, d), std, f"{prefix}.wq"),
        f"{prefix}.wk": init_normal(rng, (d, d), std, f"{prefix}.wk"),
        f"{prefix}.wv": init_normal(rng, (d, d), std, f"{prefix}.wv"),
        f"{prefix}.wo": init_normal(rng, (d, d), std * 0.5, f"{prefix}.wo"),
    }


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), -1e30), k=1)


def attention(x: Tensor, p: Params, prefix: str, num_heads: int, causal: bool) -> Tensor:
    """Multi-head self-attention on ``x`` of shape (B, L, d); returns (B, L, d)."""
    b, length, d = x.shape
    dh = d // num_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, length, num_heads, dh).transpose(0, 2, 1, 3)

    q = heads(x @ p[f"{prefix}.wq"])
    k = heads(x @ p[f"{prefix}.wk"])
    v = heads(x @ p[f"{prefix}.wv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (dh**-0.5)
    if causal:
        scores = scores + causal_mask(length)
    probs = ad.softmax(scores, axis=-1)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, length, d)
    return ctx @ p[f"{prefix}.wo"]


def param_checksum(params: dict[str, Tensor] | dict[str, np.ndarray], names=None) -> str:
    """SHA-256 over the raw bytes of the selected parameters, in name order."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(names if names is not None else params):
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
