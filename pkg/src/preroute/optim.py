"""Plain SGD and AdamW over named parameter tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str) -> None:
        self.param_name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


class FrozenParameterError(RuntimeError):
    def __init__(self, name: str) -> None:
        self.param_name = name
        super().__init__(f"parameter {name!r} is frozen and cannot be updated")


@dataclass
class OptimConfig:
    lr: float = 3e-3
    mode: str = "adamw"  # "adamw" | "sgd"
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    hyper: OptimConfig,
    state: AdamState | None = None,
    lr: float | None = None,
) -> dict[str, np.ndarray]:
    """Return updated copies of ``params``; ``state`` is advanced in place for AdamW.

    Parameters without a gradient entry are returned unchanged.
    """
    lr = hyper.lr if lr is None else lr
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)

    out = dict(params)
    if hyper.mode == "sgd":
        for name, g in grads.items():
            out[name] = params[name] - lr * g
        return out

    if state is None:
        state = AdamState()
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p = params[name]
        if hyper.weight_decay:
            p = p * (1.0 - lr * hyper.weight_decay)
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return out


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


class Optimizer:
    """Stateful wrapper applying :func:`sgd_adamw_step` to live tensors."""

    def __init__(self, params: dict[str, Tensor], hyper: OptimConfig) -> None:
        self.params = params
        self.hyper = hyper
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        grads = {}
        for name, p in self.params.items():
            if p.frozen:
                raise FrozenParameterError(name)
            if p.grad is not None:
                grads[name] = p.grad
        norm = global_grad_norm(self.params)
        if not math.isfinite(norm):
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NonFiniteGradientError(name)
        clip = self.hyper.grad_clip
        if clip is not None and norm > clip:
            scale = clip / (norm + 1e-12)
            grads = {k: g * scale for k, g in grads.items()}
        current = {name: self.params[name].data for name in grads}
        updated = sgd_adamw_step(current, grads, self.hyper, self.state, lr)
        for name in grads:
            self.params[name].data = updated[name]
        return norm


def warmup_cosine(step: int, total: int, base_lr: float, warmup: int = 0, floor: float = 0.1) -> float:
    """Linear warmup then cosine decay to ``floor * base_lr``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return base_lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress)))
