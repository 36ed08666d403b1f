"""Reverse-mode gradients against central differences on a small MoE-style graph."""

import numpy as np

from preroute import autodiff as ad

rng = np.random.default_rng(0)
x = rng.standard_normal((4, 6))
w_gate = rng.standard_normal((6, 3))
targets = np.array([0, 2, 1, 1])


def loss_of(w):
    logits = ad.rms_norm(x, np.ones(6)) @ w
    return ad.cross_entropy(ad.silu(logits), targets)


w = ad.Tensor(w_gate, requires_grad=True)
loss = loss_of(w)
loss.backward()
print(f"loss {loss.item():.6f}")

h = 1e-6
numeric = np.zeros_like(w_gate)
for i in np.ndindex(w_gate.shape):
    up, down = w_gate.copy(), w_gate.copy()
    up[i] += h
    down[i] -= h
    numeric[i] = (loss_of(up).item() - loss_of(down).item()) / (2 * h)

err = np.linalg.norm(w.grad - numeric) / np.linalg.norm(numeric)
print("analytic grad row 0:", np.round(w.grad[0], 6))
print("numeric  grad row 0:", np.round(numeric[0], 6))
print(f"relative error {err:.2e}")
