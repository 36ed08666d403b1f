"""Toy decoder-only MoE transformer and its routing primitives.

Each block is pre-norm attention followed by one MoE FFN.  Routing picks the
``k`` largest router logits per token (ties to the lowest index) and gates the
selected experts with a normalizer applied to those logits only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Params, attention, init_attention, init_normal, init_ones

NORMALIZERS = ("softmax", "sigmoid")


@dataclass(frozen=True)
class MoeConfig:
    vocab_size: int = 64
    d_model: int = 32
    num_layers: int = 2
    num_heads: int = 2
    num_experts: int = 16
    top_k: int = 2
    expert_hidden: int = 32
    seq_len: int = 32
    router_normalizer: str = "softmax"

    def __post_init__(self) -> None:
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"need 1 <= top_k <= num_experts, got k={self.top_k}, E={self.num_experts}")
        if self.num_experts > 65536:
            raise ValueError("num_experts must be <= 65536")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.router_normalizer not in NORMALIZERS:
            raise ValueError(f"router_normalizer must be one of {NORMALIZERS}")
        for name in ("vocab_size", "d_model", "num_layers", "expert_hidden", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MoeConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class RoutingDecision:
    """Per-token expert choice: ``indices`` (T, k) ascending, ``weights`` (T, k)."""

    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.indices.ndim != 2 or self.indices.shape != self.weights.shape:
            raise ValueError(
                f"indices {self.indices.shape} and weights {self.weights.shape} must both be (T, k)"
            )

    @property
    def num_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def validate(self, num_experts: int) -> None:
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= num_experts):
            raise IndexError(f"expert index outside [0, {num_experts})")
        if self.k > 1 and np.any(np.diff(self.indices, axis=1) <= 0):
            raise ValueError("expert indices must be distinct and ascending per token")

    def rows(self, sel) -> RoutingDecision:
        return RoutingDecision(self.indices[sel], self.weights[sel])

    @staticmethod
    def concat(parts: list[RoutingDecision]) -> RoutingDecision:
        return RoutingDecision(
            np.concatenate([p.indices for p in parts]), np.concatenate([p.weights for p in parts])
        )


def normalize_selected(selected: np.ndarray, normalizer: str) -> np.ndarray:
    """Gating weights from the selected logits only."""
    if normalizer == "softmax":
        z = selected - selected.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    if normalizer == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * selected))
    raise ValueError(f"unknown normalizer {normalizer!r}")


def route(scores: np.ndarray, k: int, normalizer: str = "softmax") -> RoutingDecision:
    """Top-k routing of raw scores (T, E)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[None, :]
    if not np.all(np.isfinite(scores)):
        raise ValueError("router scores contain non-finite values")
    idx = ad.topk_indices(scores, k)
    selected = np.take_along_axis(scores, idx, axis=-1)
    return RoutingDecision(idx, normalize_selected(selected, normalizer))


def gate_weights(logits: Tensor, indices: np.ndarray, normalizer: str) -> Tensor:
    """Differentiable gating weights for the given selection."""
    rows = np.arange(indices.shape[0])[:, None]
    selected = logits[rows, indices]
    if normalizer == "softmax":
        return ad.softmax(selected, axis=-1)
    return ad.sigmoid(selected)


# -- losses -----------------------------------------------------------------
def aux_loss(indices: np.ndarray, logits, coeff: float = 0.01, num_experts: int | None = None) -> Tensor:
    """Switch/GShard balance loss ``coeff * E * sum_i f_i * p_i``.

    ``f_i`` is the share of routed (token, slot) pairs landing on expert ``i``
    and ``p_i`` the batch-mean softmax router probability.  Only ``p`` carries
    gradient.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    num_experts = logits.shape[-1] if num_experts is None else num_experts
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("aux_loss needs a non-empty batch")
    f = np.bincount(indices.ravel(), minlength=num_experts) / indices.size
    p = ad.softmax(logits, axis=-1).mean(axis=0)
    return (p * f).sum() * (coeff * num_experts)


def z_loss(logits, coeff: float = 0.001) -> Tensor:
    """``coeff * mean_t (logsumexp s_t)^2``."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    lse = ad.logsumexp(logits, axis=-1)
    return (lse * lse).mean() * coeff


# -- load accounting --------------------------------------------------------
@dataclass
class ExpertLoad:
    num_experts: int
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    tokens: int = 0

    def __post_init__(self) -> None:
        if self.counts is None:
            self.counts = np.zeros(self.num_experts, dtype=np.int64)

    def update(self, indices: np.ndarray) -> None:
        indices = np.asarray(indices)
        self.counts = self.counts + np.bincount(indices.ravel(), minlength=self.num_experts)
        self.tokens += indices.shape[0]

    @property
    def mean(self) -> float:
        return float(self.counts.sum()) / self.num_experts

    def maxvio(self) -> float:
        return maxvio_global(self.counts)


def maxvio_global(load) -> float:
    """(max load - mean load) / mean load."""
    counts = load.counts if isinstance(load, ExpertLoad) else np.asarray(load, dtype=np.float64)
    mean = float(np.mean(counts)) if len(counts) else 0.0
    if mean == 0:
        raise ZeroDivisionError("MaxVio undefined for zero mean load")
    return (float(np.max(counts)) - mean) / mean


def hash_layer_table(token_freqs, num_experts: int, k: int = 1) -> np.ndarray:
    """Balanced token-to-expert table, shape (V, k).

    Tokens in descending frequency order (ties to the lower id) each go to the
    ``k`` currently least-loaded experts; load is assigned frequency mass.
    """
    freqs = np.asarray(token_freqs, dtype=np.float64)
    if np.any(freqs < 0):
        raise ValueError("token frequencies must be non-negative")
    if not 1 <= k <= num_experts:
        raise ValueError("need 1 <= k <= num_experts")
    vocab = len(freqs)
    order = np.lexsort((np.arange(vocab), -freqs))
    load = np.zeros(num_experts)
    ids = np.arange(num_experts)
    table = np.zeros((vocab, k), dtype=np.int64)
    for tok in order:
        chosen = np.lexsort((ids, load))[:k]
        table[tok] = np.sort(chosen)
        load[chosen] += freqs[tok]
    return table


# -- MoE layer --------------------------------------------------------------
def expert_names(layer: int, expert: int) -> tuple[str, str, str]:
    base = f"layers.{layer}.experts.{expert}"
    return f"{base}.w_gate", f"{base}.w_up", f"{base}.w_down"


def expert_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    return (ad.silu(x @ w_gate) * (x @ w_up)) @ w_down


def moe_layer_forward(x: Tensor, experts: list[tuple[Tensor, Tensor, Tensor]], indices: np.ndarray, weights) -> Tensor:
    """``y_t = sum_{i selected} r_i(x_t) f_i(x_t)`` for ``x`` of shape (T, d).

    Only selected experts are evaluated, so the rest get no gradient.
    """
    indices = np.asarray(indices)
    num_tokens, k = indices.shape
    if indices.size and (indices.min() < 0 or indices.max() >= len(experts)):
        raise IndexError(f"expert index outside [0, {len(experts)})")
    weights = weights if isinstance(weights, Tensor) else Tensor(weights)
    flat_idx = indices.reshape(-1)
    flat_w = weights.reshape(num_tokens * k)
    outs, rows = [], []
    for e in np.unique(flat_idx):
        pos = np.nonzero(flat_idx == e)[0]
        tok = pos // k
        out = expert_ffn(x[tok], *experts[e])
        outs.append(out * flat_w[pos].reshape(-1, 1))
        rows.append(tok)
    if not outs:
        return Tensor(np.zeros(x.shape))
    return ad.index_add(num_tokens, np.concatenate(rows), ad.concat(outs, axis=0))


# -- model ------------------------------------------------------------------
@dataclass
class ModelOutput:
    logits: Tensor
    router_logits: list[Tensor | None]
    indices: list[np.ndarray]
    gates: list[Tensor]


class MoeModel:
    """Decoder-only MoE language model over named parameter tensors."""

    def __init__(self, config: MoeConfig, seed: int = 0, params: Params | None = None) -> None:
        self.config = config
        self.params: Params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> Params:
        c = self.config
        rng = np.random.default_rng(seed)
        d, h = c.d_model, c.expert_hidden
        p: Params = {
            "embed": init_normal(rng, (c.vocab_size, d), 0.1, "embed"),
            "pos": init_normal(rng, (c.seq_len, d), 0.1, "pos"),
        }
        for i in range(c.num_layers):
            p.update(init_attention(rng, f"layers.{i}", d))
            p[f"layers.{i}.ffn_norm"] = init_ones((d,), f"layers.{i}.ffn_norm")
            p[f"layers.{i}.router"] = init_normal(rng, (d, c.num_experts), 0.02, f"layers.{i}.router")
            for e in range(c.num_experts):
                g, u, dn = expert_names(i, e)
                p[g] = init_normal(rng, (d, h), d**-0.5, g)
                p[u] = init_normal(rng, (d, h), d**-0.5, u)
                p[dn] = init_normal(rng, (h, d), 0.5 * h**-0.5, dn)
        p["final_norm"] = init_ones((d,), "final_norm")
        p["lm_head"] = init_normal(rng, (d, c.vocab_size), d**-0.5, "lm_head")
        return p

    # -- parameter groups --------------------------------------------------
    def router_names(self) -> list[str]:
        return [f"layers.{i}.router" for i in range(self.config.num_layers)]

    def expert_param_names(self) -> list[str]:
        names = []
        for i in range(self.config.num_layers):
            for e in range(self.config.num_experts):
                names.extend(expert_names(i, e))
        return names

    def experts(self, layer: int) -> list[tuple[Tensor, Tensor, Tensor]]:
        return [tuple(self.params[n] for n in expert_names(layer, e)) for e in range(self.config.num_experts)]

    def with_params(self, params: Params) -> MoeModel:
        return MoeModel(self.config, params=params)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_snapshot(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"snapshot lacks parameters: {sorted(missing)[:5]}")
        for k, v in arrays.items():
            if k in self.params:
                if v.shape != self.params[k].shape:
                    raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
                self.params[k].data = np.asarray(v, dtype=np.float64)

    # -- forward -----------------------------------------------------------
    def _embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (B, L), got {tokens.shape}")
        if tokens.shape[1] > self.config.seq_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds seq_len {self.config.seq_len}")
        x = ad.embedding(self.params["embed"], tokens)
        return x + self.params["pos"][: tokens.shape[1]]

    def forward(
        self,
        tokens: np.ndarray,
        decision: RoutingDecision | None = None,
        hash_table: np.ndarray | None = None,
    ) -> ModelOutput:
        """Run the model on (B, L) tokens.

        With ``decision`` every layer reuses that external routing, for example
        from a frozen grouter or a cache, and the routers are idle.
        With ``hash_table`` the table picks experts and the router only gates.
        """
        c = self.config
        p = self.params
        tokens = np.asarray(tokens)
        b, length = tokens.shape
        n = b * length
        if decision is not None:
            if decision.num_tokens != n or decision.k != c.top_k:
                raise ValueError(
                    f"decision covers {decision.num_tokens}x{decision.k}, model needs {n}x{c.top_k}"
                )
            decision.validate(c.num_experts)
        x = self._embed(tokens)
        router_logits: list[Tensor | None] = []
        all_idx: list[np.ndarray] = []
        gates: list[Tensor] = []
        for i in range(c.num_layers):
            pre = f"layers.{i}"
            x = x + attention(ad.rms_norm(x, p[f"{pre}.attn_norm"]), p, pre, c.num_heads, causal=True)
            h = ad.rms_norm(x, p[f"{pre}.ffn_norm"]).reshape(n, c.d_model)
            if decision is not None:
                logits = None
                idx = decision.indices
                gate = Tensor(decision.weights)
            else:
                logits = h @ p[f"{pre}.router"]
                if hash_table is not None:
                    idx = hash_table[tokens.reshape(-1)]
                else:
                    idx = ad.topk_indices(logits.data, c.top_k)
                gate = gate_weights(logits, idx, c.router_normalizer)
            y = moe_layer_forward(h, self.experts(i), idx, gate)
            x = x + y.reshape(b, length, c.d_model)
            router_logits.append(logits)
            all_idx.append(idx)
            gates.append(gate)
        x = ad.rms_norm(x, p["final_norm"]).reshape(n, c.d_model)
        return ModelOutput(x @ p["lm_head"], router_logits, all_idx, gates)

    def first_router_logits(self, tokens: np.ndarray) -> np.ndarray:
        """Router scores of the first MoE layer, shape (B*L, E)."""
        c = self.config
        p = self.params
        tokens = np.asarray(tokens)
        with ad.no_grad():
            x = self._embed(tokens)
            x = x + attention(ad.rms_norm(x, p["layers.0.attn_norm"]), p, "layers.0", c.num_heads, causal=True)
            h = ad.rms_norm(x, p["layers.0.ffn_norm"]).reshape(-1, c.d_model)
            return (h @ p["layers.0.router"]).data


def random_decision(rng: np.random.Generator, num_tokens: int, num_experts: int, k: int) -> RoutingDecision:
    """k distinct uniformly random experts per token with uniform weights."""
    keys = rng.random((num_tokens, num_experts))
    idx = np.sort(np.argsort(keys, axis=1)[:, :k], axis=1)
    return RoutingDecision(idx, np.full((num_tokens, k), 1.0 / k))


def with_config(config: MoeConfig, **changes) -> MoeConfig:
    return replace(config, **changes)
