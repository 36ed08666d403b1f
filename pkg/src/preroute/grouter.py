"""Standalone routing network distilled from a source model's first router.

``G(X) = W_s(Enc^N(Emb(X)))``: token embedding (plus optional learned
positions), ``N`` pre-norm bidirectional encoder blocks, a final norm and the
score projection ``W_s``.  Once frozen it routes every MoE layer of a target
model; expert tuning may still adjust ``W_s`` alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .corpus import Corpus
from .moe import RoutingDecision, aux_loss, maxvio_global, route
from .nn import Params, attention, init_attention, init_normal, init_ones, param_checksum
from .optim import FrozenParameterError, OptimConfig, Optimizer, warmup_cosine

SCORE_LAYER = "w_s"


@dataclass(frozen=True)
class GrouterConfig:
    vocab_size: int = 64
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    num_experts: int = 16
    ffn_hidden: int = 128
    max_len: int = 64
    use_positions: bool = True

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError("grouter needs at least one encoder block")
        if self.num_experts < 1:
            raise ValueError("grouter needs at least one output expert")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    def flops_per_token(self, seq_len: int) -> int:
        """Multiply-adds x2 of one forward pass, per token, for sequences of ``seq_len``."""
        d, h = self.d_model, self.ffn_hidden
        attn = 2 * 4 * d * d + 2 * 2 * seq_len * d
        ffn = 2 * 2 * d * h
        return self.num_layers * (attn + ffn) + 2 * d * self.num_experts

    @classmethod
    def from_dict(cls, d: dict) -> GrouterConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class Grouter:
    def __init__(self, config: GrouterConfig, seed: int = 0, params: Params | None = None) -> None:
        self.config = config
        self.params: Params = params if params is not None else self._init_params(seed)
        self.frozen = False

    def _init_params(self, seed: int) -> Params:
        c = self.config
        rng = np.random.default_rng(seed)
        d = c.d_model
        p: Params = {"embed": init_normal(rng, (c.vocab_size, d), 1.0, "embed")}
        if c.use_positions:
            p["pos"] = init_normal(rng, (c.max_len, d), 0.5, "pos")
        for i in range(c.num_layers):
            pre = f"blocks.{i}"
            p.update(init_attention(rng, pre, d))
            p[f"{pre}.ffn_norm"] = init_ones((d,), f"{pre}.ffn_norm")
            p[f"{pre}.w1"] = init_normal(rng, (d, c.ffn_hidden), d**-0.5, f"{pre}.w1")
            p[f"{pre}.w2"] = init_normal(rng, (c.ffn_hidden, d), 0.5 * c.ffn_hidden**-0.5, f"{pre}.w2")
        p["final_norm"] = init_ones((d,), "final_norm")
        p[SCORE_LAYER] = init_normal(rng, (d, c.num_experts), d**-0.5, SCORE_LAYER)
        return p

    # -- parameters ----------------------------------------------------------
    def encoder_names(self) -> list[str]:
        return [n for n in self.params if n != SCORE_LAYER]

    def encoder_checksum(self) -> str:
        return param_checksum(self.params, self.encoder_names())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> Grouter:
        g = Grouter(self.config, params={k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()})
        if self.frozen:
            freeze(g)
        return g

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        cfg = {"grouter": self.config.to_dict(), "frozen": self.frozen, **(extra or {})}
        checkpoint.save(path, checkpoint.GROUTER_MAGIC, cfg, self.snapshot())

    @classmethod
    def load(cls, path: str | Path) -> Grouter:
        cfg, arrays = checkpoint.load(path, checkpoint.GROUTER_MAGIC)
        g = cls(GrouterConfig.from_dict(cfg["grouter"]), params={k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})
        if cfg.get("frozen"):
            freeze(g)
        return g

    # -- forward -------------------------------------------------------------
    def encode(self, tokens: np.ndarray) -> Tensor:
        """Encoder features (B, L, d) after the final norm."""
        c, p = self.config, self.params
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (B, L), got {tokens.shape}")
        b, length = tokens.shape
        if length == 0:
            raise ValueError("empty sequence")
        if length > c.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {c.max_len}")
        if tokens.min() < 0 or tokens.max() >= c.vocab_size:
            raise ValueError("token id outside the grouter vocabulary")
        x = ad.embedding(p["embed"], tokens)
        if c.use_positions:
            x = x + p["pos"][:length]
        for i in range(c.num_layers):
            pre = f"blocks.{i}"
            x = x + attention(ad.rms_norm(x, p[f"{pre}.attn_norm"]), p, pre, c.num_heads, causal=False)
            h = ad.rms_norm(x, p[f"{pre}.ffn_norm"])
            x = x + ad.gelu(h @ p[f"{pre}.w1"]) @ p[f"{pre}.w2"]
        return ad.rms_norm(x, p["final_norm"])

    def forward(self, tokens: np.ndarray) -> Tensor:
        return self.encode(tokens) @ self.params[SCORE_LAYER]


def grouter_forward(grouter: Grouter, tokens) -> np.ndarray:
    """Raw expert scores: (L, E) for one sequence or (B, L, E) for a batch."""
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if tokens.size == 0:
        raise ValueError("empty sequence")
    with ad.no_grad():
        scores = grouter.forward(tokens).data
    return scores[0] if single else scores


def freeze(grouter: Grouter) -> Grouter:
    """Mark every parameter immutable; returns the same grouter."""
    grouter.frozen = True
    for t in grouter.params.values():
        t.frozen = True
        t.requires_grad = False
    return grouter


def shared_route(grouter: Grouter, tokens, k: int, normalizer: str = "softmax") -> RoutingDecision:
    """One decision per token (flattened over the batch) for every target layer."""
    scores = grouter_forward(grouter, tokens)
    return route(scores.reshape(-1, scores.shape[-1]), k, normalizer)


class LiveGrouterRouter:
    """Router provider that runs the frozen grouter on each batch."""

    def __init__(self, grouter: Grouter, k: int, normalizer: str = "softmax") -> None:
        if not grouter.frozen:
            raise ValueError("live routing requires a frozen grouter")
        self.grouter = grouter
        self.k = k
        self.normalizer = normalizer

    def decide(self, seq_ids: np.ndarray, tokens: np.ndarray) -> RoutingDecision:
        return shared_route(self.grouter, tokens, self.k, self.normalizer)


# -- distillation ------------------------------------------------------------
Teacher = Callable[[np.ndarray], np.ndarray]


def first_layer_teacher(source) -> Teacher:
    """Teacher scores from the source model's first MoE router."""
    if hasattr(source, "first_router_logits"):
        return source.first_router_logits
    if callable(source):
        return source
    raise TypeError("source must be an MoeModel or a callable returning router scores")


@dataclass
class DistillConfig:
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 20
    seed: int = 0


@dataclass
class DistillResult:
    grouter: Grouter
    losses: list[float] = field(default_factory=list)


def distill_loss(teacher_scores: np.ndarray, student_scores: Tensor) -> Tensor:
    """Mean per-token KL(softmax(teacher) || softmax(student)), no temperature."""
    return ad.kl_from_logits(teacher_scores, student_scores)


def distill(source, grouter: Grouter, corpus: Corpus, steps: int, cfg: DistillConfig | None = None) -> DistillResult:
    """Fit ``grouter`` to the source's first-layer routing on ``corpus`` inputs.

    Optimised with AdamW under linear warmup and cosine decay.
    """
    cfg = cfg or DistillConfig()
    teacher = first_layer_teacher(source)
    inputs = corpus.inputs
    probe = teacher(inputs[:1])
    if probe.shape[-1] != grouter.config.num_experts:
        raise ValueError(
            f"source router has {probe.shape[-1]} experts, grouter outputs {grouter.config.num_experts}"
        )
    if grouter.frozen:
        raise FrozenParameterError("grouter")
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(grouter.params, OptimConfig(lr=cfg.lr, grad_clip=1.0))
    result = DistillResult(grouter)
    for step in range(steps):
        ids = rng.integers(0, corpus.num_sequences, size=cfg.batch_size)
        toks = inputs[ids]
        target = teacher(toks).reshape(-1, grouter.config.num_experts)
        opt.zero_grad()
        student = grouter.forward(toks).reshape(-1, grouter.config.num_experts)
        loss = distill_loss(target, student)
        loss.backward()
        opt.step(warmup_cosine(step, steps, cfg.lr, cfg.warmup))
        result.losses.append(loss.item())
    return result


def mean_distill_loss(source, grouter: Grouter, corpus: Corpus, batch_size: int = 64) -> float:
    teacher = first_layer_teacher(source)
    total, n = 0.0, 0
    with ad.no_grad():
        for start in range(0, corpus.num_sequences, batch_size):
            toks = corpus.inputs[start : start + batch_size]
            t = teacher(toks).reshape(-1, grouter.config.num_experts)
            s = grouter.forward(toks).reshape(-1, grouter.config.num_experts)
            total += distill_loss(t, s).item() * t.shape[0]
            n += t.shape[0]
    return total / max(n, 1)


# -- expert tuning -------------------------------------------------------------
@dataclass
class TuneConfig:
    k: int = 2
    batch_size: int = 64
    lr: float = 1e-3
    aux_coeff: float = 1.0
    seed: int = 0


@dataclass
class TuneResult:
    grouter: Grouter
    losses: list[float] = field(default_factory=list)


def routing_maxvio(grouter: Grouter, corpus: Corpus, k: int) -> float:
    """Global MaxVio of the grouter's top-k routing over ``corpus`` inputs."""
    scores = grouter_forward(grouter, corpus.inputs).reshape(-1, grouter.config.num_experts)
    counts = np.bincount(route(scores, k).indices.ravel(), minlength=grouter.config.num_experts)
    return maxvio_global(counts)


def expert_tune(grouter: Grouter, target: Corpus, steps: int, cfg: TuneConfig | None = None) -> TuneResult:
    """Re-balance a frozen grouter on ``target`` by training ``W_s`` alone on the aux loss.

    The encoder is frozen, so its features are computed once up front.
    Returns a new frozen grouter; the input is left untouched.
    """
    cfg = cfg or TuneConfig()
    if not grouter.frozen:
        raise ValueError("expert tuning expects a frozen grouter")
    tuned = grouter.copy()
    num_experts = tuned.config.num_experts
    with ad.no_grad():
        feats = np.concatenate(
            [tuned.encode(target.inputs[i : i + 64]).data for i in range(0, target.num_sequences, 64)]
        ) if target.num_sequences else np.zeros((0, target.seq_len, tuned.config.d_model))
    w_s = Tensor(tuned.params[SCORE_LAYER].data.copy(), requires_grad=True, name=SCORE_LAYER)
    opt = Optimizer({SCORE_LAYER: w_s}, OptimConfig(lr=cfg.lr, grad_clip=None))
    rng = np.random.default_rng(cfg.seed)
    result = TuneResult(tuned)
    for _ in range(steps):
        ids = rng.integers(0, target.num_sequences, size=cfg.batch_size)
        h = feats[ids].reshape(-1, feats.shape[-1])
        opt.zero_grad()
        logits = Tensor(h) @ w_s
        idx = ad.topk_indices(logits.data, cfg.k)
        loss = aux_loss(idx, logits, cfg.aux_coeff, num_experts)
        loss.backward()
        opt.step()
        result.losses.append(loss.item())
    tuned.params[SCORE_LAYER] = Tensor(w_s.data, name=SCORE_LAYER)
    freeze(tuned)
    return result
