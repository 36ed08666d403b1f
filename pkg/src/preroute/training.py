"""Language-model training loop for the toy MoE under three routing modes.

``learned``         every layer's router picks experts; aux / z losses apply
``frozen-grouter``  an external provider supplies one decision per token that
                    all layers share; the model's routers stay idle
``hash``            a balanced token-to-expert table picks experts and the
                    router only supplies gating weights
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .corpus import Corpus, token_frequencies
from .moe import ExpertLoad, MoeConfig, MoeModel, RoutingDecision, aux_loss, hash_layer_table, z_loss
from .optim import OptimConfig, Optimizer, warmup_cosine

ROUTER_MODES = ("learned", "frozen-grouter", "hash")
METRIC_COLUMNS = ("step", "tokens", "loss", "grad_norm", "maxvio", "router_grad_norm")


class RouterProvider(Protocol):
    def decide(self, seq_ids: np.ndarray, tokens: np.ndarray) -> RoutingDecision:
        """Decision for the flattened (B*L) tokens of the given sequences."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, result: TrainResult) -> None:
        self.step = step
        self.result = result
        super().__init__(f"loss became non-finite at step {step}; restored checkpoint step {result.checkpoints[-1].step}")


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 3e-3
    warmup: int = 10
    schedule: str = "cosine"  # "constant" | "cosine"
    aux_coeff: float = 0.01
    z_coeff: float = 0.0
    checkpoint_every: int = 50
    eval_every: int = 0
    grad_clip: float | None = 1.0
    weight_decay: float = 0.0


@dataclass
class StepRecord:
    step: int
    tokens: int
    loss: float
    grad_norm: float
    maxvio: float
    router_grad_norm: float = 0.0


@dataclass
class Checkpoint:
    step: int
    tokens: int
    arrays: dict[str, np.ndarray]


@dataclass
class TrainResult:
    model: MoeModel
    log: list[StepRecord] = field(default_factory=list)
    checkpoints: list[Checkpoint] = field(default_factory=list)
    valid_log: list[tuple[int, int, float]] = field(default_factory=list)
    loads: list[ExpertLoad] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.log])

    def grad_norms(self) -> np.ndarray:
        return np.array([r.grad_norm for r in self.log])

    def write_metrics_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for r in self.log:
                w.writerow([r.step, r.tokens, repr(r.loss), repr(r.grad_norm), repr(r.maxvio), repr(r.router_grad_norm)])


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0]) != METRIC_COLUMNS:
        raise ValueError(f"{path}: unexpected metric columns {tuple(rows[0])}")
    return [{k: (int(v) if k in ("step", "tokens") else float(v)) for k, v in r.items()} for r in rows]


def batch_loss(
    model: MoeModel,
    tokens: np.ndarray,
    router_mode: str,
    decision: RoutingDecision | None = None,
    hash_table: np.ndarray | None = None,
    aux_coeff: float = 0.0,
    z_coeff: float = 0.0,
):
    """Cross-entropy on next-token prediction; returns (task_loss, total_loss, output)."""
    inp, tgt = tokens[:, :-1], tokens[:, 1:]
    out = model.forward(
        inp,
        decision=decision if router_mode == "frozen-grouter" else None,
        hash_table=hash_table if router_mode == "hash" else None,
    )
    task = ad.cross_entropy(out.logits, tgt.reshape(-1))
    total = task
    if router_mode == "learned":
        for logits, idx in zip(out.router_logits, out.indices):
            if aux_coeff:
                total = total + aux_loss(idx, logits, aux_coeff, model.config.num_experts)
            if z_coeff:
                total = total + z_loss(logits, z_coeff)
    return task, total, out


def evaluate(
    model: MoeModel,
    corpus: Corpus,
    router_mode: str = "learned",
    router: RouterProvider | None = None,
    hash_table: np.ndarray | None = None,
    batch_size: int = 32,
) -> float:
    """Mean next-token cross-entropy over the whole corpus."""
    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, corpus.num_sequences, batch_size):
            ids = np.arange(start, min(start + batch_size, corpus.num_sequences))
            toks = corpus.tokens[ids]
            decision = router.decide(ids, toks[:, :-1]) if router_mode == "frozen-grouter" else None
            task, _, _ = batch_loss(model, toks, router_mode, decision, hash_table)
            n = len(ids) * corpus.seq_len
            total += task.item() * n
            count += n
    return total / max(count, 1)


def _router_grad_norm(model: MoeModel) -> float:
    sq = 0.0
    for name in model.router_names():
        g = model.params[name].grad
        if g is not None:
            sq += float(np.sum(g * g))
    return math.sqrt(sq)


def train_lm(
    config: MoeConfig,
    corpus: Corpus,
    router_mode: str,
    steps: int,
    seed: int,
    train: TrainConfig | None = None,
    router: RouterProvider | None = None,
    hash_table: np.ndarray | None = None,
    valid: Corpus | None = None,
    valid_router: RouterProvider | None = None,
    init: MoeModel | None = None,
) -> TrainResult:
    """Train a fresh (or ``init``-copied) model; deterministic given ``seed``."""
    if router_mode not in ROUTER_MODES:
        raise ValueError(f"router_mode must be one of {ROUTER_MODES}")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if router_mode == "frozen-grouter" and router is None:
        raise ValueError("frozen-grouter mode needs a router provider")
    if corpus.seq_len > config.seq_len:
        raise ValueError(f"corpus sequence length {corpus.seq_len} exceeds model seq_len {config.seq_len}")
    train = train or TrainConfig()
    if router_mode == "hash" and hash_table is None:
        hash_table = hash_layer_table(token_frequencies(corpus, config.vocab_size), config.num_experts, config.top_k)

    model_seed, batch_seed = np.random.SeedSequence(seed).generate_state(2)
    if init is not None:
        model = MoeModel(config, params={k: ad.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in init.params.items()})
    else:
        model = MoeModel(config, seed=int(model_seed))
    rng = np.random.default_rng(int(batch_seed))
    opt = Optimizer(model.params, OptimConfig(lr=train.lr, grad_clip=train.grad_clip, weight_decay=train.weight_decay))
    result = TrainResult(model=model, loads=[ExpertLoad(config.num_experts) for _ in range(config.num_layers)])
    tokens_per_step = train.batch_size * corpus.seq_len
    result.checkpoints.append(Checkpoint(0, 0, model.snapshot()))
    valid_router = valid_router or router

    for step in range(steps):
        ids = rng.integers(0, corpus.num_sequences, size=train.batch_size)
        toks = corpus.tokens[ids]
        decision = router.decide(ids, toks[:, :-1]) if router_mode == "frozen-grouter" else None
        opt.zero_grad()
        task, total, out = batch_loss(
            model, toks, router_mode, decision, hash_table, train.aux_coeff, train.z_coeff
        )
        loss = task.item()
        if not math.isfinite(total.item()):
            model.load_snapshot(result.checkpoints[-1].arrays)
            raise TrainingDiverged(step, result)
        total.backward()
        router_norm = _router_grad_norm(model)
        lr = train.lr if train.schedule == "constant" else warmup_cosine(step, steps, train.lr, train.warmup)
        try:
            grad_norm = opt.step(lr)
        except FloatingPointError:
            model.load_snapshot(result.checkpoints[-1].arrays)
            raise TrainingDiverged(step, result) from None
        for load, idx in zip(result.loads, out.indices):
            load.update(idx)
        maxvio = float(np.mean([ld.maxvio() for ld in result.loads]))
        done = step + 1
        result.log.append(StepRecord(done, done * tokens_per_step, loss, grad_norm, maxvio, router_norm))
        if train.checkpoint_every and (done % train.checkpoint_every == 0 or done == steps):
            result.checkpoints.append(Checkpoint(done, done * tokens_per_step, model.snapshot()))
        if valid is not None and train.eval_every and (done % train.eval_every == 0 or done == steps):
            vl = evaluate(model, valid, router_mode, valid_router, hash_table)
            result.valid_log.append((done, done * tokens_per_step, vl))
    return result
