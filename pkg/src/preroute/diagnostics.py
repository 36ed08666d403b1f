"""Routing-stability and gradient diagnostics.

Routing fluctuation compares decisions on a fixed probe batch across
checkpoints.  Gradient diagnostics cover the windowed coefficient of variation
of the gradient norm, the accumulated interference error ``E_opt`` against an
ideal fixed router, the per-token gradient alignment decomposition, and a probe
that randomises routing at fixed intervals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import Corpus
from .grouter import Grouter, grouter_forward
from .moe import MoeModel, RoutingDecision, random_decision, route
from .optim import OptimConfig, Optimizer
from .training import Checkpoint, RouterProvider, batch_loss


# -- routing fluctuation -----------------------------------------------------------
@dataclass
class RoutingSnapshot:
    checkpoint: int
    indices: np.ndarray  # (T, k)
    scores: np.ndarray  # (T, E)


def model_snapshot(model: MoeModel, probe: np.ndarray, checkpoint: int, layer: int = 0) -> RoutingSnapshot:
    """Decisions of one router layer of a learned-routing model on ``probe`` (B, L)."""
    with ad.no_grad():
        out = model.forward(probe)
    scores = out.router_logits[layer].data
    return RoutingSnapshot(checkpoint, out.indices[layer], scores)


def grouter_snapshot(grouter: Grouter, probe: np.ndarray, checkpoint: int, k: int) -> RoutingSnapshot:
    scores = grouter_forward(grouter, probe).reshape(-1, grouter.config.num_experts)
    return RoutingSnapshot(checkpoint, route(scores, k).indices, scores)


def exact_match_rate(a: RoutingSnapshot | np.ndarray, b: RoutingSnapshot | np.ndarray) -> float:
    """Fraction of probe tokens activating exactly the same expert set."""
    ia = np.sort(getattr(a, "indices", a), axis=1)
    ib = np.sort(getattr(b, "indices", b), axis=1)
    if ia.shape != ib.shape:
        raise ValueError(f"snapshot shapes differ: {ia.shape} vs {ib.shape}")
    if ia.shape[0] == 0:
        raise ValueError("empty probe batch")
    return float(np.all(ia == ib, axis=1).mean())


def score_cosine(a: RoutingSnapshot | np.ndarray, b: RoutingSnapshot | np.ndarray) -> float:
    """Mean per-token cosine similarity of full score vectors."""
    sa = np.asarray(getattr(a, "scores", a), dtype=np.float64)
    sb = np.asarray(getattr(b, "scores", b), dtype=np.float64)
    if sa.shape != sb.shape:
        raise ValueError(f"score shapes differ: {sa.shape} vs {sb.shape}")
    na = np.linalg.norm(sa, axis=1)
    nb = np.linalg.norm(sb, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine undefined for a zero score vector")
    return float(np.mean((sa * sb).sum(axis=1) / (na * nb)))


def pairwise(snapshots: list[RoutingSnapshot], metric) -> np.ndarray:
    """Per-pair metric matrix over checkpoints."""
    n = len(snapshots)
    out = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = metric(snapshots[i], snapshots[j])
    return out


# -- gradient norm statistics ------------------------------------------------------
def grad_norm_cv(trace, window: int) -> np.ndarray:
    """Trailing-window std/mean (population std); NaN until the window is full."""
    x = np.asarray(trace, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be positive")
    out = np.full(x.shape, np.nan)
    if len(x) < window:
        return out
    views = np.lib.stride_tricks.sliding_window_view(x, window)
    mean = views.mean(axis=1)
    std = views.std(axis=1)
    out[window - 1 :] = np.divide(std, mean, out=np.zeros_like(std), where=mean != 0)
    return out


def max_cv(trace, window: int) -> float:
    cv = grad_norm_cv(trace, window)
    return float(np.nanmax(cv)) if np.any(np.isfinite(cv)) else float("nan")


# -- interference error ----------------------------------------------------------------
def e_opt(observed, ideal) -> float:
    """Sum over steps of the Euclidean distance between observed and ideal expert gradients."""
    observed, ideal = list(observed), list(ideal)
    if len(observed) != len(ideal):
        raise ValueError(f"{len(observed)} observed vs {len(ideal)} ideal gradient steps")
    return float(sum(np.linalg.norm(np.asarray(o) - np.asarray(i)) for o, i in zip(observed, ideal)))


def expert_gradient(
    model: MoeModel,
    tokens: np.ndarray,
    router_mode: str = "learned",
    decision: RoutingDecision | None = None,
    hash_table: np.ndarray | None = None,
) -> np.ndarray:
    """Flattened task-loss gradient over all expert parameters (absent grads are zeros)."""
    for p in model.params.values():
        p.grad = None
    task, _, _ = batch_loss(model, tokens, router_mode, decision, hash_table)
    task.backward()
    parts = []
    for name in model.expert_param_names():
        p = model.params[name]
        parts.append((p.grad if p.grad is not None else np.zeros_like(p.data)).ravel())
    for p in model.params.values():
        p.grad = None
    return np.concatenate(parts)


def e_opt_series(
    model: MoeModel,
    checkpoints: list[Checkpoint],
    probe: np.ndarray,
    router_mode: str = "learned",
    router: RouterProvider | None = None,
    ideal_router: dict[str, np.ndarray] | None = None,
    hash_table: np.ndarray | None = None,
) -> np.ndarray:
    """Per-checkpoint distance between observed and ideal expert gradients on ``probe``.

    For learned routing the ideal router is ``ideal_router`` (default: the last
    checkpoint's router weights) paired with each checkpoint's experts.  For an
    externally routed run the router never changes, so observed and ideal
    coincide and every term is exactly zero.
    """
    if not checkpoints:
        return np.zeros(0)
    names = model.router_names()
    if ideal_router is None:
        ideal_router = {n: checkpoints[-1].arrays[n] for n in names}
    decision = None
    if router_mode == "frozen-grouter":
        if router is None:
            raise ValueError("externally routed runs need their router provider")
        ids = np.arange(len(probe))
        decision = router.decide(ids, probe[:, :-1])
    dists = []
    for ck in checkpoints:
        m = model.with_params({k: ad.Tensor(v, requires_grad=True, name=k) for k, v in ck.arrays.items()})
        observed = expert_gradient(m, probe, router_mode, decision, hash_table)
        if router_mode == "frozen-grouter":
            ideal = expert_gradient(m, probe, router_mode, decision, hash_table)
        else:
            swapped = dict(ck.arrays)
            swapped.update(ideal_router)
            mi = model.with_params({k: ad.Tensor(v, requires_grad=True, name=k) for k, v in swapped.items()})
            ideal = expert_gradient(mi, probe, router_mode, decision, hash_table)
        dists.append(float(np.linalg.norm(observed - ideal)))
    return np.array(dists)


# -- gradient alignment --------------------------------------------------------------
@dataclass
class Alignment:
    sum_sq: float
    cross_term: float
    norm_sq: float
    stagnant: bool


def grad_alignment(grads, rel_tol: float = 1e-6) -> Alignment:
    """Split ``||sum g_i||^2`` into self terms and pairwise cross terms.

    ``stagnant`` flags the case where cross terms cancel the self terms, i.e.
    the per-token gradients destructively interfere.
    """
    g = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    gram = g @ g.T
    sum_sq = float(np.trace(gram))
    cross = float(gram.sum() - sum_sq)
    total = g.sum(axis=0)
    norm_sq = float(total @ total)
    stagnant = sum_sq > 0 and abs(cross + sum_sq) <= rel_tol * sum_sq
    return Alignment(sum_sq, cross, norm_sq, bool(stagnant))


# -- perturbation probe ---------------------------------------------------------------
@dataclass
class ProbeResult:
    interval: int
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    ref_losses: list[float] = field(default_factory=list)
    ref_grad_norms: list[float] = field(default_factory=list)
    perturbed_steps: list[int] = field(default_factory=list)

    @property
    def loss_delta(self) -> float:
        """Mean loss increase over the reference run at perturbed steps."""
        if not self.perturbed_steps:
            return 0.0
        s = self.perturbed_steps
        return float(np.mean([self.losses[i] - self.ref_losses[i] for i in s]))

    @property
    def mean_grad_norm(self) -> float:
        return float(np.mean(self.grad_norms)) if self.grad_norms else 0.0


def _probe_run(model: MoeModel, corpus: Corpus, steps: int, lr: float, seed: int, batch_size: int, interval: int | None):
    m = model.with_params({k: ad.Tensor(v.data, requires_grad=True, name=k) for k, v in model.params.items()})
    opt = Optimizer(m.params, OptimConfig(lr=lr, grad_clip=None))
    batch_rng = np.random.default_rng(seed)
    route_rng = np.random.default_rng([seed, 1])
    losses, norms, hits = [], [], []
    cfg = m.config
    for step in range(steps):
        ids = batch_rng.integers(0, corpus.num_sequences, size=batch_size)
        toks = corpus.tokens[ids]
        perturb = interval is not None and (step + 1) % interval == 0
        opt.zero_grad()
        if perturb:
            dec = random_decision(route_rng, batch_size * corpus.seq_len, cfg.num_experts, cfg.top_k)
            task, _, _ = batch_loss(m, toks, "frozen-grouter", dec)
            hits.append(step)
        else:
            task, _, _ = batch_loss(m, toks, "learned")
        task.backward()
        norms.append(opt.step(lr))
        losses.append(task.item())
    return losses, norms, hits


def perturb_probe(
    model: MoeModel,
    corpus: Corpus,
    interval: int,
    steps: int,
    lr: float = 1e-5,
    seed: int = 0,
    batch_size: int = 8,
) -> ProbeResult:
    """Continue training from ``model`` with random routing every ``interval`` steps.

    Random routing picks ``k`` distinct experts per token with uniform weights.
    A reference run with identical batches and no perturbation is returned
    alongside, so the loss delta at perturbed steps is directly comparable.
    """
    if interval < 1:
        raise ValueError("interval must be positive")
    losses, norms, hits = _probe_run(model, corpus, steps, lr, seed, batch_size, interval)
    ref_losses, ref_norms, _ = _probe_run(model, corpus, steps, lr, seed, batch_size, None)
    return ProbeResult(interval, losses, norms, ref_losses, ref_norms, hits)


# -- CSV output ---------------------------------------------------------------------------
def write_matrix_csv(path: str | Path, labels: list[int], matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", *labels])
        for lab, row in zip(labels, matrix):
            w.writerow([lab, *(repr(float(v)) for v in row)])


def write_series_csv(path: str | Path, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*(columns[n] for n in names)):
            w.writerow([repr(v.item() if hasattr(v, "item") else v) for v in row])
