"""Offline expert-parallel planning from cached routing decisions.

Each sequence is summarised by its affinity vector (per-expert selection
frequency).  Low-entropy vectors are clustered into ``N_p`` groups, expert
groups are matched to clusters to maximise affinity, and finally every
sequence goes to the partition that already hosts most of its tokens' experts.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

PLAN_FORMAT = "preroute-plan"
PLAN_VERSION = 1
THRESHOLD_E128 = 6.85


# -- affinity vectors ----------------------------------------------------------
def affinity_vectors(seq_indices: np.ndarray, num_experts: int) -> np.ndarray:
    """(S, L, k) expert indices -> (S, E) selection frequencies; each row sums to k."""
    seq_indices = np.asarray(seq_indices)
    if seq_indices.ndim != 3:
        raise ValueError(f"expected (S, L, k) indices, got shape {seq_indices.shape}")
    s, length, _ = seq_indices.shape
    if length == 0:
        raise ValueError("sequences must contain at least one token")
    rows = np.repeat(np.arange(s), seq_indices[0].size)
    counts = np.zeros((s, num_experts))
    np.add.at(counts, (rows, seq_indices.reshape(-1)), 1.0)
    return counts / length


def default_entropy_threshold(num_experts: int) -> float:
    if num_experts == 128:
        return THRESHOLD_E128
    return math.log2(num_experts) - 0.15


def affinity_entropy(phi: np.ndarray) -> np.ndarray:
    """Base-2 Shannon entropy of each row after normalising it to sum 1."""
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    total = phi.sum(axis=1, keepdims=True)
    p = np.divide(phi, total, out=np.zeros_like(phi), where=total > 0)
    logs = np.log2(p, out=np.zeros_like(p), where=p > 0)
    return -(p * logs).sum(axis=1)


def entropy_filter(phi: np.ndarray, threshold: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split row ids into (retained, discarded); rows above ``threshold`` bits are discarded."""
    phi = np.atleast_2d(phi)
    threshold = default_entropy_threshold(phi.shape[1]) if threshold is None else threshold
    keep = affinity_entropy(phi) <= threshold
    return np.flatnonzero(keep), np.flatnonzero(~keep)


# -- clustering ------------------------------------------------------------------
@dataclass
class Clustering:
    centroids: np.ndarray  # (N_p, E)
    masses: np.ndarray  # (N_p,) member counts
    labels: np.ndarray  # (S,) cluster of each input row

    def wcss(self, points: np.ndarray) -> float:
        return float(((points - self.centroids[self.labels]) ** 2).sum())


def _average_linkage(centroids: np.ndarray, masses: np.ndarray, target: int) -> np.ndarray:
    """Mass-weighted average-linkage merging; returns a final cluster id per input centroid."""
    n = len(centroids)
    diff = centroids[:, None, :] - centroids[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    mass = masses.astype(np.float64).copy()
    alive = np.ones(n, dtype=bool)
    owner = np.arange(n)
    for _ in range(n - target):
        flat = int(np.argmin(dist))  # row-major first minimum: lowest (i, j)
        i, j = divmod(flat, n)
        i, j = min(i, j), max(i, j)
        # Lance-Williams update for weighted average linkage
        merged = (mass[i] * dist[i] + mass[j] * dist[j]) / (mass[i] + mass[j])
        dist[i, :] = merged
        dist[:, i] = merged
        dist[i, i] = np.inf
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        mass[i] += mass[j]
        alive[j] = False
        owner[owner == j] = i
    survivors = np.flatnonzero(alive)
    remap = {int(c): r for r, c in enumerate(survivors)}
    return np.array([remap[int(o)] for o in owner])


def cluster(phi: np.ndarray, num_partitions: int, init_clusters: int = 100, seed: int = 0) -> Clustering:
    """k-means++ down to ``min(init_clusters, |phi|)`` groups, then agglomerate to ``num_partitions``."""
    phi = np.asarray(phi, dtype=np.float64)
    n = len(phi)
    if n < num_partitions:
        raise ValueError(f"need at least {num_partitions} affinity vectors, got {n}")
    if n <= init_clusters:
        # k-means with one cluster per point is the identity
        fine_labels = np.arange(n)
    else:
        km = KMeans(n_clusters=init_clusters, init="k-means++", n_init=1, random_state=seed)
        raw = km.fit_predict(phi)
        _, fine_labels = np.unique(raw, return_inverse=True)  # drop empty clusters
    num_fine = int(fine_labels.max()) + 1
    if num_fine < num_partitions:
        raise ValueError(f"only {num_fine} distinct clusters for {num_partitions} partitions")
    fine_mass = np.bincount(fine_labels, minlength=num_fine).astype(np.float64)
    fine_cent = np.zeros((num_fine, phi.shape[1]))
    np.add.at(fine_cent, fine_labels, phi)
    fine_cent /= fine_mass[:, None]

    coarse_of_fine = _average_linkage(fine_cent, fine_mass, num_partitions)
    labels = coarse_of_fine[fine_labels]
    # order clusters by their first member so output does not depend on merge history
    order = np.unique(labels, return_index=True)[1]
    first = labels[np.sort(order)]
    relabel = np.empty(num_partitions, dtype=np.int64)
    relabel[first] = np.arange(num_partitions)
    labels = relabel[labels]
    masses = np.bincount(labels, minlength=num_partitions).astype(np.float64)
    centroids = np.zeros((num_partitions, phi.shape[1]))
    np.add.at(centroids, labels, phi)
    centroids /= masses[:, None]
    return Clustering(centroids, masses, labels)


# -- expert groups -----------------------------------------------------------------
def partition_capacities(num_experts: int, num_partitions: int) -> tuple[int, int]:
    if not 1 <= num_partitions <= num_experts:
        raise ValueError(f"need 1 <= N_p <= E_T, got N_p={num_partitions}, E_T={num_experts}")
    return divmod(num_experts, num_partitions)


def assign_experts(centroids: np.ndarray, num_experts: int | None = None) -> list[list[int]]:
    """Balanced expert groups maximising the summed centroid affinity of each group's experts.

    Solved exactly as a rectangular assignment: every partition offers
    ``floor(E/N_p)`` base slots plus one spare slot, and ``N_p - E mod N_p``
    dummy experts that may only occupy spare slots absorb the surplus.
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    num_partitions, e = centroids.shape
    num_experts = e if num_experts is None else num_experts
    if num_experts != e:
        raise ValueError(f"centroids have {e} experts, expected {num_experts}")
    base, extra = partition_capacities(num_experts, num_partitions)
    slot_owner = [p for p in range(num_partitions) for _ in range(base)]
    if extra:
        slot_owner += list(range(num_partitions))
        spare = np.zeros(len(slot_owner), dtype=bool)
        spare[num_partitions * base :] = True
    slot_owner = np.array(slot_owner)
    score = centroids[slot_owner].T  # (E, slots)
    if extra:
        dummies = np.where(spare, 0.0, -np.inf)[None, :].repeat(num_partitions - extra, axis=0)
        score = np.vstack([score, dummies])
    rows, cols = linear_sum_assignment(score, maximize=True)
    groups: list[list[int]] = [[] for _ in range(num_partitions)]
    for r, c in zip(rows, cols):
        if r < num_experts:
            groups[slot_owner[c]].append(int(r))
    return [sorted(g) for g in groups]


def group_affinity(groups: list[list[int]], centroids: np.ndarray) -> float:
    """Objective of :func:`assign_experts`: summed centroid affinity of every (partition, expert) pair.

    ``math.fsum`` is exactly rounded, so the value does not depend on summation order.
    """
    return math.fsum(float(centroids[p, e]) for p, g in enumerate(groups) for e in g)


def expert_owner(groups: list[list[int]], num_experts: int) -> np.ndarray:
    owner = np.full(num_experts, -1, dtype=np.int64)
    for p, g in enumerate(groups):
        owner[g] = p
    if np.any(owner < 0):
        raise ValueError("expert groups do not cover every expert")
    return owner


# -- sample placement ---------------------------------------------------------------
def token_partitions(seq_indices: np.ndarray, owner: np.ndarray, num_partitions: int) -> np.ndarray:
    """(L, N_p) boolean: does token t need any expert hosted on partition n."""
    seq_indices = np.asarray(seq_indices)
    hit = np.zeros((seq_indices.shape[0], num_partitions), dtype=bool)
    rows = np.repeat(np.arange(seq_indices.shape[0]), seq_indices.shape[1])
    hit[rows, owner[seq_indices.reshape(-1)]] = True
    return hit


def place_sample(seq_indices: np.ndarray, owner: np.ndarray, num_partitions: int) -> int:
    """Partition touched by the most tokens of the sequence (ties to the lowest id)."""
    overlap = token_partitions(seq_indices, owner, num_partitions).sum(axis=0)
    return int(np.argmax(overlap))


# -- plan -----------------------------------------------------------------------------
@dataclass
class PlacementPlan:
    num_experts: int
    num_partitions: int
    expert_groups: list[list[int]]
    assignment: list[int]
    granularity: str = "gpu"
    gpus_per_node: int = 1
    gpu_layout: list[list[list[int]]] = field(default_factory=list)
    retained: list[int] = field(default_factory=list)
    discarded: list[int] = field(default_factory=list)
    entropy_threshold: float = 0.0
    filter_bypassed: bool = False
    seed: int = 0

    def owner(self) -> np.ndarray:
        return expert_owner(self.expert_groups, self.num_experts)

    def population(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.num_partitions).tolist()

    def to_json(self) -> str:
        body = {"format": PLAN_FORMAT, "version": PLAN_VERSION, **asdict(self)}
        return json.dumps(body, sort_keys=True, indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> PlacementPlan:
        body = json.loads(text)
        if body.get("format") != PLAN_FORMAT:
            raise ValueError("not a placement plan")
        if body.get("version") != PLAN_VERSION:
            raise ValueError(f"unsupported plan version {body.get('version')}")
        plan = cls(**{k: body[k] for k in cls.__dataclass_fields__ if k in body})
        plan.owner()
        return plan

    @classmethod
    def load(cls, path: str | Path) -> PlacementPlan:
        return cls.from_json(Path(path).read_text())


def spread_within_node(group: list[int], gpus_per_node: int) -> list[list[int]]:
    """Round-robin the node's experts over its GPUs."""
    return [sorted(group)[g::gpus_per_node] for g in range(gpus_per_node)]


def build_plan(
    seq_indices: np.ndarray,
    num_experts: int,
    num_partitions: int,
    seed: int = 0,
    threshold: float | None = None,
    init_clusters: int = 100,
    granularity: str = "gpu",
    gpus_per_node: int = 1,
) -> PlacementPlan:
    """Full offline pass: affinity, entropy filter, clustering, matching, placement.

    If fewer than ``num_partitions`` sequences survive the filter, clustering
    falls back to all sequences and the plan records ``filter_bypassed``.
    """
    if granularity not in ("node", "gpu"):
        raise ValueError("granularity must be 'node' or 'gpu'")
    partition_capacities(num_experts, num_partitions)
    phi = affinity_vectors(seq_indices, num_experts)
    threshold = default_entropy_threshold(num_experts) if threshold is None else threshold
    retained, discarded = entropy_filter(phi, threshold)
    bypass = len(retained) < num_partitions
    pool = np.arange(len(phi)) if bypass else retained
    clus = cluster(phi[pool], num_partitions, init_clusters, seed)
    groups = assign_experts(clus.centroids, num_experts)
    owner = expert_owner(groups, num_experts)
    assignment = [place_sample(s, owner, num_partitions) for s in np.asarray(seq_indices)]
    layout = [spread_within_node(g, gpus_per_node) for g in groups] if granularity == "node" else []
    return PlacementPlan(
        num_experts=num_experts,
        num_partitions=num_partitions,
        expert_groups=groups,
        assignment=assignment,
        granularity=granularity,
        gpus_per_node=gpus_per_node if granularity == "node" else 1,
        gpu_layout=layout,
        retained=retained.tolist(),
        discarded=discarded.tolist(),
        entropy_threshold=float(threshold),
        filter_bypassed=bool(bypass),
        seed=seed,
    )
