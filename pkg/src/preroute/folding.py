"""Expert folding: merge ``E_S`` source experts into ``E_T`` target experts.

Experts that the grouter often activates together are grouped greedily, and
the grouter's score layer is folded by summing each group's columns
(``W_s @ M`` with a binary source-to-target map ``M``).
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .grouter import SCORE_LAYER, Grouter, freeze


def coactivation_matrix(indices: np.ndarray, num_experts: int) -> np.ndarray:
    """``P[i, j]`` = number of tokens whose selection holds both ``i`` and ``j``; zero diagonal."""
    indices = np.asarray(indices)
    if indices.ndim != 2:
        raise ValueError("indices must be (T, k)")
    hits = np.zeros((indices.shape[0], num_experts), dtype=np.int64)
    np.put_along_axis(hits, indices, 1, axis=1)
    p = hits.T @ hits
    np.fill_diagonal(p, 0)
    return p


def group_sizes(num_source: int, num_target: int) -> list[int]:
    """``E_S mod E_T`` groups of ``floor(E_S/E_T) + 1`` first, then the rest of size ``floor``."""
    if not 1 <= num_target <= num_source:
        raise ValueError(f"need 1 <= E_T <= E_S, got E_S={num_source}, E_T={num_target}")
    base, extra = divmod(num_source, num_target)
    return [base + 1] * extra + [base] * (num_target - extra)


def greedy_merge(affinity: np.ndarray, sizes: list[int]) -> list[list[int]]:
    """Grow each group from the lowest unassigned expert by maximum summed affinity."""
    affinity = np.asarray(affinity)
    n = affinity.shape[0]
    if sum(sizes) != n:
        raise ValueError(f"group sizes sum to {sum(sizes)}, expected {n}")
    unassigned = np.ones(n, dtype=bool)
    groups: list[list[int]] = []
    for size in sizes:
        seed = int(np.flatnonzero(unassigned)[0])
        group = [seed]
        unassigned[seed] = False
        gain = affinity[seed].astype(np.float64)
        while len(group) < size:
            masked = np.where(unassigned, gain, -np.inf)
            nxt = int(np.argmax(masked))  # first maximum -> lowest index
            group.append(nxt)
            unassigned[nxt] = False
            gain = gain + affinity[nxt]
        groups.append(group)
    return groups


def random_groups(num_source: int, sizes: list[int], seed: int = 0) -> list[list[int]]:
    """Baseline: arbitrary merging by a seeded permutation."""
    perm = np.random.default_rng(seed).permutation(num_source)
    cuts = np.cumsum(sizes)[:-1]
    return [sorted(int(e) for e in g) for g in np.split(perm, cuts)]


def load_balance_groups(loads: np.ndarray, sizes: list[int]) -> list[list[int]]:
    """Baseline: each group takes the heaviest remaining expert plus the lightest ones."""
    loads = np.asarray(loads, dtype=np.float64)
    order = list(np.lexsort((np.arange(len(loads)), -loads)))  # heavy first
    groups = []
    for size in sizes:
        group = [int(order.pop(0))]
        for _ in range(size - 1):
            group.append(int(order.pop()))
        groups.append(sorted(group))
    return groups


def mapping_matrix(groups: list[list[int]], num_source: int | None = None) -> np.ndarray:
    """Binary (E_S, E_T) map with ``M[i, j] = 1`` iff source ``i`` is in group ``j``."""
    num_source = sum(len(g) for g in groups) if num_source is None else num_source
    m = np.zeros((num_source, len(groups)), dtype=np.int64)
    for j, group in enumerate(groups):
        for i in group:
            if m[i].any():
                raise ValueError(f"source expert {i} appears in more than one group")
            m[i, j] = 1
    if not np.all(m.sum(axis=1) == 1):
        raise ValueError("every source expert must be mapped exactly once")
    return m


def fold_weights(w_s: np.ndarray, mapping: np.ndarray) -> np.ndarray:
    """``W_s @ M``: each target column is the sum of its group's source columns."""
    w_s = np.asarray(w_s, dtype=np.float64)
    mapping = np.asarray(mapping)
    if w_s.shape[1] != mapping.shape[0]:
        raise ValueError(f"W_s has {w_s.shape[1]} columns, mapping has {mapping.shape[0]} rows")
    # accumulate in ascending source order so the result does not depend on BLAS blocking
    mapping = mapping.astype(np.float64)
    out = np.zeros((w_s.shape[0], mapping.shape[1]))
    for i in range(mapping.shape[0]):
        out += w_s[:, i : i + 1] * mapping[i]
    return out


def fold_grouter(grouter: Grouter, mapping: np.ndarray) -> Grouter:
    """A frozen copy of ``grouter`` whose score layer targets ``mapping.shape[1]`` experts."""
    folded = fold_weights(grouter.params[SCORE_LAYER].data, mapping)
    params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in grouter.params.items()}
    params[SCORE_LAYER] = Tensor(folded, requires_grad=True, name=SCORE_LAYER)
    out = Grouter(replace(grouter.config, num_experts=mapping.shape[1]), params=params)
    return freeze(out)


def save_mapping(path: str | Path, mapping: np.ndarray) -> None:
    src, dst = np.nonzero(mapping)
    lines = ["# source_expert target_expert"] + [f"{s} {t}" for s, t in zip(src, dst)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mapping(path: str | Path, num_target: int | None = None) -> np.ndarray:
    pairs = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        s, t = line.split()
        pairs.append((int(s), int(t)))
    if not pairs:
        raise ValueError(f"{path}: empty mapping")
    src = np.array([p[0] for p in pairs])
    dst = np.array([p[1] for p in pairs])
    num_source = src.max() + 1
    num_target = dst.max() + 1 if num_target is None else num_target
    if sorted(src) != list(range(num_source)):
        raise ValueError(f"{path}: every source expert must appear exactly once")
    m = np.zeros((num_source, num_target), dtype=np.int64)
    m[src, dst] = 1
    return m
