"""Expert-parallel dispatch volume for a placement plan and its baselines.

A token living on partition ``p`` sends one message to every other partition
that hosts at least one of its selected experts.  Baselines keep the plan's
expert groups and only change where sequences are placed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .cache import CacheHeader, RouteCache, f32_to_bf16, index_width_for
from .ep import PlacementPlan, expert_owner, token_partitions

DEFAULT_HIDDEN = 32


def default_payload_bytes(hidden: int = DEFAULT_HIDDEN) -> int:
    """One bf16 activation vector per token-message."""
    return 2 * hidden


def remote_messages(seq_indices: np.ndarray, owner: np.ndarray, num_partitions: int, partition: int) -> int:
    """Sum over tokens of the number of partitions other than ``partition`` they must reach."""
    hit = token_partitions(seq_indices, owner, num_partitions)
    hit[:, partition] = False
    return int(hit.sum())


def messages_per_partition(seq_indices: np.ndarray, owner: np.ndarray, num_partitions: int, assignment) -> np.ndarray:
    totals = np.zeros(num_partitions, dtype=np.int64)
    for seq, p in zip(np.asarray(seq_indices), assignment):
        totals[p] += remote_messages(seq, owner, num_partitions, int(p))
    return totals


def random_assignment(num_sequences: int, num_partitions: int, seed: int = 0) -> np.ndarray:
    # salted so a seed shared with trace generation cannot reproduce the domain labels
    return np.random.default_rng([seed, 0xC0FFEE]).integers(0, num_partitions, size=num_sequences)


def round_robin_assignment(num_sequences: int, num_partitions: int) -> np.ndarray:
    return np.arange(num_sequences) % num_partitions


@dataclass
class CommReport:
    num_partitions: int
    num_sequences: int
    num_tokens: int
    payload_bytes: int
    per_partition: list[int]
    total: int
    bytes: int
    random_total: int
    round_robin_total: int
    savings_vs_random: float
    savings_vs_round_robin: float
    population: list[int]

    @property
    def remote_per_token(self) -> float:
        return self.total / self.num_tokens if self.num_tokens else 0.0

    @property
    def random_per_token(self) -> float:
        return self.random_total / self.num_tokens if self.num_tokens else 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    CSV_COLUMNS = (
        "num_partitions", "num_sequences", "num_tokens", "payload_bytes", "total", "bytes",
        "random_total", "round_robin_total", "savings_vs_random", "savings_vs_round_robin",
    )

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf).writerow([getattr(self, c) for c in self.CSV_COLUMNS])
        return buf.getvalue()


def savings(optimized: int, baseline: int) -> float:
    return 1.0 - optimized / baseline if baseline else 0.0


def simulate(seq_indices: np.ndarray, plan: PlacementPlan, payload_bytes: int | None = None, seed: int = 0) -> CommReport:
    """Remote-message counts for ``plan`` against seeded-random and round-robin placement."""
    seq_indices = np.asarray(seq_indices)
    n_seq = len(seq_indices)
    if len(plan.assignment) != n_seq:
        raise ValueError(f"plan places {len(plan.assignment)} sequences, trace has {n_seq}")
    payload = default_payload_bytes() if payload_bytes is None else payload_bytes
    n_p = plan.num_partitions
    owner = expert_owner(plan.expert_groups, plan.num_experts)
    per = messages_per_partition(seq_indices, owner, n_p, plan.assignment)
    rand = int(messages_per_partition(seq_indices, owner, n_p, random_assignment(n_seq, n_p, seed)).sum())
    rr = int(messages_per_partition(seq_indices, owner, n_p, round_robin_assignment(n_seq, n_p)).sum())
    total = int(per.sum())
    return CommReport(
        num_partitions=n_p,
        num_sequences=n_seq,
        num_tokens=int(seq_indices.shape[0] * seq_indices.shape[1]) if n_seq else 0,
        payload_bytes=payload,
        per_partition=per.tolist(),
        total=total,
        bytes=total * payload,
        random_total=rand,
        round_robin_total=rr,
        savings_vs_random=savings(total, rand),
        savings_vs_round_robin=savings(total, rr),
        population=np.bincount(plan.assignment, minlength=n_p).tolist(),
    )


def domain_expert_blocks(num_domains: int, num_experts: int) -> list[np.ndarray]:
    return np.array_split(np.arange(num_experts), num_domains)


def synth_trace(
    num_domains: int,
    skew: float,
    num_sequences: int,
    seq_len: int,
    num_experts: int,
    k: int,
    seed: int = 0,
) -> tuple[RouteCache, np.ndarray]:
    """Clustered routing trace; returns the cache and each sequence's domain.

    Domains own disjoint contiguous expert blocks.  Each token routes inside its
    sequence's block with probability ``skew`` and uniformly over all experts
    otherwise.
    """
    if not 0.0 <= skew <= 1.0:
        raise ValueError("skew must lie in [0, 1]")
    blocks = domain_expert_blocks(num_domains, num_experts)
    if min(len(b) for b in blocks) < k:
        raise ValueError("every domain needs at least k experts")
    rng = np.random.default_rng(seed)
    domains = rng.integers(0, num_domains, size=num_sequences)
    n_tok = num_sequences * seq_len
    local = rng.random(n_tok) < skew
    token_dom = np.repeat(domains, seq_len)
    # k distinct experts per token: the k smallest random keys among allowed experts
    allowed = np.ones((n_tok, num_experts), dtype=bool)
    in_block = np.zeros((num_domains, num_experts), dtype=bool)
    for d, b in enumerate(blocks):
        in_block[d, b] = True
    allowed[local] = in_block[token_dom[local]]
    keys = np.where(allowed, rng.random((n_tok, num_experts)), np.inf)
    idx = np.sort(np.argsort(keys, axis=1, kind="stable")[:, :k], axis=1).astype(np.int64)
    scores = -np.sort(-rng.standard_normal((n_tok, k)), axis=1)
    header = CacheHeader(num_experts, k, index_width_for(num_experts), n_tok, seq_len)
    header.validate()
    return RouteCache(header, idx, f32_to_bf16(scores)), domains
