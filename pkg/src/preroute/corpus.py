"""Synthetic multi-domain token corpus.

Each domain owns a block of the vocabulary plus a few shared tokens and emits
sequences from its own sparse first-order Markov chain.  Shared tokens have
domain-specific successors, so routing them well needs context.  The grammar
depends only on ``grammar_seed``; the domain mixture and sampling seed vary
between the source and target distributions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 64
    num_domains: int = 4
    seq_len: int = 32
    shared_tokens: int = 4
    branching: int = 2
    shared_prob: float = 0.1
    grammar_seed: int = 0

    def __post_init__(self) -> None:
        if self.num_domains < 1:
            raise ValueError("need at least one domain")
        if (self.vocab_size - self.shared_tokens) // self.num_domains < self.branching:
            raise ValueError("vocabulary too small for the requested domains")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Corpus:
    """``tokens`` (N, seq_len + 1) with per-sequence ``domains`` (N,)."""

    tokens: np.ndarray
    domains: np.ndarray

    @property
    def num_sequences(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1] - 1

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.tokens[:, 1:]

    def subset(self, rows) -> Corpus:
        return Corpus(self.tokens[rows], self.domains[rows])

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, tokens=self.tokens.astype("<i4"), domains=self.domains.astype("<i4"))

    @classmethod
    def load(cls, path: str | Path) -> Corpus:
        with np.load(path) as z:
            return cls(z["tokens"].astype(np.int64), z["domains"].astype(np.int64))


class Grammar:
    def __init__(self, spec: CorpusSpec) -> None:
        self.spec = spec
        rng = np.random.default_rng(spec.grammar_seed)
        v, s, d = spec.vocab_size, spec.shared_tokens, spec.num_domains
        block = (v - s) // d
        self.shared = np.arange(v - s, v)
        self.blocks = [np.arange(i * block, (i + 1) * block) for i in range(d)]
        # transition[d][tok] -> (successors, probs)
        self.transitions: list[dict[int, tuple[np.ndarray, np.ndarray]]] = []
        for dom in range(d):
            own = self.blocks[dom]
            table = {}
            for tok in np.concatenate([own, self.shared]):
                succ = rng.choice(own, size=spec.branching, replace=False)
                probs = rng.dirichlet(np.full(spec.branching, 2.0)) * (1 - spec.shared_prob)
                if s:
                    succ = np.append(succ, rng.choice(self.shared))
                    probs = np.append(probs, spec.shared_prob)
                else:
                    probs = probs / probs.sum()
                table[int(tok)] = (succ, probs)
            self.transitions.append(table)

    def sample(self, domain: int, length: int, rng: np.random.Generator) -> np.ndarray:
        table = self.transitions[domain]
        out = np.empty(length, dtype=np.int64)
        tok = int(rng.choice(self.blocks[domain]))
        for i in range(length):
            out[i] = tok
            succ, probs = table[tok]
            tok = int(succ[np.searchsorted(np.cumsum(probs), rng.random() * probs.sum())])
        return out


def domain_counts(num_sequences: int, weights) -> np.ndarray:
    """Largest-remainder allocation of sequences to domains."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    raw = w * num_sequences
    counts = np.floor(raw).astype(np.int64)
    short = num_sequences - counts.sum()
    order = np.lexsort((np.arange(len(w)), -(raw - counts)))
    counts[order[:short]] += 1
    return counts


def skewed_weights(num_domains: int, heavy_domain: int = 0, factor: float = 8.0) -> np.ndarray:
    w = np.ones(num_domains)
    w[heavy_domain] = factor
    return w / w.sum()


def make_corpus(spec: CorpusSpec, num_sequences: int, weights=None, seed: int = 0) -> Corpus:
    grammar = Grammar(spec)
    weights = np.ones(spec.num_domains) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(weights) != spec.num_domains:
        raise ValueError("one weight per domain required")
    counts = domain_counts(num_sequences, weights)
    rng = np.random.default_rng(seed)
    domains = rng.permutation(np.repeat(np.arange(spec.num_domains), counts))
    tokens = np.stack([grammar.sample(int(d), spec.seq_len + 1, rng) for d in domains]) if num_sequences else np.zeros((0, spec.seq_len + 1), dtype=np.int64)
    return Corpus(tokens, domains.astype(np.int64))


def token_frequencies(corpus: Corpus, vocab_size: int) -> np.ndarray:
    return np.bincount(corpus.inputs.ravel(), minlength=vocab_size).astype(np.float64)
