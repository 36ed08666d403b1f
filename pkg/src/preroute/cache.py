"""Routing cache: grouter decisions computed once and replayed during training.

File layout, little-endian throughout::

    header  magic b"GRTC" | version u16 | E u32 | k u8 | index_width u8
            | token_count u64 | sequence_length u32            (24 bytes)
    body    per token: k expert indices (u8 or u16), then k bf16 scores

Scores are the raw selected logits.  Gating weights are re-derived at replay
time, so one cache serves either normalizer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grouter import Grouter, grouter_forward
from .moe import RoutingDecision, normalize_selected, route

MAGIC = b"GRTC"
VERSION = 1
HEADER = struct.Struct("<4sHIBBQI")
MAX_EXPERTS = 65536


class CacheFormatError(ValueError):
    pass


def f32_to_bf16(x) -> np.ndarray:
    """Upper 16 bits of the float32 encoding, rounded to nearest even."""
    bits = np.asarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    return rounded.astype(np.uint16)


def bf16_to_f32(bits) -> np.ndarray:
    wide = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    return wide.view(np.float32)


@dataclass(frozen=True)
class CacheHeader:
    num_experts: int
    k: int
    index_width: int
    token_count: int
    sequence_length: int
    version: int = VERSION

    @property
    def bytes_per_token(self) -> int:
        return self.k * (self.index_width + 2)

    @property
    def file_size(self) -> int:
        return HEADER.size + self.token_count * self.bytes_per_token

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.num_experts, self.k, self.index_width, self.token_count, self.sequence_length)

    def validate(self) -> None:
        if self.version != VERSION:
            raise CacheFormatError(f"unsupported cache version {self.version}")
        if not 1 <= self.num_experts <= MAX_EXPERTS:
            raise CacheFormatError(f"expert count {self.num_experts} outside [1, {MAX_EXPERTS}]")
        if not 1 <= self.k <= self.num_experts:
            raise CacheFormatError(f"k={self.k} invalid for E={self.num_experts}")
        if self.index_width not in (1, 2):
            raise CacheFormatError(f"index_width must be 1 or 2, got {self.index_width}")
        if self.index_width == 1 and self.num_experts > 256:
            raise CacheFormatError("index_width 1 cannot address more than 256 experts")
        if self.sequence_length == 0 and self.token_count:
            raise CacheFormatError("sequence_length 0 with a non-empty body")
        if self.sequence_length and self.token_count % self.sequence_length:
            raise CacheFormatError("token_count is not a multiple of sequence_length")

    def body_dtype(self) -> np.dtype:
        return np.dtype([("idx", f"<u{self.index_width}", (self.k,)), ("score", "<u2", (self.k,))])


def index_width_for(num_experts: int) -> int:
    if num_experts > MAX_EXPERTS:
        raise ValueError(f"cannot cache more than {MAX_EXPERTS} experts, got {num_experts}")
    return 1 if num_experts <= 256 else 2


@dataclass
class RouteCache:
    header: CacheHeader
    indices: np.ndarray  # (T, k) int64
    score_bits: np.ndarray  # (T, k) uint16, bf16 patterns

    @property
    def token_count(self) -> int:
        return self.header.token_count

    @property
    def num_sequences(self) -> int:
        L = self.header.sequence_length
        return self.token_count // L if L else 0

    def scores(self) -> np.ndarray:
        return bf16_to_f32(self.score_bits).astype(np.float64)

    def to_bytes(self) -> bytes:
        body = np.empty(self.token_count, dtype=self.header.body_dtype())
        body["idx"] = self.indices
        body["score"] = self.score_bits
        return self.header.pack() + body.tobytes()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def sequence_decisions(self, seq_id: int) -> np.ndarray:
        """(L, k) expert indices of one sequence."""
        L = self.header.sequence_length
        if not 0 <= seq_id < self.num_sequences:
            raise IndexError(f"sequence {seq_id} outside [0, {self.num_sequences})")
        return self.indices[seq_id * L : (seq_id + 1) * L]

    def per_sequence_indices(self) -> np.ndarray:
        """(S, L, k) view of all indices."""
        h = self.header
        return self.indices.reshape(self.num_sequences, h.sequence_length, h.k)


def read_header(blob: bytes) -> CacheHeader:
    if len(blob) < HEADER.size:
        raise CacheFormatError(f"file too short for a header ({len(blob)} < {HEADER.size} bytes)")
    magic, version, e, k, width, count, seq_len = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}")
    header = CacheHeader(e, k, width, count, seq_len, version)
    header.validate()
    return header


def from_bytes(blob: bytes) -> RouteCache:
    """Parse a cache; the header is checked against the blob size before the body is touched."""
    header = read_header(blob)
    if len(blob) != header.file_size:
        raise CacheFormatError(f"size {len(blob)} does not match header-implied {header.file_size}")
    body = np.frombuffer(blob, dtype=header.body_dtype(), offset=HEADER.size, count=header.token_count)
    indices = body["idx"].reshape(header.token_count, header.k).astype(np.int64)
    if indices.size and indices.max() >= header.num_experts:
        raise CacheFormatError("expert index outside the header's expert count")
    score_bits = body["score"].reshape(header.token_count, header.k).copy()
    return RouteCache(header, indices, score_bits)


def load(path: str | Path) -> RouteCache:
    return from_bytes(Path(path).read_bytes())


def build_cache(grouter: Grouter, tokens: np.ndarray, k: int, batch_size: int = 64) -> RouteCache:
    """Route every input sequence ``tokens`` (S, L) with the frozen grouter."""
    if not grouter.frozen:
        raise ValueError("routing cache requires a frozen grouter")
    num_experts = grouter.config.num_experts
    width = index_width_for(num_experts)
    tokens = np.asarray(tokens)
    num_seq, seq_len = tokens.shape
    idx_parts, bit_parts = [np.zeros((0, k), np.int64)], [np.zeros((0, k), np.uint16)]
    for start in range(0, num_seq, batch_size):
        scores = grouter_forward(grouter, tokens[start : start + batch_size]).reshape(-1, num_experts)
        dec = route(scores, k)
        idx_parts.append(dec.indices)
        bit_parts.append(f32_to_bf16(np.take_along_axis(scores, dec.indices, axis=-1)))
    header = CacheHeader(num_experts, k, width, num_seq * seq_len, seq_len)
    header.validate()
    return RouteCache(header, np.concatenate(idx_parts), np.concatenate(bit_parts))


def replay(cache: RouteCache, offsets, normalizer: str = "softmax") -> RoutingDecision:
    """Decisions of the tokens at ``offsets`` (sequence * L + position)."""
    offsets = np.asarray(offsets, dtype=np.int64).ravel()
    if offsets.size and (offsets.min() < 0 or offsets.max() >= cache.token_count):
        raise IndexError(f"token offset outside [0, {cache.token_count})")
    stored = bf16_to_f32(cache.score_bits[offsets]).astype(np.float64)
    return RoutingDecision(cache.indices[offsets], normalize_selected(stored, normalizer))


class CacheRouter:
    """Router provider that replays cached decisions instead of running the grouter."""

    def __init__(self, cache: RouteCache, normalizer: str = "softmax") -> None:
        self.cache = cache
        self.normalizer = normalizer

    def decide(self, seq_ids: np.ndarray, tokens: np.ndarray) -> RoutingDecision:
        L = self.cache.header.sequence_length
        if tokens.shape[1] != L:
            raise ValueError(f"batch length {tokens.shape[1]} != cached sequence length {L}")
        offsets = (np.asarray(seq_ids)[:, None] * L + np.arange(L)[None, :]).ravel()
        return replay(self.cache, offsets, self.normalizer)
