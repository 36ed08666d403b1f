"""Pre-compute routing into a cache file and replay it without running the grouter."""

import tempfile
from pathlib import Path

import numpy as np

from preroute import CorpusSpec, Grouter, GrouterConfig, build_cache, freeze, make_corpus, replay, shared_route
from preroute import cache

g = freeze(Grouter(GrouterConfig(num_experts=8, d_model=32, num_heads=2, ffn_hidden=64), seed=0))
corpus = make_corpus(CorpusSpec(seq_len=16), 100, seed=0)

c = build_cache(g, corpus.inputs, k=2)
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "routes.grtc"
    c.save(path)
    size = path.stat().st_size
    back = cache.load(path)
print(f"{back.token_count} tokens, {back.header.bytes_per_token} bytes/token, file {size} bytes (24-byte header)")
print(f"a grouter forward costs about {g.config.flops_per_token(16)} flops/token")

offsets = np.arange(16, 20)  # tokens 0-3 of sequence 1
dec = replay(back, offsets)
live = shared_route(g, corpus.inputs[1:2], 2)
print("replayed experts", dec.indices.tolist())
print("live experts    ", live.indices[:4].tolist())
print("max gate difference from bf16 storage", np.abs(dec.weights - live.weights[:4]).max().round(5))
