"""Fold a 16-expert grouter to 8 experts by co-activation, then re-balance it on a skewed corpus."""

import numpy as np

from preroute import CorpusSpec, Grouter, GrouterConfig, expert_tune, freeze, make_corpus, shared_route
from preroute import folding
from preroute.corpus import skewed_weights
from preroute.grouter import SCORE_LAYER, TuneConfig, routing_maxvio

spec = CorpusSpec(seq_len=16)
g = freeze(Grouter(GrouterConfig(num_experts=16, d_model=32, num_heads=2, ffn_hidden=64), seed=3))
sample = make_corpus(spec, 256, seed=0)

idx = shared_route(g, sample.inputs, 2).indices
sizes = folding.group_sizes(16, 8)
groups = folding.greedy_merge(folding.coactivation_matrix(idx, 16), sizes)
print("group sizes", sizes)
print("groups", groups)
folded = folding.fold_grouter(g, folding.mapping_matrix(groups, 16))

target = make_corpus(spec, 1024, skewed_weights(4, 0, 8.0), seed=1)
held = make_corpus(spec, 128, skewed_weights(4, 0, 8.0), seed=2)
res = expert_tune(folded, target, 300, TuneConfig(k=2))
print(f"MaxVio on the skewed split: folded {routing_maxvio(folded, held, 2):.3f}, tuned {routing_maxvio(res.grouter, held, 2):.3f}")
print("encoder untouched:", folded.encoder_checksum() == res.grouter.encoder_checksum())
print("score layer moved by", np.abs(res.grouter.params[SCORE_LAYER].data - folded.params[SCORE_LAYER].data).max().round(4))
