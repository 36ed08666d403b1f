"""Top-k routing on a toy score vector, then a small MoE trained on the synthetic corpus."""

import numpy as np

from preroute import CorpusSpec, MoeConfig, TrainConfig, make_corpus, maxvio_global, route, train_lm

dec = route(np.array([[0.1, 2.0, 1.6, -1.0]]), k=2)
print("selected experts", dec.indices[0], "gates", np.round(dec.weights[0], 4))

corpus = make_corpus(CorpusSpec(seq_len=16), 512, seed=0)
cfg = MoeConfig(num_experts=8, top_k=2, seq_len=16)
for arm, mode, aux in (("learned + aux loss", "learned", 0.01), ("learned, no aux", "learned", 0.0)):
    res = train_lm(cfg, corpus, mode, 300, seed=0, train=TrainConfig(aux_coeff=aux, checkpoint_every=0))
    print(f"{arm:20s} loss {res.log[0].loss:.3f} -> {res.log[-1].loss:.3f}   cumulative MaxVio {res.log[-1].maxvio:.3f}")
print("MaxVio of loads [4, 2, 2, 0]:", maxvio_global([4, 2, 2, 0]))
