"""Routing stability and gradient interference: learned router against a frozen grouter."""

import numpy as np

from preroute import CorpusSpec, Grouter, GrouterConfig, MoeConfig, Tensor, TrainConfig, freeze, make_corpus, train_lm
from preroute import diagnostics as dg
from preroute.grouter import LiveGrouterRouter

corpus = make_corpus(CorpusSpec(seq_len=16), 512, seed=0)
probe = corpus.tokens[:8]
cfg = MoeConfig(num_experts=8, top_k=2, seq_len=16)
tc = TrainConfig(checkpoint_every=100)

learned = train_lm(cfg, corpus, "learned", 400, seed=0, train=tc)
g = freeze(Grouter(GrouterConfig(num_experts=8, d_model=32, num_heads=2, ffn_hidden=64), seed=0))
router = LiveGrouterRouter(g, 2)
fixed = train_lm(cfg, corpus, "frozen-grouter", 400, seed=0, train=tc, router=router)

snaps = [
    dg.model_snapshot(learned.model.with_params({k: Tensor(v) for k, v in c.arrays.items()}), probe[:, :-1], c.step)
    for c in learned.checkpoints
]
print("learned router, exact-match rate between checkpoints:")
print(np.round(dg.pairwise(snaps, dg.exact_match_rate), 2))

print("E_opt learned", round(dg.e_opt_series(learned.model, learned.checkpoints, probe).sum(), 4),
      "frozen grouter", dg.e_opt_series(fixed.model, fixed.checkpoints, probe, "frozen-grouter", router).sum())
for name, res in (("learned", learned), ("frozen grouter", fixed)):
    print(f"{name:15s} max grad-norm CV (window 100) {dg.max_cv(res.grad_norms(), 100):.3f}")

a = dg.grad_alignment([np.array([1.0, 0.5]), np.array([-1.0, -0.5])])
print("opposed gradients: cross term", a.cross_term, "net norm^2", a.norm_sq, "stagnant", a.stagnant)
