"""Train a small source MoE, then distill its first router into a standalone grouter."""

from preroute import (
    CorpusSpec, Grouter, GrouterConfig, MoeConfig, TrainConfig, distill, freeze, make_corpus, train_lm,
)
from preroute.grouter import DistillConfig, mean_distill_loss

corpus = make_corpus(CorpusSpec(seq_len=16), 512, seed=0)
valid = make_corpus(CorpusSpec(seq_len=16), 64, seed=1)
source = train_lm(MoeConfig(num_experts=8, top_k=2, seq_len=16), corpus, "learned", 400, seed=0,
                  train=TrainConfig(aux_coeff=0.001, checkpoint_every=0)).model

g = Grouter(GrouterConfig(num_experts=8, d_model=32, num_heads=2, ffn_hidden=64), seed=0)
print(f"held-out KL before distillation {mean_distill_loss(source, g, valid):.4f}")
res = distill(source, g, corpus, 800, DistillConfig(seed=0))
freeze(g)
print(f"training KL first 50 steps {sum(res.losses[:50]) / 50:.4f}, last 50 steps {sum(res.losses[-50:]) / 50:.4f}")
print(f"held-out KL after distillation  {mean_distill_loss(source, g, valid):.4f}")
