"""Preemptive routing for Mixture-of-Experts training at desk scale.

A frozen router network distilled from a converged source model supplies
every routing decision of a target model.  The package covers the toy MoE,
router distillation, expert folding and tuning, routing caches, offline
expert-parallel planning, a dispatch-volume simulator and the diagnostics
used to compare against learned routing.
"""

from .autodiff import Tensor, backward, no_grad
from .cache import RouteCache, build_cache, replay
from .corpus import Corpus, CorpusSpec, make_corpus
from .grouter import Grouter, GrouterConfig, distill, expert_tune, freeze, grouter_forward, shared_route
from .moe import MoeConfig, MoeModel, RoutingDecision, aux_loss, maxvio_global, route, z_loss
from .training import TrainConfig, train_lm

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "CorpusSpec",
    "Grouter",
    "GrouterConfig",
    "MoeConfig",
    "MoeModel",
    "RouteCache",
    "RoutingDecision",
    "Tensor",
    "TrainConfig",
    "aux_loss",
    "backward",
    "build_cache",
    "distill",
    "expert_tune",
    "freeze",
    "grouter_forward",
    "make_corpus",
    "maxvio_global",
    "no_grad",
    "replay",
    "route",
    "shared_route",
    "train_lm",
    "z_loss",
]
