"""Knowledge-graph completion with factorized semantic embeddings,
gated relation refinement and query-guided subgraph propagation."""

from .config import TrainConfig
from .embeddings import CpEmbeddings, init_embeddings, n3_penalty, phi, phi_all_tails
from .model import Model
from .propagation import PropagationTrace, run_propagation
from .store import (
    AugmentedRelationScheme,
    TripleStore,
    augment,
    generate_synthetic,
    kfold_split,
    load_dataset,
    load_triples,
)
from .training import EvalReport, evaluate, filtered_rank, train

__all__ = [
    "AugmentedRelationScheme",
    "CpEmbeddings",
    "EvalReport",
    "Model",
    "PropagationTrace",
    "TrainConfig",
    "TripleStore",
    "augment",
    "evaluate",
    "filtered_rank",
    "generate_synthetic",
    "init_embeddings",
    "kfold_split",
    "load_dataset",
    "load_triples",
    "n3_penalty",
    "phi",
    "phi_all_tails",
    "run_propagation",
    "train",
]
