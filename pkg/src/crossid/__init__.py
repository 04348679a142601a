"""Self-supervised identity representation learning from cross-frame
matching, with oracle-backed verification, at desk scale."""

from .core import (
    AssociationMatrix,
    FeatureMatrix,
    LossConfig,
    Modulation,
    NegativeSelection,
    cosine_cost,
    derive_seed,
    l2_normalize,
    make_rng,
)
from .data import SyntheticDataset, WorldConfig, generate_world, load_dataset, save_dataset
from .encoder import Encoder
from .evaluation import EvalReport, RetrievalSplit, build_retrieval_split, evaluate
from .matching import Matching, brute_force_assignment, mine_positive_pairs, solve_assignment
from .memqueue import NegativeQueue
from .trainer import Objective, TrainConfig, TrainResult, train

__all__ = [
    "AssociationMatrix",
    "Encoder",
    "EvalReport",
    "FeatureMatrix",
    "LossConfig",
    "Matching",
    "Modulation",
    "NegativeQueue",
    "NegativeSelection",
    "Objective",
    "RetrievalSplit",
    "SyntheticDataset",
    "TrainConfig",
    "TrainResult",
    "WorldConfig",
    "brute_force_assignment",
    "build_retrieval_split",
    "cosine_cost",
    "derive_seed",
    "evaluate",
    "generate_world",
    "l2_normalize",
    "load_dataset",
    "make_rng",
    "mine_positive_pairs",
    "save_dataset",
    "solve_assignment",
    "train",
]
