"""Hierarchical contextual spoken language understanding."""
from .corpus import Dialogue, DialogueAct, Turn, Vocab, load_dataset, load_dialogues
from .estimator import ContextualSLU
from .evaluation import evaluate_records, mcnemar, mcnemar_from_counts
from .model import ModelConfig, SLUNetwork, build_network
from .training import TrainConfig, Trainer, grid_search, train

__version__ = "0.1.0"

__all__ = [
    "ContextualSLU", "Dialogue", "DialogueAct", "ModelConfig", "SLUNetwork", "TrainConfig", "Trainer",
    "Turn", "Vocab", "build_network", "evaluate_records", "grid_search", "load_dataset", "load_dialogues",
    "mcnemar", "mcnemar_from_counts", "train",
]
