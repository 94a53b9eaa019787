"""scikit-learn style front end for training and applying the SLU network."""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Optional

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import Vocab
from .evaluation import (MetricsReport, evaluate_records, frame_accuracy, frames_from_predictions,
                         prediction_records)
from .model import ModelConfig
from .training import (CHECKPOINT_FORMAT, CHECKPOINT_VERSION, TrainConfig, load_network, predict_frames,
                       train, write_checkpoint)
from .validation import check_dialogues

_MODEL_KEYS = tuple(ModelConfig.__dataclass_fields__)
_TRAIN_KEYS = tuple(TrainConfig.__dataclass_fields__)


class ContextualSLU(BaseEstimator):
    """Joint intent, dialogue-act and slot prediction with dialogue context.

    ``X`` is a sequence of :class:`~hierslu.corpus.Dialogue`; gold labels are
    read from the turns, so ``y`` is ignored. ``act_position`` and
    ``dialogue_position`` default to ``"auto"``, the best injection sites for
    the chosen ``variant``.

    After :meth:`fit` the network holds the parameters with the best frame
    accuracy on ``X_val`` (or on ``X`` when no validation set is given).
    """

    def __init__(self, variant="ActOnly", embedding_dim=128, act_position="auto",
                 dialogue_position="auto", act_threshold=0.5, learning_rate=1e-3,
                 max_value_dropout=0.3, steps=15000, batch_size=10, eval_every=500, seed=0,
                 slot_embedding_dim=32, act_dim=None, cumulative_slot_set=False,
                 share_system_embeddings=True):
        self.variant = variant
        self.embedding_dim = embedding_dim
        self.act_position = act_position
        self.dialogue_position = dialogue_position
        self.act_threshold = act_threshold
        self.learning_rate = learning_rate
        self.max_value_dropout = max_value_dropout
        self.steps = steps
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.seed = seed
        self.slot_embedding_dim = slot_embedding_dim
        self.act_dim = act_dim
        self.cumulative_slot_set = cumulative_slot_set
        self.share_system_embeddings = share_system_embeddings

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_KEYS})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _TRAIN_KEYS})

    def fit(self, X, y=None, X_val=None, vocab: Optional[Vocab] = None, checkpoint_dir=None):
        X = check_dialogues(X)
        X_val = check_dialogues(X_val, "X_val") if X_val is not None else None
        config = self.model_config().validate()
        self.vocab_ = vocab if vocab is not None else Vocab.build(X)
        trainer = train(config, self.train_config().validate(), self.vocab_, X, X_val, checkpoint_dir)
        if trainer.best_params is not None:
            trainer.params.load_arrays(trainer.best_params)
        self.network_ = trainer.network
        self.history_ = trainer.history
        self.best_score_ = trainer.best_score
        self.best_step_ = trainer.best_step
        self.n_steps_ = trainer.step
        self.trainer_ = trainer
        return self

    def predict(self, X):
        """Decoded frames: one list of :class:`~hierslu.model.FramePrediction` per dialogue."""
        check_is_fitted(self, "network_")
        X = check_dialogues(X)
        return predict_frames(self.network_, self.vocab_, X, self.act_threshold)

    def predict_records(self, X):
        X = check_dialogues(X)
        return prediction_records(X, self.predict(X))

    def evaluate(self, X, act_average: str = "micro") -> MetricsReport:
        return evaluate_records(self.predict_records(X), act_average)

    def score(self, X, y=None) -> float:
        """Frame accuracy on ``X``."""
        X = check_dialogues(X)
        preds, golds = frames_from_predictions(X, self.predict(X))
        return frame_accuracy(preds, golds)

    def save(self, path) -> Path:
        """Write the fitted parameters as an inference checkpoint directory."""
        check_is_fitted(self, "network_")
        state = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": self.n_steps_,
            "model_config": self.network_.config.to_dict(),
            "train_config": asdict(self.train_config()),
            "vocab": self.vocab_.to_dict(),
            "vocab_hash": self.vocab_.fingerprint(),
            "best_val_frame_accuracy": self.best_score_,
            "best_step": self.best_step_,
            "history": self.history_,
            "estimator_params": self.get_params(),
        }
        arrays = {f"param/{k}": v for k, v in self.network_.params.arrays().items()}
        return write_checkpoint(path, state, arrays)

    @classmethod
    def load(cls, path) -> "ContextualSLU":
        """Rebuild a fitted estimator from a checkpoint directory (``best`` or ``last``)."""
        network, vocab, state = load_network(path)
        params = state.get("estimator_params") or {
            **{k: v for k, v in state["model_config"].items() if k in _MODEL_KEYS},
            **{k: v for k, v in state["train_config"].items() if k in _TRAIN_KEYS}}
        est = cls(**params)
        est.network_ = network
        est.vocab_ = vocab
        est.history_ = state.get("history", [])
        est.best_score_ = state.get("best_val_frame_accuracy")
        est.best_step_ = state.get("best_step")
        est.n_steps_ = state.get("step")
        return est

    def describe(self) -> dict:
        return {"model": asdict(self.model_config().resolved()), "train": asdict(self.train_config())}
