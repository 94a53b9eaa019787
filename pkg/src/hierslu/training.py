"""Joint multi-task loss, the training loop, checkpoints and grid search."""
from __future__ import annotations

import itertools
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Dialogue, Vocab, dropout_schedule, value_dropout
from .evaluation import frame_accuracy, frames_from_predictions
from .model import ModelConfig, SLUNetwork, TurnOutput, build_network, decode, encode_dialogue

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hierslu-checkpoint"
CHECKPOINT_VERSION = 1

# independent random streams derived from the single seed
_INIT_STREAM, _STEP_STREAM = 0, 1


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 15000
    batch_size: int = 10
    seed: int = 0
    eval_every: int = 500

    def validate(self) -> "TrainConfig":
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 0:
            raise ValueError(f"eval_every must be >= 0, got {self.eval_every}")
        return self


def joint_loss(outputs: Sequence[TurnOutput], turns) -> ad.Node:
    """Intent softmax CE + summed act sigmoid CE + summed tag softmax CE, over all turns.

    Gold labels outside the vocabulary (id -1) contribute nothing.
    """
    terms = []
    for out, turn in zip(outputs, turns, strict=True):
        if turn.intent >= 0:
            terms.append(ad.softmax_cross_entropy(out.intent_logits, turn.intent))
        terms.append(ad.sigmoid_cross_entropy(out.act_logits, turn.acts))
        tags = np.asarray(turn.tags)
        if tags.shape[0] != out.tag_logits.shape[0]:
            raise ad.ShapeError("joint_loss(tags)", out.tag_logits.shape, tags.shape)
        valid = tags >= 0
        if valid.all():
            terms.append(ad.softmax_cross_entropy(out.tag_logits, tags))
        elif valid.any():
            rows = np.flatnonzero(valid)
            terms.append(ad.softmax_cross_entropy(ad.take(out.tag_logits, rows), tags[rows]))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss


def predict_frames(network: SLUNetwork, vocab: Vocab, dialogues: Sequence[Dialogue],
                   threshold: Optional[float] = None, encoded=None):
    """Decoded frames per dialogue, per turn."""
    threshold = network.config.act_threshold if threshold is None else threshold
    frames = []
    with ad.no_grad():
        for i, dialogue in enumerate(dialogues):
            turns = encoded[i] if encoded is not None else encode_dialogue(dialogue, vocab, network.config)
            outs = network.forward_dialogue(turns)
            frames.append([decode(o, vocab, threshold) for o in outs])
    return frames


class Trainer:
    """Owns a network, its optimizer state and the step counter."""

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig, vocab: Vocab,
                 train_dialogues: Sequence[Dialogue], val_dialogues: Optional[Sequence[Dialogue]] = None):
        self.model_config = model_config.validate()
        self.train_config = train_config.validate()
        self.vocab = vocab
        if not train_dialogues:
            raise ValueError("no training dialogues")
        self.network = build_network(self.model_config, vocab,
                                     np.random.default_rng([train_config.seed, _INIT_STREAM]))
        self.params = self.network.params
        self.optimizer = ad.Adam(lr=self.model_config.learning_rate)
        self.step = 0
        self.history: list[dict] = []
        self.best_score = -math.inf
        self.best_step = -1
        self.best_params: Optional[dict] = None
        self.train_dialogues = list(train_dialogues)
        self.val_dialogues = list(val_dialogues) if val_dialogues else None
        self._train_enc = [encode_dialogue(d, vocab, self.model_config) for d in self.train_dialogues]
        self._val_enc = ([encode_dialogue(d, vocab, self.model_config) for d in self.val_dialogues]
                         if self.val_dialogues else None)

    def dialogue_loss(self, turns, token_ids=None) -> tuple[ad.Node, ad.Tape]:
        with ad.Tape() as tape:
            outputs = self.network.forward_dialogue(turns, token_ids)
            loss = joint_loss(outputs, turns)
        return loss, tape

    def train_step(self) -> float:
        cfg = self.train_config
        rng = np.random.default_rng([cfg.seed, _STEP_STREAM, self.step])
        batch = rng.integers(0, len(self._train_enc), size=cfg.batch_size)
        p = dropout_schedule(self.step, cfg.steps, self.model_config.max_value_dropout)
        ad.zero_grads(self.params.values())
        total = 0.0
        for i in batch:
            turns = self._train_enc[i]
            ids = [value_dropout(t.token_ids, t.spans, p, rng) for t in turns]
            loss, tape = self.dialogue_loss(turns, ids)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at step {self.step} (lr={self.model_config.learning_rate}, "
                    f"config={self.model_config.to_dict()})")
            ad.backward(loss, tape)
            total += value
        self.optimizer.step(self.params)
        self.step += 1
        return total

    def evaluate(self) -> float:
        """Frame accuracy on the validation set (training set when none is given)."""
        dialogues = self.val_dialogues or self.train_dialogues
        encoded = self._val_enc if self.val_dialogues else self._train_enc
        frames = predict_frames(self.network, self.vocab, dialogues, encoded=encoded)
        preds, golds = frames_from_predictions(dialogues, frames)
        return frame_accuracy(preds, golds)

    def _record_eval(self, loss: Optional[float]) -> None:
        score = self.evaluate()
        self.history.append({"step": self.step, "loss": loss, "val_frame_accuracy": score})
        if score > self.best_score:
            self.best_score, self.best_step = score, self.step
            self.best_params = {k: v.copy() for k, v in self.params.arrays().items()}
        logger.info("step %d loss %s val frame acc %.4f", self.step, loss, score)

    def run(self, until: Optional[int] = None,
            on_eval: Optional[Callable[["Trainer"], None]] = None) -> "Trainer":
        """Train up to step ``until`` (default: configured steps), evaluating periodically."""
        cfg = self.train_config
        until = cfg.steps if until is None else min(until, cfg.steps)
        loss = None
        if self.step == 0 and not self.history:
            self._record_eval(None)
            if on_eval:
                on_eval(self)
        while self.step < until:
            loss = self.train_step()
            if (cfg.eval_every and self.step % cfg.eval_every == 0) or self.step == cfg.steps:
                self._record_eval(loss)
                if on_eval:
                    on_eval(self)
            else:
                self.history.append({"step": self.step, "loss": loss})
        return self

    def loss_curve(self) -> list[float]:
        return [h["loss"] for h in self.history if h.get("loss") is not None]

    # -- checkpoints -----------------------------------------------------------

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": self.step,
            "adam": self.optimizer.state_dict(),
            "model_config": self.model_config.to_dict(),
            "train_config": asdict(self.train_config),
            "vocab": self.vocab.to_dict(),
            "vocab_hash": self.vocab.fingerprint(),
            "best_val_frame_accuracy": None if self.best_step < 0 else self.best_score,
            "best_step": self.best_step,
            "history": self.history,
        }

    def save_checkpoint(self, path) -> Path:
        """Write the full training state (resumable) to directory ``path``."""
        arrays = {f"param/{k}": v for k, v in self.params.arrays().items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.optimizer.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.optimizer.v.items()})
        if self.best_params is not None:
            arrays.update({f"best/{k}": v for k, v in self.best_params.items()})
        return write_checkpoint(path, self.state(), arrays)

    def save_best(self, path) -> Path:
        params = self.best_params if self.best_params is not None else self.params.arrays()
        state = self.state()
        state["step"] = self.best_step if self.best_step >= 0 else self.step
        return write_checkpoint(path, state, {f"param/{k}": v for k, v in params.items()})

    @classmethod
    def from_checkpoint(cls, path, train_dialogues, val_dialogues=None) -> "Trainer":
        state, arrays = read_checkpoint(path)
        trainer = cls(ModelConfig.from_dict(state["model_config"]), TrainConfig(**state["train_config"]),
                      Vocab.from_dict(state["vocab"]), train_dialogues, val_dialogues)
        trainer.params.load_arrays(_strip(arrays, "param/"))
        adam = state["adam"]
        trainer.optimizer = ad.Adam(adam["lr"], adam["beta1"], adam["beta2"], adam["epsilon"])
        trainer.optimizer.t = adam["t"]
        trainer.optimizer.m = {k: v.copy() for k, v in _strip(arrays, "adam_m/").items()}
        trainer.optimizer.v = {k: v.copy() for k, v in _strip(arrays, "adam_v/").items()}
        trainer.step = state["step"]
        trainer.history = state["history"]
        trainer.best_step = state["best_step"]
        if state["best_val_frame_accuracy"] is not None:
            trainer.best_score = state["best_val_frame_accuracy"]
        best = _strip(arrays, "best/")
        trainer.best_params = {k: v.copy() for k, v in best.items()} or None
        return trainer


def _strip(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def write_checkpoint(path, state: dict, arrays: dict) -> Path:
    """``state.json`` plus ``arrays.npz``; the archive has fixed timestamps so
    identical contents give identical bytes."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "state.json").write_text(json.dumps(state, sort_keys=True, indent=1))
    with zipfile.ZipFile(path / "arrays.npz", "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_DATE)
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arrays[name]), allow_pickle=False)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    state = json.loads((path / "state.json").read_text())
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} directory")
    with np.load(path / "arrays.npz", allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    return state, arrays


def load_network(path) -> tuple[SLUNetwork, Vocab, dict]:
    """Rebuild a network for inference from a checkpoint directory."""
    state, arrays = read_checkpoint(path)
    vocab = Vocab.from_dict(state["vocab"])
    config = ModelConfig.from_dict(state["model_config"])
    network = build_network(config, vocab, np.random.default_rng(0))
    network.params.load_arrays(_strip(arrays, "param/"))
    return network, vocab, state


def train(model_config: ModelConfig, train_config: TrainConfig, vocab: Vocab,
          train_dialogues, val_dialogues=None, out_dir=None) -> Trainer:
    """Train to completion; with ``out_dir`` write ``out_dir/{best,last}`` and ``metrics.jsonl``."""
    trainer = Trainer(model_config, train_config, vocab, train_dialogues, val_dialogues)

    def checkpoint(t: Trainer):
        if out_dir is None:
            return
        out = Path(out_dir)
        t.save_checkpoint(out / "last")
        t.save_best(out / "best")
        with open(out / "metrics.jsonl", "w") as fh:
            for rec in t.history:
                if "val_frame_accuracy" in rec:
                    fh.write(json.dumps(rec) + "\n")

    trainer.run(on_eval=checkpoint)
    return trainer


# ---------------------------------------------------------------------------
# grid search

def expand_grid(grid: dict) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def trial_name(overrides: dict) -> str:
    return "_".join(f"{k}={overrides[k]}" for k in overrides) or "default"


def _run_trial(base: ModelConfig, train_config: TrainConfig, vocab, train_dialogues, val_dialogues,
               overrides: dict, out_dir) -> dict:
    config = replace(base, **overrides)
    name = trial_name(overrides)
    trainer = train(config, train_config, vocab, train_dialogues, val_dialogues,
                    None if out_dir is None else Path(out_dir) / name)
    return {"trial": name, "overrides": overrides, "best_val_frame_accuracy": trainer.best_score,
            "best_step": trainer.best_step,
            "final_loss": (trainer.loss_curve() or [None])[-1]}


def grid_search(base: ModelConfig, train_config: TrainConfig, vocab: Vocab, grid: dict,
                train_dialogues, val_dialogues=None, out_dir=None, n_jobs: int = 1) -> list[dict]:
    """Train every grid combination; return trials ranked by validation frame accuracy.

    Ties keep grid order. With ``n_jobs > 1`` trials run in separate processes.
    """
    trials = expand_grid(grid)
    for overrides in trials:
        unknown = set(overrides) - set(ModelConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown grid keys {sorted(unknown)}")
        replace(base, **overrides).validate()
    args = [(base, train_config, vocab, train_dialogues, val_dialogues, o, out_dir) for o in trials]
    if n_jobs == 1:
        results = [_run_trial(*a) for a in args]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(delayed(_run_trial)(*a) for a in args)
    ranked = sorted(enumerate(results), key=lambda ir: (-ir[1]["best_val_frame_accuracy"], ir[0]))
    out = []
    for rank, (_, r) in enumerate(ranked, 1):
        out.append({"rank": rank, **r})
    return out
