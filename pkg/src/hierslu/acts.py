"""Order-invariant encoding of the system dialogue acts of a turn.

Acts are split into those carrying a slot and those without. For every
slot mentioned, a binary act-type indicator is joined with a trainable slot
embedding and passed through a shared ReLU layer; the results are averaged
over the mentioned slots, joined with the slotless-act indicator, and passed
through a second ReLU layer. Slot values are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .cells import Dense, ParameterStore


class UnknownLabelError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass
class SystemActFeatures:
    """Binary act indicators; ``slot_order`` lists S_t by slot-vocabulary id."""

    a_slot: dict[int, np.ndarray]
    a_ns: np.ndarray
    slot_order: tuple[int, ...] = field(default=())

    @property
    def slots(self) -> frozenset:
        return frozenset(self.slot_order)

    def slot_matrix(self) -> np.ndarray:
        n = self.a_ns.shape[0]
        if not self.slot_order:
            return np.zeros((0, n))
        return np.stack([self.a_slot[s] for s in self.slot_order])


def featurize_acts(acts: Iterable, act_vocab, slot_vocab,
                   carried_slots: Optional[Iterable[str]] = None) -> SystemActFeatures:
    """Binary featurization of a list of :class:`~hierslu.corpus.DialogueAct`.

    ``act_vocab`` / ``slot_vocab`` are name -> id mappings (or name lists).
    ``carried_slots`` adds slots mentioned earlier in the dialogue to S_t
    with an all-zero act indicator (cumulative slot-set mode).
    """
    act_ids = act_vocab if isinstance(act_vocab, dict) else {a: i for i, a in enumerate(act_vocab)}
    slot_ids = slot_vocab if isinstance(slot_vocab, dict) else {s: i for i, s in enumerate(slot_vocab)}
    n = len(act_ids)
    a_ns = np.zeros(n)
    a_slot: dict[int, np.ndarray] = {}
    for act in acts:
        if act.act_type not in act_ids:
            raise UnknownLabelError(f"unknown system act type {act.act_type!r}")
        k = act_ids[act.act_type]
        if act.slot is None:
            a_ns[k] = 1.0
            continue
        if act.slot not in slot_ids:
            raise UnknownLabelError(f"unknown slot {act.slot!r}")
        a_slot.setdefault(slot_ids[act.slot], np.zeros(n))[k] = 1.0
    for name in carried_slots or ():
        if name not in slot_ids:
            raise UnknownLabelError(f"unknown slot {name!r}")
        a_slot.setdefault(slot_ids[name], np.zeros(n))
    return SystemActFeatures(a_slot, a_ns, tuple(sorted(a_slot)))


class ActEncoder:
    """Trainable parameters and forward pass of the system act encoder."""

    def __init__(self, store: ParameterStore, n_act_types: int, n_slots: int,
                 output_dim: int, rng: np.random.Generator, slot_embedding_dim: int = 32,
                 hidden_dim: Optional[int] = None, name: str = "act_encoder"):
        hidden_dim = hidden_dim or output_dim
        self.n_act_types = n_act_types
        self.output_dim = output_dim
        self.hidden_dim = hidden_dim
        self.slot_embeddings = store.add(f"{name}.slot_embedding.weight",
                                         rng.uniform(-0.1, 0.1, size=(n_slots, slot_embedding_dim)))
        self.slot_layer = Dense.create(store, f"{name}.slot_layer", n_act_types + slot_embedding_dim,
                                       hidden_dim, rng)
        self.output_layer = Dense.create(store, f"{name}.output_layer", hidden_dim + n_act_types,
                                         output_dim, rng)

    def __call__(self, feats: SystemActFeatures) -> Node:
        return encode_acts(feats, self)


def encode_acts(feats: SystemActFeatures, params: ActEncoder) -> Node:
    if feats.a_ns.shape[0] != params.n_act_types:
        raise ad.ShapeError("encode_acts", feats.a_ns.shape, (params.n_act_types,))
    if feats.slot_order:
        ids = np.array(feats.slot_order, dtype=np.int64)
        joined = ad.concat([ad.constant(feats.slot_matrix()), ad.take(params.slot_embeddings, ids)],
                           axis=1)
        per_slot = params.slot_layer(joined, "relu")
        pooled = ad.mean_rows(per_slot)
    else:
        pooled = ad.constant(np.zeros(params.hidden_dim))
    combined = ad.concat([pooled, ad.constant(feats.a_ns)])
    return params.output_layer(combined, "relu")
