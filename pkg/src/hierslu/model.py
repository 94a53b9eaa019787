"""The per-turn contextual SLU network and its variants.

A turn is processed as: system acts -> act encoding ``a_t``; user tokens ->
bidirectional GRU utterance encoder (``u_t`` plus per-token vectors);
``a_t`` joined with ``u_t`` -> one step of the dialogue-encoder GRU
(``o_t``); ``o_t`` -> intent softmax and act sigmoids; token vectors ->
bidirectional LSTM slot tagger -> per-token tag softmax.

Context vectors can enter at four sites: A (extra utterance-encoder input
at every step), B (projected initial state of the utterance encoder), C
(extra tagger input at every step) and D (projected initial state of the
tagger).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .acts import ActEncoder, SystemActFeatures, featurize_acts
from .autodiff import Node
from .cells import Dense, Embedding, GRUCellParams, LSTMCellParams, ParameterStore, birnn, gru_step
from .corpus import EOS_ID, SOS_ID, Dialogue, Vocab

VARIANTS = ("NoContext", "PrevTurn", "ActOnlyNoDE", "ActOnly", "DialogueOnly", "ActAndDialogue")
POSITIONS = ("A", "B", "C", "D")

# best validation configuration per variant (act position, dialogue position)
BEST_POSITIONS = {
    "NoContext": (None, None),
    "PrevTurn": (None, None),
    "ActOnlyNoDE": ("B", None),
    "ActOnly": ("D", None),
    "DialogueOnly": (None, "D"),
    "ActAndDialogue": ("C", "D"),
}
_ALLOWED = {
    "NoContext": ((None,), (None,)),
    "PrevTurn": ((None,), (None,)),
    "ActOnlyNoDE": (POSITIONS, (None,)),
    "ActOnly": (POSITIONS, (None,)),
    "DialogueOnly": ((None,), ("C", "D")),
    "ActAndDialogue": (("C", "D"), ("C", "D")),
}


class ConfigError(ValueError):
    pass


def _position(value):
    if value in (None, "none", "None", ""):
        return None
    return value


@dataclass
class ModelConfig:
    embedding_dim: int = 128
    variant: str = "ActOnly"
    act_position: Optional[str] = "auto"
    dialogue_position: Optional[str] = "auto"
    act_threshold: float = 0.5
    learning_rate: float = 1e-3
    max_value_dropout: float = 0.3
    slot_embedding_dim: int = 32
    act_dim: Optional[int] = None
    cumulative_slot_set: bool = False
    share_system_embeddings: bool = True

    def resolved(self) -> "ModelConfig":
        """Copy with ``"auto"`` positions replaced by the variant's best sites."""
        if self.variant not in BEST_POSITIONS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        act, dia = BEST_POSITIONS[self.variant]
        return replace(
            self,
            act_position=act if self.act_position == "auto" else _position(self.act_position),
            dialogue_position=dia if self.dialogue_position == "auto" else _position(self.dialogue_position),
        )

    def validate(self) -> "ModelConfig":
        cfg = self.resolved()
        acts_ok, dia_ok = _ALLOWED[cfg.variant]
        if cfg.act_position not in acts_ok:
            raise ConfigError(f"variant {cfg.variant} does not accept act context at {cfg.act_position!r}; "
                              f"allowed: {acts_ok}")
        if cfg.dialogue_position not in dia_ok:
            raise ConfigError(f"variant {cfg.variant} does not accept dialogue context at "
                              f"{cfg.dialogue_position!r}; allowed: {dia_ok}")
        if not isinstance(cfg.embedding_dim, (int, np.integer)) or cfg.embedding_dim < 2 or cfg.embedding_dim % 2:
            raise ConfigError(f"embedding_dim must be a positive even integer, got {cfg.embedding_dim!r}")
        if not 0.0 < cfg.act_threshold < 1.0:
            raise ConfigError(f"act_threshold must lie in (0, 1), got {cfg.act_threshold}")
        if cfg.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {cfg.learning_rate}")
        if not 0.0 <= cfg.max_value_dropout <= 1.0:
            raise ConfigError(f"max_value_dropout must lie in [0, 1], got {cfg.max_value_dropout}")
        return cfg

    @property
    def has_dialogue_encoder(self) -> bool:
        return self.variant in ("ActOnly", "DialogueOnly", "ActAndDialogue")

    @property
    def uses_acts(self) -> bool:
        return self.variant in ("ActOnlyNoDE", "ActOnly", "DialogueOnly", "ActAndDialogue")

    @property
    def utterance_size(self) -> int:
        return self.embedding_dim

    @property
    def tagger_size(self) -> int:
        return self.embedding_dim

    @property
    def dialogue_size(self) -> int:
        return self.embedding_dim // 2

    @property
    def act_size(self) -> int:
        return self.act_dim or self.dialogue_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TurnState:
    """Dialogue-encoder state carried between turns; ``o_prev`` is ``s_prev`` for a GRU."""

    s_prev: Node

    @property
    def o_prev(self) -> Node:
        return self.s_prev


@dataclass
class EncodedTurn:
    """Network-ready view of a :class:`~hierslu.corpus.Turn`.

    ``token_ids`` holds content tokens only; SOS/EOS are added by the
    network. Gold ids are -1 when a label is outside the training vocabulary.
    """

    token_ids: np.ndarray
    spans: list
    system_ids: np.ndarray
    act_features: Optional[SystemActFeatures]
    intent: int = -1
    acts: Optional[np.ndarray] = None
    tags: Optional[np.ndarray] = None


@dataclass
class TurnOutput:
    intent_logits: Node
    act_logits: Node
    tag_logits: Node      # (M, n_tags), content tokens only
    state: Optional[TurnState]


@dataclass
class FramePrediction:
    intent: str
    acts: frozenset
    iob_tags: list
    p_intent: np.ndarray = field(repr=False, default=None)
    p_acts: np.ndarray = field(repr=False, default=None)
    p_tags: np.ndarray = field(repr=False, default=None)


def encode_dialogue(dialogue: Dialogue, vocab: Vocab, config: ModelConfig) -> list[EncodedTurn]:
    turns, seen_slots = [], []
    for turn in dialogue.turns:
        feats = None
        if config.uses_acts:
            carried = list(seen_slots) if config.cumulative_slot_set else None
            feats = featurize_acts(turn.system_acts, vocab.system_act_ids, vocab.slot_ids, carried)
            for act in turn.system_acts:
                if act.slot is not None and act.slot not in seen_slots:
                    seen_slots.append(act.slot)
        acts = np.zeros(len(vocab.user_acts))
        for a in turn.gold_user_acts:
            if a in vocab.user_act_ids:
                acts[vocab.user_act_ids[a]] = 1.0
        tags = np.array([vocab.tag_ids.get(t, -1) for t in turn.gold_tags], dtype=np.int64)
        turns.append(EncodedTurn(
            token_ids=vocab.encode_tokens(turn.user_tokens),
            spans=list(turn.gold_slot_spans),
            system_ids=vocab.encode_tokens(turn.system_tokens),
            act_features=feats,
            intent=vocab.intent_ids.get(turn.gold_intent, -1),
            acts=acts,
            tags=tags,
        ))
    return turns


def with_markers(token_ids) -> np.ndarray:
    return np.concatenate([[SOS_ID], np.asarray(token_ids, dtype=np.int64), [EOS_ID]]).astype(np.int64)


class SLUNetwork:
    """Parameters and forward computation for one model variant."""

    def __init__(self, config: ModelConfig, vocab_size: int, n_slots: int, n_act_types: int,
                 n_intents: int, n_user_acts: int, rng: np.random.Generator):
        cfg = config.validate()
        self.config = cfg
        self.params = ParameterStore()
        self.n_tags = 2 * n_slots + 1
        d_u, d_s, d_o, d_a = cfg.utterance_size, cfg.tagger_size, cfg.dialogue_size, cfg.act_size
        store = self.params

        self.embedding = Embedding.create(store, "embedding.tokens", vocab_size, cfg.embedding_dim, rng)
        self.act_encoder = None
        if cfg.uses_acts:
            self.act_encoder = ActEncoder(store, n_act_types, n_slots, d_a, rng,
                                          slot_embedding_dim=cfg.slot_embedding_dim)

        ctx_a = d_a if cfg.act_position == "A" else 0
        self.utt_fwd = GRUCellParams.create(store, "utterance_encoder.fwd", cfg.embedding_dim, d_u, rng, ctx_a)
        self.utt_bwd = GRUCellParams.create(store, "utterance_encoder.bwd", cfg.embedding_dim, d_u, rng, ctx_a)
        self.utt_init = (Dense.create(store, "utterance_encoder.init_projection", d_a, d_u, rng)
                         if cfg.act_position == "B" else None)

        self.system_embedding = None
        self.sys_fwd = self.sys_bwd = None
        if cfg.variant == "PrevTurn":
            if not cfg.share_system_embeddings:
                self.system_embedding = Embedding.create(store, "embedding.system_tokens", vocab_size,
                                                         cfg.embedding_dim, rng)
            self.sys_fwd = GRUCellParams.create(store, "system_encoder.fwd", cfg.embedding_dim, d_u, rng)
            self.sys_bwd = GRUCellParams.create(store, "system_encoder.bwd", cfg.embedding_dim, d_u, rng)

        self.dialogue_cell = None
        if cfg.has_dialogue_encoder:
            self.dialogue_cell = GRUCellParams.create(store, "dialogue_encoder.gru", d_a + 2 * d_u, d_o, rng)

        # context sizes at the tagger
        c_size = d_sizes = 0
        if cfg.variant == "PrevTurn":
            c_size += 2 * d_u
        if cfg.act_position == "C":
            c_size += d_a
        if cfg.dialogue_position == "C":
            c_size += d_o
        if cfg.act_position == "D":
            d_sizes += d_a
        if cfg.dialogue_position == "D":
            d_sizes += d_o
        self.tag_fwd = LSTMCellParams.create(store, "slot_tagger.fwd", 2 * d_u, d_s, rng, c_size)
        self.tag_bwd = LSTMCellParams.create(store, "slot_tagger.bwd", 2 * d_u, d_s, rng, c_size)
        self.tag_init = (Dense.create(store, "slot_tagger.init_projection", d_sizes, d_s, rng)
                         if d_sizes else None)

        head_in = d_o if cfg.has_dialogue_encoder else 2 * d_u
        self.intent_head = Dense.create(store, "intent_head.output", head_in, n_intents, rng)
        self.act_head = Dense.create(store, "act_head.output", head_in, n_user_acts, rng)
        self.tag_head = Dense.create(store, "tag_head.output", 2 * d_s, self.n_tags, rng)

    # -- components ----------------------------------------------------------

    def initial_state(self) -> Optional[TurnState]:
        if self.dialogue_cell is None:
            return None
        return TurnState(ad.constant(np.zeros(self.config.dialogue_size)))

    def encode_utterance(self, tokens, context_at_A=None, init_at_B=None):
        """Bidirectional GRU over ``tokens`` (ids including SOS/EOS).

        Returns ``(u_t, token_vecs)`` with ``token_vecs`` of shape ``(M+2, 2 d_u)``.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[0] < 3:
            raise ValueError("utterance must contain SOS, at least one token and EOS")
        if context_at_A is not None and init_at_B is not None:
            raise ConfigError("a context vector goes to exactly one of positions A and B")
        init = None
        if init_at_B is not None:
            if self.utt_init is None:
                raise ConfigError("network has no position-B projection")
            init = self.utt_init(init_at_B)
        if context_at_A is not None and self.utt_fwd.w_context is None:
            raise ConfigError("network has no position-A context input")
        x = self.embedding(tokens)
        return birnn("gru", self.utt_fwd, self.utt_bwd, x, init, init, context_at_A)

    def encode_system_utterance(self, system_ids) -> Node:
        system_ids = np.asarray(system_ids, dtype=np.int64)
        if system_ids.shape[0] == 0:
            return ad.constant(np.zeros(2 * self.config.utterance_size))
        table = self.embedding if self.system_embedding is None else self.system_embedding
        x = table(with_markers(system_ids))
        final, _ = birnn("gru", self.sys_fwd, self.sys_bwd, x)
        return final

    def encode_dialogue_turn(self, a_t: Node, u_t: Node, state: TurnState):
        s = gru_step(self.dialogue_cell, ad.concat([a_t, u_t]), state.s_prev)
        return s, TurnState(s)

    def classify_intent(self, o_t) -> Node:
        return ad.softmax(self.intent_logits(o_t))

    def intent_logits(self, o_t) -> Node:
        return self.intent_head(o_t)

    def act_logits(self, o_t) -> Node:
        return self.act_head(o_t)

    def classify_acts(self, o_t, threshold: Optional[float] = None):
        threshold = self.config.act_threshold if threshold is None else threshold
        p = ad.sigmoid(self.act_logits(o_t))
        return p, act_set(p.value, threshold)

    def tag_logits(self, token_vecs, context_at_C: Sequence = (), init_at_D: Sequence = ()) -> Node:
        """Per-content-token tag logits ``(M, n_tags)``; SOS/EOS rows are dropped."""
        token_vecs = ad.as_node(token_vecs)
        if token_vecs.value.ndim != 2 or token_vecs.shape[0] == 0:
            raise ad.ShapeError("tag_slots", token_vecs.shape)
        context_at_C, init_at_D = list(context_at_C), list(init_at_D)
        if any(c is d for c in context_at_C for d in init_at_D):
            raise ConfigError("the same context vector cannot feed both positions C and D")
        ctx = ad.concat(context_at_C) if context_at_C else None
        init = None
        if init_at_D:
            if self.tag_init is None:
                raise ConfigError("network has no position-D projection")
            init = self.tag_init(ad.concat(init_at_D))
        if ctx is not None and self.tag_fwd.w_context is None:
            raise ConfigError("network has no position-C context input")
        _, per_token = birnn("lstm", self.tag_fwd, self.tag_bwd, token_vecs, init, init, ctx)
        content = ad.take(per_token, slice(1, per_token.shape[0] - 1))
        return self.tag_head(content)

    def tag_slots(self, token_vecs, context_at_C: Sequence = (), init_at_D: Sequence = ()) -> Node:
        return ad.softmax(self.tag_logits(token_vecs, context_at_C, init_at_D))

    def encode_acts(self, feats: SystemActFeatures) -> Node:
        return self.act_encoder(feats)

    # -- full turn -----------------------------------------------------------

    def forward_turn(self, turn: EncodedTurn, state: Optional[TurnState],
                     token_ids: Optional[np.ndarray] = None) -> TurnOutput:
        """Run one turn. Only the current turn and the carried state are read."""
        cfg = self.config
        ids = with_markers(turn.token_ids if token_ids is None else token_ids)
        a_t = self.encode_acts(turn.act_features) if cfg.uses_acts else None
        o_prev = state.o_prev if state is not None else None

        slot = {"A": None, "B": None, "C": [], "D": []}
        if cfg.act_position in ("A", "B"):
            slot[cfg.act_position] = a_t
        elif cfg.act_position in ("C", "D"):
            slot[cfg.act_position].append(a_t)
        if cfg.dialogue_position in ("C", "D"):
            slot[cfg.dialogue_position].append(o_prev)
        if cfg.variant == "PrevTurn":
            slot["C"].append(self.encode_system_utterance(turn.system_ids))

        u_t, token_vecs = self.encode_utterance(ids, slot["A"], slot["B"])
        new_state = None
        if cfg.has_dialogue_encoder:
            summary, new_state = self.encode_dialogue_turn(a_t, u_t, state)
        else:
            summary = u_t
        return TurnOutput(self.intent_logits(summary), self.act_logits(summary),
                          self.tag_logits(token_vecs, slot["C"], slot["D"]), new_state)

    def forward_dialogue(self, turns: Sequence[EncodedTurn], token_ids: Optional[Sequence] = None):
        state = self.initial_state()
        outputs = []
        for i, turn in enumerate(turns):
            out = self.forward_turn(turn, state, None if token_ids is None else token_ids[i])
            state = out.state
            outputs.append(out)
        return outputs


def argmax(p) -> int:
    # np.argmax returns the first maximal index
    return int(np.argmax(p))


def act_set(p_acts: np.ndarray, threshold: float) -> frozenset:
    return frozenset(int(k) for k in np.flatnonzero(np.asarray(p_acts) > threshold))


def decode(out: TurnOutput, vocab: Vocab, threshold: float) -> FramePrediction:
    p_i = ad._softmax(out.intent_logits.value)
    p_a = ad._sigmoid(out.act_logits.value)
    p_s = ad._softmax(out.tag_logits.value)
    return FramePrediction(
        intent=vocab.intents[argmax(p_i)],
        acts=frozenset(vocab.user_acts[k] for k in act_set(p_a, threshold)),
        iob_tags=[vocab.tags[argmax(row)] for row in p_s],
        p_intent=p_i, p_acts=p_a, p_tags=p_s,
    )


def build_network(config: ModelConfig, vocab: Vocab, rng: np.random.Generator) -> SLUNetwork:
    return SLUNetwork(config, len(vocab.tokens), len(vocab.slots), len(vocab.system_acts),
                      len(vocab.intents), len(vocab.user_acts), rng)


def build_prevturn_variant(config: ModelConfig, vocab: Vocab, rng: np.random.Generator) -> SLUNetwork:
    return build_network(replace(config, variant="PrevTurn", act_position=None,
                                 dialogue_position=None), vocab, rng)
