"""Dialogue data: types, vocabularies, IOB conversion, loading and augmentation.

The loader reads the public Simulated Dialogues layout::

    <data-dir>/sim-M/{train,dev,test}.json
    <data-dir>/sim-R/{train,dev,test}.json

Each file is a JSON list of dialogues ``{"dialogue_id", "turns": [...]}``;
each turn carries ``system_acts`` / ``user_acts`` (``{"type", "slot"?,
"value"?}``), ``system_utterance`` / ``user_utterance`` (``{"text",
"tokens", "slots": [{"slot", "start", "exclusive_end"}]}``) and, on the
turns where the user states it, ``user_intents``. Turns without
``user_intents`` inherit the most recent intent of the dialogue.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, OOV, SOS, EOS = "<pad>", "<oov>", "<sos>", "<eos>"
RESERVED = (PAD, OOV, SOS, EOS)
PAD_ID, OOV_ID, SOS_ID, EOS_ID = range(4)

DOMAIN_DIRS = {"sim-m": "sim-M", "sim-r": "sim-R"}
SPLITS = ("train", "dev", "test")
CORPUS_FORMAT = "hierslu-corpus"
CORPUS_VERSION = 1


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class DialogueAct:
    act_type: str
    slot: Optional[str] = None
    value: Optional[str] = None

    def __post_init__(self):
        if self.value is not None and self.slot is None:
            raise CorpusError(f"act {self.act_type!r} has a value but no slot")

    def __str__(self):
        if self.slot is None:
            return self.act_type
        if self.value is None:
            return f"{self.act_type}({self.slot})"
        return f"{self.act_type}({self.slot}={self.value!r})"


@dataclass
class Turn:
    system_acts: list[DialogueAct]
    user_tokens: list[str]
    gold_intent: str
    gold_user_acts: frozenset = frozenset()
    gold_slot_spans: list[tuple[str, int, int]] = field(default_factory=list)
    system_tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.gold_user_acts = frozenset(self.gold_user_acts)
        self.gold_slot_spans = [tuple(s) for s in self.gold_slot_spans]
        check_spans(self.gold_slot_spans, len(self.user_tokens))

    @property
    def gold_tags(self) -> list[str]:
        return spans_to_iob(self.user_tokens, self.gold_slot_spans)


@dataclass
class Dialogue:
    dialogue_id: str
    turns: list[Turn]
    domain: str = ""

    def __len__(self):
        return len(self.turns)


# ---------------------------------------------------------------------------
# IOB

def check_spans(spans, n_tokens: int) -> None:
    last_end = 0
    for slot, start, end in sorted(spans, key=lambda s: (s[1], s[2])):
        if not 0 <= start < end <= n_tokens:
            raise CorpusError(f"span ({slot}, {start}, {end}) out of bounds for {n_tokens} tokens")
        if start < last_end:
            raise CorpusError(f"overlapping span ({slot}, {start}, {end})")
        last_end = end


def spans_to_iob(tokens: Sequence, spans, slot_vocab: Optional[Sequence[str]] = None) -> list[str]:
    """B-/I- tags over ``spans`` (``(slot, start, exclusive_end)``), O elsewhere."""
    check_spans(spans, len(tokens))
    tags = ["O"] * len(tokens)
    for slot, start, end in spans:
        if slot_vocab is not None and slot not in slot_vocab:
            raise CorpusError(f"unknown slot {slot!r}")
        tags[start] = f"B-{slot}"
        for i in range(start + 1, end):
            tags[i] = f"I-{slot}"
    return tags


def parse_tag(tag: str) -> tuple[str, Optional[str]]:
    if tag == "O":
        return "O", None
    prefix, sep, slot = tag.partition("-")
    if prefix not in ("B", "I") or not sep or not slot:
        raise CorpusError(f"malformed IOB tag {tag!r}")
    return prefix, slot


def iob_to_spans(tags: Sequence[str]) -> list[tuple[str, int, int]]:
    """Chunks as ``(slot, start, exclusive_end)``.

    An I- tag that does not continue a chunk of the same slot opens a new
    chunk, following the CoNLL evaluation script.
    """
    spans = []
    current = None  # [slot, start]
    for i, tag in enumerate(tags):
        prefix, slot = parse_tag(tag)
        if current is not None and (prefix != "I" or slot != current[0]):
            spans.append((current[0], current[1], i))
            current = None
        if prefix == "B" or (prefix == "I" and current is None):
            current = [slot, i]
    if current is not None:
        spans.append((current[0], current[1], len(tags)))
    return spans


# ---------------------------------------------------------------------------
# vocabularies

def _index(items: Iterable[str]) -> dict[str, int]:
    return {w: i for i, w in enumerate(items)}


class Vocab:
    """Token, slot, act and intent vocabularies, built from the training split."""

    FILES = ("tokens", "slots", "user_acts", "system_acts", "intents")

    def __init__(self, tokens, slots, user_acts, system_acts, intents):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.tokens = tokens
        self.slots = list(slots)
        self.user_acts = list(user_acts)
        self.system_acts = list(system_acts)
        self.intents = list(intents)
        self.token_ids = _index(self.tokens)
        self.slot_ids = _index(self.slots)
        self.user_act_ids = _index(self.user_acts)
        self.system_act_ids = _index(self.system_acts)
        self.intent_ids = _index(self.intents)
        self.tags = ["O"] + [f"{p}-{s}" for s in self.slots for p in ("B", "I")]
        self.tag_ids = _index(self.tags)

    @classmethod
    def build(cls, dialogues: Iterable[Dialogue]) -> "Vocab":
        tokens, slots, user_acts, system_acts, intents = set(), set(), set(), set(), set()
        for dialogue in dialogues:
            for turn in dialogue.turns:
                tokens.update(t.lower() for t in turn.user_tokens)
                tokens.update(t.lower() for t in turn.system_tokens)
                slots.update(s for s, _, _ in turn.gold_slot_spans)
                for act in turn.system_acts:
                    system_acts.add(act.act_type)
                    if act.slot is not None:
                        slots.add(act.slot)
                user_acts.update(turn.gold_user_acts)
                intents.add(turn.gold_intent)
        return cls(sorted(tokens - set(RESERVED)), sorted(slots), sorted(user_acts),
                   sorted(system_acts), sorted(intents))

    def token_id(self, token: str) -> int:
        return self.token_ids.get(token.lower(), OOV_ID)

    def encode_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.token_id(t) for t in tokens], dtype=np.int64)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in self.FILES:
            (directory / f"{name}.txt").write_text("".join(f"{w}\n" for w in getattr(self, name)))

    @classmethod
    def load(cls, directory) -> "Vocab":
        directory = Path(directory)
        lists = [(directory / f"{n}.txt").read_text().splitlines() for n in cls.FILES]
        return cls(*lists)

    def to_dict(self) -> dict:
        return {name: list(getattr(self, name)) for name in self.FILES}

    @classmethod
    def from_dict(cls, d) -> "Vocab":
        return cls(*(d[n] for n in cls.FILES))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in self.FILES:
            h.update(name.encode())
            h.update("\n".join(getattr(self, name)).encode())
        return h.hexdigest()

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.to_dict() == other.to_dict()


# ---------------------------------------------------------------------------
# loading

def _acts(records, where) -> list[DialogueAct]:
    acts = []
    for rec in records or []:
        if not isinstance(rec, dict) or "type" not in rec:
            raise CorpusError(f"{where}: malformed act {rec!r}")
        acts.append(DialogueAct(rec["type"], rec.get("slot"), rec.get("value")))
    return acts


def _user_act_label(act: DialogueAct, scheme: str) -> str:
    if scheme == "type_slot" and act.slot is not None:
        return f"{act.act_type}({act.slot})"
    return act.act_type


def parse_dialogue(record: dict, domain: str = "", user_act_labels: str = "type") -> Dialogue:
    """Map one public-schema dialogue record onto :class:`Dialogue`."""
    dialogue_id = record.get("dialogue_id", "?") if isinstance(record, dict) else "?"
    if not isinstance(record, dict) or not isinstance(record.get("turns"), list):
        raise CorpusError(f"dialogue {dialogue_id}: missing turn list")
    turns, intent = [], None
    for t, rec in enumerate(record["turns"]):
        where = f"dialogue {dialogue_id} turn {t}"
        try:
            user = rec["user_utterance"]
            tokens = list(user["tokens"])
            spans = [(s["slot"], int(s["start"]), int(s["exclusive_end"]))
                     for s in user.get("slots", [])]
            system = rec.get("system_utterance") or {}
            intents = rec.get("user_intents") or []
            if intents:
                intent = intents[0]
            if intent is None:
                raise CorpusError("no user intent stated so far")
            acts = _acts(rec.get("system_acts"), where)
            user_acts = {_user_act_label(a, user_act_labels) for a in _acts(rec.get("user_acts"), where)}
            turns.append(Turn(system_acts=acts, user_tokens=tokens, gold_intent=intent,
                              gold_user_acts=user_acts, gold_slot_spans=spans,
                              system_tokens=list(system.get("tokens", []))))
        except CorpusError as e:
            raise CorpusError(f"{where}: {e}") from None
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusError(f"{where}: malformed record ({e!r})") from None
    return Dialogue(str(dialogue_id), turns, domain)


def split_path(data_dir, domain: str, split: str) -> Path:
    key = domain.lower()
    if key not in DOMAIN_DIRS:
        raise CorpusError(f"unknown domain {domain!r}; expected one of {sorted(DOMAIN_DIRS)}")
    return Path(data_dir) / DOMAIN_DIRS[key] / f"{split}.json"


def load_dataset(path, split: str, domains: Sequence[str] = ("sim-m", "sim-r"),
                 user_act_labels: str = "type") -> list[Dialogue]:
    """Load ``split`` of each domain under ``path``; dialogues keep domain order."""
    if not domains:
        raise CorpusError("no domains selected")
    out = []
    for domain in domains:
        file = split_path(path, domain, split)
        if not file.exists():
            raise CorpusError(f"missing dataset file {file}")
        try:
            records = json.loads(file.read_text())
        except json.JSONDecodeError as e:
            raise CorpusError(f"{file}: invalid JSON ({e})") from None
        if not isinstance(records, list):
            raise CorpusError(f"{file}: expected a list of dialogues")
        out.extend(parse_dialogue(r, domain.lower(), user_act_labels) for r in records)
    return out


def summarize(dialogues: Sequence[Dialogue]) -> dict:
    turns = sum(len(d) for d in dialogues)
    return {"dialogues": len(dialogues), "turns": turns}


# -- cached corpus container --------------------------------------------------

def _turn_to_json(turn: Turn) -> dict:
    return {
        "system_acts": [[a.act_type, a.slot, a.value] for a in turn.system_acts],
        "system_tokens": turn.system_tokens,
        "user_tokens": turn.user_tokens,
        "gold_intent": turn.gold_intent,
        "gold_user_acts": sorted(turn.gold_user_acts),
        "gold_slot_spans": [list(s) for s in turn.gold_slot_spans],
    }


def _turn_from_json(d: dict) -> Turn:
    return Turn(system_acts=[DialogueAct(*a) for a in d["system_acts"]],
                system_tokens=d["system_tokens"], user_tokens=d["user_tokens"],
                gold_intent=d["gold_intent"], gold_user_acts=d["gold_user_acts"],
                gold_slot_spans=[tuple(s) for s in d["gold_slot_spans"]])


def dialogues_to_json(dialogues: Sequence[Dialogue]) -> list:
    return [{"dialogue_id": d.dialogue_id, "domain": d.domain,
             "turns": [_turn_to_json(t) for t in d.turns]} for d in dialogues]


def dialogues_from_json(records) -> list[Dialogue]:
    return [Dialogue(r["dialogue_id"], [_turn_from_json(t) for t in r["turns"]], r.get("domain", ""))
            for r in records]


def save_corpus(path, splits: dict, source_fingerprint: str = "") -> None:
    """Write the internal corpus cache: ``{"format", "version", "source", "splits"}``."""
    payload = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION, "source": source_fingerprint,
               "splits": {name: dialogues_to_json(ds) for name, ds in splits.items()}}
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_corpus(path) -> tuple[dict, str]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CORPUS_FORMAT or payload.get("version") != CORPUS_VERSION:
        raise CorpusError(f"{path}: not a {CORPUS_FORMAT} v{CORPUS_VERSION} file")
    return ({k: dialogues_from_json(v) for k, v in payload["splits"].items()},
            payload.get("source", ""))


def load_dialogues(path, split: str = "test") -> list[Dialogue]:
    """Read dialogues from a corpus cache or from a public-schema JSON list."""
    payload = json.loads(Path(path).read_text())
    if isinstance(payload, dict) and payload.get("format") == CORPUS_FORMAT:
        splits, _ = load_corpus(path)
        if split not in splits:
            raise CorpusError(f"{path}: no split {split!r}")
        return splits[split]
    if isinstance(payload, list):
        return [parse_dialogue(r) for r in payload]
    raise CorpusError(f"{path}: unrecognised dialogue file")


def files_fingerprint(paths: Iterable) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(os.fspath(p).encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# augmentation

def in_span_mask(n_tokens: int, spans) -> np.ndarray:
    mask = np.zeros(n_tokens, dtype=bool)
    for _, start, end in spans:
        mask[start:end] = True
    return mask


def value_dropout(token_ids: np.ndarray, spans, p: float, rng: np.random.Generator,
                  oov_id: int = OOV_ID) -> np.ndarray:
    """Replace each in-span token by ``oov_id`` independently with probability ``p``.

    One uniform draw is made per token regardless of ``p`` so the random
    stream does not depend on the schedule.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    token_ids = np.asarray(token_ids)
    u = rng.random(token_ids.shape[0])
    drop = in_span_mask(token_ids.shape[0], spans) & (u < p)
    out = token_ids.copy()
    out[drop] = oov_id
    return out


def dropout_schedule(step: int, total_steps: int, p_max: float) -> float:
    """Linear ramp from 0 at step 0 to ``p_max`` at ``total_steps``."""
    if not 0 <= step <= max(total_steps, 0):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    return p_max * step / total_steps
