"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Sequence

from .corpus import Dialogue, Turn


def check_dialogues(X, name: str = "X", require_gold: bool = False) -> list[Dialogue]:
    """Validate a sequence of dialogues and return it as a list.

    Every dialogue needs at least one turn and every user utterance at
    least one token.
    """
    if isinstance(X, Dialogue):
        raise TypeError(f"{name} must be a sequence of Dialogue objects, not a single Dialogue")
    try:
        dialogues = list(X)
    except TypeError:
        raise TypeError(f"{name} must be a sequence of Dialogue objects") from None
    if not dialogues:
        raise ValueError(f"{name} is empty")
    for i, d in enumerate(dialogues):
        if not isinstance(d, Dialogue):
            raise TypeError(f"{name}[{i}] is {type(d).__name__}, expected Dialogue")
        if not d.turns:
            raise ValueError(f"{name}[{i}] (dialogue {d.dialogue_id}) has no turns")
        for t, turn in enumerate(d.turns):
            if not isinstance(turn, Turn):
                raise TypeError(f"dialogue {d.dialogue_id} turn {t} is not a Turn")
            if not turn.user_tokens:
                raise ValueError(f"dialogue {d.dialogue_id} turn {t} has an empty user utterance")
            if require_gold and not turn.gold_intent:
                raise ValueError(f"dialogue {d.dialogue_id} turn {t} has no gold intent")
    return dialogues


def check_unique_ids(dialogues: Sequence[Dialogue]) -> None:
    seen = set()
    for d in dialogues:
        if d.dialogue_id in seen:
            raise ValueError(f"duplicate dialogue id {d.dialogue_id!r}")
        seen.add(d.dialogue_id)
