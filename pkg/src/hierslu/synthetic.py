"""Generator for small simulated restaurant/movie dialogues in the public JSON layout.

The dialogues mimic the structure of machine-simulated booking
conversations: the user states an intent in the first turn only, the system
requests or confirms one slot at a time, and the user often answers with a
bare value (``"three"``, ``"tomorrow"``) whose slot and intent can only be
resolved from the preceding system acts. Entity names for the dev/test
splits are mostly disjoint from the training names.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

NUMBERS = ["two", "three", "four", "five", "six"]
DATES = ["today", "tomorrow", "friday", "saturday", "next monday"]
TIMES = ["6 pm", "7 pm", "7:30 pm", "8 pm", "noon"]

_TRAIN_NAMES = {
    "restaurant_name": ["olive garden", "sushi zen", "the grill", "taco town", "cafe rio", "blue plate",
                        "pasta house", "golden dragon", "the oak room", "bistro nine"],
    "movie": ["the matrix", "inside out", "big fish", "zootopia", "jaws", "up", "the martian",
              "frozen", "whiplash", "arrival"],
    "theatre_name": ["regal", "amc mercado", "century 16", "cinemark", "the grand"],
    "cuisine": ["italian", "thai", "mexican", "japanese", "indian"],
    "location": ["downtown", "mountain view", "palo alto", "sunnyvale"],
    "price_range": ["cheap", "moderately priced", "expensive"],
}
_HELDOUT_NAMES = {
    "restaurant_name": ["amber india", "the slanted door", "la costena", "ramen nagi", "evvia",
                        "the melt", "oren hummus", "zareen"],
    "movie": ["moana", "the revenant", "her", "gravity", "spotlight", "brooklyn", "room", "sicario"],
    "theatre_name": ["aquarius", "cinelux", "the roxie"],
    "cuisine": ["greek", "korean"],
    "location": ["los altos", "san mateo"],
    "price_range": ["cheap", "expensive"],
}

DOMAINS = {
    "sim-r": {
        "dir": "sim-R",
        "intents": ["FIND_RESTAURANT", "RESERVE_RESTAURANT"],
        "slots": {
            "FIND_RESTAURANT": ["cuisine", "location", "price_range", "restaurant_name"],
            "RESERVE_RESTAURANT": ["restaurant_name", "num_people", "date", "time"],
        },
        "opening": {
            "FIND_RESTAURANT": ["find me a restaurant", "i am looking for a place to eat"],
            "RESERVE_RESTAURANT": ["book a table", "i want to reserve a table"],
        },
    },
    "sim-m": {
        "dir": "sim-M",
        "intents": ["BUY_MOVIE_TICKETS"],
        "slots": {"BUY_MOVIE_TICKETS": ["movie", "theatre_name", "num_tickets", "date", "time"]},
        "opening": {"BUY_MOVIE_TICKETS": ["buy movie tickets", "i want to see a movie"]},
    },
}

_INFORM_TEMPLATES = {
    "cuisine": ["{v} food", "something {v}"],
    "location": ["in {v}", "near {v}"],
    "price_range": ["{v}", "{v} please"],
    "restaurant_name": ["at {v}", "{v}"],
    "num_people": ["for {v}", "{v} people", "{v}"],
    "num_tickets": ["{v} tickets", "{v}"],
    "date": ["{v}", "for {v}"],
    "time": ["at {v}", "{v}"],
    "movie": ["{v}", "to see {v}"],
    "theatre_name": ["at {v}", "{v}"],
}
_PROMPTS = {
    "cuisine": "what kind of food ?", "location": "where should i look ?",
    "price_range": "what price range ?", "restaurant_name": "which restaurant ?",
    "num_people": "for how many people ?", "num_tickets": "how many tickets ?",
    "date": "what day ?", "time": "what time ?", "movie": "which movie ?",
    "theatre_name": "which theatre ?",
}


def _value(slot: str, rng, heldout: bool) -> str:
    if slot in ("num_people", "num_tickets"):
        return str(rng.choice(NUMBERS))
    if slot == "date":
        return str(rng.choice(DATES))
    if slot == "time":
        return str(rng.choice(TIMES))
    names = _HELDOUT_NAMES[slot] if heldout and rng.random() < 0.87 else _TRAIN_NAMES[slot]
    return str(rng.choice(names))


def _utterance(fragments):
    """Join ``(text, slot-or-None)`` fragments into tokens plus token spans."""
    tokens, spans = [], []
    for text, slot in fragments:
        words = text.split()
        if slot is not None:
            spans.append({"slot": slot, "start": len(tokens), "exclusive_end": len(tokens) + len(words)})
        tokens.extend(words)
    return {"text": " ".join(tokens), "tokens": tokens, "slots": spans}


def _inform(slot, value, rng):
    template = str(rng.choice(_INFORM_TEMPLATES[slot]))
    before, _, after = template.partition("{v}")
    frags = []
    if before.strip():
        frags.append((before.strip(), None))
    frags.append((value, slot))
    if after.strip():
        frags.append((after.strip(), None))
    return frags


def generate_dialogue(domain: str, rng: np.random.Generator, dialogue_id: str,
                      heldout: bool = False) -> dict:
    spec = DOMAINS[domain]
    intent = str(rng.choice(spec["intents"]))
    slots = list(spec["slots"][intent])
    goal = {s: _value(s, rng, heldout) for s in slots}
    turns = []

    # opening: intent plus up to two slots
    n_open = int(rng.integers(0, 3))
    order = list(rng.permutation(slots))
    opened, pending = order[:n_open], order[n_open:]
    frags = [(str(rng.choice(spec["opening"][intent])), None)]
    for s in opened:
        frags.extend(_inform(s, goal[s], rng))
    user_acts = [{"type": "INFORM_INTENT"}] + [{"type": "INFORM", "slot": s} for s in opened]
    first_system = rng.random() < 0.5
    turns.append({
        "system_acts": [{"type": "GREETING"}] if first_system else [],
        "system_utterance": _utterance([("hello , how can i help ?", None)]) if first_system else None,
        "user_acts": user_acts,
        "user_utterance": _utterance(frags),
        "user_intents": [intent],
    })

    for s in pending:
        if rng.random() < 0.2 and "time" in goal and s != "time":
            # offer a wrong time first; the user negates it
            wrong = str(rng.choice([t for t in TIMES if t != goal["time"]]))
            turns.append({
                "system_acts": [{"type": "CONFIRM", "slot": "time", "value": wrong}],
                "system_utterance": _utterance([(f"do you want {wrong} ?", None)]),
                "user_acts": [{"type": "NEGATE"}],
                "user_utterance": _utterance([("no", None)]),
            })
        frags = _inform(s, goal[s], rng)
        acts = [{"type": "INFORM", "slot": s}]
        if rng.random() < 0.15:
            frags = [("yes", None)] + frags
            acts = [{"type": "AFFIRM"}] + acts
        turns.append({
            "system_acts": [{"type": "REQUEST", "slot": s}],
            "system_utterance": _utterance([(_PROMPTS[s], None)]),
            "user_acts": acts,
            "user_utterance": _utterance(frags),
        })

    confirm = [{"type": "CONFIRM", "slot": s, "value": goal[s]} for s in slots[:2]]
    turns.append({
        "system_acts": confirm,
        "system_utterance": _utterance([("please confirm your request", None)]),
        "user_acts": [{"type": "AFFIRM"}],
        "user_utterance": _utterance([(str(rng.choice(["yes", "that is right", "sounds good"])), None)]),
    })
    turns.append({
        "system_acts": [{"type": "NOTIFY_SUCCESS"}],
        "system_utterance": _utterance([("done !", None)]),
        "user_acts": [{"type": "THANK_YOU"}, {"type": "GOOD_BYE"}],
        "user_utterance": _utterance([("thanks , bye", None)]),
    })
    return {"dialogue_id": dialogue_id, "turns": turns}


def generate_split(domain: str, n: int, seed: int, split: str = "train") -> list[dict]:
    rng = np.random.default_rng([seed, list(DOMAINS).index(domain), ["train", "dev", "test"].index(split)])
    return [generate_dialogue(domain, rng, f"{domain}-{split}-{i:05d}", heldout=split != "train")
            for i in range(n)]


def write_corpus(out_dir, sizes: Optional[dict] = None, seed: int = 0) -> Path:
    """Write ``<out_dir>/sim-{M,R}/{train,dev,test}.json``.

    ``sizes`` maps domain -> (train, dev, test) dialogue counts.
    """
    sizes = sizes or {"sim-r": (60, 20, 20), "sim-m": (40, 15, 15)}
    out = Path(out_dir)
    for domain, counts in sizes.items():
        d = out / DOMAINS[domain]["dir"]
        d.mkdir(parents=True, exist_ok=True)
        for split, n in zip(("train", "dev", "test"), counts):
            (d / f"{split}.json").write_text(json.dumps(generate_split(domain, n, seed, split), indent=1))
    return out
