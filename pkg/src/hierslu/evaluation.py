"""Intent accuracy, dialogue-act F1, slot chunk F1, frame accuracy and McNemar's test."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .corpus import iob_to_spans

CHI2_CRITICAL_005 = 3.841
EXACT_BELOW = 25


class Frame(NamedTuple):
    intent: str
    acts: frozenset
    tags: tuple


def _check_aligned(a, b, what):
    if len(a) != len(b):
        raise ValueError(f"{what}: {len(a)} predictions vs {len(b)} gold items")


def intent_accuracy(pred: Sequence, gold: Sequence) -> float:
    _check_aligned(pred, gold, "intent_accuracy")
    if not gold:
        return 0.0
    return sum(p == g for p, g in zip(pred, gold)) / len(gold)


def _f1(tp: int, fp: int, fn: int) -> float:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def act_counts(pred: Sequence[Iterable], gold: Sequence[Iterable]) -> tuple[int, int, int]:
    _check_aligned(pred, gold, "act_f1")
    tp = fp = fn = 0
    for p, g in zip(pred, gold):
        p, g = set(p), set(g)
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    return tp, fp, fn


def act_f1(pred: Sequence[Iterable], gold: Sequence[Iterable], average: str = "micro") -> float:
    """F1 over (turn, act label) pairs; ``average="macro"`` averages per-label F1."""
    if average == "micro":
        return _f1(*act_counts(pred, gold))
    if average != "macro":
        raise ValueError(f"unknown average {average!r}")
    _check_aligned(pred, gold, "act_f1")
    labels = set().union(*map(set, pred), *map(set, gold)) if gold else set()
    if not labels:
        return 0.0
    scores = []
    for label in sorted(labels):
        scores.append(_f1(*act_counts([{label} & set(p) for p in pred], [{label} & set(g) for g in gold])))
    return sum(scores) / len(scores)


def extract_chunks(tags: Sequence[str]) -> set:
    """Chunks ``(slot, start, exclusive_end)`` of one IOB sequence."""
    return set(iob_to_spans(tags))


def chunk_counts(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> tuple[int, int, int]:
    """``(n_gold, n_pred, n_correct)`` chunks over all turns."""
    _check_aligned(pred, gold, "chunk_f1")
    n_gold = n_pred = n_correct = 0
    for p, g in zip(pred, gold):
        if len(p) != len(g):
            raise ValueError(f"chunk_f1: tag sequences of length {len(p)} and {len(g)}")
        pc, gc = extract_chunks(p), extract_chunks(g)
        n_gold += len(gc)
        n_pred += len(pc)
        n_correct += len(pc & gc)
    return n_gold, n_pred, n_correct


def chunk_f1(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> float:
    n_gold, n_pred, n_correct = chunk_counts(pred, gold)
    return _f1(n_correct, n_pred - n_correct, n_gold - n_correct)


def frame_correct(pred: Frame, gold: Frame) -> bool:
    return (pred.intent == gold.intent and frozenset(pred.acts) == frozenset(gold.acts)
            and extract_chunks(pred.tags) == extract_chunks(gold.tags))


def frame_accuracy(pred: Sequence[Frame], gold: Sequence[Frame]) -> float:
    """Fraction of turns whose intent, act set and slot chunks are all correct."""
    _check_aligned(pred, gold, "frame_accuracy")
    if not gold:
        return 0.0
    return sum(frame_correct(p, g) for p, g in zip(pred, gold)) / len(gold)


def frames_from_predictions(dialogues, frames) -> tuple[list[Frame], list[Frame]]:
    preds, golds = [], []
    for dialogue, turn_frames in zip(dialogues, frames, strict=True):
        for turn, fp in zip(dialogue.turns, turn_frames, strict=True):
            preds.append(Frame(fp.intent, frozenset(fp.acts), tuple(fp.iob_tags)))
            golds.append(Frame(turn.gold_intent, frozenset(turn.gold_user_acts), tuple(turn.gold_tags)))
    return preds, golds


# ---------------------------------------------------------------------------
# prediction dump

@dataclass
class PredictionRecord:
    dialogue_id: str
    turn_index: int
    domain: str
    intent: str
    acts: list
    iob_tags: list
    gold_intent: str
    gold_acts: list
    gold_tags: list

    @property
    def predicted(self) -> Frame:
        return Frame(self.intent, frozenset(self.acts), tuple(self.iob_tags))

    @property
    def gold(self) -> Frame:
        return Frame(self.gold_intent, frozenset(self.gold_acts), tuple(self.gold_tags))

    @property
    def key(self) -> tuple:
        return (self.dialogue_id, self.turn_index)


def prediction_records(dialogues, frames) -> list[PredictionRecord]:
    records = []
    for dialogue, turn_frames in zip(dialogues, frames, strict=True):
        for t, (turn, fp) in enumerate(zip(dialogue.turns, turn_frames, strict=True)):
            records.append(PredictionRecord(
                dialogue.dialogue_id, t, dialogue.domain, fp.intent, sorted(fp.acts), list(fp.iob_tags),
                turn.gold_intent, sorted(turn.gold_user_acts), turn.gold_tags))
    return records


def gold_records(dialogues) -> list[PredictionRecord]:
    """Records whose predictions are the gold annotations."""
    records = []
    for dialogue in dialogues:
        for t, turn in enumerate(dialogue.turns):
            acts = sorted(turn.gold_user_acts)
            records.append(PredictionRecord(dialogue.dialogue_id, t, dialogue.domain, turn.gold_intent,
                                            acts, turn.gold_tags, turn.gold_intent, acts, turn.gold_tags))
    return records


def write_predictions(path, records: Sequence[PredictionRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_predictions(path) -> list[PredictionRecord]:
    records = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            records.append(PredictionRecord(**json.loads(line)))
        except (TypeError, json.JSONDecodeError) as e:
            raise ValueError(f"{path}:{i + 1}: malformed prediction record ({e})") from None
    return records


# ---------------------------------------------------------------------------
# reports

@dataclass
class Metrics:
    turns: int
    intent_accuracy: float
    act_f1: float
    slot_chunk_f1: float
    frame_accuracy: float
    act_exact_match: float
    slot_exact_match: float
    act_tp: int
    act_fp: int
    act_fn: int
    chunks_gold: int
    chunks_pred: int
    chunks_correct: int


def compute_metrics(records: Sequence[PredictionRecord], act_average: str = "micro") -> Metrics:
    pred = [r.predicted for r in records]
    gold = [r.gold for r in records]
    n = len(records)
    tp, fp, fn = act_counts([p.acts for p in pred], [g.acts for g in gold])
    cg, cp, cc = chunk_counts([p.tags for p in pred], [g.tags for g in gold])
    m = Metrics(
        turns=n,
        intent_accuracy=intent_accuracy([p.intent for p in pred], [g.intent for g in gold]),
        act_f1=act_f1([p.acts for p in pred], [g.acts for g in gold], act_average),
        slot_chunk_f1=chunk_f1([p.tags for p in pred], [g.tags for g in gold]),
        frame_accuracy=frame_accuracy(pred, gold),
        act_exact_match=sum(p.acts == g.acts for p, g in zip(pred, gold)) / n if n else 0.0,
        slot_exact_match=(sum(extract_chunks(p.tags) == extract_chunks(g.tags) for p, g in zip(pred, gold)) / n
                          if n else 0.0),
        act_tp=tp, act_fp=fp, act_fn=fn, chunks_gold=cg, chunks_pred=cp, chunks_correct=cc,
    )
    # a frame is correct only if every component is
    assert m.frame_accuracy <= min(m.intent_accuracy, m.act_exact_match, m.slot_exact_match) + 1e-12
    return m


@dataclass
class MetricsReport:
    per_domain: dict
    overall: Metrics

    def to_dict(self) -> dict:
        return {"per_domain": {k: asdict(v) for k, v in self.per_domain.items()},
                "overall": asdict(self.overall)}

    def table(self) -> str:
        columns = list(self.per_domain.items()) + [("overall", self.overall)]
        head = f"{'':>10}" + "".join(f"{name:>40}" for name, _ in columns)
        sub = f"{'':>10}" + "".join(f"{'Intent':>10}{'Act':>10}{'Slot':>10}{'Frame':>10}" for _ in columns)
        sub2 = f"{'':>10}" + "".join(f"{'Acc':>10}{'F1':>10}{'F1':>10}{'Acc':>10}" for _ in columns)
        row = f"{'':>10}" + "".join(
            f"{100 * m.intent_accuracy:>10.2f}{100 * m.act_f1:>10.2f}"
            f"{100 * m.slot_chunk_f1:>10.2f}{100 * m.frame_accuracy:>10.2f}" for _, m in columns)
        return "\n".join([head, sub, sub2, row])


def evaluate_records(records: Sequence[PredictionRecord], act_average: str = "micro") -> MetricsReport:
    by_domain = defaultdict(list)
    for r in records:
        by_domain[r.domain or "all"].append(r)
    per_domain = {d: compute_metrics(rs, act_average) for d, rs in sorted(by_domain.items())}
    return MetricsReport(per_domain, compute_metrics(records, act_average))


# ---------------------------------------------------------------------------
# significance

@dataclass
class McNemarResult:
    b: int
    c: int
    statistic: float
    p_value: float
    significant: bool
    method: str


def _binomial_two_sided(k: int, n: int) -> float:
    # two-sided exact test of k successes in n draws at p = 1/2
    tail = sum(math.comb(n, i) for i in range(0, min(k, n - k) + 1)) / 2 ** n
    return min(1.0, 2 * tail)


def mcnemar(correct_a: Sequence[bool], correct_b: Sequence[bool], alpha: float = 0.05) -> McNemarResult:
    """Paired test on per-turn frame correctness of two models.

    Uses the exact binomial test when fewer than 25 pairs are discordant
    and the continuity-corrected chi-square otherwise.
    """
    _check_aligned(correct_a, correct_b, "mcnemar")
    b = sum(1 for x, y in zip(correct_a, correct_b) if x and not y)
    c = sum(1 for x, y in zip(correct_a, correct_b) if y and not x)
    return mcnemar_from_counts(b, c, alpha)


def chi2_statistic(b: int, c: int) -> float:
    """Continuity-corrected McNemar chi-square."""
    return (abs(b - c) - 1) ** 2 / (b + c)


def mcnemar_from_counts(b: int, c: int, alpha: float = 0.05) -> McNemarResult:
    """The reported statistic is always the corrected chi-square; only the
    p-value switches to the exact binomial for small discordant counts."""
    n = b + c
    if n == 0:
        return McNemarResult(b, c, 0.0, 1.0, False, "none")
    stat = chi2_statistic(b, c)
    if n < EXACT_BELOW:
        p = _binomial_two_sided(min(b, c), n)
        return McNemarResult(b, c, stat, p, p < alpha, "exact")
    # chi-square survival with one degree of freedom
    p = math.erfc(math.sqrt(stat / 2))
    return McNemarResult(b, c, stat, p, p < alpha, "chi2")


def compare_records(a: Sequence[PredictionRecord], b: Sequence[PredictionRecord],
                    alpha: float = 0.05) -> McNemarResult:
    """McNemar's test on two prediction dumps over the same turns."""
    index_b = {r.key: r for r in b}
    if len(index_b) != len(b) or len(a) != len(b) or any(r.key not in index_b for r in a):
        raise ValueError("prediction dumps do not cover the same turns")
    ca = [frame_correct(r.predicted, r.gold) for r in a]
    cb = [frame_correct(index_b[r.key].predicted, index_b[r.key].gold) for r in a]
    return mcnemar(ca, cb, alpha)
