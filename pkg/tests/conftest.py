import numpy as np
import pytest

from hierslu import autodiff as ad
from hierslu.corpus import Dialogue, DialogueAct, Turn, Vocab


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error between two gradient arrays."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def gradient_errors(loss_fn, params: dict, h: float = 1e-5) -> dict:
    """Per-parameter relative error of backward() against central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar node.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    errors = {}
    with ad.no_grad():
        for k, p in params.items():
            numeric = ad.numerical_gradient(lambda: float(loss_fn().value), p.value, h)
            errors[k] = rel_error(analytic[k], numeric)
    return errors


def assert_gradients(loss_fn, params: dict, tol: float = 1e-4):
    errors = gradient_errors(loss_fn, params)
    bad = {k: e for k, e in errors.items() if not e < tol}
    assert not bad, bad
    return errors


def booking_turns():
    """Two turns in the spirit of a table-booking exchange."""
    t1 = Turn(system_acts=[DialogueAct("GREETING")],
              user_tokens="table for two at olive garden".split(),
              gold_intent="RESERVE_RESTAURANT",
              gold_user_acts={"INFORM_INTENT", "INFORM"},
              gold_slot_spans=[("num_people", 2, 3), ("restaurant_name", 4, 6)],
              system_tokens="hello , how can i help ?".split())
    t2 = Turn(system_acts=[DialogueAct("REQUEST", "time"), DialogueAct("REQUEST", "date")],
              user_tokens="tomorrow at 7 pm".split(),
              gold_intent="RESERVE_RESTAURANT",
              gold_user_acts={"INFORM"},
              gold_slot_spans=[("date", 0, 1), ("time", 2, 4)],
              system_tokens="what day and time ?".split())
    t3 = Turn(system_acts=[DialogueAct("CONFIRM", "time", "7 pm"), DialogueAct("NEGATE")],
              user_tokens="no".split(),
              gold_intent="RESERVE_RESTAURANT",
              gold_user_acts={"NEGATE"},
              system_tokens="do you want 7 pm ?".split())
    return [t1, t2, t3]


@pytest.fixture
def toy_dialogues():
    t1, t2, t3 = booking_turns()
    d1 = Dialogue("d1", [t1, t2, t3], "sim-r")
    d2 = Dialogue("d2", [Turn([], "find me thai food".split(), "FIND_RESTAURANT",
                              {"INFORM_INTENT", "INFORM"}, [("cuisine", 2, 3)]),
                         Turn([DialogueAct("REQUEST", "location")], "downtown".split(), "FIND_RESTAURANT",
                              {"INFORM"}, [("location", 0, 1)], "where ?".split())], "sim-r")
    return [d1, d2]


@pytest.fixture
def toy_vocab(toy_dialogues):
    return Vocab.build(toy_dialogues)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, status, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title}" + (f" -- {detail}" if detail else ""))
