import itertools

import numpy as np
import pytest

from hierslu import autodiff as ad
from hierslu.acts import ActEncoder, UnknownLabelError, encode_acts, featurize_acts
from hierslu.cells import ParameterStore
from hierslu.corpus import DialogueAct

from conftest import assert_gradients

ACTS = ["REQUEST", "GREETING", "NEGATE", "CONFIRM", "OFFER"]
SLOTS = ["#", "rest", "time", "date"]


def _encoder(rng, n_acts=len(ACTS), n_slots=len(SLOTS), out=6, emb=3, random_bias=True):
    store = ParameterStore()
    enc = ActEncoder(store, n_acts, n_slots, out, rng, slot_embedding_dim=emb)
    if random_bias:
        for name, node in store.items():
            if name.endswith("bias"):
                node.value[...] = rng.normal(scale=0.3, size=node.shape)
    return enc, store


def test_featurize_booking_requests():
    f = featurize_acts([DialogueAct("REQUEST", "#"), DialogueAct("REQUEST", "rest")], ACTS, SLOTS)
    assert f.slots == {0, 1}
    assert f.a_slot[0].tolist() == [1, 0, 0, 0, 0] and f.a_slot[1].tolist() == [1, 0, 0, 0, 0]
    assert not f.a_ns.any()


def test_featurize_slotless():
    f = featurize_acts([DialogueAct("GREETING")], ACTS, SLOTS)
    assert f.slots == frozenset() and f.a_ns.tolist() == [0, 1, 0, 0, 0]


def test_featurize_negate_with_and_without_slot():
    f = featurize_acts([DialogueAct("NEGATE", "time", "6 pm"), DialogueAct("NEGATE")], ACTS, SLOTS)
    assert f.a_slot[2][2] == 1 and f.a_ns[2] == 1


def test_featurize_unknown_labels():
    with pytest.raises(UnknownLabelError, match="BOGUS"):
        featurize_acts([DialogueAct("BOGUS")], ACTS, SLOTS)
    with pytest.raises(UnknownLabelError, match="colour"):
        featurize_acts([DialogueAct("REQUEST", "colour")], ACTS, SLOTS)


def test_empty_acts_zero_biases_give_zero(rng):
    enc, _ = _encoder(rng, random_bias=False)
    a = encode_acts(featurize_acts([], ACTS, SLOTS), enc)
    assert a.shape == (6,) and np.all(a.value == 0)


def test_hand_computed_oracle():
    rng = np.random.default_rng(0)
    store = ParameterStore()
    enc = ActEncoder(store, 2, 2, 2, rng, slot_embedding_dim=1, hidden_dim=2)
    store["act_encoder.slot_embedding.weight"].value[...] = [[0.5], [-1.0]]
    store["act_encoder.slot_layer.weight"].value[...] = [[1.0, -1.0], [0.5, 2.0], [1.0, 1.0]]
    store["act_encoder.slot_layer.bias"].value[...] = [0.1, -0.2]
    store["act_encoder.output_layer.weight"].value[...] = [[1.0, 0.0], [0.0, 1.0], [-1.0, 2.0], [0.5, 0.5]]
    store["act_encoder.output_layer.bias"].value[...] = [0.0, 0.1]
    # act 0 on slot 0, act 1 on slot 1, act 1 without a slot
    acts = [DialogueAct("a0", "s0"), DialogueAct("a1", "s1"), DialogueAct("a1")]
    feats = featurize_acts(acts, ["a0", "a1"], ["s0", "s1"])
    # slot 0: input [1, 0, 0.5] -> [1 + 0.5 + 0.1, -1 + 0.5 - 0.2] = [1.6, -0.7] -> relu [1.6, 0]
    # slot 1: input [0, 1, -1] -> [0.5 - 1 + 0.1, 2 - 1 - 0.2] = [-0.4, 0.8] -> relu [0, 0.8]
    # mean [0.8, 0.4]; join a_ns [0, 1] -> [0.8, 0.4, 0, 1]
    # output: [0.8 + 0.5, 0.4 + 0.5 + 0.1] = [1.3, 1.0]
    np.testing.assert_allclose(encode_acts(feats, enc).value, [1.3, 1.0], rtol=1e-14)


def _random_acts(rng, k):
    acts = []
    for _ in range(k):
        slot = SLOTS[rng.integers(len(SLOTS))] if rng.random() < 0.7 else None
        value = str(rng.integers(100)) if slot is not None and rng.random() < 0.5 else None
        acts.append(DialogueAct(ACTS[rng.integers(len(ACTS))], slot, value))
    return acts


def test_permutation_invariance_bitwise(rng):
    enc, _ = _encoder(rng)
    for _ in range(50):
        acts = _random_acts(rng, int(rng.integers(1, 5)))
        ref = encode_acts(featurize_acts(acts, ACTS, SLOTS), enc).value.tobytes()
        for perm in itertools.permutations(acts):
            assert encode_acts(featurize_acts(list(perm), ACTS, SLOTS), enc).value.tobytes() == ref


def test_duplication_idempotent(rng):
    enc, _ = _encoder(rng)
    for _ in range(30):
        acts = _random_acts(rng, 3)
        ref = encode_acts(featurize_acts(acts, ACTS, SLOTS), enc).value
        doubled = acts + [acts[int(rng.integers(3))]]
        np.testing.assert_array_equal(encode_acts(featurize_acts(doubled, ACTS, SLOTS), enc).value, ref)


def test_value_blind(rng):
    enc, _ = _encoder(rng)
    a = [DialogueAct("CONFIRM", "time", "6 pm"), DialogueAct("CONFIRM", "date", "today")]
    b = [DialogueAct("CONFIRM", "time", "8 pm"), DialogueAct("CONFIRM", "date")]
    np.testing.assert_array_equal(encode_acts(featurize_acts(a, ACTS, SLOTS), enc).value,
                                  encode_acts(featurize_acts(b, ACTS, SLOTS), enc).value)


def test_output_size_fixed(rng):
    enc, _ = _encoder(rng)
    sizes = {encode_acts(featurize_acts(_random_acts(rng, k), ACTS, SLOTS), enc).shape for k in range(6)}
    assert sizes == {(6,)}


def test_act_encoder_gradients(rng):
    enc, store = _encoder(rng)
    feats = featurize_acts([DialogueAct("REQUEST", "time"), DialogueAct("CONFIRM", "date", "x"),
                            DialogueAct("OFFER", "time"), DialogueAct("GREETING")], ACTS, SLOTS)
    w = rng.normal(size=6)
    assert_gradients(lambda: ad.total(encode_acts(feats, enc) * w), dict(store))


def test_cumulative_slot_set():
    f = featurize_acts([DialogueAct("REQUEST", "time")], ACTS, SLOTS, carried_slots=["#"])
    assert f.slots == {0, 2} and not f.a_slot[0].any()
