import itertools

import numpy as np
import pytest

from hierslu import autodiff as ad
from hierslu.corpus import Dialogue, DialogueAct, Turn, Vocab
from hierslu.model import (BEST_POSITIONS, ConfigError, ModelConfig, TurnState, act_set, argmax, build_network,
                           build_prevturn_variant, decode, encode_dialogue, with_markers)
from hierslu.training import joint_loss

from conftest import assert_gradients
from oracles import scalar_birnn, scalar_gru, scalar_lstm

TINY = dict(embedding_dim=4, slot_embedding_dim=2, act_dim=3)

COMBOS = [("NoContext", None, None), ("PrevTurn", None, None)]
COMBOS += [("ActOnlyNoDE", p, None) for p in "ABCD"]
COMBOS += [("ActOnly", p, None) for p in "ABCD"]
COMBOS += [("DialogueOnly", None, p) for p in "CD"]
COMBOS += [("ActAndDialogue", a, d) for a in "CD" for d in "CD"]


def _net(vocab, variant="ActOnly", act=None, dia=None, seed=0, **kw):
    cfg = ModelConfig(variant=variant, act_position=act if act else "auto",
                      dialogue_position=dia if dia else "auto", **{**TINY, **kw})
    if variant in ("NoContext", "PrevTurn"):
        cfg = ModelConfig(variant=variant, act_position=None, dialogue_position=None, **{**TINY, **kw})
    elif act is None and variant == "DialogueOnly":
        cfg = ModelConfig(variant=variant, act_position=None, dialogue_position=dia or "auto", **{**TINY, **kw})
    return build_network(cfg, vocab, np.random.default_rng(seed))


def _randomize(net, rng, scale=0.5):
    for node in net.params.values():
        node.value[...] = rng.normal(scale=scale, size=node.shape)


def _outputs_bytes(outs):
    return [(o.intent_logits.value.tobytes(), o.act_logits.value.tobytes(), o.tag_logits.value.tobytes())
            for o in outs]


# -- configuration -------------------------------------------------------------

def test_auto_positions():
    for variant, (a, d) in BEST_POSITIONS.items():
        cfg = ModelConfig(variant=variant).resolved()
        assert (cfg.act_position, cfg.dialogue_position) == (a, d)


@pytest.mark.parametrize("variant,act,dia", [
    ("NoContext", "A", None), ("ActOnly", None, "D"), ("DialogueOnly", "C", "D"),
    ("DialogueOnly", None, "A"), ("ActAndDialogue", "A", "D"), ("ActAndDialogue", "C", None),
    ("Bogus", None, None),
])
def test_invalid_combinations(variant, act, dia):
    with pytest.raises(ConfigError):
        ModelConfig(variant=variant, act_position=act, dialogue_position=dia).validate()


@pytest.mark.parametrize("field,value", [("embedding_dim", 5), ("act_threshold", 1.0),
                                         ("learning_rate", -1.0), ("max_value_dropout", 1.5)])
def test_invalid_values(field, value):
    with pytest.raises(ConfigError):
        ModelConfig(**{field: value}).validate()


def test_config_round_trip():
    cfg = ModelConfig(variant="ActAndDialogue", act_position="C", dialogue_position="D")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg.resolved()


def test_tag_classes_for_twelve_slots():
    vocab = Vocab(["a"], [f"s{i}" for i in range(12)], ["INFORM"], ["REQUEST"], ["X"])
    assert build_network(ModelConfig(**TINY), vocab, np.random.default_rng(0)).n_tags == 25


# -- heads ---------------------------------------------------------------------

def test_intent_head_uniform_and_argmax(toy_vocab):
    net = _net(toy_vocab, "NoContext")
    net.intent_head.weight.value[...] = 0.0
    net.intent_head.bias.value[...] = 0.0
    p = net.classify_intent(np.ones(8)).value
    np.testing.assert_allclose(p, np.full(len(toy_vocab.intents), 1 / len(toy_vocab.intents)))
    net.intent_head.bias.value[0] = 10.0
    assert argmax(net.classify_intent(np.ones(8)).value) == 0


def test_argmax_tie_lowest_index():
    assert argmax([0.2, 0.4, 0.4]) == 1


def test_act_threshold_strict():
    assert act_set(np.array([0.6, 0.2, 0.45]), 0.4) == {0, 2}
    assert act_set(np.full(3, 0.5), 0.5) == frozenset()


def test_act_head_zero_weights(toy_vocab):
    net = _net(toy_vocab, "NoContext")
    net.act_head.weight.value[...] = 0.0
    net.act_head.bias.value[...] = 0.0
    p, chosen = net.classify_acts(np.ones(8), 0.5)
    assert np.all(p.value == 0.5) and chosen == frozenset()


def test_heads_match_direct_arithmetic(toy_vocab, rng):
    net = _net(toy_vocab, "ActOnly")
    o = rng.normal(size=net.config.dialogue_size)
    li = o @ net.intent_head.weight.value + net.intent_head.bias.value
    np.testing.assert_allclose(net.classify_intent(o).value, np.exp(li) / np.exp(li).sum(), rtol=1e-12)
    la = o @ net.act_head.weight.value + net.act_head.bias.value
    np.testing.assert_allclose(net.classify_acts(o)[0].value, 1 / (1 + np.exp(-la)), rtol=1e-12)


def test_tag_distribution_sums_to_one(toy_dialogues, toy_vocab):
    net = _net(toy_vocab, "ActOnly")
    turns = encode_dialogue(toy_dialogues[0], toy_vocab, net.config)
    for out in net.forward_dialogue(turns):
        p = ad.softmax(out.tag_logits).value
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# -- encoders vs scalar oracles ------------------------------------------------

def test_zero_weights_zero_encodings(toy_vocab):
    net = _net(toy_vocab, "ActOnly")
    for node in net.params.values():
        node.value[...] = 0.0
    u, _ = net.encode_utterance(with_markers([5, 6]))
    assert np.all(u.value == 0)
    o, _ = net.encode_dialogue_turn(ad.constant(np.zeros(3)), u, net.initial_state())
    assert np.all(o.value == 0)


def test_utterance_encoder_scalar_oracle(toy_vocab, rng):
    net = _net(toy_vocab, "NoContext")
    _randomize(net, rng)
    tokens = with_markers([5, 7])  # a 2-token utterance
    u, vecs = net.encode_utterance(tokens)
    xs = [list(net.embedding.table.value[i]) for i in tokens]
    d = net.config.utterance_size
    final, rows = scalar_birnn(scalar_gru, net.utt_fwd, net.utt_bwd, xs, [0.0] * d, [0.0] * d)
    np.testing.assert_allclose(u.value, final, rtol=1e-11, atol=1e-13)
    np.testing.assert_allclose(vecs.value, rows, rtol=1e-11, atol=1e-13)


def test_dialogue_encoder_two_turn_oracle(toy_vocab, rng):
    net = _net(toy_vocab, "ActOnly")
    _randomize(net, rng)
    state = net.initial_state()
    expected = [0.0] * net.config.dialogue_size
    for _ in range(2):
        a, u = rng.normal(size=3), rng.normal(size=8)
        o, state = net.encode_dialogue_turn(ad.constant(a), ad.constant(u), state)
        expected = scalar_gru(net.dialogue_cell, list(a) + list(u), expected)
        np.testing.assert_allclose(o.value, expected, rtol=1e-11, atol=1e-13)


def test_slot_tagger_scalar_oracle(toy_vocab, rng):
    net = _net(toy_vocab, "NoContext")
    _randomize(net, rng)
    vecs = rng.normal(size=(5, 8))  # SOS, 3 tokens, EOS
    logits = net.tag_logits(vecs).value
    d = net.config.tagger_size

    def step(p, x, state):
        h, c = scalar_lstm(p, x, state[:d], state[d:])
        return h + c

    _, rows = scalar_birnn(step, net.tag_fwd, net.tag_bwd, [list(v) for v in vecs], [0.0] * 2 * d,
                           [0.0] * 2 * d)
    hidden = np.array([r[:d] + r[2 * d:3 * d] for r in rows])[1:4]
    expected = hidden @ net.tag_head.weight.value + net.tag_head.bias.value
    assert logits.shape == (3, net.n_tags)
    np.testing.assert_allclose(logits, expected, rtol=1e-11, atol=1e-13)


# -- wiring errors -------------------------------------------------------------

def test_same_vector_at_c_and_d_rejected(toy_vocab):
    net = _net(toy_vocab, "ActAndDialogue", "C", "D")
    v = ad.constant(np.zeros(3))
    with pytest.raises(ConfigError, match="both"):
        net.tag_logits(np.zeros((3, 8)), [v], [v])


def test_a_and_b_together_rejected(toy_vocab):
    net = _net(toy_vocab, "ActOnly", "A")
    with pytest.raises(ConfigError):
        net.encode_utterance(with_markers([5]), np.zeros(3), np.zeros(3))


def test_short_utterance_rejected(toy_vocab):
    net = _net(toy_vocab, "NoContext")
    with pytest.raises(ValueError):
        net.encode_utterance([2, 3])


# -- full model ----------------------------------------------------------------

@pytest.mark.parametrize("variant,act,dia", COMBOS)
def test_all_variants_run_and_first_turn_without_acts(variant, act, dia, toy_dialogues, toy_vocab):
    net = _net(toy_vocab, variant, act, dia)
    d = toy_dialogues[1]  # first turn has no system acts and no system utterance
    outs = net.forward_dialogue(encode_dialogue(d, toy_vocab, net.config))
    frames = [decode(o, toy_vocab, 0.5) for o in outs]
    assert [len(f.iob_tags) for f in frames] == [len(t.user_tokens) for t in d.turns]


@pytest.mark.parametrize("variant,act,dia", COMBOS)
def test_end_to_end_gradient_check(variant, act, dia, rng):
    # two turns of three tokens each
    t1 = Turn([DialogueAct("GREETING")], "book two seats".split(), "BUY",
              {"INFORM_INTENT", "INFORM"}, [("#", 1, 2)], "hi".split())
    t2 = Turn([DialogueAct("REQUEST", "time"), DialogueAct("NEGATE")], "at 7 pm".split(), "BUY",
              {"INFORM"}, [("time", 1, 3)], "what time".split())
    d = Dialogue("g", [t1, t2])
    vocab = Vocab.build([d])
    net = _net(vocab, variant, act, dia)
    # keep pre-activations away from ReLU kinks
    for name, node in net.params.items():
        if name.endswith("bias") and "act_encoder" in name:
            node.value[...] = 0.3
    turns = encode_dialogue(d, vocab, net.config)

    def loss():
        return joint_loss(net.forward_dialogue(turns), turns)

    assert_gradients(loss, dict(net.params))


def test_causality(toy_dialogues, toy_vocab):
    net = _net(toy_vocab, "ActAndDialogue", "C", "D")
    turns = encode_dialogue(toy_dialogues[0], toy_vocab, net.config)
    ref = _outputs_bytes(net.forward_dialogue(turns))
    perturbed = list(turns)
    perturbed[2] = encode_dialogue(toy_dialogues[1], toy_vocab, net.config)[1]
    out = _outputs_bytes(net.forward_dialogue(perturbed))
    assert out[:2] == ref[:2] and out[2] != ref[2]


def test_forward_turn_reads_only_state(toy_dialogues, toy_vocab):
    net = _net(toy_vocab, "DialogueOnly", None, "D")
    turns = encode_dialogue(toy_dialogues[0], toy_vocab, net.config)
    full = net.forward_dialogue(turns)
    # rebuild the carried state from turns 0..1, then run turn 2 alone
    state = net.forward_turn(turns[1], net.forward_turn(turns[0], net.initial_state()).state).state
    alone = net.forward_turn(turns[2], TurnState(ad.constant(state.s_prev.value.copy())))
    assert _outputs_bytes([alone]) == _outputs_bytes(full[2:])


def test_nocontext_ignores_system_acts(toy_dialogues, toy_vocab):
    net = _net(toy_vocab, "NoContext")
    d = toy_dialogues[0]
    changed = Dialogue(d.dialogue_id, [Turn([DialogueAct("REQUEST", "date")], t.user_tokens, t.gold_intent,
                                            t.gold_user_acts, t.gold_slot_spans, t.system_tokens)
                                       for t in d.turns])
    a = net.forward_dialogue(encode_dialogue(d, toy_vocab, net.config))
    b = net.forward_dialogue(encode_dialogue(changed, toy_vocab, net.config))
    assert _outputs_bytes(a) == _outputs_bytes(b)


def test_act_permutation_propagates(toy_vocab):
    net = _net(toy_vocab, "ActAndDialogue", "C", "D")
    acts = [DialogueAct("REQUEST", "time"), DialogueAct("REQUEST", "date"), DialogueAct("GREETING")]
    ref = None
    for perm in itertools.permutations(acts):
        d = Dialogue("p", [Turn(list(perm), "tomorrow at 7 pm".split(), "RESERVE_RESTAURANT")])
        out = _outputs_bytes(net.forward_dialogue(encode_dialogue(d, toy_vocab, net.config)))
        ref = ref or out
        assert out == ref


def _copy_shared(src, dst):
    for name, node in dst.params.items():
        if name in src.params and src.params[name].shape == node.shape:
            node.value[...] = src.params[name].value


def test_nocontext_equals_zeroed_prevturn(toy_dialogues, toy_vocab):
    base = _net(toy_vocab, "NoContext")
    prev = build_prevturn_variant(base.config, toy_vocab, np.random.default_rng(9))
    _copy_shared(base, prev)
    prev.tag_fwd.w_context.value[...] = 0.0
    prev.tag_bwd.w_context.value[...] = 0.0
    for d in toy_dialogues:
        a = base.forward_dialogue(encode_dialogue(d, toy_vocab, base.config))
        b = prev.forward_dialogue(encode_dialogue(d, toy_vocab, prev.config))
        assert _outputs_bytes(a) == _outputs_bytes(b)


def test_zero_context_at_a_equals_no_context(toy_dialogues, toy_vocab):
    base = _net(toy_vocab, "NoContext")
    at_a = _net(toy_vocab, "ActOnlyNoDE", "A", seed=4)
    _copy_shared(base, at_a)
    at_a.utt_fwd.w_context.value[...] = 0.0
    at_a.utt_bwd.w_context.value[...] = 0.0
    d = toy_dialogues[0]
    a = base.forward_dialogue(encode_dialogue(d, toy_vocab, base.config))
    b = at_a.forward_dialogue(encode_dialogue(d, toy_vocab, at_a.config))
    assert _outputs_bytes(a) == _outputs_bytes(b)


def test_prevturn_empty_system_utterance(toy_vocab):
    net = build_prevturn_variant(ModelConfig(**TINY), toy_vocab, np.random.default_rng(0))
    assert np.all(net.encode_system_utterance([]).value == 0)
    assert net.encode_system_utterance([5, 6]).shape == (8,)


def test_hidden_sizes(toy_vocab):
    net = _net(toy_vocab, "ActOnly")
    u, vecs = net.encode_utterance(with_markers([5, 6, 7]))
    assert u.shape == (8,) and vecs.shape == (5, 8)
