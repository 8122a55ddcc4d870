import math
from random import Random

import pytest
import torch

from mtlaffect.backbone import BackboneConfig
from mtlaffect.corpus import ECCandidate, FunctionalUnit
from mtlaffect.discriminative import (
    COMBINE_SUM,
    TASK_EC,
    TASK_VALENCE,
    _ec_logits,
    _teacher_forcing_draws,
    argmax_lowest,
    build_classifier,
    collate_units,
    combine_losses,
    forward_joint,
    forward_single,
    forward_two_step,
    interpolated_loss,
    predict_units,
)
from mtlaffect.encodings import (
    EC_FIRST,
    ECContext,
    VAL_FIRST,
    ValenceContext,
    Vocabulary,
)


def unit(uid, tokens, valence, cands=()):
    return FunctionalUnit(
        unit_id=uid,
        narrative_id="n0",
        tokens=list(tokens),
        valence=valence,
        candidates=[ECCandidate(*c) for c in cands],
    )


@pytest.fixture
def fixture_units():
    return [
        unit("u0", ["w1", "w2", "w3"], "positive", [(0, 1, "yes"), (2, 3, "no")]),
        unit("u1", ["w4", "w5"], "negative", [(0, 2, "yes")]),
        unit("u2", ["w2", "w4"], "neutral", [(1, 2, "no")]),
        unit("u3", ["w5", "w1", "w3"], "neutral", [(0, 1, "no")]),
    ]


@pytest.fixture
def vocab(fixture_units):
    return Vocabulary.build(fixture_units)


@pytest.fixture
def model(vocab):
    cfg = BackboneConfig(vocab_size=len(vocab), hidden_dim=16, n_layers=1,
                         n_heads=2, max_seq_len=32, seed=0)
    return build_classifier(cfg)


def test_forward_single_valence_shape_and_simplex(model, vocab, fixture_units):
    batch = collate_units(fixture_units, vocab)
    probs, loss = forward_single(model, batch, TASK_VALENCE)
    assert probs.shape == (4, 3)
    assert torch.allclose(probs.sum(dim=-1), torch.ones(4), atol=1e-6)
    assert loss.isfinite()


def test_forward_single_ec_shape(model, vocab, fixture_units):
    batch = collate_units(fixture_units, vocab)
    probs, loss = forward_single(model, batch, TASK_EC)
    assert probs.shape == (5, 2)  # 2 + 1 + 1 + 1 candidates
    assert torch.allclose(probs.sum(dim=-1), torch.ones(5), atol=1e-6)
    assert loss.isfinite()


def test_forward_single_rejects_zero_candidate_ec(model, vocab):
    batch = collate_units([unit("u", ["w1"], "neutral")], vocab)
    with pytest.raises(ValueError, match="zero candidates"):
        forward_single(model, batch, TASK_EC)


def test_forward_single_reproducible(model, vocab, fixture_units):
    batch = collate_units(fixture_units, vocab)
    model.eval()
    with torch.no_grad():
        a, _ = forward_single(model, batch, TASK_VALENCE)
        b, _ = forward_single(model, batch, TASK_VALENCE)
    assert torch.equal(a, b)


def test_build_classifier_seeded(vocab):
    cfg = BackboneConfig(vocab_size=len(vocab), hidden_dim=16, n_layers=1,
                         n_heads=2, max_seq_len=32, seed=5)
    a, b = build_classifier(cfg), build_classifier(cfg)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


# --- losses ---


def test_interpolated_loss_values():
    assert interpolated_loss(0.5, 4.0, 2.0) == 3.0
    assert interpolated_loss(0.0, 7.0, 2.5) == 2.5
    assert interpolated_loss(1.0, 7.0, 2.5) == 7.0
    assert interpolated_loss(0.3, 2.0, 1.0) == pytest.approx(1.3)


def test_interpolated_loss_matches_recomputation():
    rng = Random(0)
    for _ in range(200):
        lam = rng.random()
        lv = rng.uniform(0, 10)
        le = rng.uniform(0, 10)
        assert interpolated_loss(lam, lv, le) == lam * lv + (1 - lam) * le


def test_interpolated_loss_linear_in_lambda():
    rng = Random(1)
    for _ in range(100):
        lv, le = rng.uniform(0, 5), rng.uniform(0, 5)
        lam = rng.random()
        left = interpolated_loss(lam, lv, le) - interpolated_loss(0.0, lv, le)
        right = lam * (interpolated_loss(1.0, lv, le) - interpolated_loss(0.0, lv, le))
        assert abs(left - right) < 1e-9


def test_interpolated_loss_rejects_bad_lambda():
    with pytest.raises(ValueError, match="lambda"):
        interpolated_loss(-0.1, 1.0, 1.0)
    with pytest.raises(ValueError, match="lambda"):
        interpolated_loss(1.5, 1.0, 1.0)


def test_combine_losses_sum_mode():
    assert combine_losses(0.9, 2.0, 3.0, COMBINE_SUM) == 5.0
    with pytest.raises(ValueError, match="combination"):
        combine_losses(0.5, 1.0, 1.0, "avg")


def test_forward_joint_consistency(model, vocab, fixture_units):
    batch = collate_units(fixture_units, vocab)
    out = forward_joint(model, batch, lam=0.3)
    expect = 0.3 * out.loss_valence + 0.7 * out.loss_ec
    assert torch.allclose(out.loss_total, expect, atol=1e-9)
    out1 = forward_joint(model, batch, lam=1.0)
    assert torch.equal(out1.loss_total, out1.loss_valence)


def test_joint_lambda_endpoints_block_gradients(model, vocab, fixture_units):
    batch = collate_units(fixture_units, vocab)

    def grads_at(lam):
        model.zero_grad()
        out = forward_joint(model, batch, lam=lam)
        out.loss_total.backward()
        ec = torch.cat([p.grad.flatten() for p in model.ec_head.parameters()])
        val = torch.cat([p.grad.flatten() for p in model.valence_head.parameters()])
        enc = torch.cat([p.grad.flatten() for p in model.encoder.parameters()])
        return val, ec, enc

    val, ec, enc = grads_at(1.0)
    assert torch.count_nonzero(ec) == 0
    assert torch.count_nonzero(val) > 0
    assert torch.count_nonzero(enc) > 0

    val, ec, enc = grads_at(0.0)
    assert torch.count_nonzero(val) == 0
    assert torch.count_nonzero(ec) > 0
    assert torch.count_nonzero(enc) > 0


# --- EC pooling ---


def test_ec_pooling_duplicate_state_idempotent(model):
    h = model.config.hidden_dim
    g = torch.Generator().manual_seed(0)
    hidden = torch.randn(1, 4, h, generator=g)
    hidden[0, 2] = hidden[0, 1]  # duplicate one span state
    with torch.no_grad():
        short = _ec_logits(model, hidden, [[(1, 2)]])
        extended = _ec_logits(model, hidden, [[(1, 3)]])
    assert torch.equal(short, extended)


def test_ec_pooling_is_coordinatewise_max(model):
    h = model.config.hidden_dim
    hidden = torch.zeros(1, 3, h)
    hidden[0, 0] = -1.0  # CLS below span states
    hidden[0, 1] = torch.arange(h, dtype=torch.float)
    hidden[0, 2] = torch.arange(h, 0, -1, dtype=torch.float)
    expected = torch.maximum(hidden[0, 1], hidden[0, 2])
    with torch.no_grad():
        got = _ec_logits(model, hidden, [[(1, 3)]])
        ref = model.ec_head(expected.unsqueeze(0))
    assert torch.allclose(got, ref, atol=1e-7)


# --- arg-max tie-breaking ---


def test_argmax_lowest_breaks_ties_down():
    t = torch.tensor([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [3.0, 1.0, 3.0]])
    assert argmax_lowest(t).tolist() == [0, 1, 0]


def test_argmax_invariant_under_monotone_transform(model, vocab, fixture_units):
    batch = collate_units(fixture_units, vocab)
    model.eval()
    with torch.no_grad():
        probs, _ = forward_single(model, batch, TASK_VALENCE)
    assert torch.equal(argmax_lowest(probs), argmax_lowest(probs * 7.0 + 2.0))
    assert torch.equal(argmax_lowest(probs), argmax_lowest(probs.log()))


# --- teacher forcing ---


def test_teacher_forcing_rate():
    rng = Random(0)
    draws = _teacher_forcing_draws(rng, 20000, 0.1)
    rate = sum(draws) / len(draws)
    assert abs(rate - 0.1) < 0.02


def test_teacher_forcing_endpoints_and_errors():
    assert _teacher_forcing_draws(None, 5, 0.0) == [False] * 5
    assert _teacher_forcing_draws(None, 5, 1.0) == [True] * 5
    with pytest.raises(ValueError, match="tf_prob"):
        _teacher_forcing_draws(None, 5, 1.5)
    with pytest.raises(ValueError, match="rng"):
        _teacher_forcing_draws(None, 5, 0.5)


# --- two-step ---


def test_two_step_teacher_forced_contexts_are_gold(model, vocab, fixture_units):
    out = forward_two_step(model, fixture_units, vocab, VAL_FIRST,
                           tf_prob=1.0, training=True)
    assert all(c.source == "ground_truth" for c in out.contexts)
    codes = [c.code for c in out.contexts]
    assert codes == [1, 0, 2, 2]  # gold valence codes of the fixture


def test_two_step_inference_contexts_are_predictions(model, vocab, fixture_units):
    out = forward_two_step(model, fixture_units, vocab, VAL_FIRST, training=False)
    assert all(c.source == "predicted" for c in out.contexts)
    pred = argmax_lowest(out.first_probs).tolist()
    assert [c.code for c in out.contexts] == pred


def test_two_step_oracle_contexts_are_gold_even_at_inference(model, vocab, fixture_units):
    out = forward_two_step(model, fixture_units, vocab, EC_FIRST,
                           training=False, oracle=True)
    assert all(c.source == "ground_truth" for c in out.contexts)
    # gold carrier span texts per fixture unit
    assert out.contexts[0].span_texts == ["w1"]
    assert out.contexts[1].span_texts == ["w4 w5"]
    assert out.contexts[2].span_texts == []


def test_two_step_ec_first_contexts_list_predicted_yes_spans(model, vocab, fixture_units):
    out = forward_two_step(model, fixture_units, vocab, EC_FIRST, training=False)
    flat_pred = argmax_lowest(out.first_probs).tolist()
    i = 0
    for fu, ctx in zip(fixture_units, out.contexts):
        expected = []
        for cand in fu.candidates:
            if flat_pred[i] == 1:
                expected.append(fu.span_text(cand))
            i += 1
        assert ctx.span_texts == expected


def test_two_step_loss_is_interpolation_of_task_losses(model, vocab, fixture_units):
    for order in (VAL_FIRST, EC_FIRST):
        out = forward_two_step(model, fixture_units, vocab, order, lam=0.4,
                               tf_prob=1.0, training=True)
        expect = 0.4 * out.loss_valence + 0.6 * out.loss_ec
        assert torch.allclose(out.loss_total, expect, atol=1e-9)


def test_two_step_step1_matches_single_path(model, vocab, fixture_units):
    model.eval()
    with torch.no_grad():
        out = forward_two_step(model, fixture_units, vocab, VAL_FIRST, training=False)
        single, _ = forward_single(model, collate_units(fixture_units, vocab), TASK_VALENCE)
    assert torch.allclose(out.first_probs, single, atol=1e-7)


def test_two_step_rejects_bad_args(model, vocab, fixture_units):
    with pytest.raises(ValueError, match="order"):
        forward_two_step(model, fixture_units, vocab, "zigzag")
    with pytest.raises(ValueError, match="tf_prob"):
        forward_two_step(model, fixture_units, vocab, VAL_FIRST,
                         tf_prob=2.0, training=True)


def test_teacher_forcing_mixes_sources(model, vocab, fixture_units):
    rng = Random(3)
    sources = []
    for _ in range(40):
        out = forward_two_step(model, fixture_units, vocab, VAL_FIRST,
                               tf_prob=0.5, rng=rng, training=True)
        sources.extend(c.source for c in out.contexts)
    assert "ground_truth" in sources and "predicted" in sources


# --- prediction wrappers ---


def test_predict_units_task_coverage(model, vocab, fixture_units):
    single_val = predict_units(model, fixture_units, vocab, "single-val")
    assert all(p.valence is not None and p.ec is None for p in single_val)
    single_ec = predict_units(model, fixture_units, vocab, "single-ec")
    assert all(p.valence is None for p in single_ec)
    assert [len(p.ec) for p in single_ec] == [2, 1, 1, 1]
    joint = predict_units(model, fixture_units, vocab, "joint")
    assert all(p.valence is not None and p.ec is not None for p in joint)
    for setting in ("two-step-val-ec", "two-step-ec-val"):
        preds = predict_units(model, fixture_units, vocab, setting)
        assert all(p.valence in (0, 1, 2) for p in preds)
        assert [len(p.ec) for p in preds] == [2, 1, 1, 1]


def test_predict_units_deterministic(model, vocab, fixture_units):
    a = predict_units(model, fixture_units, vocab, "two-step-ec-val")
    b = predict_units(model, fixture_units, vocab, "two-step-ec-val")
    assert a == b


def test_predict_units_zero_candidate_unit(model, vocab):
    fus = [unit("z0", ["w1", "w2"], "neutral"), unit("z1", ["w3"], "neutral")]
    for setting in ("single-val", "joint", "two-step-val-ec", "two-step-ec-val"):
        preds = predict_units(model, fus, vocab, setting)
        assert len(preds) == 2
        for p in preds:
            if p.ec is not None:
                assert p.ec == []
            if setting != "single-ec":
                assert p.valence in (0, 1, 2)


def test_predict_units_two_step_val_first_valence_equals_single(model, vocab, fixture_units):
    two = predict_units(model, fixture_units, vocab, "two-step-val-ec")
    one = predict_units(model, fixture_units, vocab, "single-val")
    assert [p.valence for p in two] == [p.valence for p in one]


def test_predict_units_rejects_unknown_setting(model, vocab, fixture_units):
    with pytest.raises(ValueError, match="setting"):
        predict_units(model, fixture_units, vocab, "triple-step")
