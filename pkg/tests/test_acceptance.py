"""Full-stack acceptance suite.

One test per top-level guarantee, in rough order of cost: exact formula
checks, decoding schema fuzz, gradient verification, metric brute-forcing,
generator calibration, the directional context-dependency orderings on a
strongly dependent corpus, CLI byte-determinism, and per-regime overfit
sanity. Budgets are asserted where a test is expected to stay cheap.
"""

import math
import time
from dataclasses import replace
from random import Random

import torch

from mtlaffect import cli
from mtlaffect.backbone import BackboneConfig, build_decoder
from mtlaffect.corpus import (
    CorpusSplit,
    ECCandidate,
    FunctionalUnit,
    GeneratorSpec,
    all_units,
    corpus_stats,
    ec_intersection_stats,
    generate_corpus,
)
from mtlaffect.discriminative import (
    build_classifier,
    collate_units,
    forward_joint,
    interpolated_loss,
)
from mtlaffect.encodings import (
    EC_FIRST,
    VAL_FIRST,
    Vocabulary,
    render_prompt_ec,
    render_prompt_two_step,
    render_prompt_valence,
)
from mtlaffect.evaluation import aggregate, evaluate_regime, macro_f1
from mtlaffect.generative import GenerationConstraint, constrained_decode, lm_loss
from mtlaffect.trainer import (
    ArchSpec,
    RegimeConfig,
    TrainConfig,
    lr_at,
    run_regime,
    train_regime_model,
)

VALENCE_SET = ("negative", "positive", "neutral")


def make_fixture_units():
    # Eight memorizable units covering all three valences and both carrier
    # labels. m1/p1 appear once as carriers and once as neutral-unit
    # candidates, so the EC decision needs unit context, not just the token.
    rows = [
        ("negative", ["f1", "m1", "f2", "f3"], [(1, 2, "yes"), (3, 4, "no")]),
        ("negative", ["f4", "f2", "m2", "f1"], [(2, 3, "yes")]),
        ("negative", ["m3", "f5", "f1", "f6"], [(0, 1, "yes"), (1, 2, "no")]),
        ("positive", ["f2", "p1", "f4", "f5"], [(1, 2, "yes"), (2, 3, "no")]),
        ("positive", ["f6", "f3", "p2", "f2"], [(2, 3, "yes")]),
        ("neutral", ["f1", "m1", "f5", "f2"], [(1, 2, "no")]),
        ("neutral", ["f6", "p1", "f2", "f5"], [(1, 2, "no"), (2, 3, "no")]),
        ("neutral", ["f3", "f6", "f1", "f4"], [(3, 4, "no")]),
    ]
    units = []
    for i, (valence, tokens, spans) in enumerate(rows):
        units.append(
            FunctionalUnit(
                unit_id=f"fx{i}",
                narrative_id="fx",
                tokens=tokens,
                valence=valence,
                candidates=[ECCandidate(start=s, end=e, carrier=c) for s, e, c in spans],
            )
        )
    return units


# --- 1: closed-form pieces ------------------------------------------------


def test_01_loss_interpolation_schedule_and_lm_loss_formulas():
    t0 = time.monotonic()
    rng = Random(101)
    for _ in range(1000):
        lam = rng.random()
        loss_val = rng.uniform(0.0, 10.0)
        loss_ec = rng.uniform(0.0, 10.0)
        got = interpolated_loss(lam, loss_val, loss_ec)
        want = lam * loss_val + (1 - lam) * loss_ec
        assert abs(got - want) <= math.ulp(want)

    # warmup ends at round(0.10 * 20) = 2; decay midpoint lands on step 11
    assert lr_at(0, 20, 1e-3, 0.10) == 0.0
    assert lr_at(2, 20, 1e-3, 0.10) == 1e-3
    assert lr_at(11, 20, 1e-3, 0.10) == 5.0e-4

    units = make_fixture_units()
    vocab = Vocabulary.build(units)
    cfg = BackboneConfig(vocab_size=len(vocab), hidden_dim=16, n_layers=1,
                         n_heads=2, max_seq_len=48, seed=0)
    dec = build_decoder(cfg)
    with torch.no_grad():
        dec.lm_head.weight.zero_()
        dec.lm_head.bias.zero_()
    prompts = [render_prompt_valence(u, vocab) for u in units]
    loss = lm_loss(dec, prompts, vocab.pad_id)
    assert abs(loss.item() - math.log(len(vocab))) < 1e-6
    assert time.monotonic() - t0 < 10.0


# --- 2: decoding schema fuzz ------------------------------------------------


def test_02_constrained_decoding_always_schema_valid():
    t0 = time.monotonic()
    corpus = generate_corpus(GeneratorSpec(n_narratives=5, units_per_narrative=6, seed=7))
    units = all_units(corpus)
    vocab = Vocabulary.build(units)
    prompt_pool = []
    for u in units:
        prompt_pool.append(render_prompt_valence(u, vocab))
        if u.candidates:
            prompt_pool.append(render_prompt_ec(u, vocab))
            prompt_pool.append(render_prompt_two_step(u, vocab, VAL_FIRST))
            prompt_pool.append(render_prompt_two_step(u, vocab, EC_FIRST))

    rng = Random(202)
    decoded = 0
    for model_seed in range(10):
        cfg = BackboneConfig(vocab_size=len(vocab), hidden_dim=16, n_layers=1,
                             n_heads=2, max_seq_len=64, seed=model_seed)
        dec = build_decoder(cfg)
        for prompt in rng.sample(prompt_pool, 10):
            constraint = GenerationConstraint.from_prompt(prompt, vocab)
            labels = constrained_decode(dec, constraint)
            assert len(labels) == len(prompt.target_slots)
            assert len(constraint.schedule) == len(prompt.target_slots)
            for label_id, (forced, allowed), (pos, _) in zip(
                labels, constraint.schedule, prompt.target_slots
            ):
                assert label_id in allowed
                assert forced == prompt.input_ids[pos - 1]
                assert vocab.token(forced) in ("<val>", "<EC_pred>")
            decoded += 1
    assert decoded == 100
    assert time.monotonic() - t0 < 60.0


# --- 3: gradient verification ------------------------------------------------


def test_03_analytic_gradients_match_finite_differences():
    t0 = time.monotonic()
    units = make_fixture_units()
    vocab = Vocabulary.build(units)
    cfg = BackboneConfig(vocab_size=len(vocab), hidden_dim=16, n_layers=1,
                         n_heads=2, max_seq_len=48, dropout_rate=0.0, seed=5)
    model = build_classifier(cfg).double()
    model.eval()
    batch = collate_units(units, vocab)

    def loss_value():
        return forward_joint(model, batch, lam=0.6).loss_total

    model.zero_grad(set_to_none=True)
    loss_value().backward()
    analytic = {name: p.grad.detach().clone() for name, p in model.named_parameters()}

    checked = 0
    h = 1e-6
    for name, param in model.named_parameters():
        grads = analytic[name].flatten()
        flat = param.data.flatten()
        step = max(1, flat.numel() // 3)
        for idx in range(0, flat.numel(), step):
            if abs(grads[idx].item()) < 1e-6:
                continue
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + h
                up = loss_value().item()
                flat[idx] = original - h
                down = loss_value().item()
                flat[idx] = original
            fd = (up - down) / (2 * h)
            an = grads[idx].item()
            assert abs(fd - an) / max(abs(an), 1e-8) <= 1e-3, (name, idx, fd, an)
            checked += 1
    assert checked >= 20

    # endpoint lambdas cut the other task's head out of the graph
    model.zero_grad(set_to_none=True)
    forward_joint(model, batch, lam=1.0).loss_total.backward()
    assert torch.count_nonzero(model.ec_head.weight.grad) == 0
    assert torch.count_nonzero(model.ec_head.bias.grad) == 0
    assert torch.count_nonzero(model.valence_head.weight.grad) > 0
    model.zero_grad(set_to_none=True)
    forward_joint(model, batch, lam=0.0).loss_total.backward()
    assert torch.count_nonzero(model.valence_head.weight.grad) == 0
    assert torch.count_nonzero(model.valence_head.bias.grad) == 0
    assert torch.count_nonzero(model.ec_head.weight.grad) > 0
    assert time.monotonic() - t0 < 120.0


# --- 4: metric oracle ------------------------------------------------


def _brute_force_macro_f1(golds, preds, label_set):
    total = 0.0
    for label in label_set:
        tp = sum(1 for g, p in zip(golds, preds) if g == label and p == label)
        fp = sum(1 for g, p in zip(golds, preds) if g != label and p == label)
        fn = sum(1 for g, p in zip(golds, preds) if g == label and p != label)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        total += f1
    return total / len(label_set)


def test_04_macro_f1_matches_brute_force_confusions():
    rng = Random(404)
    for _ in range(1000):
        k = rng.randint(2, 5)
        labels = list(range(k))
        n = rng.randint(1, 40)
        golds = [rng.randrange(k) for _ in range(n)]
        preds = [rng.randrange(k) for _ in range(n)]
        got = macro_f1(golds, preds, labels).macro_f1
        want = _brute_force_macro_f1(golds, preds, labels)
        assert abs(got - want) <= 1e-12

    golds = ["negative", "positive", "neutral", "negative"]
    preds = ["negative", "neutral", "neutral", "negative"]
    assert abs(macro_f1(golds, preds, VALENCE_SET).macro_f1 - 5 / 9) <= 1e-12


# --- 5: generator calibration ------------------------------------------------


def test_05_generator_hits_calibration_targets():
    t0 = time.monotonic()
    spec = GeneratorSpec(n_narratives=4273, units_per_narrative=1, seed=0)
    units = all_units(generate_corpus(spec))
    assert len(units) == 4273
    stats = corpus_stats(units)
    assert abs(stats.polar_fraction - 0.40) <= 0.03
    assert abs(stats.ec_rate_polar - 0.447) <= 0.03
    assert abs(ec_intersection_stats(units).overlap_ratio - 0.04) <= 0.02
    for unit in units:
        assert bool(unit.carrier_candidates()) == (unit.valence != "neutral")
    assert time.monotonic() - t0 < 30.0


# --- 6: directional orderings on a strongly dependent corpus -----------------

# Polarity is decided by carrier labels alone: with distractors planted in a
# quarter of the neutral units, surface text underdetermines both tasks, so
# gold first-step contexts carry information predictions cannot recover.
DEPENDENT_SPEC = GeneratorSpec(
    n_narratives=80,
    units_per_narrative=12,
    polar_fraction=0.40,
    positive_fraction_of_all=0.13,
    negative_fraction_of_all=0.27,
    ec_rate_in_polar=0.60,
    lexicon_overlap=0.0,
    neutral_vocab_size=60,
    positive_vocab_size=20,
    negative_vocab_size=40,
    mean_candidates_per_unit=2.5,
    distractor_rate=0.25,
    seed=0,
)
DESK_ARCH = ArchSpec(hidden_dim=48, n_layers=2, n_heads=4, max_seq_len=64)
# desk-scale budgets: published defaults assume pre-trained encoders, so the
# tiny from-scratch models get rates and patience that actually converge
DISC_CFG = TrainConfig(learning_rate=3e-3, batch_size=32, max_epochs=40,
                       warmup_fraction=0.1, early_stop_patience=10,
                       lam=0.4, tf_prob=0.1)
GEN_CFG = TrainConfig(learning_rate=2e-3, batch_size=32, max_epochs=60,
                      warmup_fraction=0.1, early_stop_patience=15,
                      lam=0.4, tf_prob=0.1, loss_scope="targets")
# matched fine-tuning budget for the warm-start comparison: tight enough
# that a cold start cannot fully recover the carrier features
ADAPT_CFG = TrainConfig(learning_rate=2e-4, batch_size=32, max_epochs=25,
                        warmup_fraction=0.1, early_stop_patience=15,
                        lam=0.4, tf_prob=0.1, loss_scope="targets")
ADAPT_PHASE1 = TrainConfig(learning_rate=2e-3, batch_size=32, max_epochs=30,
                           warmup_fraction=0.1, early_stop_patience=15,
                           loss_scope="targets")


def _cell_mean(narratives, regime_id, base, task, phase1=None):
    regime = RegimeConfig.parse(regime_id)
    config = replace(base, tf_prob=1.0 if regime.oracle else base.tf_prob)
    runs = run_regime(regime, narratives, n_seeds=3, config=config,
                      arch=DESK_ARCH, phase1_config=phase1)
    mean, _ = aggregate([r.tasks[task].macro_f1 for r in runs])
    return mean


def test_06_gold_context_and_adaptation_orderings():
    t0 = time.monotonic()
    narratives = generate_corpus(DEPENDENT_SPEC)
    cells = {}
    for regime_id, base, task in (
        ("disc:two-step-val-ec", DISC_CFG, "ec"),
        ("disc:two-step-val-ec:oracle", DISC_CFG, "ec"),
        ("disc:two-step-ec-val", DISC_CFG, "valence"),
        ("disc:two-step-ec-val:oracle", DISC_CFG, "valence"),
        ("gen:two-step-val-ec", GEN_CFG, "ec"),
        ("gen:two-step-val-ec:oracle", GEN_CFG, "ec"),
        ("gen:two-step-ec-val", GEN_CFG, "valence"),
        ("gen:two-step-ec-val:oracle", GEN_CFG, "valence"),
    ):
        cells[regime_id] = _cell_mean(narratives, regime_id, base, task)
    plain = _cell_mean(narratives, "gen:two-step-ec-val", ADAPT_CFG, "valence")
    adapted = _cell_mean(narratives, "gen:two-step-ec-val:domain-adapt",
                         ADAPT_CFG, "valence", phase1=ADAPT_PHASE1)

    problems = []
    for predicted_id in ("disc:two-step-val-ec", "disc:two-step-ec-val",
                         "gen:two-step-val-ec", "gen:two-step-ec-val"):
        oracle_id = predicted_id + ":oracle"
        if cells[oracle_id] < cells[predicted_id]:
            problems.append(
                f"{oracle_id} {cells[oracle_id]:.4f} < {predicted_id} {cells[predicted_id]:.4f}"
            )
    for oracle_id in ("disc:two-step-ec-val:oracle", "gen:two-step-ec-val:oracle"):
        if cells[oracle_id] < 0.90:
            problems.append(f"{oracle_id} {cells[oracle_id]:.4f} < 0.90")
    if adapted < plain:
        problems.append(f"adapted {adapted:.4f} < plain {plain:.4f}")
    assert not problems, "; ".join(problems)
    assert time.monotonic() - t0 < 2700.0


# --- 7: byte determinism of the full pipeline --------------------------------


def test_07_reproduce_twice_is_byte_identical(tmp_path):
    spec = tmp_path / "spec.cfg"
    spec.write_text("n_narratives=6\nunits_per_narrative=10\n")
    corpus = tmp_path / "corpus.jsonl"
    assert cli.main(["gen-data", "--spec", str(spec), "--out", str(corpus),
                     "--seed", "3"]) == 0
    config = tmp_path / "train.cfg"
    config.write_text(
        "learning_rate=2e-3\nbatch_size=16\nmax_epochs=2\nwarmup_fraction=0.3\n"
    )
    arch = ["--hidden-dim", "16", "--n-layers", "1", "--n-heads", "2",
            "--max-seq-len", "64"]
    outputs = []
    for out_name in ("rep_a", "rep_b"):
        out = tmp_path / out_name
        code = cli.main(["reproduce", "--corpus", str(corpus), "--seeds", "1",
                         "--config", str(config), "--out", str(out), *arch])
        assert code == 0
        assert not (out / "failures.log").exists()
        outputs.append(((out / "grid.md").read_bytes(), (out / "grid.csv").read_bytes()))
    assert outputs[0] == outputs[1]


# --- 8: every regime can memorize ------------------------------------------------


def test_08_every_regime_overfits_the_fixture():
    units = make_fixture_units()
    split = CorpusSplit(train=units, validation=units, test=units, seed=0)
    vocab = Vocabulary.build(units)
    arch = ArchSpec(hidden_dim=32, n_layers=1, n_heads=2, max_seq_len=48)
    failures = []
    for regime in cli.reproduction_regimes():
        # batch == fixture, so epochs == optimizer steps; adapted cells split
        # their 200-step budget 50/150 across the two phases. The first task
        # gets the heavier loss share so it saturates before the selection
        # metric (the second task) freezes the best checkpoint.
        lam = {"two-step-val-ec": 0.9, "two-step-ec-val": 0.3}.get(regime.setting, 0.5)
        epochs = 150 if regime.domain_adapt else 200
        config = TrainConfig(
            learning_rate=5e-3, batch_size=8, max_epochs=epochs,
            warmup_fraction=0.1, early_stop_patience=epochs, seed=0,
            lam=lam, tf_prob=1.0 if regime.oracle else 0.5,
            loss_scope="targets" if regime.family == "gen" else "full",
        )
        phase1 = (replace(config, max_epochs=50, early_stop_patience=50)
                  if regime.domain_adapt else None)
        model, _ = train_regime_model(regime, split, vocab, config, arch,
                                      phase1_config=phase1)
        metrics = evaluate_regime(model, split.train, vocab, regime, seed=0)
        for task, tm in metrics.tasks.items():
            if tm.macro_f1 != 1.0:
                failures.append(f"{regime.id()} {task} {tm.macro_f1:.4f}")
    assert not failures, "; ".join(failures)
