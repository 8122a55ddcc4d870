"""Dual-head classifier over the shared encoder: a valence head reading the
CLS state and a carrier head reading max-pooled span states. Provides the
single-task, joint (interpolated loss), and two-step (re-encoding with a
textual first-step context, optionally teacher-forced) forward paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from random import Random
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig, SequenceEncoder, _seeded_init
from .corpus import FunctionalUnit
from .encodings import (
    EC_FIRST,
    ECContext,
    TWO_STEP_ORDERS,
    VAL_FIRST,
    ValenceContext,
    Vocabulary,
    encode_discriminative,
)

TASK_VALENCE = "valence"
TASK_EC = "ec"
TASKS = (TASK_VALENCE, TASK_EC)

COMBINE_INTERP = "interp"
COMBINE_SUM = "sum"

CLASSIFIER_KIND = "classifier"


class DualHeadClassifier(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.encoder = SequenceEncoder(config)
        self.valence_head = nn.Linear(config.hidden_dim, 3)
        self.ec_head = nn.Linear(config.hidden_dim, 2)


def build_classifier(config: BackboneConfig) -> DualHeadClassifier:
    with torch.random.fork_rng():
        model = DualHeadClassifier(config)
        _seeded_init(model, config)
    return model


@dataclass
class ClassifierBatch:
    """Padded tensors for a list of encoded units. span_slices stays ragged
    (per-example lists); ec_targets is flattened in example-then-span order."""

    input_ids: torch.Tensor
    attention_mask: torch.Tensor
    span_slices: list[list[tuple[int, int]]]
    valence_targets: torch.Tensor
    ec_targets: torch.Tensor

    @property
    def n_candidates(self) -> int:
        return sum(len(s) for s in self.span_slices)


def collate_units(
    fus: Sequence[FunctionalUnit],
    vocab: Vocabulary,
    contexts: Sequence[ValenceContext | ECContext | None] | None = None,
) -> ClassifierBatch:
    if not fus:
        raise ValueError("cannot collate an empty batch")
    if contexts is None:
        contexts = [None] * len(fus)
    examples = [encode_discriminative(fu, vocab, ctx) for fu, ctx in zip(fus, contexts)]
    max_len = max(len(ex.input_ids) for ex in examples)
    ids = torch.full((len(examples), max_len), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros((len(examples), max_len), dtype=torch.long)
    for b, ex in enumerate(examples):
        ids[b, : len(ex.input_ids)] = torch.tensor(ex.input_ids, dtype=torch.long)
        mask[b, : len(ex.input_ids)] = 1
    flat_ec = [t for ex in examples for t in ex.ec_targets]
    return ClassifierBatch(
        input_ids=ids,
        attention_mask=mask,
        span_slices=[ex.span_slices for ex in examples],
        valence_targets=torch.tensor([ex.valence_target for ex in examples], dtype=torch.long),
        ec_targets=torch.tensor(flat_ec, dtype=torch.long),
    )


def _valence_logits(model: DualHeadClassifier, hidden: torch.Tensor) -> torch.Tensor:
    return model.valence_head(hidden[:, 0])


def _ec_logits(
    model: DualHeadClassifier, hidden: torch.Tensor, span_slices: list[list[tuple[int, int]]]
) -> torch.Tensor:
    pooled = []
    for b, spans in enumerate(span_slices):
        for start, end in spans:
            states = torch.cat([hidden[b, 0:1], hidden[b, start:end]], dim=0)
            pooled.append(states.max(dim=0).values)
    if not pooled:
        raise ValueError("EC forward on a batch with zero candidates")
    return model.ec_head(torch.stack(pooled))


def argmax_lowest(x: torch.Tensor) -> torch.Tensor:
    """Arg-max over the last dim; exact ties go to the lowest index."""
    n = x.size(-1)
    is_max = x == x.max(dim=-1, keepdim=True).values
    score = is_max.long() * torch.arange(n, 0, -1, device=x.device)
    return score.argmax(dim=-1)


def forward_single(
    model: DualHeadClassifier, batch: ClassifierBatch, task: str
) -> tuple[torch.Tensor, torch.Tensor]:
    """One encoder pass and one head. Returns (probabilities, loss): valence
    probs are (batch, 3); EC probs are (total candidates, 2)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    hidden = model.encoder(batch.input_ids, batch.attention_mask)
    if task == TASK_VALENCE:
        logits = _valence_logits(model, hidden)
        loss = F.cross_entropy(logits, batch.valence_targets)
    else:
        logits = _ec_logits(model, hidden, batch.span_slices)
        loss = F.cross_entropy(logits, batch.ec_targets)
    return F.softmax(logits, dim=-1), loss


def interpolated_loss(lam, loss_valence, loss_ec):
    """lam * loss_valence + (1 - lam) * loss_EC, lam in [0, 1]."""
    if not 0.0 <= float(lam) <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return lam * loss_valence + (1 - lam) * loss_ec


def combine_losses(lam, loss_valence, loss_ec, mode: str = COMBINE_INTERP):
    if mode == COMBINE_INTERP:
        return interpolated_loss(lam, loss_valence, loss_ec)
    if mode == COMBINE_SUM:
        return loss_valence + loss_ec
    raise ValueError(f"unknown loss combination mode {mode!r}")


@dataclass
class JointOutput:
    valence_probs: torch.Tensor
    ec_probs: torch.Tensor
    loss_total: torch.Tensor
    loss_valence: torch.Tensor
    loss_ec: torch.Tensor


def forward_joint(
    model: DualHeadClassifier,
    batch: ClassifierBatch,
    lam: float,
    loss_combine: str = COMBINE_INTERP,
) -> JointOutput:
    """Both heads from a single encoder pass; losses combined per mode."""
    hidden = model.encoder(batch.input_ids, batch.attention_mask)
    val_logits = _valence_logits(model, hidden)
    ec_logits = _ec_logits(model, hidden, batch.span_slices)
    loss_valence = F.cross_entropy(val_logits, batch.valence_targets)
    loss_ec = F.cross_entropy(ec_logits, batch.ec_targets)
    return JointOutput(
        valence_probs=F.softmax(val_logits, dim=-1),
        ec_probs=F.softmax(ec_logits, dim=-1),
        loss_total=combine_losses(lam, loss_valence, loss_ec, loss_combine),
        loss_valence=loss_valence,
        loss_ec=loss_ec,
    )


def _split_by_unit(flat: torch.Tensor, span_slices: list[list[tuple[int, int]]]) -> list[torch.Tensor]:
    out = []
    offset = 0
    for spans in span_slices:
        out.append(flat[offset : offset + len(spans)])
        offset += len(spans)
    return out


def _teacher_forcing_draws(rng: Random | None, n: int, tf_prob: float) -> list[bool]:
    if not 0.0 <= tf_prob <= 1.0:
        raise ValueError(f"tf_prob must be in [0, 1], got {tf_prob}")
    if tf_prob == 0.0:
        return [False] * n
    if tf_prob == 1.0:
        return [True] * n
    if rng is None:
        raise ValueError("teacher forcing with 0 < tf_prob < 1 needs an rng")
    return [rng.random() < tf_prob for _ in range(n)]


@dataclass
class TwoStepOutput:
    first_probs: torch.Tensor
    second_probs: torch.Tensor
    loss_total: torch.Tensor
    loss_valence: torch.Tensor
    loss_ec: torch.Tensor
    contexts: list[ValenceContext | ECContext]


def forward_two_step(
    model: DualHeadClassifier,
    fus: Sequence[FunctionalUnit],
    vocab: Vocabulary,
    order: str,
    lam: float = 0.5,
    tf_prob: float = 0.0,
    rng: Random | None = None,
    training: bool = False,
    oracle: bool = False,
    loss_combine: str = COMBINE_INTERP,
) -> TwoStepOutput:
    """Step 1 predicts the first task on context-free encodings; its label is
    rendered into the text and the re-encoded input feeds the second task's
    head. The injected label is plain context, never differentiated through.

    Teacher forcing applies per example during training; at inference the
    predicted label is always used, unless oracle mode forces ground truth.
    """
    if order not in TWO_STEP_ORDERS:
        raise ValueError(f"unknown two-step order {order!r}")
    step1_batch = collate_units(fus, vocab)
    first_task = TASK_VALENCE if order == VAL_FIRST else TASK_EC
    second_task = TASK_EC if order == VAL_FIRST else TASK_VALENCE
    first_probs, first_loss = forward_single(model, step1_batch, first_task)

    if oracle:
        use_gold = [True] * len(fus)
    elif training:
        use_gold = _teacher_forcing_draws(rng, len(fus), tf_prob)
    else:
        use_gold = [False] * len(fus)

    contexts: list[ValenceContext | ECContext] = []
    if first_task == TASK_VALENCE:
        pred_codes = argmax_lowest(first_probs).tolist()
        gold_codes = step1_batch.valence_targets.tolist()
        for i, gold in enumerate(use_gold):
            if gold:
                contexts.append(ValenceContext(gold_codes[i], source="ground_truth"))
            else:
                contexts.append(ValenceContext(pred_codes[i], source="predicted"))
    else:
        flat_pred = argmax_lowest(first_probs)
        per_unit = _split_by_unit(flat_pred, step1_batch.span_slices)
        for fu, gold, preds in zip(fus, use_gold, per_unit):
            if gold:
                texts = [fu.span_text(c) for c in fu.carrier_candidates()]
                contexts.append(ECContext(texts, source="ground_truth"))
            else:
                texts = [
                    fu.span_text(c)
                    for c, p in zip(fu.candidates, preds.tolist())
                    if p == 1
                ]
                contexts.append(ECContext(texts, source="predicted"))

    step2_batch = collate_units(fus, vocab, contexts)
    second_probs, second_loss = forward_single(model, step2_batch, second_task)

    if first_task == TASK_VALENCE:
        loss_valence, loss_ec = first_loss, second_loss
    else:
        loss_valence, loss_ec = second_loss, first_loss
    return TwoStepOutput(
        first_probs=first_probs,
        second_probs=second_probs,
        loss_total=combine_losses(lam, loss_valence, loss_ec, loss_combine),
        loss_valence=loss_valence,
        loss_ec=loss_ec,
        contexts=contexts,
    )


# ---------------------------------------------------------------------------
# Inference wrappers
# ---------------------------------------------------------------------------

SETTING_SINGLE_VAL = "single-val"
SETTING_SINGLE_EC = "single-ec"
SETTING_JOINT = "joint"
SETTING_TWO_STEP_VAL_EC = "two-step-val-ec"
SETTING_TWO_STEP_EC_VAL = "two-step-ec-val"
SETTINGS = (
    SETTING_SINGLE_VAL,
    SETTING_SINGLE_EC,
    SETTING_JOINT,
    SETTING_TWO_STEP_VAL_EC,
    SETTING_TWO_STEP_EC_VAL,
)

SETTING_ORDERS = {
    SETTING_TWO_STEP_VAL_EC: VAL_FIRST,
    SETTING_TWO_STEP_EC_VAL: EC_FIRST,
}


@dataclass
class UnitPrediction:
    """Per-unit predictions; a task the setting does not produce is None."""

    valence: int | None
    ec: list[int] | None


def _ec_codes_per_unit(probs: torch.Tensor, span_slices: list[list[tuple[int, int]]]) -> list[list[int]]:
    flat = argmax_lowest(probs)
    return [chunk.tolist() for chunk in _split_by_unit(flat, span_slices)]


def predict_units(
    model: DualHeadClassifier,
    fus: Sequence[FunctionalUnit],
    vocab: Vocabulary,
    setting: str,
    oracle: bool = False,
    batch_size: int = 32,
) -> list[UnitPrediction]:
    """Frozen-weights inference. Arg-max labels, ties to the lowest code."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    model.eval()
    out: list[UnitPrediction] = []
    with torch.no_grad():
        for lo in range(0, len(fus), batch_size):
            chunk = list(fus[lo : lo + batch_size])
            out.extend(_predict_chunk(model, chunk, vocab, setting, oracle))
    return out


def _predict_chunk(model, fus, vocab, setting, oracle) -> list[UnitPrediction]:
    if setting == SETTING_SINGLE_VAL:
        batch = collate_units(fus, vocab)
        probs, _ = forward_single(model, batch, TASK_VALENCE)
        codes = argmax_lowest(probs).tolist()
        return [UnitPrediction(valence=c, ec=None) for c in codes]

    if setting == SETTING_SINGLE_EC:
        batch = collate_units(fus, vocab)
        if batch.n_candidates == 0:
            return [UnitPrediction(valence=None, ec=[]) for _ in fus]
        probs, _ = forward_single(model, batch, TASK_EC)
        per_unit = _ec_codes_per_unit(probs, batch.span_slices)
        return [UnitPrediction(valence=None, ec=codes) for codes in per_unit]

    if setting == SETTING_JOINT:
        batch = collate_units(fus, vocab)
        hidden = model.encoder(batch.input_ids, batch.attention_mask)
        val_codes = argmax_lowest(_valence_logits(model, hidden)).tolist()
        if batch.n_candidates:
            ec_probs = F.softmax(_ec_logits(model, hidden, batch.span_slices), dim=-1)
            per_unit = _ec_codes_per_unit(ec_probs, batch.span_slices)
        else:
            per_unit = [[] for _ in fus]
        return [UnitPrediction(valence=v, ec=e) for v, e in zip(val_codes, per_unit)]

    order = SETTING_ORDERS[setting]
    if all(not fu.candidates for fu in fus):
        # No candidates anywhere: the EC leg is vacuous for this chunk.
        if order == VAL_FIRST:
            batch = collate_units(fus, vocab)
            probs, _ = forward_single(model, batch, TASK_VALENCE)
        else:
            contexts = [ECContext([], source="ground_truth" if oracle else "predicted")
                        for _ in fus]
            batch = collate_units(fus, vocab, contexts)
            probs, _ = forward_single(model, batch, TASK_VALENCE)
        codes = argmax_lowest(probs).tolist()
        return [UnitPrediction(valence=c, ec=[]) for c in codes]
    result = forward_two_step(
        model, fus, vocab, order, training=False, oracle=oracle
    )
    step1_batch_spans = [
        [(c.start + 1, c.end + 1) for c in fu.candidates] for fu in fus
    ]
    if order == VAL_FIRST:
        val_codes = argmax_lowest(result.first_probs).tolist()
        ec_per_unit = _ec_codes_per_unit(result.second_probs, step1_batch_spans)
    else:
        val_codes = argmax_lowest(result.second_probs).tolist()
        ec_per_unit = _ec_codes_per_unit(result.first_probs, step1_batch_spans)
    return [UnitPrediction(valence=v, ec=e) for v, e in zip(val_codes, ec_per_unit)]
