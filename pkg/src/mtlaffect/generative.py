"""Causal-LM route: prompt-based training for the valence and carrier tasks,
constrained decoding that forces the special tokens and restricts label
choices, the two-step prompt order handling, and the two-phase domain
adaptation schedule.

Unlike the discriminative route there is no tf_prob knob: gold labels occupy
the context positions of every training sequence, so teacher forcing is
inherent to LM training. At inference the emitted (possibly wrong) labels
are the conditioning context.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .backbone import CausalDecoder, state_hash
from .corpus import FunctionalUnit
from .discriminative import TASK_EC, TASK_VALENCE, UnitPrediction
from .encodings import (
    CARRIER_LABEL_TOKENS,
    LOSS_SCOPE_FULL,
    PromptSequence,
    VALENCE_LABEL_TOKENS,
    Vocabulary,
    render_prompt_ec,
    render_prompt_two_step,
    render_prompt_valence,
)

KIND_VALENCE = "valence"
KIND_EC = "ec"
KIND_TWO_STEP = "two_step"


@dataclass
class PromptItem:
    """One training sequence plus bookkeeping for mixing and debugging."""

    kind: str
    unit_id: str
    prompt: PromptSequence


def valence_prompt_items(
    units: Sequence[FunctionalUnit], vocab: Vocabulary, loss_scope: str = LOSS_SCOPE_FULL
) -> list[PromptItem]:
    return [
        PromptItem(KIND_VALENCE, u.unit_id, render_prompt_valence(u, vocab, loss_scope))
        for u in units
    ]


def ec_prompt_items(
    units: Sequence[FunctionalUnit], vocab: Vocabulary, loss_scope: str = LOSS_SCOPE_FULL
) -> list[PromptItem]:
    """Carrier prompts; units without candidates have no carrier arity and
    are skipped."""
    return [
        PromptItem(KIND_EC, u.unit_id, render_prompt_ec(u, vocab, loss_scope))
        for u in units
        if u.candidates
    ]


def joint_prompt_items(
    units: Sequence[FunctionalUnit], vocab: Vocabulary, loss_scope: str = LOSS_SCOPE_FULL
) -> list[PromptItem]:
    """Every unit contributes its valence prompt and, when candidates exist,
    its carrier prompt; the trainer's shuffling mixes kinds within batches."""
    return valence_prompt_items(units, vocab, loss_scope) + ec_prompt_items(
        units, vocab, loss_scope
    )


def two_step_prompt_items(
    units: Sequence[FunctionalUnit],
    vocab: Vocabulary,
    order: str,
    loss_scope: str = LOSS_SCOPE_FULL,
) -> list[PromptItem]:
    return [
        PromptItem(KIND_TWO_STEP, u.unit_id, render_prompt_two_step(u, vocab, order, loss_scope))
        for u in units
        if u.candidates
    ]


# ---------------------------------------------------------------------------
# LM loss
# ---------------------------------------------------------------------------


def lm_loss(decoder: CausalDecoder, prompts: Sequence[PromptSequence], pad_id: int) -> torch.Tensor:
    """Mean next-token cross-entropy over mask-selected positions of a padded
    batch. A position t counts when loss_mask[t] == 1; its logits come from
    position t-1 (so mask[0] is always ignored)."""
    if not prompts:
        raise ValueError("lm_loss on an empty batch")
    max_len = max(len(p.input_ids) for p in prompts)
    ids = torch.full((len(prompts), max_len), pad_id, dtype=torch.long)
    attn = torch.zeros((len(prompts), max_len), dtype=torch.long)
    mask = torch.zeros((len(prompts), max_len), dtype=torch.bool)
    for b, p in enumerate(prompts):
        n = len(p.input_ids)
        ids[b, :n] = torch.tensor(p.input_ids, dtype=torch.long)
        attn[b, :n] = 1
        mask[b, :n] = torch.tensor(p.loss_mask, dtype=torch.bool)
    mask[:, 0] = False
    if not mask.any():
        raise ValueError("loss mask selects no positions")
    logits = decoder(ids, attn)
    pred = logits[:, :-1][mask[:, 1:]]
    target = ids[:, 1:][mask[:, 1:]]
    return F.cross_entropy(pred, target)


def batch_lm_loss_fn(vocab: Vocabulary) -> Callable:
    """Adapter giving the trainer a (model, items) -> loss callable."""

    def fn(decoder: CausalDecoder, items: Sequence[PromptItem]) -> torch.Tensor:
        return lm_loss(decoder, [it.prompt for it in items], vocab.pad_id)

    return fn


# ---------------------------------------------------------------------------
# Constrained decoding
# ---------------------------------------------------------------------------


@dataclass
class GenerationConstraint:
    """Decoding schedule for a rendered prompt: the ids before the first
    target, then per slot the forced special token and the label ids the
    arg-max may choose between."""

    prefix_ids: list[int]
    schedule: list[tuple[int, tuple[int, ...]]]

    @classmethod
    def from_prompt(cls, prompt: PromptSequence, vocab: Vocabulary) -> "GenerationConstraint":
        if not prompt.target_slots:
            raise ValueError("prompt has no target slots")
        schedule = []
        for pos, allowed_tokens in prompt.target_slots:
            if not allowed_tokens:
                raise ValueError("empty allowed label set")
            forced = prompt.input_ids[pos - 1]
            schedule.append((forced, tuple(vocab.id(t) for t in allowed_tokens)))
        first_pos = prompt.target_slots[0][0]
        return cls(prefix_ids=list(prompt.input_ids[: first_pos - 1]), schedule=schedule)


def _argmax_allowed(logits: torch.Tensor, allowed: tuple[int, ...]) -> int:
    """Greedy choice restricted to the allowed ids; ties go to the earliest
    entry, and allowed tuples are ordered by class code."""
    best_id = allowed[0]
    best_val = logits[allowed[0]].item()
    for cand in allowed[1:]:
        val = logits[cand].item()
        if val > best_val:
            best_id, best_val = cand, val
    return best_id


def constrained_decode(decoder: CausalDecoder, constraint: GenerationConstraint) -> list[int]:
    """Emit one label id per scheduled slot. The forced special token is
    appended verbatim before each choice (its own logits are never consulted)
    and each chosen label becomes context for the following slots."""
    ids = list(constraint.prefix_ids)
    labels = []
    decoder.eval()
    with torch.no_grad():
        for forced, allowed in constraint.schedule:
            ids.append(forced)
            logits = decoder(torch.tensor([ids], dtype=torch.long))[0, -1]
            choice = _argmax_allowed(logits, allowed)
            ids.append(choice)
            labels.append(choice)
    return labels


def slot_tasks(prompt: PromptSequence) -> list[str]:
    """Which task each slot belongs to, recognized by its label alphabet."""
    tasks = []
    for _, allowed in prompt.target_slots:
        if allowed == VALENCE_LABEL_TOKENS:
            tasks.append(TASK_VALENCE)
        elif allowed == CARRIER_LABEL_TOKENS:
            tasks.append(TASK_EC)
        else:
            raise ValueError(f"unrecognized slot alphabet {allowed!r}")
    return tasks


def oracle_decode(
    decoder: CausalDecoder, prompt: PromptSequence, vocab: Vocabulary, first_task: str
) -> list[int]:
    """Decode only the second task's slots; first-task slots are filled with
    the gold label tokens already present in the prompt."""
    if first_task not in (TASK_VALENCE, TASK_EC):
        raise ValueError(f"unknown task {first_task!r}")
    constraint = GenerationConstraint.from_prompt(prompt, vocab)
    tasks = slot_tasks(prompt)
    gold_ids = [prompt.input_ids[pos] for pos, _ in prompt.target_slots]
    ids = list(constraint.prefix_ids)
    out = []
    decoder.eval()
    with torch.no_grad():
        for (forced, allowed), task, gold in zip(constraint.schedule, tasks, gold_ids):
            ids.append(forced)
            if task == first_task:
                ids.append(gold)
            else:
                logits = decoder(torch.tensor([ids], dtype=torch.long))[0, -1]
                choice = _argmax_allowed(logits, allowed)
                ids.append(choice)
                out.append(choice)
    return out


def _label_id_to_valence(vocab: Vocabulary, label_id: int) -> int:
    return VALENCE_LABEL_TOKENS.index(vocab.token(label_id))

def _label_id_to_carrier(vocab: Vocabulary, label_id: int) -> int:
    return CARRIER_LABEL_TOKENS.index(vocab.token(label_id))


# ---------------------------------------------------------------------------
# Inference wrappers
# ---------------------------------------------------------------------------


def predict_units_generative(
    decoder: CausalDecoder,
    fus: Sequence[FunctionalUnit],
    vocab: Vocabulary,
    setting: str,
    oracle: bool = False,
) -> list[UnitPrediction]:
    """Prompt-based inference for one regime setting. Tasks a setting does
    not produce are None; in two-step settings units without candidates have
    no prompt and get (None, None) — excluded from metrics downstream."""
    out = []
    for fu in fus:
        if setting == "single-val":
            labels = constrained_decode(
                decoder, GenerationConstraint.from_prompt(render_prompt_valence(fu, vocab), vocab)
            )
            out.append(UnitPrediction(valence=_label_id_to_valence(vocab, labels[0]), ec=None))
        elif setting == "single-ec":
            if not fu.candidates:
                out.append(UnitPrediction(valence=None, ec=[]))
                continue
            labels = constrained_decode(
                decoder, GenerationConstraint.from_prompt(render_prompt_ec(fu, vocab), vocab)
            )
            out.append(UnitPrediction(
                valence=None, ec=[_label_id_to_carrier(vocab, i) for i in labels]
            ))
        elif setting == "joint":
            labels = constrained_decode(
                decoder, GenerationConstraint.from_prompt(render_prompt_valence(fu, vocab), vocab)
            )
            valence = _label_id_to_valence(vocab, labels[0])
            if fu.candidates:
                ec_labels = constrained_decode(
                    decoder, GenerationConstraint.from_prompt(render_prompt_ec(fu, vocab), vocab)
                )
                ec = [_label_id_to_carrier(vocab, i) for i in ec_labels]
            else:
                ec = []
            out.append(UnitPrediction(valence=valence, ec=ec))
        elif setting in ("two-step-val-ec", "two-step-ec-val"):
            if not fu.candidates:
                out.append(UnitPrediction(valence=None, ec=None))
                continue
            order = "val_first" if setting == "two-step-val-ec" else "ec_first"
            first_task = TASK_VALENCE if setting == "two-step-val-ec" else TASK_EC
            prompt = render_prompt_two_step(fu, vocab, order)
            if oracle:
                # only the second task is decoded; the first is gold context
                labels = oracle_decode(decoder, prompt, vocab, first_task)
                tasks = [t for t in slot_tasks(prompt) if t != first_task]
            else:
                labels = constrained_decode(
                    decoder, GenerationConstraint.from_prompt(prompt, vocab)
                )
                tasks = slot_tasks(prompt)
            valence: int | None = None
            ec: list[int] | None = [] if TASK_EC in tasks else None
            for task, label_id in zip(tasks, labels):
                if task == TASK_VALENCE:
                    valence = _label_id_to_valence(vocab, label_id)
                else:
                    ec.append(_label_id_to_carrier(vocab, label_id))
            out.append(UnitPrediction(valence=valence, ec=ec))
        else:
            raise ValueError(f"unknown setting {setting!r}")
    return out


# ---------------------------------------------------------------------------
# Training drivers
# ---------------------------------------------------------------------------


def _train_items(decoder, vocab, train_items, metric_fn, config):
    from .trainer import train

    return train(decoder, train_items, batch_lm_loss_fn(vocab), metric_fn, config)


def train_single_generative(decoder, split, vocab, task, config, metric_fn):
    builder = valence_prompt_items if task == TASK_VALENCE else ec_prompt_items
    items = builder(split.train, vocab, config.loss_scope)
    return _train_items(decoder, vocab, items, metric_fn, config)


def train_joint_generative(decoder, split, vocab, config, metric_fn):
    items = joint_prompt_items(split.train, vocab, config.loss_scope)
    return _train_items(decoder, vocab, items, metric_fn, config)


def train_two_step_generative(decoder, split, vocab, order, config, metric_fn):
    items = two_step_prompt_items(split.train, vocab, order, config.loss_scope)
    return _train_items(decoder, vocab, items, metric_fn, config)


@dataclass
class DomainAdaptResult:
    model: CausalDecoder
    phase1_log: object
    phase2_log: object
    phase1_state_hash: str
    phase2_init_hash: str


def domain_adapt(
    decoder,
    split,
    vocab,
    first_task: str,
    config,
    phase1_metric_fn,
    phase2_metric_fn,
    phase1_config=None,
) -> DomainAdaptResult:
    """Phase 1 fine-tunes on the first task's single-task prompts; phase 2
    continues from those weights with two-step training on both tasks. The
    two-step order puts the adapted task first."""
    phase1_config = phase1_config or config
    model, phase1_log = train_single_generative(
        decoder, split, vocab, first_task, phase1_config, phase1_metric_fn
    )
    handoff = state_hash(model)
    order = "val_first" if first_task == TASK_VALENCE else "ec_first"
    model, phase2_log = train_two_step_generative(
        model, split, vocab, order, config, phase2_metric_fn
    )
    # the trainer hashes its input model on entry; handoff must match it
    return DomainAdaptResult(
        model=model,
        phase1_log=phase1_log,
        phase2_log=phase2_log,
        phase1_state_hash=handoff,
        phase2_init_hash=phase2_log.init_state_hash,
    )
