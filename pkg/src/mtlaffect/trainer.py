"""Shared optimization contract: AdamW with a linear warmup/decay schedule,
seeded shuffling, early stopping on a validation metric, and best-checkpoint
restoration. Also owns the regime vocabulary (family x setting x oracle x
domain-adapt), the published hyperparameter defaults, and the multi-seed
regime runner.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from random import Random
from typing import Callable, Sequence

import torch

from .backbone import BackboneConfig, state_hash
from .corpus import Narrative, all_units, stratified_split
from .discriminative import (
    COMBINE_INTERP,
    TASK_EC,
    TASK_VALENCE,
    build_classifier,
    collate_units,
    forward_joint,
    forward_single,
    forward_two_step,
    predict_units,
)
from .encodings import EC_FIRST, LOSS_SCOPE_FULL, VAL_FIRST, Vocabulary
from .evaluation import RunMetrics, evaluate_regime, metrics_from_predictions

ENV_PREFIX = "MTLAFFECT_"

FAMILY_DISC = "disc"
FAMILY_GEN = "gen"
FAMILIES = (FAMILY_DISC, FAMILY_GEN)

SETTINGS = ("single-val", "single-ec", "joint", "two-step-val-ec", "two-step-ec-val")
TWO_STEP_SETTINGS = ("two-step-val-ec", "two-step-ec-val")

SETTING_ORDER = {"two-step-val-ec": VAL_FIRST, "two-step-ec-val": EC_FIRST}

# Published per-setting defaults: peak learning rates, interpolation weights,
# and teacher-forcing probabilities.
DISC_LEARNING_RATES = {
    "single-val": 5e-5,
    "single-ec": 4e-5,
    "two-step-val-ec": 4e-5,
    "two-step-ec-val": 6e-5,
    "joint": 1e-5,
}
GEN_LEARNING_RATES = {
    "single-val": 9e-3,
    "single-ec": 8e-3,
    "two-step-val-ec": 9e-4,
    "two-step-ec-val": 7e-4,
    "joint": 8e-3,
}
LAMBDA_DEFAULTS = {"two-step-val-ec": 0.5, "two-step-ec-val": 0.4, "joint": 0.3}
TF_DEFAULTS = {"two-step-val-ec": 1.0, "two-step-ec-val": 0.1}

DISC_MAX_EPOCHS = 30
GEN_MAX_EPOCHS = 60


@dataclass(frozen=True)
class RegimeConfig:
    """One cell of the experiment matrix."""

    family: str
    setting: str
    oracle: bool = False
    domain_adapt: bool = False

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.oracle and self.setting not in TWO_STEP_SETTINGS:
            raise ValueError("oracle mode applies only to two-step settings")
        if self.domain_adapt:
            if self.family != FAMILY_GEN:
                raise ValueError("domain adaptation is defined for the generative family only")
            if self.setting not in TWO_STEP_SETTINGS:
                raise ValueError("domain adaptation applies only to two-step settings")
            if self.oracle:
                raise ValueError("oracle and domain adaptation do not combine")

    def id(self) -> str:
        parts = [self.family, self.setting]
        if self.oracle:
            parts.append("oracle")
        if self.domain_adapt:
            parts.append("domain-adapt")
        return ":".join(parts)

    @classmethod
    def parse(cls, regime_id: str) -> "RegimeConfig":
        parts = regime_id.split(":")
        if len(parts) < 2:
            raise ValueError(f"bad regime id {regime_id!r}: expected family:setting[...]")
        family, setting, *flags = parts
        oracle = False
        domain_adapt = False
        for flag in flags:
            if flag == "oracle":
                oracle = True
            elif flag == "domain-adapt":
                domain_adapt = True
            else:
                raise ValueError(f"bad regime id {regime_id!r}: unknown flag {flag!r}")
        regime = cls(family=family, setting=setting, oracle=oracle, domain_adapt=domain_adapt)
        regime.validate()
        return regime

    @property
    def order(self) -> str | None:
        return SETTING_ORDER.get(self.setting)


@dataclass
class TrainConfig:
    learning_rate: float
    batch_size: int = 32
    max_epochs: int = 30
    warmup_fraction: float = 0.10
    early_stop_patience: int = 5
    lam: float = 0.5
    tf_prob: float = 0.0
    weight_decay: float = 0.01
    grad_clip: float | None = None
    seed: int = 0
    loss_scope: str = LOSS_SCOPE_FULL
    loss_combine: str = COMBINE_INTERP

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if not 0.0 <= self.tf_prob <= 1.0:
            raise ValueError("tf_prob must be in [0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def default_train_config(regime: RegimeConfig, seed: int = 0) -> TrainConfig:
    """Published hyperparameters for a regime. Oracle regimes reuse the
    matching two-step learning rate and lambda, with teacher forcing pinned
    to 1.0 (their step-2 context is always ground truth)."""
    regime.validate()
    table = DISC_LEARNING_RATES if regime.family == FAMILY_DISC else GEN_LEARNING_RATES
    config = TrainConfig(
        learning_rate=table[regime.setting],
        max_epochs=DISC_MAX_EPOCHS if regime.family == FAMILY_DISC else GEN_MAX_EPOCHS,
        lam=LAMBDA_DEFAULTS.get(regime.setting, 0.5),
        tf_prob=TF_DEFAULTS.get(regime.setting, 0.0),
        seed=seed,
    )
    if regime.oracle:
        config = replace(config, tf_prob=1.0)
    return config


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_fraction: float) -> float:
    """Linear 0 -> peak over the warmup steps, then linear peak -> 0."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = round(warmup_fraction * total_steps)
    if warmup_steps < 1:
        raise ValueError(
            f"warmup covers no steps (fraction {warmup_fraction}, total {total_steps})"
        )
    if warmup_steps >= total_steps:
        raise ValueError("warmup must end before the last step")
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)


# ---------------------------------------------------------------------------
# Generic training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_metric: float = 0.0
    total_steps_planned: int = 0
    init_state_hash: str = ""


def train(
    model: torch.nn.Module,
    items: Sequence,
    batch_loss_fn: Callable,
    metric_fn: Callable,
    config: TrainConfig,
) -> tuple[torch.nn.Module, TrainLog]:
    """Optimize model on items; select the best epoch by validation metric.

    batch_loss_fn(model, item_batch) must return a scalar loss tensor;
    metric_fn(model) must return a float (higher is better). The returned
    model carries the best epoch's weights. Fully deterministic per seed.
    """
    config.validate()
    if not items:
        raise ValueError("no training items")
    torch.manual_seed(config.seed)
    shuffler = Random(config.seed)
    n_batches = math.ceil(len(items) / config.batch_size)
    total_steps = config.max_epochs * n_batches
    log = TrainLog(total_steps_planned=total_steps, init_state_hash=state_hash(model))
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    best_state = None
    stale_epochs = 0
    global_step = 0
    order = list(items)
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        shuffler.shuffle(order)
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            global_step += 1
            lr = lr_at(global_step, total_steps, config.learning_rate, config.warmup_fraction)
            for group in optimizer.param_groups:
                group["lr"] = lr
            log.lr_trace.append(lr)
            optimizer.zero_grad()
            loss = batch_loss_fn(model, batch)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at step {global_step} (epoch {epoch})"
                )
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            epoch_losses.append(loss.item())
        model.eval()
        val_metric = float(metric_fn(model))
        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                train_loss=sum(epoch_losses) / len(epoch_losses),
                val_metric=val_metric,
            )
        )
        if best_state is None or val_metric > log.best_metric:
            log.best_metric = val_metric
            log.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            stale_epochs = 0
        else:
            stale_epochs += 1
        log.stopped_epoch = epoch
        if stale_epochs >= config.early_stop_patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    return model, log


# ---------------------------------------------------------------------------
# Config file + environment overrides
# ---------------------------------------------------------------------------


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value lines; blank lines and #-comments ignored."""
    mapping: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
    return mapping


def apply_env_overrides(mapping: dict[str, str], environ=None) -> dict[str, str]:
    """MTLAFFECT_<FIELD> environment variables override file values."""
    environ = os.environ if environ is None else environ
    merged = dict(mapping)
    for fname in TrainConfig.__dataclass_fields__:
        env_key = ENV_PREFIX + fname.upper()
        if env_key in environ:
            merged[fname] = environ[env_key]
    return merged


def train_config_from_mapping(
    mapping: dict[str, str], base: TrainConfig | None = None
) -> TrainConfig:
    config = base or TrainConfig(learning_rate=1e-3)
    fields = TrainConfig.__dataclass_fields__
    kwargs = {}
    for key, raw in mapping.items():
        if key not in fields:
            raise ValueError(f"unknown training config field {key!r}")
        if key == "grad_clip":
            kwargs[key] = None if raw.lower() in ("none", "") else float(raw)
        elif fields[key].type in ("int", int):
            kwargs[key] = int(raw)
        elif fields[key].type in ("float", float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    config = replace(config, **kwargs)
    config.validate()
    return config


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for fname in TrainConfig.__dataclass_fields__:
        value = getattr(config, fname)
        lines.append(f"{fname}={'none' if value is None else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Regime running
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    """Desk-scale backbone shape shared by all regimes of an experiment."""

    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 128
    dropout_rate: float = 0.0

    def backbone_config(self, vocab_size: int, seed: int) -> BackboneConfig:
        return BackboneConfig(
            vocab_size=vocab_size,
            hidden_dim=self.hidden_dim,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            max_seq_len=self.max_seq_len,
            dropout_rate=self.dropout_rate,
            seed=seed,
        )


def _disc_loss_fn(vocab: Vocabulary, regime: RegimeConfig, config: TrainConfig) -> Callable:
    setting = regime.setting
    if setting == "single-val":
        return lambda model, units: forward_single(
            model, collate_units(units, vocab), TASK_VALENCE
        )[1]
    if setting == "single-ec":
        return lambda model, units: forward_single(model, collate_units(units, vocab), TASK_EC)[1]
    if setting == "joint":
        return lambda model, units: forward_joint(
            model, collate_units(units, vocab), config.lam, config.loss_combine
        ).loss_total
    order = SETTING_ORDER[setting]
    tf_rng = Random(config.seed * 1000003 + 17)
    return lambda model, units: forward_two_step(
        model,
        units,
        vocab,
        order,
        lam=config.lam,
        tf_prob=config.tf_prob,
        rng=tf_rng,
        training=True,
        loss_combine=config.loss_combine,
    ).loss_total


def selection_tasks(regime: RegimeConfig) -> list[str]:
    """What the early-stopping metric averages: the lone task for single-task
    regimes, the second task for two-step, both tasks for joint."""
    setting = regime.setting
    if setting == "single-val":
        return [TASK_VALENCE]
    if setting == "single-ec":
        return [TASK_EC]
    if setting == "joint":
        return [TASK_VALENCE, TASK_EC]
    if setting == "two-step-val-ec":
        return [TASK_EC]
    return [TASK_VALENCE]


def _disc_metric_fn(vocab, regime, validation_units) -> Callable:
    tasks = selection_tasks(regime)

    def fn(model) -> float:
        preds = predict_units(model, validation_units, vocab, regime.setting, oracle=regime.oracle)
        metrics = metrics_from_predictions(validation_units, preds, tasks)
        return sum(m.macro_f1 for m in metrics.values()) / len(metrics)

    return fn


def _gen_metric_fn(vocab, regime, validation_units) -> Callable:
    from .generative import predict_units_generative

    tasks = selection_tasks(regime)

    def fn(model) -> float:
        preds = predict_units_generative(
            model, validation_units, vocab, regime.setting, oracle=regime.oracle
        )
        metrics = metrics_from_predictions(validation_units, preds, tasks)
        return sum(m.macro_f1 for m in metrics.values()) / len(metrics)

    return fn


def _disc_train_items(regime: RegimeConfig, train_units: list) -> list:
    """Two-step and single-EC regimes train only on units that carry
    candidates; their second leg has nothing to predict otherwise."""
    if regime.setting in ("single-ec", *TWO_STEP_SETTINGS):
        return [u for u in train_units if u.candidates]
    return list(train_units)


def train_regime_model(
    regime: RegimeConfig,
    split,
    vocab: Vocabulary,
    config: TrainConfig,
    arch: ArchSpec = ArchSpec(),
    phase1_config: TrainConfig | None = None,
):
    """Train one model for one regime cell; returns (model, log-or-result)."""
    from . import generative

    regime.validate()
    config.validate()
    backbone_config = arch.backbone_config(len(vocab), config.seed)
    if regime.family == FAMILY_DISC:
        model = build_classifier(backbone_config)
        items = _disc_train_items(regime, split.train)
        loss_fn = _disc_loss_fn(vocab, regime, config)
        metric_fn = _disc_metric_fn(vocab, regime, split.validation)
        return train(model, items, loss_fn, metric_fn, config)

    from .backbone import build_decoder

    decoder = build_decoder(backbone_config)
    metric_fn = _gen_metric_fn(vocab, regime, split.validation)
    if regime.domain_adapt:
        first_task = TASK_VALENCE if regime.setting == "two-step-val-ec" else TASK_EC
        single_setting = "single-val" if first_task == TASK_VALENCE else "single-ec"
        if phase1_config is None:
            phase1_config = replace(
                config, learning_rate=GEN_LEARNING_RATES[single_setting], tf_prob=0.0
            )
        phase1_regime = RegimeConfig(family=FAMILY_GEN, setting=single_setting)
        phase1_metric = _gen_metric_fn(vocab, phase1_regime, split.validation)
        result = generative.domain_adapt(
            decoder, split, vocab, first_task, config, phase1_metric, metric_fn,
            phase1_config=phase1_config,
        )
        return result.model, result
    if regime.setting == "single-val":
        return generative.train_single_generative(
            decoder, split, vocab, TASK_VALENCE, config, metric_fn
        )
    if regime.setting == "single-ec":
        return generative.train_single_generative(
            decoder, split, vocab, TASK_EC, config, metric_fn
        )
    if regime.setting == "joint":
        return generative.train_joint_generative(decoder, split, vocab, config, metric_fn)
    return generative.train_two_step_generative(
        decoder, split, vocab, SETTING_ORDER[regime.setting], config, metric_fn
    )


def run_regime(
    regime: RegimeConfig,
    narratives: Sequence[Narrative],
    n_seeds: int = 10,
    base_seed: int = 0,
    split_seed: int = 13,
    config: TrainConfig | None = None,
    arch: ArchSpec = ArchSpec(),
    phase1_config: TrainConfig | None = None,
) -> list[RunMetrics]:
    """Train and evaluate n_seeds independent runs of one regime cell.

    The train/validation/test split depends only on split_seed, so every
    regime and seed scores against the same gold sets.
    """
    regime.validate()
    units = all_units(narratives)
    split = stratified_split(units, seed=split_seed)
    vocab = Vocabulary.build(split.train)
    runs = []
    for i in range(n_seeds):
        seed = base_seed + i
        run_config = replace(
            config if config is not None else default_train_config(regime), seed=seed
        )
        p1_config = None if phase1_config is None else replace(phase1_config, seed=seed)
        model, _ = train_regime_model(
            regime, split, vocab, run_config, arch, phase1_config=p1_config
        )
        runs.append(evaluate_regime(model, split.test, vocab, regime, seed=seed))
    return runs
