"""Metrics and reporting: per-class precision/recall/F1 with the 0/0 -> 0
convention, macro-F1, multi-seed aggregation, regime evaluation over test
units, and the results grid (markdown and CSV) shaped like the experiment
matrix: rows = model family (plus domain-adapted variants), columns = the
five settings, one section per task.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .corpus import CARRIER_LABELS, VALENCE_LABELS, FunctionalUnit
from .encodings import decode_carrier_label, decode_valence_label

TASK_VALENCE = "valence"
TASK_EC = "ec"


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    n_gold: int

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "n_gold": self.n_gold,
        }


@dataclass
class TaskMetrics:
    per_class: dict[str, ClassMetrics]
    macro_f1: float

    def as_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "per_class": {k: v.as_dict() for k, v in self.per_class.items()},
        }


@dataclass
class RunMetrics:
    regime_id: str
    seed: int
    tasks: dict[str, TaskMetrics]

    def as_dict(self) -> dict:
        return {
            "regime_id": self.regime_id,
            "seed": self.seed,
            "tasks": {k: v.as_dict() for k, v in self.tasks.items()},
        }


def run_metrics_from_dict(record: dict) -> RunMetrics:
    """Inverse of RunMetrics.as_dict, for reloading saved metrics files."""
    try:
        tasks = {
            task: TaskMetrics(
                macro_f1=body["macro_f1"],
                per_class={
                    label: ClassMetrics(**cm) for label, cm in body["per_class"].items()
                },
            )
            for task, body in record["tasks"].items()
        }
        return RunMetrics(
            regime_id=record["regime_id"], seed=record["seed"], tasks=tasks
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"not a run metrics record: {exc}") from exc


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def macro_f1(golds: Sequence, preds: Sequence, label_set: Sequence) -> TaskMetrics:
    """Per-class P/R/F1 plus their unweighted mean over label_set. Classes
    absent from golds and preds still enter the mean with F1 = 0."""
    if len(golds) != len(preds):
        raise ValueError(f"length mismatch: {len(golds)} golds vs {len(preds)} preds")
    labels = list(label_set)
    allowed = set(labels)
    for value in golds:
        if value not in allowed:
            raise ValueError(f"gold label {value!r} outside label set")
    for value in preds:
        if value not in allowed:
            raise ValueError(f"predicted label {value!r} outside label set")
    per_class = {}
    for label in labels:
        tp = sum(1 for g, p in zip(golds, preds) if g == label and p == label)
        fp = sum(1 for g, p in zip(golds, preds) if g != label and p == label)
        fn = sum(1 for g, p in zip(golds, preds) if g == label and p != label)
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        per_class[label] = ClassMetrics(
            precision=precision, recall=recall, f1=f1, n_gold=tp + fn
        )
    macro = sum(m.f1 for m in per_class.values()) / len(labels)
    return TaskMetrics(per_class=per_class, macro_f1=macro)


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1); stdev is 0 for one value."""
    if not values:
        raise ValueError("cannot aggregate zero runs")
    mean = statistics.fmean(values)
    stdev = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, stdev


# ---------------------------------------------------------------------------
# Regime evaluation
# ---------------------------------------------------------------------------


def regime_tasks(regime) -> list[str]:
    """Which tasks a regime reports. Oracle regimes report only the second
    task: their first step is ground truth, so scoring it is meaningless."""
    setting = regime.setting
    if setting == "single-val":
        return [TASK_VALENCE]
    if setting == "single-ec":
        return [TASK_EC]
    if setting == "joint":
        return [TASK_VALENCE, TASK_EC]
    if setting == "two-step-val-ec":
        return [TASK_EC] if regime.oracle else [TASK_VALENCE, TASK_EC]
    if setting == "two-step-ec-val":
        return [TASK_VALENCE] if regime.oracle else [TASK_VALENCE, TASK_EC]
    raise ValueError(f"unknown setting {setting!r}")


def metrics_from_predictions(
    units: Sequence[FunctionalUnit], preds: Sequence, tasks: Sequence[str]
) -> dict[str, TaskMetrics]:
    """Pair gold labels with unit predictions. Units whose prediction lacks a
    requested task (None) are skipped for that task; a predicted EC list must
    match the unit's candidate count."""
    out: dict[str, TaskMetrics] = {}
    if TASK_VALENCE in tasks:
        golds, got = [], []
        for unit, pred in zip(units, preds):
            if pred.valence is None:
                continue
            golds.append(unit.valence)
            got.append(decode_valence_label(pred.valence))
        if not golds:
            raise ValueError("no units with valence predictions")
        out[TASK_VALENCE] = macro_f1(golds, got, VALENCE_LABELS)
    if TASK_EC in tasks:
        golds, got = [], []
        for unit, pred in zip(units, preds):
            if pred.ec is None:
                continue
            if len(pred.ec) != len(unit.candidates):
                raise ValueError(
                    f"unit {unit.unit_id}: {len(pred.ec)} EC predictions for "
                    f"{len(unit.candidates)} candidates"
                )
            for cand, code in zip(unit.candidates, pred.ec):
                golds.append(cand.carrier)
                got.append(decode_carrier_label(code))
        if not golds:
            raise ValueError("no candidates with EC predictions")
        out[TASK_EC] = macro_f1(golds, got, CARRIER_LABELS)
    return out


def evaluate_regime(model, test_units: Sequence[FunctionalUnit], vocab, regime, seed: int = 0) -> RunMetrics:
    if not test_units:
        raise ValueError("empty test set")
    if regime.family == "disc":
        from .discriminative import predict_units

        preds = predict_units(model, test_units, vocab, regime.setting, oracle=regime.oracle)
    else:
        from .generative import predict_units_generative

        preds = predict_units_generative(
            model, test_units, vocab, regime.setting, oracle=regime.oracle
        )
    tasks = regime_tasks(regime)
    return RunMetrics(regime_id=regime.id(), seed=seed, tasks=metrics_from_predictions(test_units, preds, tasks))


def dump_predictions(
    units: Sequence[FunctionalUnit], preds: Sequence, path: str | Path
) -> None:
    """Line-delimited prediction records for error analysis."""
    with open(path, "w", encoding="utf-8") as fh:
        for unit, pred in zip(units, preds):
            record = {
                "unit_id": unit.unit_id,
                "gold_valence": unit.valence,
                "pred_valence": None if pred.valence is None else decode_valence_label(pred.valence),
                "candidates": [
                    {
                        "start": cand.start,
                        "end": cand.end,
                        "gold": cand.carrier,
                        "pred": None if pred.ec is None else decode_carrier_label(pred.ec[i]),
                    }
                    for i, cand in enumerate(unit.candidates)
                ],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Results grid
# ---------------------------------------------------------------------------

GRID_SECTIONS = ("Valence", "EC")
GRID_COLUMNS = (
    "Single Task",
    "Two-Step Val->EC",
    "Two-Step EC->Val",
    "w. ground truth",
    "Joint",
)

FAMILY_ROWS = {"disc": "discriminative", "gen": "generative"}


def _row_name(family: str, domain_adapt: bool) -> str:
    base = FAMILY_ROWS[family]
    return base + " + domain adapt" if domain_adapt else base


def grid_cells_for(regime) -> list[tuple[str, str, str]]:
    """(task, section, column) triples a regime's metrics land in."""
    row_tasks = {TASK_VALENCE: "Valence", TASK_EC: "EC"}
    setting = regime.setting
    if setting == "single-val":
        pairs = [(TASK_VALENCE, "Single Task")]
    elif setting == "single-ec":
        pairs = [(TASK_EC, "Single Task")]
    elif setting == "joint":
        pairs = [(TASK_VALENCE, "Joint"), (TASK_EC, "Joint")]
    elif setting == "two-step-val-ec":
        if regime.oracle:
            pairs = [(TASK_EC, "w. ground truth")]
        else:
            pairs = [(TASK_VALENCE, "Two-Step Val->EC"), (TASK_EC, "Two-Step Val->EC")]
    elif setting == "two-step-ec-val":
        if regime.oracle:
            pairs = [(TASK_VALENCE, "w. ground truth")]
        else:
            pairs = [(TASK_VALENCE, "Two-Step EC->Val"), (TASK_EC, "Two-Step EC->Val")]
    else:
        raise ValueError(f"unknown setting {setting!r}")
    return [(task, row_tasks[task], column) for task, column in pairs]


@dataclass
class ResultsGrid:
    """Aggregated macro-F1 per (task section, model row, setting column)."""

    cells: dict[tuple[str, str, str], tuple[float, float]] = field(default_factory=dict)
    rows: list[str] = field(default_factory=list)

    def add_runs(self, regime, runs: Sequence[RunMetrics]) -> None:
        if not runs:
            return
        row = _row_name(regime.family, regime.domain_adapt)
        if row not in self.rows:
            self.rows.append(row)
        for task, section, column in grid_cells_for(regime):
            values = [r.tasks[task].macro_f1 for r in runs]
            self.cells[(section, row, column)] = aggregate(values)


def _format_cell(value: tuple[float, float] | None) -> str:
    if value is None:
        return "-"
    mean, stdev = value
    return f"{100 * mean:.1f} ± {100 * stdev:.1f}"


def emit_grid_markdown(grid: ResultsGrid) -> str:
    lines = []
    for section in GRID_SECTIONS:
        lines.append(f"### {section}")
        lines.append("")
        header = "| Model | " + " | ".join(GRID_COLUMNS) + " |"
        rule = "|" + "---|" * (len(GRID_COLUMNS) + 1)
        lines.append(header)
        lines.append(rule)
        for row in grid.rows:
            cells = [
                _format_cell(grid.cells.get((section, row, column)))
                for column in GRID_COLUMNS
            ]
            lines.append("| " + " | ".join([row] + cells) + " |")
        lines.append("")
    return "\n".join(lines)


def emit_grid_csv(grid: ResultsGrid) -> str:
    lines = ["section,row,column,mean,stdev"]
    for section in GRID_SECTIONS:
        for row in grid.rows:
            for column in GRID_COLUMNS:
                cell = grid.cells.get((section, row, column))
                if cell is None:
                    continue
                lines.append(f"{section},{row},{column},{cell[0]!r},{cell[1]!r}")
    return "\n".join(lines) + "\n"


def parse_grid_csv(text: str) -> dict[tuple[str, str, str], tuple[float, float]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines[0] != "section,row,column,mean,stdev":
        raise ValueError("unrecognized grid CSV header")
    cells = {}
    for line in lines[1:]:
        section, row, column, mean, stdev = line.split(",")
        cells[(section, row, column)] = (float(mean), float(stdev))
    return cells


def emit_grid(grid: ResultsGrid, fmt: str = "markdown") -> str:
    if fmt == "markdown":
        return emit_grid_markdown(grid)
    if fmt == "csv":
        return emit_grid_csv(grid)
    raise ValueError(f"unknown grid format {fmt!r}")
