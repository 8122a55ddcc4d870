"""Command-line pipelines: corpus synthesis, corpus statistics, single-regime
training, checkpoint evaluation, grid assembly from saved runs, and the full
experiment reproduction (all regime cells, multi-seed, one grid).

Exit codes: 0 success, 2 usage or configuration error, 3 training failure.
Every command is deterministic given identical inputs: output files carry no
timestamps, and all iteration orders are fixed.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .backbone import (
    BackboneConfig,
    DECODER_KIND,
    build_decoder,
    load_checkpoint,
    save_checkpoint,
)
from .corpus import (
    CorpusError,
    GeneratorSpec,
    GeneratorSpecError,
    all_units,
    corpus_stats,
    ec_intersection_stats,
    generate_corpus,
    load_corpus,
    save_corpus,
    spec_from_mapping,
    stratified_split,
)
from .discriminative import CLASSIFIER_KIND, build_classifier, predict_units
from .encodings import Vocabulary
from .evaluation import (
    ResultsGrid,
    dump_predictions,
    emit_grid_csv,
    emit_grid_markdown,
    evaluate_regime,
    run_metrics_from_dict,
)
from .trainer import (
    ArchSpec,
    FAMILIES,
    SETTINGS,
    TWO_STEP_SETTINGS,
    RegimeConfig,
    TrainLog,
    apply_env_overrides,
    config_to_text,
    default_train_config,
    read_config_file,
    run_regime,
    train_config_from_mapping,
    train_regime_model,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRAINING = 3

DEFAULT_SPLIT_SEED = 13


class UsageError(Exception):
    """Bad flags, config files, or input data; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _load_mapping(path: str | None) -> dict[str, str]:
    mapping = read_config_file(path) if path else {}
    return apply_env_overrides(mapping)


def _resolve_train_config(regime: RegimeConfig, config_path: str | None, seed: int | None):
    config = default_train_config(regime)
    config = train_config_from_mapping(_load_mapping(config_path), base=config)
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def _arch_from_args(args) -> ArchSpec:
    return ArchSpec(
        hidden_dim=args.hidden_dim,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        max_seq_len=args.max_seq_len,
    )


def _add_arch_flags(parser: argparse.ArgumentParser) -> None:
    defaults = ArchSpec()
    parser.add_argument("--hidden-dim", type=int, default=defaults.hidden_dim)
    parser.add_argument("--n-layers", type=int, default=defaults.n_layers)
    parser.add_argument("--n-heads", type=int, default=defaults.n_heads)
    parser.add_argument("--max-seq-len", type=int, default=defaults.max_seq_len)


def _train_log_dict(log: TrainLog) -> dict:
    return {
        "best_epoch": log.best_epoch,
        "best_metric": log.best_metric,
        "stopped_epoch": log.stopped_epoch,
        "total_steps_planned": log.total_steps_planned,
        "init_state_hash": log.init_state_hash,
        "epochs": [
            {"epoch": e.epoch, "train_loss": e.train_loss, "val_metric": e.val_metric}
            for e in log.epochs
        ],
        "lr_trace": log.lr_trace,
    }


def _result_log_dict(log_or_result) -> dict:
    if isinstance(log_or_result, TrainLog):
        return _train_log_dict(log_or_result)
    # two-phase domain adaptation result
    return {
        "phase1": _train_log_dict(log_or_result.phase1_log),
        "phase2": _train_log_dict(log_or_result.phase2_log),
        "phase1_state_hash": log_or_result.phase1_state_hash,
        "phase2_init_hash": log_or_result.phase2_init_hash,
    }


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _stats_text(units) -> str:
    report = corpus_stats(units)
    lines = [report.as_text()]
    inter = ec_intersection_stats(units)
    lines.append(f"carrier_forms_positive  {len(inter.positive_forms)}")
    lines.append(f"carrier_forms_negative  {len(inter.negative_forms)}")
    lines.append(f"carrier_forms_shared    {len(inter.intersection)}")
    lines.append(f"lexicon_overlap_ratio   {inter.overlap_ratio:.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    try:
        spec = spec_from_mapping(_load_mapping(args.spec)) if args.spec else GeneratorSpec()
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
        narratives = generate_corpus(spec)
    except GeneratorSpecError as exc:
        raise UsageError(str(exc)) from exc
    save_corpus(narratives, args.out)
    print(f"wrote {args.out}")
    print(_stats_text(all_units(narratives)))
    return EXIT_OK


def cmd_stats(args) -> int:
    units = all_units(load_corpus(args.corpus))
    print(_stats_text(units))
    return EXIT_OK


def _predict_for(model, units, vocab, regime):
    if regime.family == "disc":
        return predict_units(model, units, vocab, regime.setting, oracle=regime.oracle)
    from .generative import predict_units_generative

    return predict_units_generative(model, units, vocab, regime.setting, oracle=regime.oracle)


def cmd_train(args) -> int:
    try:
        regime = RegimeConfig.parse(args.regime)
        config = _resolve_train_config(regime, args.config, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    narratives = load_corpus(args.corpus)
    split = stratified_split(all_units(narratives), seed=args.split_seed)
    vocab = Vocabulary.build(split.train)
    arch = _arch_from_args(args)

    model, log = train_regime_model(regime, split, vocab, config, arch)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    (out / "config.txt").write_text(config_to_text(config), encoding="utf-8")
    _write_json(out / "train_log.json", _result_log_dict(log))
    kind = CLASSIFIER_KIND if regime.family == "disc" else DECODER_KIND
    save_checkpoint(
        out / "checkpoint.pt",
        kind,
        arch.backbone_config(len(vocab), config.seed),
        model,
        extra={"regime": regime.id(), "split_seed": args.split_seed, "seed": config.seed},
    )
    metrics = evaluate_regime(model, split.test, vocab, regime, seed=config.seed)
    _write_json(out / "metrics.json", metrics.as_dict())
    dump_predictions(split.test, _predict_for(model, split.test, vocab, regime),
                     out / "predictions.jsonl")
    summary = {t: round(m.macro_f1, 4) for t, m in metrics.tasks.items()}
    print(f"{regime.id()} seed={config.seed} test macro-F1 {summary} -> {out}")
    return EXIT_OK


def _rebuild_from_checkpoint(record):
    config = BackboneConfig(**record["config"])
    if record["kind"] == CLASSIFIER_KIND:
        model = build_classifier(config)
    elif record["kind"] == DECODER_KIND:
        model = build_decoder(config)
    else:
        raise UsageError(f"cannot evaluate checkpoint kind {record['kind']!r}")
    model.load_state_dict(record["state_dict"])
    model.eval()
    return model


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    try:
        record = load_checkpoint(run_dir / "checkpoint.pt")
        regime = RegimeConfig.parse(record["extra"]["regime"])
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{run_dir}: {exc}") from exc
    vocab = Vocabulary.load(run_dir / "vocab.txt")
    model = _rebuild_from_checkpoint(record)
    split_seed = record["extra"].get("split_seed", DEFAULT_SPLIT_SEED)
    split = stratified_split(all_units(load_corpus(args.corpus)), seed=split_seed)
    metrics = evaluate_regime(
        model, split.test, vocab, regime, seed=record["extra"].get("seed", 0)
    )
    text = json.dumps(metrics.as_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _regime_sort_key(regime: RegimeConfig):
    return (
        FAMILIES.index(regime.family),
        regime.domain_adapt,
        SETTINGS.index(regime.setting),
        regime.oracle,
    )


def cmd_grid(args) -> int:
    by_regime: dict[str, list] = {}
    for raw in args.runs:
        path = Path(raw)
        if path.is_dir():
            path = path / "metrics.json"
        try:
            run = run_metrics_from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (ValueError, json.JSONDecodeError) as exc:
            raise UsageError(f"{path}: {exc}") from exc
        by_regime.setdefault(run.regime_id, []).append(run)
    grid = ResultsGrid()
    regimes = sorted(
        (RegimeConfig.parse(rid) for rid in by_regime), key=_regime_sort_key
    )
    for regime in regimes:
        runs = sorted(by_regime[regime.id()], key=lambda r: r.seed)
        grid.add_runs(regime, runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.md").write_text(emit_grid_markdown(grid), encoding="utf-8")
    (out / "grid.csv").write_text(emit_grid_csv(grid), encoding="utf-8")
    print(f"wrote {out / 'grid.md'} and {out / 'grid.csv'}")
    return EXIT_OK


def reproduction_regimes() -> list[RegimeConfig]:
    """Canonical cell order: every family x setting, both oracle columns per
    family, and the generative domain-adapted rows."""
    regimes = []
    for family in FAMILIES:
        for setting in SETTINGS:
            regimes.append(RegimeConfig(family=family, setting=setting))
        for setting in TWO_STEP_SETTINGS:
            regimes.append(RegimeConfig(family=family, setting=setting, oracle=True))
    for setting in TWO_STEP_SETTINGS:
        regimes.append(RegimeConfig(family="gen", setting=setting, domain_adapt=True))
    return regimes


def _reproduce_cell(packed):
    """Run one regime cell in a worker process; returns run dicts."""
    (regime_id, corpus_path, n_seeds, base_seed, split_seed, mapping, arch_fields) = packed
    regime = RegimeConfig.parse(regime_id)
    config = train_config_from_mapping(mapping, base=default_train_config(regime))
    narratives = load_corpus(corpus_path)
    runs = run_regime(
        regime,
        narratives,
        n_seeds=n_seeds,
        base_seed=base_seed,
        split_seed=split_seed,
        config=config,
        arch=ArchSpec(*arch_fields),
    )
    return [run.as_dict() for run in runs]


def cmd_reproduce(args) -> int:
    try:
        mapping = _load_mapping(args.config)
        for regime in reproduction_regimes():
            train_config_from_mapping(mapping, base=default_train_config(regime))
        load_corpus(args.corpus)  # fail fast on a bad corpus
    except (ValueError, CorpusError) as exc:
        raise UsageError(str(exc)) from exc
    arch = _arch_from_args(args)
    arch_fields = (arch.hidden_dim, arch.n_layers, arch.n_heads, arch.max_seq_len)
    regimes = reproduction_regimes()
    packed = [
        (r.id(), args.corpus, args.seeds, args.base_seed, args.split_seed, mapping, arch_fields)
        for r in regimes
    ]

    results: list = [None] * len(regimes)
    failures: list[tuple[str, str]] = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_reproduce_cell, item) for item in packed]
            for i, future in enumerate(futures):
                try:
                    results[i] = future.result()
                except Exception as exc:
                    failures.append((regimes[i].id(), f"{type(exc).__name__}: {exc}"))
    else:
        for i, item in enumerate(packed):
            try:
                results[i] = _reproduce_cell(item)
            except Exception as exc:
                failures.append((regimes[i].id(), f"{type(exc).__name__}: {exc}"))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = ResultsGrid()
    for regime, cell in zip(regimes, results):
        if cell is None:
            continue
        grid.add_runs(regime, [run_metrics_from_dict(d) for d in cell])
    grid_md = emit_grid_markdown(grid)
    if failures:
        names = ", ".join(rid for rid, _ in failures)
        grid_md += f"\nMissing cells ({names}): see failures.log\n"
        (out / "failures.log").write_text(
            "".join(f"{rid}\t{message}\n" for rid, message in failures),
            encoding="utf-8",
        )
    (out / "grid.md").write_text(grid_md, encoding="utf-8")
    (out / "grid.csv").write_text(emit_grid_csv(grid), encoding="utf-8")
    done = len(regimes) - len(failures)
    print(f"{done}/{len(regimes)} cells complete -> {out / 'grid.md'}")
    for rid, message in failures:
        print(f"failed {rid}: {message}", file=sys.stderr)
    return EXIT_TRAINING if failures else EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtlaffect",
        description="Valence and emotion-carrier experiments over functional units.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a calibrated corpus")
    p.add_argument("--spec", help="generator spec file (key=value lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("stats", help="print corpus statistics")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train one regime and save a run directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--regime", required=True,
                   help="family:setting[:oracle][:domain-adapt]")
    p.add_argument("--config", help="training config file (key=value lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split-seed", type=int, default=DEFAULT_SPLIT_SEED)
    _add_arch_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a saved run on a corpus test split")
    p.add_argument("--run", required=True, help="run directory from the train command")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="aggregate saved runs into the results grid")
    p.add_argument("--runs", nargs="+", required=True,
                   help="run directories or metrics.json files")
    p.add_argument("--out", required=True, help="directory for grid.md and grid.csv")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("reproduce", help="run every regime cell and emit the grid")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=DEFAULT_SPLIT_SEED)
    p.add_argument("--config", help="training config overrides applied to every cell")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_arch_flags(p)
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
