"""Experiment runner: generate a cohort, pretrain on existing tracts, run the
strategy benchmark over the shot grid, and emit comparison tables.

Subcommands: ``generate``, ``pretrain``, ``benchmark``, ``evaluate``,
``report``.  All numbers in the summary tables are recomputable from the
persisted per-subject CSV; re-running any command with the same config file
reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ExperimentConfig, config_digest, load_config
from .errors import (ConfigurationError, DataError, DegenerateTestError,
                     DivergenceError, FormatError, ParameterError, ShapeError)
from .metrics import evaluate_model, paired_comparison
from .model import BackboneArch, BackboneParams, HeadParams, SegModel
from .rng import RngState
from .synthdata import FewShotSplit, generate_cohort, subsample_fewshot
from .train import SelectionMetric, replace_select_on, train
from .transfer import TransferStrategy, run_strategy

EXIT_CODES = {
    ConfigurationError: 2,
    ParameterError: 2,
    DataError: 3,
    FormatError: 4,
    DivergenceError: 5,
}

CSV_COLUMNS = ["k_train", "k_val", "repeat", "strategy", "tract", "subject",
               "dice", "rvd"]


def _cohort_path(out: Path) -> Path:
    return out / "cohort.ttrx"


def _pretrained_path(out: Path) -> Path:
    return out / "pretrained.ttrx"


def cmd_generate(config: ExperimentConfig, out: Path) -> int:
    config.validate()
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate_cohort(config.cohort)
    ckpt.save_cohort(_cohort_path(out), cohort)
    print(f"wrote cohort of {len(cohort.all_subjects())} subjects to {_cohort_path(out)}")
    return 0


def write_history_csv(path, history) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "loss", "dice"])
        for epoch, (loss, dice) in enumerate(zip(history.loss, history.dice)):
            writer.writerow([epoch, repr(loss), repr(dice)])


def cmd_pretrain(config: ExperimentConfig, out: Path) -> int:
    config.validate()
    if config.pretrain.epochs == 0:
        raise ConfigurationError(
            "zero-epoch pretraining would leave the backbone untrained; "
            "downstream transfer needs a trained existing-tract model")
    path = _cohort_path(out)
    if not path.exists():
        raise DataError(f"no cohort at {path}; run `generate` first")
    cohort = ckpt.load_cohort(path)
    arch = BackboneArch()
    model = SegModel(
        BackboneParams.init_random(arch, RngState(config.seed).child("pretrain-backbone")),
        HeadParams.init_random(cohort.config.m_existing, arch.feature_channels,
                               RngState(config.seed).child("pretrain-head")),
        task="existing")
    split = FewShotSplit(train=cohort.existing_train, val=cohort.existing_val, test=[])
    trained, history = train(model, split, config.pretrain,
                             rng=RngState(config.seed).child("pretrain"))
    ckpt.save_model(_pretrained_path(out), trained, {
        "config_digest": config_digest(config),
        "seed": str(config.seed),
        "val_dice": repr(history.best_dice),
    })
    write_history_csv(out / "pretrain_history.csv", history)
    print(f"existing-tract validation Dice: {history.best_dice:.4f} "
          f"(epoch {history.best_epoch})")
    print(f"wrote checkpoint to {_pretrained_path(out)}")
    return 0


_WORKER: dict = {}


def _worker_init(cohort_path: str, pretrained_path: str | None,
                 config: ExperimentConfig) -> None:
    _WORKER["cohort"] = ckpt.load_cohort(cohort_path)
    _WORKER["pretrained"] = (ckpt.load_model(pretrained_path)
                             if pretrained_path else None)
    _WORKER["config"] = config


def _benchmark_run(descriptor: tuple) -> list[list]:
    k_train, k_val, repeat, strategy_name = descriptor
    cohort = _WORKER["cohort"]
    pretrained = _WORKER["pretrained"]
    config: ExperimentConfig = _WORKER["config"]
    strategy = TransferStrategy.parse(strategy_name)

    subsample_seed = RngState(config.seed).child(
        "subsample", k_train, k_val, repeat).generator.integers(2 ** 62)
    split = subsample_fewshot(cohort.fewshot, k_train, k_val, int(subsample_seed))
    if strategy is TransferStrategy.UPPER_BOUND:
        data = FewShotSplit(train=cohort.existing_train + split.train,
                            val=cohort.existing_val, test=split.test)
        opts = replace_select_on(config.train, SelectionMetric.VALIDATION_DICE)
        opts = dataclasses.replace(opts, epochs=config.upper_bound_epochs)
    else:
        data = split
        opts = replace_select_on(
            config.train,
            SelectionMetric.VALIDATION_DICE if k_val > 0 else SelectionMetric.TRAINING_DICE)

    rng = RngState(config.seed).child("run", k_train, k_val, repeat, strategy.value)
    model, _ = run_strategy(strategy, pretrained, data, opts, rng,
                            fit_opts=config.fit)
    report = evaluate_model(model, split.test, config.threshold)
    rows = []
    for tract in range(report.dice.shape[0]):
        for s, subject_id in enumerate(report.subject_ids):
            rows.append([k_train, k_val, repeat, strategy.value, tract, subject_id,
                         repr(float(report.dice[tract, s])),
                         repr(float(report.rvd[tract, s]))])
    return rows


def cmd_benchmark(config: ExperimentConfig, out: Path) -> int:
    config.validate()
    cohort_path = _cohort_path(out)
    if not cohort_path.exists():
        raise DataError(f"no cohort at {cohort_path}; run `generate` first")
    needs_pretrained = any(s in (TransferStrategy.CLASSIC_FT,
                                 TransferStrategy.COMPOSED_INIT,
                                 TransferStrategy.WARMUP_FT)
                           for s in config.strategies)
    pretrained_path = _pretrained_path(out)
    if needs_pretrained and not pretrained_path.exists():
        raise ConfigurationError(
            f"strategies {[s.value for s in config.strategies]} need a pretrained "
            f"checkpoint at {pretrained_path}; run `pretrain` first")

    descriptors = [(k_train, k_val, repeat, strategy.value)
                   for (k_train, k_val) in config.shot_grid
                   for strategy in config.strategies
                   for repeat in range(config.repeats)]
    workers = config.workers if config.workers > 0 else min(os.cpu_count() or 1, 8)
    workers = min(workers, len(descriptors))
    init_args = (str(cohort_path),
                 str(pretrained_path) if pretrained_path.exists() else None,
                 config)
    if workers > 1 and hasattr(os, "fork"):
        context = multiprocessing.get_context("fork")
        with context.Pool(workers, initializer=_worker_init,
                          initargs=init_args) as pool:
            row_blocks = pool.map(_benchmark_run, descriptors)
    else:
        _worker_init(*init_args)
        row_blocks = [_benchmark_run(d) for d in descriptors]

    results_path = out / "results.csv"
    with results_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for block in row_blocks:
            writer.writerows(block)
    print(f"wrote {sum(len(b) for b in row_blocks)} result rows to {results_path}")
    return cmd_report(config, out)


def _load_results(path: Path) -> list[dict]:
    if not path.exists():
        raise DataError(f"no results at {path}; run `benchmark` first")
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != CSV_COLUMNS:
            raise FormatError(f"{path} does not look like a benchmark results file")
        return list(reader)


def _tract_means(rows: list[dict], metric: str) -> np.ndarray:
    """Per-tract averages over subjects and repeats, ordered by tract index."""
    by_tract: dict[int, list[float]] = {}
    for row in rows:
        by_tract.setdefault(int(row["tract"]), []).append(float(row[metric]))
    return np.array([np.mean(by_tract[t]) for t in sorted(by_tract)])


def _summary_tables(rows: list[dict]) -> str:
    cells = sorted({(int(r["k_train"]), int(r["k_val"])) for r in rows})
    strategies = [s.value for s in TransferStrategy
                  if any(r["strategy"] == s.value for r in rows)]
    reference = TransferStrategy.WARMUP_FT.value
    lines = ["# Benchmark summary", ""]
    for metric, better_low in (("dice", False), ("rvd", True)):
        title = "Mean Dice" if metric == "dice" else "Mean RVD"
        lines.append(f"## {title} of the novel tracts")
        lines.append("")
        lines.append("Cell values are means over per-tract averages; d and p compare "
                     f"{reference} with each column (paired over tracts, d > 0 favours "
                     f"{reference}).")
        lines.append("")
        lines.append("| Annotated scans | stat | " + " | ".join(strategies) + " |")
        lines.append("|---" * (len(strategies) + 2) + "|")
        for k_train, k_val in cells:
            cell_rows = [r for r in rows
                         if int(r["k_train"]) == k_train and int(r["k_val"]) == k_val]
            means, tract_vectors = {}, {}
            for strategy in strategies:
                strat_rows = [r for r in cell_rows if r["strategy"] == strategy]
                vector = _tract_means(strat_rows, metric)
                tract_vectors[strategy] = vector
                means[strategy] = vector.mean()
            value_cells = " | ".join(f"{means[s]:.3f}" for s in strategies)
            lines.append(f"| {k_train}/{k_val} | {metric} | {value_cells} |")
            if reference in tract_vectors:
                d_cells, p_cells = [], []
                for strategy in strategies:
                    if strategy == reference:
                        d_cells.append("-")
                        p_cells.append("-")
                        continue
                    a, b = tract_vectors[reference], tract_vectors[strategy]
                    if better_low:
                        a, b = b, a
                    try:
                        comparison = paired_comparison(a, b)
                        d_cells.append(f"{comparison.d:.3f}")
                        p_cells.append(f"{comparison.p:.4f}")
                    except DegenerateTestError:
                        d_cells.append("n/a")
                        p_cells.append("n/a")
                lines.append(f"| {k_train}/{k_val} | d | " + " | ".join(d_cells) + " |")
                lines.append(f"| {k_train}/{k_val} | p | " + " | ".join(p_cells) + " |")
        lines.append("")
    return "\n".join(lines)


def cmd_report(config: ExperimentConfig, out: Path) -> int:
    rows = _load_results(out / "results.csv")
    summary = _summary_tables(rows)
    summary_path = out / "summary.md"
    summary_path.write_text(summary)
    print(f"wrote summary to {summary_path}")
    return 0


def cmd_evaluate(config: ExperimentConfig, out: Path, checkpoint_path: str,
                 label: str) -> int:
    model = ckpt.load_model(checkpoint_path)
    cohort = ckpt.load_cohort(_cohort_path(out))
    report = evaluate_model(model, cohort.fewshot.test, config.threshold)
    eval_path = out / "evaluation.csv"
    with eval_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["strategy", "tract", "subject", "dice", "rvd"])
        for strategy, tract, subject, dice_value, rvd_value in report.csv_rows(label):
            writer.writerow([strategy, tract, subject, repr(dice_value), repr(rvd_value)])
    print(f"mean Dice {report.mean_dice:.4f}, mean RVD {report.mean_rvd:.4f}; "
          f"rows written to {eval_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracttransfer",
        description="Few-shot head-transfer benchmark on synthetic tract cohorts")
    parser.add_argument("--config", type=str, default=None,
                        help="INI config file; defaults are used when omitted")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the experiment seed")
    parser.add_argument("--out", type=str, default="runs",
                        help="output directory (default: runs)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="generate and persist the synthetic cohort")
    sub.add_parser("pretrain", help="train the existing-tract model")
    bench = sub.add_parser("benchmark", help="run the strategy benchmark grid")
    bench.add_argument("--strategy", action="append", default=None,
                       help="restrict to one strategy (repeatable)")
    bench.add_argument("--shots", action="append", default=None,
                       help="restrict to one k_train,k_val cell (repeatable)")
    bench.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: config value)")
    evaluate = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--label", default="model",
                          help="strategy label for the CSV rows")
    sub.add_parser("report", help="rebuild summary.md from results.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
            config.cohort = dataclasses.replace(config.cohort, seed=args.seed)
        out = Path(args.out)
        if args.command == "generate":
            return cmd_generate(config, out)
        if args.command == "pretrain":
            return cmd_pretrain(config, out)
        if args.command == "benchmark":
            if args.strategy:
                config.strategies = [TransferStrategy.parse(s) for s in args.strategy]
            if args.shots:
                cells = []
                for token in args.shots:
                    k_train, k_val = token.split(",")
                    cells.append((int(k_train), int(k_val)))
                config.shot_grid = cells
            if args.workers is not None:
                config.workers = args.workers
            return cmd_benchmark(config, out)
        if args.command == "evaluate":
            return cmd_evaluate(config, out, args.checkpoint, args.label)
        if args.command == "report":
            return cmd_report(config, out)
        raise ConfigurationError(f"unknown command {args.command}")
    except tuple(EXIT_CODES) as error:
        print(f"error: {error}", file=sys.stderr)
        for kind, code in EXIT_CODES.items():
            if isinstance(error, kind):
                return code
        return 1
    except ShapeError as error:
        print(f"error: {error}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
