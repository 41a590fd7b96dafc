"""
Command-line entry point: ``fused <subcommand>``.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from fused_sfda.adaptation.prototypes import DualBanks
from fused_sfda.classes.exceptions import ConfigError
from fused_sfda.classes.helper_classes import ExperimentSpec, Fold
from fused_sfda.classes.itemtypes import GridPreset
from fused_sfda.data.cohort import CohortDataset
from fused_sfda.data.dataset_io import load_dataset, save_dataset
from fused_sfda.data.preprocess import preprocess
from fused_sfda.data.splits import plan_splits
from fused_sfda.database.db_init import EnvSettings, ensure_outputs, read_env
from fused_sfda.experiment.ablations import resolve_grid
from fused_sfda.experiment.config_parser import parse_config
from fused_sfda.experiment.features import export_features
from fused_sfda.experiment.runner import (
    adapt_config,
    build_cohort,
    fold_dir,
    load_branch,
    pretrain_fold,
    run,
)
from fused_sfda.utils.probes import linear_probe_accuracy
from fused_sfda.verification.self_checks import run_self_checks

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _load_spec(path: Optional[str]) -> ExperimentSpec:
    return parse_config(Path(path)) if path else ExperimentSpec()


def _fold(spec: ExperimentSpec, cohort: CohortDataset, index: int) -> Fold:
    plan = plan_splits(cohort, spec.split)
    for fold in plan.folds:
        if fold.index == index:
            return fold
    raise ConfigError("--fold", f"fold {index} not in plan of {len(plan.folds)} folds")


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = _load_spec(args.config)
    if args.seed is not None:
        spec.data.seed = args.seed
    cohort = build_cohort(spec.data)
    save_dataset(cohort, Path(args.out))
    print(f"{len(cohort)} trials, {len(cohort.subject_ids)} subjects -> {args.out}")
    return EXIT_OK


def cmd_preprocess(args: argparse.Namespace) -> int:
    cohort = preprocess(load_dataset(Path(args.input)), args.step)
    save_dataset(cohort, Path(args.out))
    print(f"{len(cohort)} windows of {cohort.channels} x {cohort.length} -> {args.out}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    spec = _load_spec(args.config)
    cohort = build_cohort(spec.data)
    fold = _fold(spec, cohort, args.fold)
    directory = Path(args.out) if args.out else fold_dir(
        Path(spec.experiment.output_dir), fold, args.seed
    )
    pretrain_fold(spec, cohort, fold, args.seed, directory)
    print(f"Pretrained fold {fold.index} seed {args.seed} -> {directory}")
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    spec = _load_spec(args.config)
    cohort = build_cohort(spec.data)
    fold = _fold(spec, cohort, args.fold)
    entries = dict(resolve_grid(spec))
    if args.entry not in entries:
        raise ConfigError("--entry", f"unknown grid entry '{args.entry}'")
    cfg = entries[args.entry].with_overrides({"seed": args.seed})
    fm, fm_bank = load_branch(Path(args.fm), cfg)
    sm, sm_bank = load_branch(Path(args.sm), cfg)
    directory = Path(args.out) if args.out else fold_dir(
        Path(spec.experiment.output_dir), fold, args.seed
    )
    report = adapt_config(
        fm,
        sm,
        DualBanks(fm_bank, sm_bank),
        cohort.subset(fold.target_subjects),
        args.entry,
        cfg,
        directory,
    )
    print(
        f"{args.entry}: source-only {100 * report.source_only_accuracy:.2f}% -> "
        f"adapted {100 * report.final_accuracy:.2f}%"
    )
    return EXIT_OK


def _run_and_report(spec: ExperimentSpec, results_db: Path) -> int:
    table = run(spec, results_db=results_db)
    print(table.summary_text(), end="")
    return EXIT_FAILED if table.failures else EXIT_OK


def cmd_run(args: argparse.Namespace, settings: EnvSettings) -> int:
    ensure_outputs(settings)
    spec = _load_spec(args.config)
    if args.jobs is not None:
        spec.experiment.jobs = args.jobs
    if args.out:
        spec.experiment.output_dir = args.out
    return _run_and_report(spec, settings.results_db)


def cmd_ablate(args: argparse.Namespace, settings: EnvSettings) -> int:
    ensure_outputs(settings)
    spec = _load_spec(args.config)
    spec.experiment.grid_preset = GridPreset(args.preset)
    if args.jobs is not None:
        spec.experiment.jobs = args.jobs
    if args.out:
        spec.experiment.output_dir = args.out
    return _run_and_report(spec, settings.results_db)


def cmd_export_features(args: argparse.Namespace) -> int:
    if args.dataset:
        cohort = load_dataset(Path(args.dataset))
    else:
        cohort = build_cohort(_load_spec(args.config).data)
    if args.subjects:
        cohort = cohort.subset(args.subjects)
    frame = export_features(Path(args.checkpoint), cohort, Path(args.out))
    print(f"{len(frame)} feature rows -> {args.out}")
    if args.probe:
        features = frame.drop(columns=["subject", "label"]).to_numpy()
        accuracy = linear_probe_accuracy(features, frame["label"].to_numpy())
        print(f"linear probe accuracy {100 * accuracy:.2f}%")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    results = run_self_checks()
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status}  {result.name:<18} {result.seconds:7.2f}s  {result.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fused", description="Dual-branch source-free domain adaptation for EEG."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic cohort dataset file")
    p.add_argument("--config", help="experiment file; its data.* keys drive the generator")
    p.add_argument("--seed", type=int, help="overrides data.seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="apply preprocessing stages in order")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--step",
        action="append",
        default=[],
        help="e.g. bandpass:4:40, resample:128, crop:2:6, window:2, channel_select:0:1:2, zscore",
    )

    p = sub.add_parser("pretrain", help="train both branches on one fold's source side")
    p.add_argument("--config")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("adapt", help="adapt pretrained checkpoints to one fold's target")
    p.add_argument("--config")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fm", required=True, help="FM checkpoint")
    p.add_argument("--sm", required=True, help="SM checkpoint")
    p.add_argument("--entry", default="full", help="grid entry to run")
    p.add_argument("--out")

    for name, help_text in (
        ("run", "run every fold, seed and grid entry"),
        ("ablate", "run an ablation preset"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config")
        p.add_argument("--jobs", type=int)
        p.add_argument("--out", help="overrides experiment.output_dir")
        if name == "ablate":
            p.add_argument(
                "--preset",
                default=GridPreset.COMPONENTS.value,
                choices=[g.value for g in GridPreset if g != GridPreset.NONE],
            )

    p = sub.add_parser("export-features", help="write encoder features as CSV")
    p.add_argument("--checkpoint", required=True)
    source = p.add_mutually_exclusive_group()
    source.add_argument("--dataset")
    source.add_argument("--config")
    p.add_argument("--subjects", type=int, nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--probe", action="store_true", help="also report linear-probe accuracy")

    sub.add_parser("verify", help="run the loss, gradient, refinement and data-kit checks")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = read_env()
    logging.basicConfig(
        filename=settings.log_file,
        level=getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    logging.info(f"fused {args.command}")

    try:
        if args.command == "run":
            return cmd_run(args, settings)
        if args.command == "ablate":
            return cmd_ablate(args, settings)
        handlers = {
            "gen-data": cmd_gen_data,
            "preprocess": cmd_preprocess,
            "pretrain": cmd_pretrain,
            "adapt": cmd_adapt,
            "export-features": cmd_export_features,
            "verify": cmd_verify,
        }
        return handlers[args.command](args)
    except (ConfigError, ValueError, OSError) as e:
        logging.error(f"fused {args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
