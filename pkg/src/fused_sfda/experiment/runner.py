"""
Experiment orchestration: cohort loading, split planning, per-fold
pretraining, the source-only baselines, adaptation for every grid entry, and
the merge of all folds into one result table.
"""

import copy
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from fused_sfda.adaptation.engine import (
    adapt_target,
    evaluate_accuracy,
    mean_prediction_entropy,
    pretrain_source,
)
from fused_sfda.adaptation.prototypes import (
    DualBanks,
    PrototypeBank,
    export_centroids,
    init_from_classifier,
)
from fused_sfda.classes.helper_classes import (
    AdaptationConfig,
    DataSpec,
    ExperimentSpec,
    Fold,
    FoldFailure,
    ResultRow,
    RunReport,
    stable_hash,
)
from fused_sfda.classes.itemtypes import BranchMode, BranchRole
from fused_sfda.data.cohort import CohortDataset, generate_cohort
from fused_sfda.data.dataset_io import load_dataset
from fused_sfda.data.preprocess import preprocess
from fused_sfda.data.splits import plan_splits, write_manifest
from fused_sfda.database.db_init import ensure_env_and_outputs
from fused_sfda.database.results_repo import ResultsRepository
from fused_sfda.experiment.ablations import resolve_grid
from fused_sfda.experiment.config_parser import write_resolved_config
from fused_sfda.experiment.results import (
    BASELINE_NAMES,
    ResultTable,
    cross_check,
    row_from_report,
    write_report,
)
from fused_sfda.model.branch import Branch, build_branch, torch_dtype
from fused_sfda.model.checkpoint import load_checkpoint, save_checkpoint, state_hash
from fused_sfda.utils.file_utils import seed_everything


def build_cohort(data: DataSpec) -> CohortDataset:
    """Loads the dataset file, or generates the synthetic cohort, then preprocesses."""
    if data.dataset_path is not None:
        cohort = load_dataset(Path(data.dataset_path))
    else:
        cohort = generate_cohort(
            data.n_subjects,
            data.trials_per_class,
            data.channels,
            data.samples,
            data.num_classes,
            data.shift_spec(),
            data.sampling_rate,
        )
    if data.preprocess:
        cohort = preprocess(cohort, data.preprocess)
    return cohort


def fold_dir(out_dir: Path, fold: Fold, seed: int) -> Path:
    return Path(out_dir) / f"fold_{fold.index:02d}" / f"seed_{seed}"


@contextmanager
def fold_context(fold: Fold, seed: int) -> Iterator[None]:
    """Logs the start, the end and any failure of one fold."""
    started = time.perf_counter()
    logging.info(f"Fold {fold.index} seed {seed}: target subjects {fold.target_subjects}")
    try:
        yield
    except Exception as e:
        logging.error(f"Fold {fold.index} seed {seed} failed: {type(e).__name__}: {e}")
        raise
    logging.info(
        f"Fold {fold.index} seed {seed} finished in {time.perf_counter() - started:.1f}s"
    )


@dataclass
class FoldOutcome:
    fold: int
    seed: int
    reports: list[RunReport] = field(default_factory=list)
    failure: Optional[FoldFailure] = None

    @property
    def rows(self) -> list[ResultRow]:
        return [row_from_report(self.fold, self.seed, r) for r in self.reports]


def save_branch(branch: Branch, bank: PrototypeBank, path: Path) -> str:
    return save_checkpoint(branch, path, bank.centroids, bank.settings())


def load_branch(path: Path, cfg: AdaptationConfig) -> tuple[Branch, PrototypeBank]:
    """
    Restores a branch and its bank. A checkpoint without stored centroids gets
    a fresh bank from its classifier.
    """
    branch, centroids, settings = load_checkpoint(path)
    if centroids is None:
        bank = init_from_classifier(
            branch, cfg.momentum, cfg.margin_threshold, cfg.temperature
        )
    else:
        bank = PrototypeBank(
            centroids.to(branch.classifier.weight.dtype),
            owner_role=branch.role,
            **(settings or {}),
        )
    return branch, bank


def pretrain_fold(
    spec: ExperimentSpec,
    cohort: CohortDataset,
    fold: Fold,
    seed: int,
    directory: Optional[Path] = None,
) -> tuple[Branch, Branch, DualBanks]:
    """Builds both branches at ``seed`` and trains them on the fold's source side."""
    cfg = spec.adaptation.with_overrides({"seed": seed})
    seed_everything(seed, cfg.threads)
    args = (cohort.channels, cohort.length, cohort.num_classes, spec.model, cfg.dtype)
    fm = build_branch(BranchRole.FM, *args)
    sm = build_branch(BranchRole.SM, *args)
    banks = pretrain_source(fm, sm, cohort.subset(fold.source_subjects), cfg)
    if directory is not None:
        save_branch(fm, banks.fm, directory / "fm_pretrain.ckpt")
        save_branch(sm, banks.sm, directory / "sm_pretrain.ckpt")
    return fm, sm, banks


def baseline_reports(
    fm: Branch, sm: Branch, target: CohortDataset, cfg: AdaptationConfig
) -> list[RunReport]:
    """Zero-epoch reports for the source-only SM and FM evaluations."""
    x, _ = target.tensors(torch_dtype(cfg.dtype))
    sm_accuracy = evaluate_accuracy(sm, target)
    fm_accuracy = evaluate_accuracy(fm, target)
    hashes = {"fm": state_hash(fm), "sm": state_hash(sm)}
    reports = []
    for name, accuracy, branch in (
        ("source_only", sm_accuracy, sm),
        ("source_only_fm", fm_accuracy, fm),
    ):
        reports.append(
            RunReport(
                config_name=name,
                config_hash=stable_hash({"baseline": name, "pretrain": cfg.config_hash()}),
                branch_mode=BranchMode.DUAL,
                source_only_accuracy=sm_accuracy,
                source_only_fm_accuracy=fm_accuracy,
                final_accuracy=accuracy,
                final_fm_accuracy=fm_accuracy,
                final_prediction_entropy=mean_prediction_entropy(branch, x),
                checkpoint_hashes=hashes,
            )
        )
    return reports


def adapt_config(
    fm: Branch,
    sm: Branch,
    banks: DualBanks,
    target: CohortDataset,
    name: str,
    cfg: AdaptationConfig,
    directory: Optional[Path] = None,
) -> RunReport:
    """Adapts copies of the pretrained branches, so one pretraining serves every entry."""
    fm_run, sm_run, banks_run = copy.deepcopy(fm), copy.deepcopy(sm), banks.copy()
    report = adapt_target(fm_run, sm_run, banks_run, target, cfg, name)
    if directory is not None:
        run_dir = directory / name
        write_report(report, run_dir)
        save_branch(fm_run, banks_run.fm, run_dir / "fm_adapted.ckpt")
        save_branch(sm_run, banks_run.sm, run_dir / "sm_adapted.ckpt")
        export_centroids(banks_run.fm, run_dir / "fm_centroids.csv")
        export_centroids(banks_run.sm, run_dir / "sm_centroids.csv")
    return report


def run_fold(
    spec: ExperimentSpec, cohort: CohortDataset, fold: Fold, seed: int, out_dir: Path
) -> FoldOutcome:
    """
    Pretrains once, records both baselines, then adapts every grid entry.
    A failure is recorded on the outcome; reports finished before it are kept.
    """
    outcome = FoldOutcome(fold.index, seed)
    directory = fold_dir(out_dir, fold, seed)
    target = cohort.subset(fold.target_subjects)
    try:
        with fold_context(fold, seed):
            fm, sm, banks = pretrain_fold(spec, cohort, fold, seed, directory)
            base = spec.adaptation.with_overrides({"seed": seed})
            outcome.reports.extend(baseline_reports(fm, sm, target, base))
            for name, cfg in resolve_grid(spec):
                cfg = cfg.with_overrides({"seed": seed})
                outcome.reports.append(
                    adapt_config(fm, sm, banks, target, name, cfg, directory)
                )
    except Exception as e:
        outcome.failure = FoldFailure(
            fold=fold.index, seed=seed, error=f"{type(e).__name__}: {e}"
        )
    return outcome


def run(
    spec: ExperimentSpec,
    cohort: Optional[CohortDataset] = None,
    results_db: Optional[Path] = None,
) -> ResultTable:
    """
    Runs every selected fold for every seed and grid entry, stores the reports
    in the results ledger, cross-checks the table against them and writes the
    result files.

    Args:
        spec (ExperimentSpec): The experiment.
        cohort (Optional[CohortDataset], optional): Overrides ``spec.data``.
        results_db (Optional[Path], optional): Ledger path; from the
            environment when absent.

    Returns:
        ResultTable: All rows, plus the failures of folds that did not finish.
    """
    out_dir = Path(spec.experiment.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if results_db is None:
        results_db = ensure_env_and_outputs().results_db
    cohort = cohort if cohort is not None else build_cohort(spec.data)

    plan = plan_splits(cohort, spec.split)
    write_manifest(plan, out_dir / "folds.json")
    write_resolved_config(spec, out_dir)
    folds = [
        f
        for f in plan.folds
        if spec.experiment.folds is None or f.index in spec.experiment.folds
    ]
    jobs = [(fold, seed) for seed in spec.experiment.seeds for fold in folds]
    logging.info(
        f"Experiment '{spec.experiment.name}': {len(folds)} folds x "
        f"{len(spec.experiment.seeds)} seeds on {len(cohort)} trials"
    )

    if spec.experiment.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.experiment.jobs) as pool:
            futures = [
                pool.submit(run_fold, spec, cohort, fold, seed, out_dir)
                for fold, seed in jobs
            ]
            outcomes = [future.result() for future in futures]
    else:
        outcomes = [run_fold(spec, cohort, fold, seed, out_dir) for fold, seed in jobs]

    table = ResultTable(config_order=[*BASELINE_NAMES, *(n for n, _ in resolve_grid(spec))])
    with ResultsRepository(results_db) as repo:
        repo.clear(spec.experiment.name)
        for outcome in outcomes:
            for row, report in zip(outcome.rows, outcome.reports):
                table.rows.append(row)
                repo.store(spec.experiment.name, row, report)
            if outcome.failure is not None:
                table.failures.append(outcome.failure)
        cross_check(table, repo.reports(spec.experiment.name))

    table.write(out_dir)
    if table.failures:
        logging.error(f"{len(table.failures)} fold runs failed; partial results kept")
    return table
