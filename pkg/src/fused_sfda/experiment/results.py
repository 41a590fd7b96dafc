"""
Result tables, their aggregates, and the text/CSV forms of run reports.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import pandas as pd

from fused_sfda.classes.exceptions import CrossCheckError
from fused_sfda.classes.helper_classes import FoldFailure, ResultRow, RunReport
from fused_sfda.utils.file_utils import write_csv, write_text

RESULT_COLUMNS = ["fold", "seed", "config_name", "config_hash", "accuracy", "mask_rate_final"]
BASELINE_NAMES = ("source_only", "source_only_fm")

RowKey = tuple[int, int, str]


def row_from_report(fold: int, seed: int, report: RunReport) -> ResultRow:
    return ResultRow(
        fold=fold,
        seed=seed,
        config_name=report.config_name,
        config_hash=report.config_hash,
        accuracy=report.final_accuracy,
        mask_rate_final=report.mask_rate_final if report.epochs else None,
        epoch_time_s=report.mean_epoch_time,
    )


@dataclass
class ResultTable:
    """
    One row per (fold, seed, config) plus the failures of folds that did not
    finish. ``config_order`` fixes the row order of every written file.
    """

    rows: list[ResultRow] = field(default_factory=list)
    failures: list[FoldFailure] = field(default_factory=list)
    config_order: list[str] = field(default_factory=list)

    def _rank(self, name: str) -> int:
        if name not in self.config_order:
            self.config_order.append(name)
        return self.config_order.index(name)

    def sorted_rows(self) -> list[ResultRow]:
        return sorted(self.rows, key=lambda r: (self._rank(r.config_name), r.fold, r.seed))

    def frame(self) -> pd.DataFrame:
        records = [r.model_dump(include=set(RESULT_COLUMNS)) for r in self.sorted_rows()]
        return pd.DataFrame.from_records(records, columns=RESULT_COLUMNS)

    def timings(self) -> pd.DataFrame:
        records = [
            {
                "fold": r.fold,
                "seed": r.seed,
                "config_name": r.config_name,
                "epoch_time_s": r.epoch_time_s,
            }
            for r in self.sorted_rows()
        ]
        return pd.DataFrame.from_records(
            records, columns=["fold", "seed", "config_name", "epoch_time_s"]
        )

    def aggregate(self) -> pd.DataFrame:
        """
        Mean and population standard deviation of accuracy per config, with
        the mean final mask rate where one exists.
        """
        columns = ["config_name", "n", "accuracy_mean", "accuracy_std", "mask_rate_final_mean"]
        frame = self.frame()
        if frame.empty:
            return pd.DataFrame(columns=columns)
        records = []
        for name in self.config_order:
            group = frame[frame["config_name"] == name]
            if group.empty:
                continue
            mask = group["mask_rate_final"].dropna()
            records.append(
                {
                    "config_name": name,
                    "n": len(group),
                    "accuracy_mean": group["accuracy"].mean(),
                    "accuracy_std": group["accuracy"].std(ddof=0),
                    "mask_rate_final_mean": mask.mean() if len(mask) else None,
                }
            )
        return pd.DataFrame.from_records(records, columns=columns)

    def mean_accuracy(self, config_name: str) -> float:
        values = [r.accuracy for r in self.rows if r.config_name == config_name]
        if not values:
            raise KeyError(config_name)
        return sum(values) / len(values)

    def summary_text(self) -> str:
        lines = ["config_name          n   accuracy (mean +- std)   mask_rate_final"]
        for record in self.aggregate().to_dict("records"):
            mask = record["mask_rate_final_mean"]
            mask_text = "-" if mask is None or pd.isna(mask) else f"{mask:.4f}"
            lines.append(
                f"{record['config_name']:<20} {record['n']:<3} "
                f"{100 * record['accuracy_mean']:6.2f} +- {100 * record['accuracy_std']:5.2f}"
                f"           {mask_text}"
            )
        for failure in self.failures:
            lines.append(f"FAILED fold {failure.fold} seed {failure.seed}: {failure.error}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path) -> None:
        """results.csv, aggregate.csv, timings.csv and summary.txt."""
        out_dir = Path(out_dir)
        write_csv(self.frame(), out_dir / "results.csv")
        write_csv(self.aggregate(), out_dir / "aggregate.csv")
        write_csv(self.timings(), out_dir / "timings.csv")
        write_text(self.summary_text(), out_dir / "summary.txt")
        if self.failures:
            failures = pd.DataFrame.from_records([f.model_dump() for f in self.failures])
            write_csv(failures, out_dir / "failures.csv")
        logging.info(f"Wrote {len(self.rows)} result rows to {out_dir}")


def cross_check(table: ResultTable, reports: dict[RowKey, RunReport]) -> None:
    """
    Recomputes every row from its stored report.

    Raises:
        CrossCheckError: If a row has no stored report or any value differs.
    """
    for row in table.rows:
        key = (row.fold, row.seed, row.config_name)
        report = reports.get(key)
        if report is None:
            raise CrossCheckError(key, "report", "present", "missing")
        expected = row_from_report(row.fold, row.seed, report)
        for column in ("config_hash", "accuracy", "mask_rate_final"):
            ours, theirs = getattr(row, column), getattr(expected, column)
            if ours != theirs:
                raise CrossCheckError(key, column, ours, theirs)
    logging.debug(f"Cross-checked {len(table.rows)} rows against stored reports")


def _format(value: Optional[float]) -> str:
    return "none" if value is None else repr(value)


def report_text(report: RunReport) -> str:
    """The report as text: a run section, then one section per epoch. No timings."""
    lines = [
        "[run]",
        f"config_name = {report.config_name}",
        f"config_hash = {report.config_hash}",
        f"branch_mode = {report.branch_mode.value}",
        f"source_only_accuracy = {_format(report.source_only_accuracy)}",
        f"source_only_fm_accuracy = {_format(report.source_only_fm_accuracy)}",
        f"final_accuracy = {_format(report.final_accuracy)}",
        f"final_fm_accuracy = {_format(report.final_fm_accuracy)}",
        f"final_prediction_entropy = {_format(report.final_prediction_entropy)}",
    ]
    lines += [f"checkpoint.{k} = {v}" for k, v in sorted(report.checkpoint_hashes.items())]
    lines += [f"frozen.{k} = {v}" for k, v in sorted(report.frozen_hashes.items())]
    for record in report.epochs:
        lines.append("")
        lines.append(f"[epoch {record.epoch}]")
        for name, value in record.model_dump(exclude={"epoch"}).items():
            text = _format(value) if not isinstance(value, int) else str(value)
            lines.append(f"{name} = {text}")
    return "\n".join(lines) + "\n"


def report_frame(report: RunReport) -> pd.DataFrame:
    """Per-epoch losses and pseudo-label diagnostics, one row per epoch."""
    records = [record.model_dump() for record in report.epochs]
    return pd.DataFrame.from_records(
        records, columns=list(report.epochs[0].model_dump()) if records else None
    )


def write_report(report: RunReport, directory: Path) -> None:
    directory = Path(directory)
    write_text(report_text(report), directory / "report.txt")
    write_csv(report_frame(report), directory / "epochs.csv")
