"""
SQLite ledger of run reports, written through sqlmodel. Every result row the
runner produces is stored with the report it came from, so tables can be
recomputed and cross-checked later.
"""

from pathlib import Path
from typing import Optional

from sqlmodel import Field, Session, SQLModel, create_engine, select

from fused_sfda.classes.helper_classes import ResultRow, RunReport


class RunRecord(SQLModel, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    experiment: str = Field(index=True)
    fold: int
    seed: int
    config_name: str
    config_hash: str
    accuracy: float
    mask_rate_final: Optional[float] = None
    report_json: str


def _engine(db_path: Path | str):
    return create_engine(f"sqlite:///{Path(db_path)}")


def create_tables(db_path: Path | str) -> None:
    engine = _engine(db_path)
    SQLModel.metadata.create_all(engine)
    engine.dispose()


class ResultsRepository:
    """
    Intended for use via a context manager so that stored reports are
    committed on a clean exit and rolled back otherwise.
    """

    def __init__(self, db_path: Path | str) -> None:
        self.db_path = Path(db_path)

    def __enter__(self) -> "ResultsRepository":
        self.engine = _engine(self.db_path)
        SQLModel.metadata.create_all(self.engine)
        self.session = Session(self.engine)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        if exc_type is None:
            self.session.commit()
        else:
            self.session.rollback()
        self.session.close()
        self.engine.dispose()

    def clear(self, experiment: str) -> None:
        """Removes earlier records of an experiment so reruns do not pile up."""
        stale = select(RunRecord).where(RunRecord.experiment == experiment)
        for record in self.session.exec(stale).all():
            self.session.delete(record)
        self.session.flush()

    def store(self, experiment: str, row: ResultRow, report: RunReport) -> None:
        self.session.add(
            RunRecord(
                experiment=experiment,
                fold=row.fold,
                seed=row.seed,
                config_name=row.config_name,
                config_hash=row.config_hash,
                accuracy=row.accuracy,
                mask_rate_final=row.mask_rate_final,
                report_json=report.model_dump_json(),
            )
        )

    def records(self, experiment: str) -> list[RunRecord]:
        self.session.flush()
        query = (
            select(RunRecord)
            .where(RunRecord.experiment == experiment)
            .order_by(RunRecord.id)
        )
        return list(self.session.exec(query).all())

    def reports(self, experiment: str) -> dict[tuple[int, int, str], RunReport]:
        """Stored reports keyed by (fold, seed, config_name)."""
        return {
            (r.fold, r.seed, r.config_name): RunReport.model_validate_json(r.report_json)
            for r in self.records(experiment)
        }
