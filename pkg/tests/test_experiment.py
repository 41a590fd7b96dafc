import numpy as np
import pandas as pd
import pytest

from fused_sfda.classes.exceptions import CrossCheckError
from fused_sfda.classes.helper_classes import (
    AdaptationConfig,
    ExperimentSection,
    ExperimentSpec,
    ResultRow,
    ShiftSpec,
)
from fused_sfda.classes.itemtypes import GridPreset
from fused_sfda.data.cohort import generate_cohort
from fused_sfda.data.splits import plan_splits
from fused_sfda.database.db_init import read_env
from fused_sfda.database.results_repo import ResultsRepository
from fused_sfda.experiment import runner
from fused_sfda.experiment.ablations import COMPONENT_GRID, resolve_grid
from fused_sfda.experiment.features import export_features
from fused_sfda.experiment.results import ResultTable, cross_check
from fused_sfda.utils.probes import linear_probe_accuracy
from fused_sfda.verification.self_checks import TINY_MODEL


def tiny_cohort():
    return generate_cohort(3, 2, 3, 16, 3, ShiftSpec(noise_sigma=0.3, seed=2))


def tiny_spec(out_dir, **experiment):
    return ExperimentSpec(
        model=TINY_MODEL,
        adaptation=AdaptationConfig(epochs=1, pretrain_epochs=1, batch_size=8),
        experiment=ExperimentSection(name="tiny", output_dir=str(out_dir), **experiment),
    )


def test_resolve_grid_defaults_to_full():
    spec = ExperimentSpec()
    assert [name for name, _ in resolve_grid(spec)] == ["full"]


def test_resolve_grid_preset_then_own_entries():
    spec = ExperimentSpec(
        experiment=ExperimentSection(grid_preset=GridPreset.COMPONENTS),
        grid={"no_kd": {"use_kd": True, "lambda_kd": 0.5}, "hot": {"temperature": 20.0}},
    )
    entries = dict(resolve_grid(spec))
    assert list(entries) == [*COMPONENT_GRID, "hot"]
    assert entries["no_kd"].lambda_kd == 0.5
    assert entries["no_ce"].use_ce is False
    assert entries["hot"].temperature == 20.0


def test_sensitivity_preset_sweeps_one_setting_at_a_time():
    spec = ExperimentSpec(experiment=ExperimentSection(grid_preset=GridPreset.SENSITIVITY))
    entries = dict(resolve_grid(spec))
    assert len(entries) == 18
    assert list(entries)[0] == "full"
    assert entries["tau_20"].temperature == 20.0
    assert entries["eta_0.2"].margin_threshold == 0.2
    assert entries["lambda_div_0.1"].lambda_div == 0.1
    assert entries["lambda_div_0.1"].lambda_kd == spec.adaptation.lambda_kd
    assert entries["lambda_kd_2"].temperature == spec.adaptation.temperature


def test_run_writes_tables(tmp_path):
    out = tmp_path / "out"
    table = runner.run(tiny_spec(out), tiny_cohort(), tmp_path / "results.db")

    assert not table.failures
    assert len(table.rows) == 3 * 3
    results = pd.read_csv(out / "results.csv")
    assert results["config_name"].tolist()[:3] == ["source_only"] * 3
    assert set(results["config_name"]) == {"source_only", "source_only_fm", "full"}

    aggregate = pd.read_csv(out / "aggregate.csv").set_index("config_name")
    for name in ("source_only", "full"):
        recomputed = results[results["config_name"] == name]["accuracy"].mean()
        assert aggregate.loc[name, "accuracy_mean"] == pytest.approx(recomputed, abs=1e-9)

    for name in ("summary.txt", "timings.csv", "folds.json", "config.resolved.cfg"):
        assert (out / name).exists()
    assert (out / "fold_00" / "seed_0" / "full" / "report.txt").exists()
    assert (out / "fold_00" / "seed_0" / "sm_pretrain.ckpt").exists()
    assert b"\r\n" not in (out / "results.csv").read_bytes()

    with ResultsRepository(tmp_path / "results.db") as repo:
        assert len(repo.records("tiny")) == 9


def test_rerun_is_byte_identical(tmp_path):
    cohort = tiny_cohort()
    runner.run(tiny_spec(tmp_path / "a"), cohort, tmp_path / "a.db")
    runner.run(tiny_spec(tmp_path / "b"), cohort, tmp_path / "b.db")
    for name in ("results.csv", "aggregate.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    report = "fold_01/seed_0/full/report.txt"
    assert (tmp_path / "a" / report).read_bytes() == (tmp_path / "b" / report).read_bytes()


def test_fold_selection(tmp_path):
    table = runner.run(tiny_spec(tmp_path / "out", folds=[1]), tiny_cohort(), tmp_path / "r.db")
    assert {row.fold for row in table.rows} == {1}


def test_fold_failure_is_recorded(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("adaptation exploded")

    monkeypatch.setattr(runner, "adapt_target", boom)
    out = tmp_path / "out"
    table = runner.run(tiny_spec(out), tiny_cohort(), tmp_path / "r.db")

    assert len(table.failures) == 3
    assert "adaptation exploded" in table.failures[0].error
    assert {row.config_name for row in table.rows} == {"source_only", "source_only_fm"}
    assert (out / "failures.csv").exists()


def test_cross_check_detects_tampering(tmp_path):
    table = runner.run(tiny_spec(tmp_path / "out"), tiny_cohort(), tmp_path / "r.db")
    with ResultsRepository(tmp_path / "r.db") as repo:
        reports = repo.reports("tiny")
    cross_check(table, reports)

    row = table.rows[0]
    table.rows[0] = row.model_copy(update={"accuracy": 1.0 - row.accuracy})
    with pytest.raises(CrossCheckError) as e:
        cross_check(table, reports)
    assert e.value.column == "accuracy"


def test_aggregate_population_std():
    table = ResultTable(config_order=["full"])
    for fold, accuracy in enumerate([0.5, 0.7]):
        table.rows.append(
            ResultRow(fold=fold, seed=0, config_name="full", config_hash="h", accuracy=accuracy)
        )
    aggregate = table.aggregate()
    assert aggregate.loc[0, "accuracy_mean"] == pytest.approx(0.6)
    assert aggregate.loc[0, "accuracy_std"] == pytest.approx(0.1)
    assert table.mean_accuracy("full") == pytest.approx(0.6)


def test_export_features(tmp_path):
    cohort = tiny_cohort()
    spec = tiny_spec(tmp_path / "out")
    plan_fold = plan_splits(cohort, spec.split).folds[0]
    runner.pretrain_fold(spec, cohort, plan_fold, 0, tmp_path / "ckpt")

    out = tmp_path / "features.csv"
    frame = export_features(tmp_path / "ckpt" / "sm_pretrain.ckpt", cohort, out)
    lines = out.read_text().splitlines()
    assert len(lines) == len(cohort) + 1
    assert lines[0].startswith("subject,label,f0")
    assert frame.shape == (len(cohort), 2 + TINY_MODEL.sm.feature_dim)

    again = export_features(tmp_path / "ckpt" / "sm_pretrain.ckpt", cohort, tmp_path / "b.csv")
    assert again.equals(frame)


def test_linear_probe_on_separable_features():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 20)
    features = rng.normal(size=(40, 3)) + labels[:, None] * 5.0
    assert linear_probe_accuracy(features, labels) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        linear_probe_accuracy(features, np.zeros(40))


def test_read_env_file(tmp_path, monkeypatch):
    for name in ("FUSED_OUTPUT_DIR", "FUSED_RESULTS_DB", "FUSED_LOG_FILE", "FUSED_LOG_LEVEL"):
        # setenv first so teardown also undoes what load_dotenv writes
        monkeypatch.setenv(name, "")
        monkeypatch.delenv(name)
    env = tmp_path / ".env"
    env.write_text(f"FUSED_OUTPUT_DIR={tmp_path / 'runs'}\nFUSED_LOG_LEVEL=debug\n")
    settings = read_env(env)
    assert settings.output_dir == tmp_path / "runs"
    assert settings.results_db == tmp_path / "runs" / "results.db"
    assert settings.log_level == "DEBUG"
