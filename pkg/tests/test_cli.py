import pytest

from fused_sfda.data.dataset_io import load_dataset
from fused_sfda.database.db_init import ensure_outputs, read_env
from fused_sfda.main import EXIT_OK, EXIT_USAGE, main

SMALL = "data.n_subjects = 2\ndata.trials_per_class = 2\ndata.samples = 128\n"


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("FUSED_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("FUSED_LOG_FILE", str(tmp_path / "debug.log"))
    monkeypatch.delenv("FUSED_RESULTS_DB", raising=False)
    (tmp_path / "small.cfg").write_text(SMALL)
    return tmp_path


def test_gen_data_then_preprocess(workdir):
    raw = workdir / "raw.fusd"
    assert main(["gen-data", "--config", "small.cfg", "--out", str(raw)]) == EXIT_OK
    cohort = load_dataset(raw)
    assert len(cohort) == 2 * 2 * 4
    assert cohort.length == 128

    windows = workdir / "windows.fusd"
    code = main(
        ["preprocess", "--in", str(raw), "--out", str(windows), "--step", "zscore", "--step", "window:0.5"]
    )
    assert code == EXIT_OK
    assert len(load_dataset(windows)) == 2 * len(cohort)


def test_bad_config_exits_with_usage_code(workdir):
    (workdir / "bad.cfg").write_text("adaptation.margin_threshold = 1.5\n")
    assert main(["gen-data", "--config", "bad.cfg", "--out", "x.fusd"]) == EXIT_USAGE


def test_unknown_preprocess_stage(workdir):
    raw = workdir / "raw.fusd"
    main(["gen-data", "--config", "small.cfg", "--out", str(raw)])
    code = main(["preprocess", "--in", str(raw), "--out", "y.fusd", "--step", "notch:50"])
    assert code == EXIT_USAGE


def test_verify_passes(workdir, capsys):
    assert main(["verify"]) == EXIT_OK
    output = capsys.readouterr().out
    assert output.count("PASS") == 4


def test_gen_data_leaves_no_results_ledger(workdir):
    assert main(["gen-data", "--config", "small.cfg", "--out", "raw.fusd"]) == EXIT_OK
    assert not (workdir / "runs").exists()


def test_ensure_outputs_creates_ledger(workdir):
    settings = ensure_outputs(read_env())
    assert settings.output_dir.is_dir()
    assert settings.results_db.is_file()
