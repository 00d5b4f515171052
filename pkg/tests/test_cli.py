"""CLI とコマンド全体の流れのテスト"""

import json
from pathlib import Path

import pandas as pd
import pytest

import main
from src.infrastructure.repositories.cohort_csv_repo import CsvCohortRepository

PIPELINE_CONFIG = """
landmark_ages = [50]
sex_filter = "F"
threads = 2

[simulation]
n_persons = 3000
n_practices = 6
baseline_hazard_rate = 0.01
seed = 17
"""

SMALL_CONFIG = """
landmark_ages = [50]

[simulation]
n_persons = 200
n_practices = 4
"""


def _config(tmp_path: Path, text: str) -> str:
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory) -> Path:
    """simulate と fit を済ませた出力ディレクトリ"""
    root = tmp_path_factory.mktemp("pipeline")
    config = _config(root, PIPELINE_CONFIG)
    out = str(root / "out")
    assert main.main(["simulate", "--config", config, "--out", out]) == 0
    assert main.main(["fit", "--config", config, "--out", out]) == 0
    return root


def _run(pipeline: Path, *args: str) -> int:
    return main.main([*args, "--config", str(pipeline / "run.toml"), "--out", str(pipeline / "out")])


class TestSimulate:
    def test_same_seed_same_files(self, tmp_path):
        config = _config(tmp_path, SMALL_CONFIG)

        assert main.main(["simulate", "--config", config, "--out", str(tmp_path / "a")]) == 0
        assert main.main(["simulate", "--config", config, "--out", str(tmp_path / "b")]) == 0

        for name in ("persons.csv", "measurements.csv", "derivation/persons.csv"):
            a = (tmp_path / "a" / "cohort" / name).read_bytes()
            b = (tmp_path / "b" / "cohort" / name).read_bytes()
            assert a == b

    def test_writes_truth_and_summary(self, tmp_path):
        config = _config(tmp_path, SMALL_CONFIG)

        main.main(["simulate", "--config", config, "--out", str(tmp_path)])

        truth = json.loads((tmp_path / "cohort" / "truth.json").read_text(encoding="utf-8"))
        summary = json.loads(
            (tmp_path / "results" / "simulate" / "run_summary.json").read_text(encoding="utf-8")
        )
        assert len(truth["persons"]) == 200
        assert summary["n_persons"] == 200
        assert "numpy" in summary["versions"]

    def test_empty_cohort_writes_headers(self, tmp_path):
        config = _config(tmp_path, "[simulation]\nn_persons = 0\n")

        assert main.main(["simulate", "--config", config, "--out", str(tmp_path)]) == 0

        persons = pd.read_csv(tmp_path / "cohort" / "persons.csv")
        assert len(persons) == 0
        assert "person_id" in persons.columns


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main.main(["fit", "--config", str(tmp_path / "nope.toml")]) == 2

    def test_invalid_landmark(self, tmp_path):
        assert main.main(["fit", "--landmarks", "42", "--out", str(tmp_path)]) == 2

    def test_fit_without_cohort(self, tmp_path):
        assert main.main(["fit", "--landmarks", "50", "--out", str(tmp_path)]) == 4

    def test_schedule_without_models(self, tmp_path):
        config = _config(tmp_path, SMALL_CONFIG)
        main.main(["simulate", "--config", config, "--out", str(tmp_path)])

        assert main.main(["schedule", "--config", config, "--out", str(tmp_path)]) == 4

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            main.main(["train"])


class TestPipeline:
    def test_fit_writes_bundle(self, pipeline):
        manifest = json.loads(
            (pipeline / "out" / "models" / "manifest.json").read_text(encoding="utf-8")
        )

        assert [(b["sex"], b["la"]) for b in manifest["bundles"]] == [("F", 50)]
        assert (pipeline / "out" / "models" / "F_la50" / "cox_10y.json").exists()

    def test_fit_reads_only_derivation_split(self, pipeline, monkeypatch):
        loaded: list[Path] = []
        original = CsvCohortRepository.load

        def recording_load(self):
            loaded.append(self.root)
            return original(self)

        monkeypatch.setattr(CsvCohortRepository, "load", recording_load)

        assert _run(pipeline, "fit") == 0
        assert loaded
        assert all(root.name == "derivation" for root in loaded)

    def test_schedule(self, pipeline):
        assert _run(pipeline, "schedule") == 0

        out = pipeline / "out" / "results" / "schedule"
        by_class = pd.read_csv(out / "schedule_by_class.csv")
        assert set(by_class["risk_class"]) == {"high", "med_high", "med_low", "low"}
        assert set(by_class["f"]) == set(range(1, 11))
        summary = pd.read_csv(out / "schedule_summary.csv")
        row = summary.iloc[0]
        assert row["n_scheduled"] + row["n_excluded_very_high"] + row["n_unclassified"] == row["n_landmark"]
        if row["n_scheduled"] > 0:
            proportions = pd.read_csv(out / "schedule_proportions.csv")
            assert proportions["proportion"].sum() == pytest.approx(1.0, abs=1e-9)
        profiles = pd.read_csv(out / "risk_profiles.csv")
        assert profiles["s"].between(50, 60).all()

    def test_validate(self, pipeline):
        assert _run(pipeline, "validate") == 0

        metrics = pd.read_csv(pipeline / "out" / "results" / "validate" / "metrics.csv")
        assert set(metrics["level"]) >= {"s", "landmark"}
        landmark = metrics[metrics["level"] == "landmark"].iloc[0]
        assert 0.0 <= landmark["c_index"] <= 1.0

    def test_sweep(self, pipeline):
        grid = pipeline / "sweep.toml"
        grid.write_text("[sweep]\nc_v = [15.0, 1000.0]\n", encoding="utf-8")

        assert _run(pipeline, "sweep", "--grid", str(grid)) == 0

        sweep = pd.read_csv(pipeline / "out" / "results" / "sweep" / "sweep.csv")
        assert set(sweep["parameter"]) == {"lambda", "u_s", "c_s", "c_v"}
        assert sorted(set(sweep.loc[sweep["parameter"] == "c_v", "value"])) == [15.0, 1000.0]

    def test_report(self, pipeline):
        assert _run(pipeline, "report") == 0

        out = pipeline / "out" / "results" / "report"
        crossing = pd.read_csv(out / "crossing_years.csv", dtype={"crossing_year": str})
        assert "never" in set(crossing["crossing_year"])
        assert (out / "characteristics.csv").exists()
        landmarks = pd.read_csv(out / "landmarks.csv")
        assert landmarks.iloc[0]["la"] == 50
