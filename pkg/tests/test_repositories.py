"""リポジトリのテスト"""

import json

import numpy as np
import pandas as pd
import pytest

from src.core.exceptions import DataError
from src.domain.models import LandmarkAge, LandmarkModels
from src.engines.cohort_sim import simulate_cohort
from src.infrastructure.repositories.cohort_csv_repo import CsvCohortRepository
from src.infrastructure.repositories.model_json_repo import JsonModelRepository, bundle_key
from src.infrastructure.repositories.results_csv_repo import CsvResultRepository


def test_cohort_csv_keeps_missing_ages(tmp_path, small_sim_config):
    cohort = simulate_cohort(small_sim_config)
    repo = CsvCohortRepository(tmp_path)

    repo.save(cohort)
    loaded = repo.load()

    assert len(loaded) == len(cohort)
    assert loaded.persons["event_age"].isna().sum() == cohort.persons["event_age"].isna().sum()
    np.testing.assert_allclose(loaded.measurements["value"], cohort.measurements["value"])
    assert set(loaded.histories()) == set(cohort.histories())


def test_missing_cohort_raises(tmp_path):
    with pytest.raises(DataError):
        CsvCohortRepository(tmp_path / "none").load()


def test_model_bundle_manifest(tmp_path, make_cox, lmem_fit_factory):
    landmark = LandmarkAge(value=45)
    cox_5y = {s: None for s in landmark.prediction_times()}
    cox_5y[45] = make_cox([(45.0, 0.0), (47.0, 0.01)], beta={"x": 0.2}, horizon=50.0)
    models = LandmarkModels(
        la=landmark,
        sex="M",
        lmem_fit=lmem_fit_factory(center_age=45.0),
        cox_10y=make_cox([(45.0, 0.0), (52.0, 0.03)], beta={"x": 0.2}),
        cox_5y=cox_5y,
        covariate_names=["x"],
    )
    repo = JsonModelRepository(tmp_path)

    repo.save([models])
    loaded = repo.load("M", 45)

    manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    entry = manifest["bundles"][0]
    assert entry["key"] == bundle_key("M", 45) == "M_la45"
    assert entry["cox_5y"]["45"] == "cox_5y_s45.json"
    assert entry["cox_5y"]["46"] is None
    assert loaded.unfittable() == models.unfittable()
    assert loaded.cox_5y[45].baseline_cumhaz == models.cox_5y[45].baseline_cumhaz
    assert loaded.cox_10y.beta == {"x": 0.2}

    with pytest.raises(DataError):
        repo.load("F", 45)


def test_results_repository(tmp_path):
    repo = CsvResultRepository(tmp_path / "results")

    path = repo.write_table("table", pd.DataFrame({"a": [1, 2]}))
    summary = repo.write_json("summary", {"名前": "値"})

    assert pd.read_csv(path)["a"].tolist() == [1, 2]
    assert "名前" in (tmp_path / "results" / "summary.json").read_text(encoding="utf-8")
    assert summary.endswith("summary.json")
