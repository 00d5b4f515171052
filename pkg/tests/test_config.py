"""実行設定の読み込みテスト"""

from pathlib import Path

import pytest

from src.core.config import RunConfig, load_run_config, load_sweep_grid
from src.core.exceptions import ConfigError


def _write(tmp_path: Path, name: str, text: str) -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults():
    config = load_run_config()

    assert config.landmark_ages == [40, 45, 50, 55, 60, 65, 70, 75, 80]
    assert config.f_set == list(range(1, 11))
    assert config.sexes() == ["M", "F"]
    assert config.nb_params.lambda_ == 25_000.0
    assert config.cohort_path == config.output_dir / "cohort"


def test_toml_file(tmp_path):
    path = _write(
        tmp_path,
        "run.toml",
        """
landmark_ages = [45, 40]
sex_filter = "F"
output_dir = "elsewhere"

[simulation]
n_persons = 12

[nb_params]
lambda = 30000.0
c_v = 20.0
""",
    )

    config = load_run_config(path)

    assert config.landmark_ages == [40, 45]
    assert config.sexes() == ["F"]
    assert config.simulation.n_persons == 12
    assert config.nb_params.lambda_ == 30_000.0
    assert config.nb_params.c_v == 20.0
    assert config.results_path == Path("elsewhere") / "results"


def test_json_file_and_overrides(tmp_path):
    path = _write(tmp_path, "run.json", '{"threads": 2, "landmark_ages": [60]}')

    config = load_run_config(path, threads=None, landmark_ages=[50, 55], seed=9)

    assert config.threads == 2
    assert config.landmark_ages == [50, 55]
    assert config.seed == 9
    assert config.simulation.seed == 9


@pytest.mark.parametrize(
    "text",
    [
        '{"landmark_ages": [42]}',
        '{"f_set": [0, 3]}',
        '{"sex_filter": "X"}',
        '{"nb_params": {"u_s": 1.5}}',
        '{"simulation": {"true_sigma": [[1.0]]}}',
    ],
)
def test_invalid_values(tmp_path, text):
    path = _write(tmp_path, "bad.json", text)

    with pytest.raises(ConfigError):
        load_run_config(path)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.toml")


def test_malformed_file(tmp_path):
    path = _write(tmp_path, "broken.toml", "landmark_ages = [")

    with pytest.raises(ConfigError):
        load_run_config(path)


def test_sweep_grid_table(tmp_path):
    path = _write(tmp_path, "sweep.toml", "[sweep]\nc_s = [4.0, 320.0]\nlambda = [20000.0]\n")

    grid = load_sweep_grid(path)

    assert grid.c_s == [4.0, 320.0]
    assert grid.lambda_ == [20_000.0]
    assert grid.u_s == [0.997, 0.998, 0.999, 1.0]


def test_summary_dump_uses_aliases():
    dumped = RunConfig().model_dump(mode="json", by_alias=True)

    assert "lambda" in dumped["nb_params"]
    assert "lambda" in dumped["sweep"]
