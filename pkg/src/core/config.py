"""
設定管理モジュール

環境変数（.env）から実行環境の設定を、JSON/TOML ファイルから実行設定を読み込む。
"""

import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings

from src.core.exceptions import ConfigError
from src.domain.models import (
    LANDMARK_GRID,
    LmemSpec,
    NbParams,
    SimConfig,
    SweepGrid,
)

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """アプリケーション設定"""

    # 並列実行
    threads: int = Field(default=1, ge=1, alias="CVD_THREADS")

    # ログ
    log_level: str = Field(default="INFO", alias="CVD_LOG_LEVEL")

    # 出力先
    output_dir: str = Field(default="out", alias="CVD_OUTPUT_DIR")

    # Cox モデル
    townsend_mode: Literal["numeric", "dummies"] = Field(
        default="numeric", alias="CVD_TOWNSEND_MODE"
    )  # 机上規模では数値、大規模では19ダミー
    min_events: int = Field(default=1, ge=1, alias="CVD_MIN_EVENTS")

    # 非収束 LMEM を数値エラーとして扱うか
    strict_convergence: bool = Field(default=False, alias="CVD_STRICT_CONVERGENCE")

    seed: int = Field(default=20240101, ge=0, alias="CVD_SEED")

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "extra": "ignore",
    }


@lru_cache
def get_settings() -> Settings:
    """シングルトンで設定を取得"""
    return Settings()


settings = get_settings()


class RunConfig(BaseModel):
    """1回の実行設定（ファイル + CLI フラグ）"""

    simulation: SimConfig = Field(default_factory=SimConfig)
    lmem: LmemSpec = Field(default_factory=LmemSpec)
    nb_params: NbParams = Field(default_factory=NbParams)
    sweep: SweepGrid = Field(default_factory=SweepGrid)
    f_set: list[int] = Field(default_factory=lambda: list(range(1, 11)))
    landmark_ages: list[int] = Field(default_factory=lambda: list(LANDMARK_GRID))
    sex_filter: Literal["M", "F", "both"] = "both"
    split_fraction: float = Field(default=2 / 3, gt=0.0, lt=1.0)
    schedule_split: Literal["validation", "derivation"] = "validation"
    threads: int = Field(default_factory=lambda: settings.threads, ge=1)
    seed: int = Field(default_factory=lambda: settings.seed, ge=0)
    townsend_mode: Literal["numeric", "dummies"] = Field(
        default_factory=lambda: settings.townsend_mode
    )

    output_dir: Path = Field(default_factory=lambda: Path(settings.output_dir))
    cohort_dir: Optional[Path] = Field(default=None, description="省略時は output_dir/cohort")
    bundle_dir: Optional[Path] = Field(default=None, description="省略時は output_dir/models")
    results_dir: Optional[Path] = Field(default=None, description="省略時は output_dir/results")

    @field_validator("f_set")
    @classmethod
    def _check_f_set(cls, v: list[int]) -> list[int]:
        if not v or any(not 1 <= f <= 10 for f in v):
            raise ValueError(f"f_set は 1..10 の非空集合: {v}")
        return sorted(set(v))

    @field_validator("landmark_ages")
    @classmethod
    def _check_landmarks(cls, v: list[int]) -> list[int]:
        bad = [a for a in v if a not in LANDMARK_GRID]
        if bad or not v:
            raise ValueError(f"ランドマーク年齢はグリッド {LANDMARK_GRID} から選択: {bad}")
        return sorted(set(v))

    def sexes(self) -> list[str]:
        return ["M", "F"] if self.sex_filter == "both" else [self.sex_filter]

    @property
    def cohort_path(self) -> Path:
        return self.cohort_dir or self.output_dir / "cohort"

    @property
    def bundle_path(self) -> Path:
        return self.bundle_dir or self.output_dir / "models"

    @property
    def results_path(self) -> Path:
        return self.results_dir or self.output_dir / "results"


def _read_mapping(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"設定ファイルを読めません: {path} ({e})") from e
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"設定ファイルの形式が不正です: {path} ({e})") from e


def load_run_config(path: Optional[str | Path] = None, **overrides) -> RunConfig:
    """
    実行設定を読み込む

    Args:
        path: JSON または TOML ファイル（省略時は既定値のみ）
        **overrides: CLI フラグによる上書き（None は無視）

    Returns:
        RunConfig

    Raises:
        ConfigError: ファイルが読めない、または値が不正な場合
    """
    data = _read_mapping(Path(path)) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    # --seed はシミュレーションの乱数にも適用
    if overrides.get("seed") is not None:
        data["simulation"] = {**data.get("simulation", {}), "seed": overrides["seed"]}
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"設定値が不正です: {e}") from e
    logger.debug(f"実行設定: {config.model_dump(mode='json', by_alias=True)}")
    return config


def load_sweep_grid(path: str | Path) -> SweepGrid:
    """感度分析グリッドを読み込む（[sweep] テーブルまたはトップレベル）"""
    data = _read_mapping(Path(path))
    data = data.get("sweep", data)
    try:
        return SweepGrid.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"スイープ設定が不正です: {e}") from e
