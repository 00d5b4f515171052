"""
Director エージェント

コマンド全体の指揮を担当するエージェント。
コホート生成・モデル推定・スケジューリング・検証・感度分析・集計を
(性別, ランドマーク年齢) のジョブに分けてオーケストレーション。
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Optional, TypeVar

import numpy as np
import pandas as pd
import scipy

from src.agents.landmark import LandmarkAgent, LandmarkResult, create_landmark_agent
from src.agents.reporter import ReporterAgent, create_reporter
from src.agents.scheduler import SchedulerAgent, create_scheduler, profile_table
from src.agents.validator import ValidatorAgent, create_validator
from src.core.config import RunConfig, load_sweep_grid
from src.core.exceptions import DataError
from src.domain.cohort import Cohort
from src.domain.models import LandmarkModels
from src.engines.cohort_sim import simulate_cohort_with_truth, split_practices
from src.infrastructure.repositories.cohort_csv_repo import CsvCohortRepository
from src.infrastructure.repositories.model_json_repo import JsonModelRepository
from src.infrastructure.repositories.results_csv_repo import CsvResultRepository

logger = logging.getLogger(__name__)

T = TypeVar("T")

DERIVATION = "derivation"
VALIDATION = "validation"


def _versions() -> dict[str, str]:
    try:
        package = metadata.version("cvd-scheduler")
    except metadata.PackageNotFoundError:
        package = "unknown"
    return {
        "cvd-scheduler": package,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
    }


class RunDirector:
    """
    全体統括エージェント

    責務:
    - 入出力リポジトリの管理
    - ジョブの並列実行
    - 実行サマリーの記録
    """

    def __init__(
        self,
        config: RunConfig,
        landmark: Optional[LandmarkAgent] = None,
        scheduler: Optional[SchedulerAgent] = None,
        validator: Optional[ValidatorAgent] = None,
        reporter: Optional[ReporterAgent] = None,
    ):
        self.config = config
        self.landmark = landmark or LandmarkAgent(spec=config.lmem, townsend_mode=config.townsend_mode)
        self.scheduler = scheduler or SchedulerAgent(params=config.nb_params, f_set=config.f_set)
        self.validator = validator or ValidatorAgent()
        self.reporter = reporter or ReporterAgent()

        self.cohorts = CsvCohortRepository(config.cohort_path)
        self.models = JsonModelRepository(config.bundle_path)

    # -------------------------------------------------------------------------
    # 共通処理
    # -------------------------------------------------------------------------

    def _results(self, command: str) -> CsvResultRepository:
        return CsvResultRepository(self.config.results_path / command)

    def _split_repo(self, name: str) -> CsvCohortRepository:
        return CsvCohortRepository(Path(self.config.cohort_path) / name)

    def _jobs(self) -> list[tuple[str, int]]:
        return [(sex, la) for sex in self.config.sexes() for la in self.config.landmark_ages]

    def _run_jobs(self, func: Callable[[str, int], T], jobs: list[tuple[str, int]]) -> list[T]:
        """(性別, ランドマーク年齢) ごとのジョブを threads 並列で実行（結果はジョブ順）"""
        with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
            return list(pool.map(lambda job: func(*job), jobs))

    def _finish(self, command: str, started: float, extra: Optional[dict[str, Any]] = None) -> str:
        summary = {
            "command": command,
            "versions": _versions(),
            "seed": self.config.seed,
            "config": self.config.model_dump(mode="json", by_alias=True),
            "timings": {"elapsed_seconds": round(time.perf_counter() - started, 3)},
            **(extra or {}),
        }
        path = self._results(command).write_json("run_summary", summary)
        logger.info(f"=== {command} 完了 ({summary['timings']['elapsed_seconds']}秒) ===")
        return path

    def ensure_split(self) -> tuple[CsvCohortRepository, CsvCohortRepository]:
        """
        診療所単位の分割を用意（なければ全体コホートから作成）

        Returns:
            (導出用, 検証用) のリポジトリ
        """
        derivation, validation = self._split_repo(DERIVATION), self._split_repo(VALIDATION)
        if not (derivation.exists() and validation.exists()):
            logger.info("導出用・検証用の分割を作成します")
            cohort = self.cohorts.load()
            dev, val = split_practices(cohort, self.config.split_fraction, self.config.seed)
            derivation.save(dev)
            validation.save(val)
        return derivation, validation

    def _load_models(self) -> list[LandmarkModels]:
        """設定に合う推定済みモデルを読み込む"""
        available = {(e["sex"], e["la"]) for e in self.models.manifest()["bundles"]}
        jobs = [job for job in self._jobs() if job in available]
        if not jobs:
            raise DataError("設定に合う推定済みモデルがありません（先に fit を実行してください）")
        skipped = [job for job in self._jobs() if job not in available]
        if skipped:
            logger.warning(f"モデルがないためスキップ: {skipped}")
        return [self.models.load(sex, la) for sex, la in jobs]

    def _schedule_cohort(self) -> Cohort:
        derivation, validation = self.ensure_split()
        repo = validation if self.config.schedule_split == VALIDATION else derivation
        return repo.load()

    def _profiles(self, cohort: Cohort) -> list[LandmarkResult]:
        models = self._load_models()
        by_sex = {sex: cohort.by_sex(sex) for sex in self.config.sexes()}
        for c in by_sex.values():
            c.histories()
        return self._run_jobs(
            lambda sex, la: self.landmark.profiles(
                next(m for m in models if m.sex == sex and m.la.value == la), by_sex[sex]
            ),
            [(m.sex, m.la.value) for m in models],
        )

    # -------------------------------------------------------------------------
    # コマンド
    # -------------------------------------------------------------------------

    def cmd_simulate(self) -> list[str]:
        """
        合成コホートを生成して保存

        Returns:
            書き出したファイルのパス
        """
        started = time.perf_counter()
        logger.info("=== simulate 開始 ===")
        cohort, truth = simulate_cohort_with_truth(self.config.simulation)
        written = self.cohorts.save(cohort, truth)
        if self.config.simulation.n_practices >= 2 and len(cohort) > 0:
            dev, val = split_practices(cohort, self.config.split_fraction, self.config.seed)
            written += self._split_repo(DERIVATION).save(dev)
            written += self._split_repo(VALIDATION).save(val)
        self._finish("simulate", started, {"n_persons": len(cohort), "files": written})
        return written

    def cmd_fit(self) -> list[LandmarkModels]:
        """
        導出用コホートで (性別, ランドマーク年齢) ごとにモデルを推定

        推定できないジョブ（イベントなし等）は警告してスキップし、
        全ジョブが失敗した場合のみエラーとする。

        Raises:
            DataError: 推定できたモデルが1つもない場合
        """
        started = time.perf_counter()
        logger.info("=== fit 開始 ===")
        derivation, _ = self.ensure_split()
        cohort = derivation.load()
        by_sex = {sex: cohort.by_sex(sex) for sex in self.config.sexes()}
        for c in by_sex.values():
            c.histories()

        failures: dict[str, str] = {}

        def fit_job(sex: str, la: int) -> Optional[LandmarkModels]:
            try:
                return self.landmark.fit(by_sex[sex], la, sex=sex)
            except DataError as e:
                logger.warning(f"{sex} L_a={la}: 推定をスキップします: {e}")
                failures[f"{sex}_la{la}"] = str(e)
                return None

        fitted = [m for m in self._run_jobs(fit_job, self._jobs()) if m is not None]
        if not fitted:
            raise DataError("推定できたモデルがありません")
        self.models.save(fitted)
        self._finish(
            "fit",
            started,
            {
                "n_bundles": len(fitted),
                "skipped": failures,
                "unfittable": {f"{m.sex}_la{m.la.value}": m.unfittable() for m in fitted},
                "lmem_converged": {f"{m.sex}_la{m.la.value}": m.lmem_fit.converged for m in fitted},
            },
        )
        return fitted

    def cmd_schedule(self) -> dict[str, str]:
        """
        リスクプロファイルと最適スケジュールを計算

        Returns:
            表名 -> ファイルパス
        """
        started = time.perf_counter()
        logger.info("=== schedule 開始 ===")
        profiles = self._profiles(self._schedule_cohort())
        results = [self.scheduler.schedule(res) for res in profiles]

        out = self._results("schedule")
        written = {
            "risk_profiles": out.write_table("risk_profiles", profile_table(profiles)),
            "nb_evaluations": out.write_table("nb_evaluations", self.scheduler.nb_table(results)),
            "schedule_by_class": out.write_table("schedule_by_class", self.scheduler.class_table(results)),
            "schedule_proportions": out.write_table(
                "schedule_proportions", self.scheduler.proportion_table(results)
            ),
            "schedule_summary": out.write_table("schedule_summary", self.scheduler.summary_table(results)),
        }
        self._finish(
            "schedule",
            started,
            {
                "files": written,
                "smoke_out_of_range": {
                    f"{r.models.sex}_la{r.models.la.value}": r.smoke_out_of_range for r in profiles
                },
            },
        )
        return written

    def cmd_validate(self) -> str:
        """検証用コホートで指標を計算"""
        started = time.perf_counter()
        logger.info("=== validate 開始 ===")
        _, validation = self.ensure_split()
        cohort = validation.load()
        models = self._load_models()
        by_sex = {sex: cohort.by_sex(sex) for sex in self.config.sexes()}
        for c in by_sex.values():
            c.histories()

        results = self._run_jobs(
            lambda sex, la: self.validator.validate(
                next(m for m in models if m.sex == sex and m.la.value == la), by_sex[sex]
            ),
            [(m.sex, m.la.value) for m in models],
        )
        path = self._results("validate").write_table("metrics", self.validator.metrics_table(results))
        self._finish("validate", started, {"files": {"metrics": path}})
        return path

    def cmd_sweep(self, grid_path: Optional[str | Path] = None) -> str:
        """
        NB パラメータの感度分析

        Args:
            grid_path: グリッドファイル（省略時は設定の sweep）
        """
        started = time.perf_counter()
        logger.info("=== sweep 開始 ===")
        grid = load_sweep_grid(grid_path) if grid_path else self.config.sweep
        profiles = self._profiles(self._schedule_cohort())
        results = [self.scheduler.schedule(res) for res in profiles]
        path = self._results("sweep").write_table("sweep", self.scheduler.sweep(results, grid))
        self._finish(
            "sweep", started, {"files": {"sweep": path}, "grid": grid.model_dump(by_alias=True)}
        )
        return path

    def cmd_report(self) -> dict[str, str]:
        """リスク分類ごとの交差年分布と特性表"""
        started = time.perf_counter()
        logger.info("=== report 開始 ===")
        profiles = self._profiles(self._schedule_cohort())
        out = self._results("report")
        written = {
            "crossing_years": out.write_table("crossing_years", self.reporter.crossing_table(profiles)),
            "characteristics": out.write_table(
                "characteristics", self.reporter.characteristics_table(profiles)
            ),
            "landmarks": out.write_table("landmarks", self.reporter.landmark_table(profiles)),
        }
        self._finish("report", started, {"files": written})
        return written


def create_director(config: RunConfig) -> RunDirector:
    """
    RunDirectorのファクトリ関数

    Args:
        config: 実行設定

    Returns:
        設定済みのRunDirector
    """
    return RunDirector(
        config,
        landmark=create_landmark_agent(spec=config.lmem, townsend_mode=config.townsend_mode),
        scheduler=create_scheduler(params=config.nb_params, f_set=config.f_set),
        validator=create_validator(),
        reporter=create_reporter(),
    )
