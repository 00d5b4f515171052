"""
Landmark エージェント

ランドマーク年齢ごとに2段階モデル（LMEM → BLUP → Cox）を構築し、
個人ごとの5年リスクプロファイルと5%閾値の交差時刻 t* を求める。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from src.core.config import settings
from src.core.exceptions import DataError, NumericError
from src.domain.cohort import Cohort, PersonHistory
from src.domain.models import (
    COMORBIDITIES,
    FACTORS,
    LANDMARK_HORIZON,
    LATE_ONSET_COMORBIDITIES,
    PREDICTION_WINDOW,
    RISK_THRESHOLD,
    CoxFit,
    LandmarkAge,
    LandmarkModels,
    LmemFit,
    LmemSpec,
    RiskClass,
    RiskProfile,
)
from src.engines.lmem import blup_path, fit_lmem
from src.engines.survival import fit_cox_arrays, risk_window

logger = logging.getLogger(__name__)

# Townsend 指数のカテゴリ（1 が基準）
TOWNSEND_LEVELS = range(2, 21)


# =============================================================================
# コホート抽出
# =============================================================================


def _after(values: pd.Series, age: float) -> np.ndarray:
    """値が欠損、または age より後"""
    return (values.isna() | (values > age)).to_numpy()


def build_landmark_cohort(cohort: Cohort, la: float) -> Cohort:
    """
    ランドマークコホートを抽出

    la 時点で登録中、CVD 未発症、生存、スタチン未開始の人物。
    la 時点でスタチンを開始した人物も除外する。

    Args:
        cohort: 元のコホート
        la: ランドマーク年齢

    Returns:
        絞り込んだ Cohort（空の場合あり）
    """
    p = cohort.persons
    mask = (
        (p["entry_age"] <= la).to_numpy()
        & (p["exit_age"] > la).to_numpy()
        & _after(p["event_age"], la)
        & _after(p["death_age"], la)
        & _after(p["statin_start_age"], la)
    )
    landmark = cohort.filter_persons(mask)
    logger.debug(f"ランドマークコホート L_a={la}: {len(landmark)}/{len(cohort)}人")
    return landmark


def build_subcohort(landmark_cohort: Cohort, la: float, s: float) -> Cohort:
    """
    予測時点 s のサブコホート（s 時点で追跡中かつイベント・死亡なし）

    Raises:
        DataError: s が [la, la+10] の外にある場合
    """
    if not la <= s <= la + LANDMARK_HORIZON:
        raise DataError(f"予測時点 s={s} が [{la}, {la + LANDMARK_HORIZON}] の外です")
    p = landmark_cohort.persons
    mask = (p["exit_age"] > s).to_numpy() & _after(p["event_age"], s) & _after(p["death_age"], s)
    return landmark_cohort.filter_persons(mask)


# =============================================================================
# 共変量
# =============================================================================


def covariate_names(la: float, townsend_mode: str = "numeric") -> list[str]:
    """Cox モデルに入る共変量名（BLUP 因子 + 固定共変量）"""
    comorbidities = [
        c for c in COMORBIDITIES if la >= 60 or c not in LATE_ONSET_COMORBIDITIES
    ]
    if townsend_mode == "dummies":
        townsend = [f"townsend_{k}" for k in TOWNSEND_LEVELS]
    else:
        townsend = ["townsend"]
    return [*FACTORS, *comorbidities, "bp_medication", *townsend]


def fixed_covariate_frame(
    persons: pd.DataFrame, la: float, cutoff: float, townsend_mode: str = "numeric"
) -> pd.DataFrame:
    """
    時間固定の共変量表

    降圧薬は cutoff までに開始していれば 1。

    Args:
        persons: 人物表
        la: ランドマーク年齢（既往歴の採否を決める）
        cutoff: 降圧薬の判定年齢
        townsend_mode: "numeric" または "dummies"

    Returns:
        person_id を index とする DataFrame
    """
    names = [n for n in covariate_names(la, townsend_mode) if n not in FACTORS]
    frame = pd.DataFrame(index=persons["person_id"].to_numpy())
    for name in names:
        if name == "bp_medication":
            frame[name] = (persons["bpm_start_age"] <= cutoff).to_numpy(dtype=float)
        elif name == "townsend":
            frame[name] = persons["townsend"].to_numpy(dtype=float)
        elif name.startswith("townsend_"):
            level = int(name.rsplit("_", 1)[1])
            frame[name] = (persons["townsend"] == level).to_numpy(dtype=float)
        else:
            frame[name] = persons[name].to_numpy(dtype=float)
    return frame


def _blup_block(
    fit: LmemFit, cohort: Cohort, cutoff: float, query_ages: Sequence[float]
) -> np.ndarray:
    """(人数, 予測年齢数, 因子数) の BLUP 配列"""
    out = np.empty((len(cohort), len(query_ages), len(FACTORS)))
    for i, pid in enumerate(cohort.person_ids):
        path = blup_path(fit, cohort.history(pid), query_ages, cutoff)
        for j, vec in enumerate(path):
            out[i, j] = [vec.values[f] for f in FACTORS]
    return out


def design_matrix(
    fit: LmemFit, cohort: Cohort, la: float, cutoff: float, townsend_mode: str
) -> np.ndarray:
    """cutoff 時点の BLUP と固定共変量を並べた Cox 用の行列"""
    blups = _blup_block(fit, cohort, cutoff, [cutoff])[:, 0, :]
    fixed = fixed_covariate_frame(cohort.persons, la, cutoff, townsend_mode)
    return np.column_stack([blups, fixed.to_numpy(dtype=float)])


def _survival_arrays(cohort: Cohort, origin: float, window: float) -> tuple[np.ndarray, np.ndarray]:
    """起点からの観測時間とイベント指示（window 後は打ち切り）"""
    p = cohort.persons
    exit_age = p["exit_age"].to_numpy(dtype=float)
    event_age = p["event_age"].to_numpy(dtype=float)
    durations = np.minimum(exit_age, origin + window) - origin
    with np.errstate(invalid="ignore"):
        events = ~np.isnan(event_age) & (event_age <= origin + window)
    return durations, events


# =============================================================================
# モデル構築
# =============================================================================


def _fit_window(
    fit: LmemFit,
    cohort: Cohort,
    la: float,
    origin: float,
    window: float,
    names: list[str],
    townsend_mode: str,
    min_events: int,
) -> Optional[CoxFit]:
    """origin 起点・window 年の Cox を推定（イベント不足なら None）"""
    if len(cohort) == 0:
        return None
    durations, events = _survival_arrays(cohort, origin, window)
    if events.sum() < min_events:
        return None
    X = design_matrix(fit, cohort, la, origin, townsend_mode)
    return fit_cox_arrays(X, durations, events, names, origin, origin + window, drop_separated=True)


def fit_landmark_models(
    derivation_cohort: Cohort,
    la: int,
    spec: Optional[LmemSpec] = None,
    sex: Optional[str] = None,
    townsend_mode: Optional[str] = None,
    min_events: Optional[int] = None,
    threads: int = 1,
) -> LandmarkModels:
    """
    1つのランドマーク年齢でモデル一式を推定

    Args:
        derivation_cohort: 導出用コホート
        la: ランドマーク年齢
        spec: LMEM の指定
        sex: 性別ラベル（記録用）
        townsend_mode: Townsend 指数の扱い（省略時は設定値）
        min_events: 5年 Cox の最小イベント数（省略時は設定値）
        threads: 予測時点ごとの Cox 推定の並列数

    Returns:
        LandmarkModels

    Raises:
        DataError: ランドマークコホートが空、または10年ウィンドウにイベントがない場合
        NumericError: strict モードで LMEM が収束しない場合
    """
    landmark_age = LandmarkAge(value=la)
    townsend_mode = townsend_mode or settings.townsend_mode
    min_events = min_events or settings.min_events
    label = f"{sex or 'all'} L_a={la}"

    cohort = build_landmark_cohort(derivation_cohort, la)
    if len(cohort) == 0:
        raise DataError(f"{label}: ランドマークコホートが空です")
    logger.info(f"{label}: ランドマークコホート {len(cohort)}人")

    # Stage 1: 過去と将来の測定を全て使って LMEM を推定
    lmem_fit = fit_lmem(cohort, spec, center_age=float(la))
    if not lmem_fit.converged:
        message = f"{label}: LMEM が {lmem_fit.n_iterations} 反復で収束しませんでした"
        if settings.strict_convergence:
            raise NumericError(message)
        logger.warning(message)

    names = covariate_names(la, townsend_mode)

    # Stage 2a: la 時点の BLUP で10年 Cox
    cox_10y = _fit_window(lmem_fit, cohort, la, la, LANDMARK_HORIZON, names, townsend_mode, 1)
    if cox_10y is None:
        raise DataError(f"{label}: no events: 10年ウィンドウにイベントがありません")

    # Stage 2b: 予測時点ごとのサブコホートで5年 Cox
    times = landmark_age.prediction_times()

    def fit_at(s: int) -> Optional[CoxFit]:
        sub = build_subcohort(cohort, la, s)
        try:
            return _fit_window(lmem_fit, sub, la, s, PREDICTION_WINDOW, names, townsend_mode, min_events)
        except (DataError, NumericError) as e:
            logger.warning(f"{label}: s={s} の Cox を推定できません: {e}")
            return None

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        fits = dict(zip(times, pool.map(fit_at, times)))

    unfittable = [s for s, fit in fits.items() if fit is None]
    if unfittable:
        logger.warning(f"{label}: イベント不足で推定不能な予測時点: {unfittable}")
    logger.info(f"{label}: モデル推定完了（5年 Cox {len(times) - len(unfittable)}/{len(times)}）")

    return LandmarkModels(
        la=landmark_age,
        sex=sex,
        lmem_fit=lmem_fit,
        cox_10y=cox_10y,
        cox_5y=fits,
        covariate_names=names,
        townsend_mode=townsend_mode,
    )


# =============================================================================
# リスクプロファイル
# =============================================================================


def crossing_time(
    risks: Mapping[int, float], threshold: float = RISK_THRESHOLD
) -> Optional[float]:
    """
    5年リスクが閾値を初めて超える時刻を線形補間で求める

    欠けている時点は飛ばし、隣接する利用可能な2点の間で補間する。

    Args:
        risks: 予測時点 s -> リスク
        threshold: 閾値（超過は厳密な不等号）

    Returns:
        t*（交差しなければ None）
    """
    grid = sorted(risks)
    for k, s in enumerate(grid):
        if risks[s] <= threshold:
            continue
        if k == 0:
            return float(s)
        prev = grid[k - 1]
        if s - prev > 1:
            logger.debug(f"交差探索: 予測時点 {prev} と {s} の間が欠けています")
        r0, r1 = risks[prev], risks[s]
        return float(prev + (threshold - r0) / (r1 - r0) * (s - prev))
    return None


def risk_profile(
    models: LandmarkModels,
    person_history: PersonHistory,
    la: int,
    fixed: Mapping[str, float],
    person_id: int = 0,
) -> RiskProfile:
    """
    ランドマーク年齢までの情報で予測時点グリッド上の5年リスクを計算

    将来の予測時点の BLUP も la までの測定のみから求める。

    Args:
        models: 推定済みモデル一式
        person_history: 人物の測定履歴
        la: ランドマーク年齢
        fixed: 時間固定の共変量（fixed_covariate_frame の1行）
        person_id: 人物ID

    Returns:
        RiskProfile
    """
    if la != models.la.value:
        raise DataError(f"ランドマーク年齢が一致しません: {la} != {models.la.value}")
    times = models.la.prediction_times()
    path = blup_path(models.lmem_fit, person_history, times, float(la))

    risks: dict[int, float] = {}
    covariates_la: dict[str, float] = {}
    for s, vec in zip(times, path):
        x = {**fixed, **vec.values}
        if s == la:
            covariates_la = {n: float(x[n]) for n in models.covariate_names}
        fit = models.cox_5y.get(s)
        if fit is None:
            continue
        risks[s] = risk_window(fit, x, float(s), PREDICTION_WINDOW)

    risk_class = RiskClass.from_risk(risks[la]) if la in risks else None
    return RiskProfile(
        person_id=person_id,
        la=la,
        risks=risks,
        t_star=crossing_time(risks),
        risk_class=risk_class,
        history_cutoff=float(la),
        covariates_10y=covariates_la,
    )


@dataclass
class LandmarkResult:
    """1つの (性別, ランドマーク年齢) の結果"""

    models: LandmarkModels
    profiles: list[RiskProfile] = field(default_factory=list)
    n_landmark: int = 0
    smoke_out_of_range: float = 0.0

    def class_counts(self) -> dict[str, int]:
        counts = {c.value: 0 for c in RiskClass}
        for p in self.profiles:
            if p.risk_class is not None:
                counts[p.risk_class.value] += 1
        return counts


class LandmarkAgent:
    """
    ランドマーク解析エージェント

    責務:
    - 導出用コホートでのモデル推定
    - 対象コホートのリスクプロファイル計算
    - 喫煙 BLUP の範囲外割合の集計
    """

    def __init__(
        self,
        spec: Optional[LmemSpec] = None,
        townsend_mode: Optional[str] = None,
        threads: int = 1,
    ):
        self.spec = spec or LmemSpec()
        self.townsend_mode = townsend_mode or settings.townsend_mode
        self.threads = threads

    def fit(self, derivation: Cohort, la: int, sex: Optional[str] = None) -> LandmarkModels:
        return fit_landmark_models(
            derivation,
            la,
            spec=self.spec,
            sex=sex,
            townsend_mode=self.townsend_mode,
            threads=self.threads,
        )

    def profiles(self, models: LandmarkModels, cohort: Cohort) -> LandmarkResult:
        """
        対象コホートのランドマークコホート全員のリスクプロファイル

        Args:
            models: 推定済みモデル
            cohort: 対象コホート（検証用または導出用）

        Returns:
            LandmarkResult
        """
        la = models.la.value
        landmark = build_landmark_cohort(cohort, la)
        fixed = fixed_covariate_frame(landmark.persons, la, la, models.townsend_mode)
        records = fixed.to_dict(orient="index")

        profiles = [
            risk_profile(models, landmark.history(pid), la, records[pid], person_id=int(pid))
            for pid in landmark.person_ids
        ]
        smoke = np.array([p.covariates_10y["smoke"] for p in profiles])
        out_of_range = float(np.mean((smoke < 0) | (smoke > 1))) if len(smoke) else 0.0
        if out_of_range > 0:
            logger.info(f"L_a={la}: 喫煙 BLUP が [0, 1] の範囲外: {out_of_range:.1%}")

        missing = sum(p.risk_class is None for p in profiles)
        if missing:
            logger.warning(f"L_a={la}: s=L_a の Cox がないため {missing}人のリスク分類ができません")
        return LandmarkResult(
            models=models,
            profiles=profiles,
            n_landmark=len(landmark),
            smoke_out_of_range=out_of_range,
        )


def create_landmark_agent(
    spec: Optional[LmemSpec] = None, townsend_mode: Optional[str] = None, threads: int = 1
) -> LandmarkAgent:
    """LandmarkAgentのファクトリ関数"""
    return LandmarkAgent(spec=spec, townsend_mode=townsend_mode, threads=threads)
