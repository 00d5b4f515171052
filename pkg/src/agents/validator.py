"""
Validator エージェント

検証用コホートで予測時点ごとの予測集合を作り、
動的 c-index と IPCW Brier スコアを計算する。
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from src.agents.landmark import build_landmark_cohort, build_subcohort, design_matrix
from src.core.exceptions import DataError
from src.domain.cohort import Cohort
from src.domain.models import (
    PREDICTION_WINDOW,
    CIndexResult,
    LandmarkModels,
    PredictionRow,
    PredictionSet,
)
from src.engines.survival import risk_window_many
from src.engines.validation import brier_score, constant_brier, dynamic_cindex, overall_cindex

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "level",
    "sex",
    "la",
    "s",
    "n_persons",
    "n_events",
    "c_index",
    "c_index_se",
    "n_pairs",
    "brier",
    "brier_constant",
]


def prediction_set(models: LandmarkModels, cohort: Cohort, s: int) -> PredictionSet:
    """
    予測時点 s のサブコホートの5年予測と観測

    s 時点までの測定による BLUP を用いる。観測は s+5 で打ち切る。
    """
    fit = models.cox_5y.get(s)
    if fit is None:
        return PredictionSet()
    la = models.la.value
    sub = build_subcohort(build_landmark_cohort(cohort, la), la, s)
    if len(sub) == 0:
        return PredictionSet()

    X = design_matrix(models.lmem_fit, sub, la, float(s), models.townsend_mode)
    risks = risk_window_many(fit, X, models.covariate_names, float(s), PREDICTION_WINDOW)
    p = sub.persons
    exit_age = p["exit_age"].to_numpy(dtype=float)
    event_age = p["event_age"].to_numpy(dtype=float)
    horizon = s + PREDICTION_WINDOW
    observed = np.minimum(exit_age, horizon) - s
    with np.errstate(invalid="ignore"):
        event = ~np.isnan(event_age) & (event_age <= horizon)

    rows = [
        PredictionRow(
            person_id=int(pid),
            s=float(s),
            w=PREDICTION_WINDOW,
            predicted_risk=float(r),
            observed_time=float(t),
            observed_status="event" if e else "censored",
        )
        for pid, r, t, e in zip(p["person_id"], risks, observed, event)
    ]
    return PredictionSet(rows=rows)


@dataclass
class ValidationResult:
    """1つの (性別, ランドマーク年齢) の検証結果"""

    sex: Optional[str]
    la: int
    rows: list[dict] = field(default_factory=list)
    cindex: Optional[CIndexResult] = None


def _metrics(preds: PredictionSet) -> dict:
    """c-index と Brier（計算できなければ NaN）"""
    arrays = preds.arrays()
    out = {
        "n_persons": len(preds.rows),
        "n_events": int(arrays["event"].sum()),
        "c_index": np.nan,
        "c_index_se": np.nan,
        "n_pairs": 0,
        "brier": np.nan,
        "brier_constant": np.nan,
    }
    if not preds.rows:
        return out
    try:
        c = dynamic_cindex(preds)
        out.update(c_index=c.value, c_index_se=c.se, n_pairs=int(c.n_pairs))
    except DataError as e:
        logger.debug(f"c-index を計算できません: {e}")
    try:
        out.update(brier=brier_score(preds), brier_constant=constant_brier(preds))
    except DataError as e:
        logger.warning(f"Brier を計算できません: {e}")
    return out


class ValidatorAgent:
    """
    検証エージェント

    責務:
    - 予測時点ごとの予測集合の作成
    - 予測時点・ランドマーク・全体の指標計算
    """

    def validate(self, models: LandmarkModels, cohort: Cohort) -> ValidationResult:
        """
        検証用コホートで1組のモデルを評価

        Args:
            models: 推定済みモデル
            cohort: 検証用コホート

        Returns:
            ValidationResult（予測時点ごとの行 + ランドマーク全体の行）
        """
        la = models.la.value
        sex = models.sex or "all"
        result = ValidationResult(sex=models.sex, la=la)
        pooled: list[PredictionRow] = []
        for s in models.la.prediction_times():
            preds = prediction_set(models, cohort, s)
            pooled.extend(preds.rows)
            result.rows.append({"level": "s", "sex": sex, "la": la, "s": s, **_metrics(preds)})

        landmark = _metrics(PredictionSet(rows=pooled))
        result.rows.append({"level": "landmark", "sex": sex, "la": la, "s": None, **landmark})
        if landmark["n_pairs"] > 0:
            result.cindex = CIndexResult(
                value=landmark["c_index"], se=landmark["c_index_se"], n_pairs=landmark["n_pairs"]
            )
            logger.info(
                f"{sex} L_a={la}: c-index {landmark['c_index']:.3f} "
                f"(SE {landmark['c_index_se']:.3f}), Brier {landmark['brier']:.4f} "
                f"（定数予測 {landmark['brier_constant']:.4f}）"
            )
        return result

    @staticmethod
    def metrics_table(results: Sequence[ValidationResult]) -> pd.DataFrame:
        """全結果の指標表（最後に全ランドマークを通した c-index 行）"""
        rows = [row for res in results for row in res.rows]
        by_sex: dict[str, list[CIndexResult]] = {}
        for res in results:
            if res.cindex is not None:
                by_sex.setdefault(res.sex or "all", []).append(res.cindex)
        for sex, cs in by_sex.items():
            overall = overall_cindex(cs)
            rows.append(
                {
                    "level": "overall",
                    "sex": sex,
                    "la": None,
                    "s": None,
                    "c_index": overall.value,
                    "c_index_se": overall.se,
                    "n_pairs": int(overall.n_pairs),
                }
            )
            logger.info(f"{sex}: 全ランドマークの c-index {overall.value:.3f}")
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def create_validator() -> ValidatorAgent:
    """ValidatorAgentのファクトリ関数"""
    return ValidatorAgent()
