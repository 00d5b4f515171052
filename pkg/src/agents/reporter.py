"""
Reporter エージェント

リスク分類ごとの閾値交差年の分布と、ランドマーク時点の特性を集計する。
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from src.agents.landmark import LandmarkResult
from src.domain.models import LANDMARK_HORIZON, RiskClass, RiskProfile

logger = logging.getLogger(__name__)

NEVER = "never"


def crossing_year(profile: RiskProfile) -> str:
    """
    閾値を超える年（ランドマークからの年数、1始まり）

    t* = L_a は "0"、交差しなければ "never"。
    """
    if profile.t_star is None:
        return NEVER
    offset = profile.t_star - profile.la
    if offset <= 1e-9:
        return "0"
    return str(min(int(math.ceil(offset - 1e-9)), int(LANDMARK_HORIZON)))


class ReporterAgent:
    """
    集計エージェント

    責務:
    - 分類 × 交差年の分布
    - 分類ごとの共変量の記述統計
    """

    def crossing_table(self, results: Sequence[LandmarkResult]) -> pd.DataFrame:
        """sex, la, risk_class, crossing_year, n_persons, proportion 列"""
        years = ["0", *[str(k) for k in range(1, int(LANDMARK_HORIZON) + 1)], NEVER]
        rows = []
        for res in results:
            sex = res.models.sex or "all"
            for risk_class in RiskClass:
                members = [p for p in res.profiles if p.risk_class == risk_class]
                counts = pd.Series([crossing_year(p) for p in members], dtype=object).value_counts()
                for year in years:
                    n = int(counts.get(year, 0))
                    rows.append(
                        {
                            "sex": sex,
                            "la": res.models.la.value,
                            "risk_class": risk_class.value,
                            "crossing_year": year,
                            "n_persons": n,
                            "proportion": n / len(members) if members else 0.0,
                        }
                    )
        return pd.DataFrame(rows)

    def characteristics_table(self, results: Sequence[LandmarkResult]) -> pd.DataFrame:
        """
        分類ごとの L_a 時点の共変量（BLUP・既往歴・Townsend）の平均と標準偏差

        Returns:
            sex, la, risk_class, variable, n_persons, mean, sd 列
        """
        rows = []
        for res in results:
            sex = res.models.sex or "all"
            names = res.models.covariate_names
            for risk_class in RiskClass:
                members = [p for p in res.profiles if p.risk_class == risk_class]
                values = np.array([[p.covariates_10y[n] for n in names] for p in members]).reshape(
                    len(members), len(names)
                )
                for j, name in enumerate(names):
                    column = values[:, j]
                    rows.append(
                        {
                            "sex": sex,
                            "la": res.models.la.value,
                            "risk_class": risk_class.value,
                            "variable": name,
                            "n_persons": len(members),
                            "mean": float(column.mean()) if len(column) else np.nan,
                            "sd": float(column.std(ddof=1)) if len(column) > 1 else np.nan,
                        }
                    )
        return pd.DataFrame(rows)

    @staticmethod
    def landmark_table(results: Sequence[LandmarkResult]) -> pd.DataFrame:
        """ランドマークごとの人数・分類人数・喫煙 BLUP の範囲外割合"""
        rows = []
        for res in results:
            rows.append(
                {
                    "sex": res.models.sex or "all",
                    "la": res.models.la.value,
                    "n_landmark": res.n_landmark,
                    **{f"n_{k}": v for k, v in res.class_counts().items()},
                    "smoke_out_of_range": res.smoke_out_of_range,
                    "unfittable_s": ";".join(str(s) for s in res.models.unfittable()),
                }
            )
        return pd.DataFrame(rows)


def create_reporter() -> ReporterAgent:
    """ReporterAgentのファクトリ関数"""
    return ReporterAgent()
