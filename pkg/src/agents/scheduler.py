"""
Scheduler エージェント

リスクプロファイルから個人ごとの最適リスク評価間隔を求め、
リスク分類 × f の集計表と感度分析を作成する。
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from src.agents.landmark import LandmarkResult
from src.domain.models import NbEvaluation, NbParams, RiskClass, SweepGrid
from src.engines.netbenefit import F_SET, NbInputs, optimal_schedule, sensitivity_sweep

logger = logging.getLogger(__name__)

# 集計表に載せるリスク分類（very_high は除外行のみ）
SCHEDULED_CLASSES = [RiskClass.HIGH, RiskClass.MED_HIGH, RiskClass.MED_LOW, RiskClass.LOW]


@dataclass
class ScheduleResult:
    """1つの (性別, ランドマーク年齢) のスケジューリング結果"""

    sex: Optional[str]
    la: int
    evaluations: list[NbEvaluation] = field(default_factory=list)
    classes: dict[int, RiskClass] = field(default_factory=dict)
    n_landmark: int = 0
    n_very_high: int = 0
    n_unclassified: int = 0

    @property
    def inputs(self) -> NbInputs:
        return NbInputs.from_evaluations(self.evaluations)

    def summary(self) -> str:
        """結果のサマリーを返す"""
        return (
            f"{self.sex or 'all'} L_a={self.la}: "
            f"対象 {len(self.evaluations)}人, "
            f"超高リスク除外 {self.n_very_high}人, "
            f"分類不能 {self.n_unclassified}人"
        )


class SchedulerAgent:
    """
    スケジューリングエージェント

    責務:
    - 超高リスク者の除外
    - 個人ごとの NB 最大化
    - 集計表の作成
    """

    def __init__(self, params: Optional[NbParams] = None, f_set: Sequence[int] = F_SET):
        self.params = params or NbParams()
        self.f_set = list(f_set)

    def schedule(self, result: LandmarkResult) -> ScheduleResult:
        """
        ランドマーク結果の全員を評価

        Args:
            result: LandmarkAgent.profiles の結果

        Returns:
            ScheduleResult
        """
        models = result.models
        out = ScheduleResult(sex=models.sex, la=models.la.value, n_landmark=result.n_landmark)
        for profile in result.profiles:
            if profile.risk_class is None:
                out.n_unclassified += 1
                continue
            if profile.risk_class == RiskClass.VERY_HIGH:
                out.n_very_high += 1
                continue
            out.evaluations.append(optimal_schedule(profile, models, self.params, self.f_set))
            out.classes[profile.person_id] = profile.risk_class

        logger.info(out.summary())
        return out

    # -------------------------------------------------------------------------
    # 集計表
    # -------------------------------------------------------------------------

    @staticmethod
    def nb_table(results: Sequence[ScheduleResult]) -> pd.DataFrame:
        """個人 × f の NB 評価表"""
        rows = []
        for res in results:
            for ev in res.evaluations:
                for r in ev.rows:
                    rows.append(
                        {
                            "sex": res.sex or "all",
                            "la": res.la,
                            "person_id": ev.person_id,
                            "risk_class": res.classes[ev.person_id].value,
                            **r.model_dump(),
                            "optimal": r.f == ev.f_opt,
                        }
                    )
        return pd.DataFrame(rows)

    def class_table(self, results: Sequence[ScheduleResult]) -> pd.DataFrame:
        """
        リスク分類 × 最適 f の人数と行割合

        Returns:
            sex, la, risk_class, f, n_persons, proportion 列
        """
        rows = []
        for res in results:
            f_opt = pd.Series(
                [ev.f_opt for ev in res.evaluations],
                index=[ev.person_id for ev in res.evaluations],
                dtype=int,
            )
            for risk_class in SCHEDULED_CLASSES:
                members = [pid for pid, c in res.classes.items() if c == risk_class]
                counts = f_opt.loc[members].value_counts() if members else pd.Series(dtype=int)
                for f in self.f_set:
                    n = int(counts.get(f, 0))
                    rows.append(
                        {
                            "sex": res.sex or "all",
                            "la": res.la,
                            "risk_class": risk_class.value,
                            "f": f,
                            "n_persons": n,
                            "proportion": n / len(members) if members else 0.0,
                        }
                    )
        return pd.DataFrame(rows, columns=["sex", "la", "risk_class", "f", "n_persons", "proportion"])

    def proportion_table(self, results: Sequence[ScheduleResult]) -> pd.DataFrame:
        """ランドマーク年齢ごとの最適 f の割合"""
        rows = []
        for res in results:
            f_opt = np.array([ev.f_opt for ev in res.evaluations], dtype=int)
            for f in self.f_set:
                n = int(np.sum(f_opt == f))
                rows.append(
                    {
                        "sex": res.sex or "all",
                        "la": res.la,
                        "f": f,
                        "n_persons": n,
                        "proportion": n / len(f_opt) if len(f_opt) else 0.0,
                    }
                )
        return pd.DataFrame(rows, columns=["sex", "la", "f", "n_persons", "proportion"])

    @staticmethod
    def summary_table(results: Sequence[ScheduleResult]) -> pd.DataFrame:
        """除外人数などの集計行"""
        rows = []
        for res in results:
            beyond = sum(any(r.beyond_last_visit for r in ev.rows) for ev in res.evaluations)
            rows.append(
                {
                    "sex": res.sex or "all",
                    "la": res.la,
                    "n_landmark": res.n_landmark,
                    "n_scheduled": len(res.evaluations),
                    "n_excluded_very_high": res.n_very_high,
                    "n_unclassified": res.n_unclassified,
                    "n_beyond_last_visit": beyond,
                }
            )
        return pd.DataFrame(rows)

    # -------------------------------------------------------------------------
    # 感度分析
    # -------------------------------------------------------------------------

    def sweep(self, results: Sequence[ScheduleResult], grid: SweepGrid) -> pd.DataFrame:
        """
        (性別, ランドマーク年齢) ごとの感度分析

        Returns:
            sex, la, parameter, value, f, n_persons, proportion, n_flipped 列
        """
        frames = []
        for res in results:
            table = sensitivity_sweep(res.inputs, grid, self.params)
            table.insert(0, "la", res.la)
            table.insert(0, "sex", res.sex or "all")
            frames.append(table)
            flips = table.groupby(["parameter", "value"])["n_flipped"].first()
            logger.info(
                f"{res.sex or 'all'} L_a={res.la}: 感度分析で f_opt が変わった最大人数 {int(flips.max()) if len(flips) else 0}"
            )
        if not frames:
            return pd.DataFrame(
                columns=["sex", "la", "parameter", "value", "f", "n_persons", "proportion", "n_flipped"]
            )
        return pd.concat(frames, ignore_index=True)


def profile_table(results: Sequence[LandmarkResult]) -> pd.DataFrame:
    """リスクプロファイルのロング形式（person_id, la, s, risk, t_star, class）"""
    rows = []
    for res in results:
        sex = res.models.sex or "all"
        for p in res.profiles:
            for s, risk in sorted(p.risks.items()):
                rows.append(
                    {
                        "sex": sex,
                        "person_id": p.person_id,
                        "la": p.la,
                        "s": s,
                        "risk": risk,
                        "t_star": p.t_star,
                        "class": p.risk_class.value if p.risk_class else None,
                    }
                )
    return pd.DataFrame(rows, columns=["sex", "person_id", "la", "s", "risk", "t_star", "class"])


def create_scheduler(params: Optional[NbParams] = None, f_set: Sequence[int] = F_SET) -> SchedulerAgent:
    """SchedulerAgentのファクトリ関数"""
    return SchedulerAgent(params=params, f_set=f_set)
