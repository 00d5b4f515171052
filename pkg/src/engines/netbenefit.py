"""
Net Benefit 評価

リスク評価スケジュールごとにスタチン開始受診、期待受診回数、
EFLY（イベントなし生存年数）、QALY、費用、Net Benefit を計算し、
個人ごとに NB を最大化する受診間隔 f を選ぶ。
"""

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from src.core.exceptions import DataError, SchedulingError
from src.domain.models import (
    LANDMARK_HORIZON,
    CoxFit,
    LandmarkModels,
    NbEvaluation,
    NbParams,
    NbRow,
    RiskClass,
    RiskProfile,
    Schedule,
    SweepGrid,
)
from src.engines.survival import cumulative_baseline, linear_predictor

logger = logging.getLogger(__name__)

F_SET: tuple[int, ...] = tuple(range(1, 11))

# NB の同点判定（£）
NB_TIE_TOL = 1e-6


def make_schedule(f: int, la: int) -> Schedule:
    """la から f 年ごと、la+10 までの受診時刻"""
    visits = [float(la + k * f) for k in range(int(LANDMARK_HORIZON) // f + 1)]
    return Schedule(f=f, la=la, visits=visits)


def statin_visit(schedule: Schedule, t_star: Optional[float]) -> Optional[tuple[int, float]]:
    """
    t* 以降で最初の受診（スタチン開始受診）

    Args:
        schedule: 受診スケジュール
        t_star: 閾値交差時刻（None は交差なし）

    Returns:
        (k_star, τ)。k_star は1始まり。交差なし、または最終受診より後の交差は None
    """
    if t_star is None:
        return None
    for k, tau in enumerate(schedule.visits, start=1):
        if tau >= t_star - 1e-12:
            return k, tau
    logger.debug(
        f"t*={t_star:.3f} が最終受診 {schedule.visits[-1]} より後のため f={schedule.f} では開始なし"
    )
    return None


def expected_visits(schedule: Schedule, k_star: Optional[int]) -> float:
    """開始後は受診しない。交差しなければ 1 + 10/f"""
    if k_star is not None:
        return float(k_star)
    return 1.0 + LANDMARK_HORIZON / schedule.f


def _step_integral(
    fit: CoxFit, risk: float, a: float, b: float, transform: Callable[[np.ndarray], np.ndarray]
) -> float:
    """区分定数の累積ハザード上で transform(Λ) を [a, b] で厳密に積分"""
    if b <= a:
        return 0.0
    times, _ = fit.knots()
    inner = times[(times > a) & (times < b)]
    points = np.concatenate([[a], inner, [b]])
    cumhaz = cumulative_baseline(fit, points[:-1]) * risk
    return float(np.sum(transform(cumhaz) * np.diff(points)))


def efly(
    cox_10y: CoxFit,
    x: Mapping[str, float],
    la: float,
    tau: Optional[float],
    theta: float,
) -> tuple[float, float]:
    """
    スタチン開始前後のイベントなし生存年数

    Args:
        cox_10y: la 起点の10年 Cox
        x: la 時点の共変量
        la: ランドマーク年齢
        tau: スタチン開始年齢（None は開始なし）
        theta: スタチンのハザード比

    Returns:
        (efly_ns, efly_s)

    Raises:
        DataError: 共変量が非有限、tau が範囲外、またはモデルの起点が la でない場合
    """
    if abs(cox_10y.origin - la) > 1e-9:
        raise DataError(f"10年 Cox の起点 {cox_10y.origin} が L_a={la} と一致しません")
    end = la + LANDMARK_HORIZON
    if tau is not None and not la - 1e-9 <= tau <= end + 1e-9:
        raise DataError(f"tau={tau} が [{la}, {end}] の外です")
    risk = float(np.exp(linear_predictor(cox_10y, x)))

    switch = end if tau is None else min(max(tau, la), end)
    efly_ns = _step_integral(cox_10y, risk, la, switch, lambda h: np.exp(-h))
    if tau is None:
        return efly_ns, 0.0

    h_tau = float(cumulative_baseline(cox_10y, switch)) * risk
    efly_s = _step_integral(
        cox_10y, risk, switch, end, lambda h: np.exp(-(h_tau + theta * (h - h_tau)))
    )
    return efly_ns, efly_s


def qaly(params: NbParams, efly_ns: float, efly_s: float) -> float:
    return efly_ns + params.u_s * efly_s


def cost(params: NbParams, efly_s: float, e_visits: float) -> float:
    return params.c_s * efly_s + params.c_v * e_visits


def net_benefit(params: NbParams, efly_ns: float, efly_s: float, e_visits: float) -> float:
    """NB = λ·QALY - cost"""
    return params.lambda_ * qaly(params, efly_ns, efly_s) - cost(params, efly_s, e_visits)


def _argmax_f(f_values: Sequence[int], nb: Sequence[float]) -> int:
    """NB 最大の f（同点なら大きい f）"""
    best = max(nb)
    return max(f for f, v in zip(f_values, nb) if v >= best - NB_TIE_TOL)


def optimal_schedule(
    profile: RiskProfile,
    models: LandmarkModels,
    params: NbParams,
    f_set: Sequence[int] = F_SET,
) -> NbEvaluation:
    """
    個人の最適リスク評価間隔

    Args:
        profile: リスクプロファイル
        models: 同じランドマーク年齢のモデル
        params: NB パラメータ
        f_set: 候補の受診間隔

    Returns:
        NbEvaluation

    Raises:
        SchedulingError: ランドマーク時点ですでに閾値を超えている場合
    """
    if profile.risk_class == RiskClass.VERY_HIGH:
        raise SchedulingError(
            f"person {profile.person_id}: already above threshold at landmark"
        )
    la = profile.la
    rows = []
    cache: dict[Optional[float], tuple[float, float]] = {}
    for f in sorted(f_set):
        schedule = make_schedule(f, la)
        visit = statin_visit(schedule, profile.t_star)
        k_star, tau = visit if visit else (None, None)
        if tau not in cache:
            cache[tau] = efly(models.cox_10y, profile.covariates_10y, la, tau, params.theta)
        efly_ns, efly_s = cache[tau]
        e_visits = expected_visits(schedule, k_star)
        rows.append(
            NbRow(
                f=f,
                k_star=k_star,
                tau_k_star=tau,
                beyond_last_visit=profile.t_star is not None and visit is None,
                expected_visits=e_visits,
                efly_ns=efly_ns,
                efly_s=efly_s,
                qaly=qaly(params, efly_ns, efly_s),
                cost=cost(params, efly_s, e_visits),
                nb=net_benefit(params, efly_ns, efly_s, e_visits),
            )
        )
    f_opt = _argmax_f([r.f for r in rows], [r.nb for r in rows])
    return NbEvaluation(person_id=profile.person_id, la=la, rows=rows, f_opt=f_opt)


# =============================================================================
# 感度分析
# =============================================================================


@dataclass(frozen=True)
class NbInputs:
    """
    NB パラメータに依存しない評価入力のキャッシュ

    配列は (人数, len(f_values))。
    """

    person_ids: np.ndarray
    f_values: np.ndarray
    efly_ns: np.ndarray
    efly_s: np.ndarray
    e_visits: np.ndarray

    @classmethod
    def from_evaluations(cls, evaluations: Sequence[NbEvaluation]) -> "NbInputs":
        if not evaluations:
            empty = np.empty((0, 0))
            return cls(np.empty(0, dtype=int), np.empty(0, dtype=int), empty, empty, empty)
        f_values = np.array([r.f for r in evaluations[0].rows])
        for ev in evaluations:
            if [r.f for r in ev.rows] != f_values.tolist():
                raise DataError("評価ごとに f の集合が異なります")

        def table(attr: str) -> np.ndarray:
            return np.array([[getattr(r, attr) for r in ev.rows] for ev in evaluations], dtype=float)

        return cls(
            person_ids=np.array([ev.person_id for ev in evaluations]),
            f_values=f_values,
            efly_ns=table("efly_ns"),
            efly_s=table("efly_s"),
            e_visits=table("expected_visits"),
        )

    def __len__(self) -> int:
        return len(self.person_ids)

    def net_benefit(self, params: NbParams) -> np.ndarray:
        return (
            params.lambda_ * (self.efly_ns + params.u_s * self.efly_s)
            - params.c_s * self.efly_s
            - params.c_v * self.e_visits
        )

    def optimal_f(self, params: NbParams) -> np.ndarray:
        """人ごとの f_opt（同点は大きい f）"""
        if len(self) == 0:
            return np.empty(0, dtype=int)
        nb = self.net_benefit(params)
        near_best = nb >= nb.max(axis=1, keepdims=True) - NB_TIE_TOL
        last = near_best.shape[1] - 1 - np.argmax(near_best[:, ::-1], axis=1)
        return self.f_values[last]


_PARAM_FIELDS = {"lambda": "lambda_", "u_s": "u_s", "c_s": "c_s", "c_v": "c_v"}


def sensitivity_sweep(
    inputs: NbInputs, grid: SweepGrid, base: Optional[NbParams] = None
) -> pd.DataFrame:
    """
    1パラメータずつ変えた f_opt の分布

    Args:
        inputs: キャッシュ済みの EFLY・期待受診回数
        grid: パラメータごとの値
        base: 変えないパラメータの値

    Returns:
        parameter, value, f, n_persons, proportion, n_flipped 列の DataFrame
        （n_flipped は基準パラメータでの f_opt から変わった人数）
    """
    base = base or NbParams()
    base_f = inputs.optimal_f(base)
    n = len(inputs)
    rows = []
    for name, values in grid.items():
        for value in values:
            params = base.model_copy(update={_PARAM_FIELDS[name]: float(value)})
            f_opt = inputs.optimal_f(params)
            flipped = int(np.sum(f_opt != base_f))
            for f in inputs.f_values:
                count = int(np.sum(f_opt == f))
                rows.append(
                    {
                        "parameter": name,
                        "value": float(value),
                        "f": int(f),
                        "n_persons": count,
                        "proportion": count / n if n else 0.0,
                        "n_flipped": flipped,
                    }
                )
        logger.debug(f"スイープ {name}: {len(values)} 点")
    return pd.DataFrame(rows, columns=["parameter", "value", "f", "n_persons", "proportion", "n_flipped"])
