"""
検証指標

予測時点 s・予測ウィンドウ w ごとの動的 c-index（Harrell）と
打ち切り確率の逆数で重み付けした（IPCW）動的 Brier スコア。
"""

import logging
from typing import Sequence

import numpy as np
from lifelines import KaplanMeierFitter
from sksurv.metrics import concordance_index_censored

from src.core.exceptions import DataError
from src.domain.models import CIndexResult, PredictionSet

logger = logging.getLogger(__name__)


def _groups(preds: PredictionSet) -> list[dict[str, np.ndarray]]:
    """(s, w) ごとに配列を分割"""
    arrays = preds.arrays()
    if len(arrays["s"]) == 0:
        return []
    keys = np.stack([arrays["s"], arrays["w"]], axis=1)
    unique = np.unique(keys, axis=0)
    groups = []
    for s, w in unique:
        mask = (arrays["s"] == s) & (arrays["w"] == w)
        groups.append({k: v[mask] for k, v in arrays.items()})
    return groups


def _harrell_counts(
    time: np.ndarray, event: np.ndarray, risk: np.ndarray, w: float
) -> tuple[float, int]:
    """
    (一致ペア数（同順位は0.5）, 比較可能ペア数)

    w 以降のイベントは w での打ち切りとして扱う。
    """
    case = event & (time < w)
    if len(time) < 2 or not case.any():
        return 0.0, 0
    try:
        _, concordant, discordant, tied_risk, _ = concordance_index_censored(
            case, np.minimum(time, w), risk
        )
    except ValueError as e:
        logger.debug(f"c-index: 比較可能なペアなし (w={w}): {e}")
        return 0.0, 0
    return concordant + 0.5 * tied_risk, int(concordant + discordant + tied_risk)


def dynamic_cindex(preds: PredictionSet) -> CIndexResult:
    """
    動的 c-index

    i が t_i < w でイベント、かつ t_i < t_j のペアを比較し、
    予測リスクが i の方が高ければ一致とする。ペアの数え上げは
    scikit-survival の concordance_index_censored による。

    Args:
        preds: 予測と観測（複数の (s, w) を含む場合はペアを合算）

    Returns:
        CIndexResult（se は比較可能ペア数による二項近似）

    Raises:
        DataError: 比較可能なペアがない場合
    """
    concordant = 0.0
    pairs = 0
    for g in _groups(preds):
        c, n = _harrell_counts(g["time"], g["event"], g["risk"], float(g["w"][0]))
        concordant += c
        pairs += n
    if pairs == 0:
        raise DataError("c-index: 比較可能なペアがありません")
    value = concordant / pairs
    return CIndexResult(value=value, se=float(np.sqrt(value * (1 - value) / pairs)), n_pairs=pairs)


def overall_cindex(results: Sequence[CIndexResult]) -> CIndexResult:
    """ペア数で重み付けした複数ランドマークの c-index"""
    results = [r for r in results if r.n_pairs > 0]
    if not results:
        raise DataError("c-index: 比較可能なペアがありません")
    pairs = sum(r.n_pairs for r in results)
    value = sum(r.value * r.n_pairs for r in results) / pairs
    return CIndexResult(value=value, se=float(np.sqrt(value * (1 - value) / pairs)), n_pairs=pairs)


def kaplan_meier(time: np.ndarray, event: np.ndarray) -> KaplanMeierFitter:
    """Kaplan-Meier 推定（lifelines）"""
    return KaplanMeierFitter().fit(
        np.asarray(time, dtype=float), event_observed=np.asarray(event, dtype=bool)
    )


def _left_limit(kmf: KaplanMeierFitter, t: np.ndarray) -> np.ndarray:
    """S(t-)"""
    before = np.nextafter(np.asarray(t, dtype=float), -np.inf)
    return np.asarray(kmf.survival_function_at_times(before), dtype=float)


def _ipcw_terms(g: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """(0/1 の観測アウトカム, IPCW 重み)"""
    w = float(g["w"][0])
    time, event = g["time"], g["event"]
    known_event = event & (time <= w)
    known_free = ~known_event & (time >= w)

    # 打ち切りを「イベント」とした KM
    censoring = kaplan_meier(time, ~event)
    g_event = _left_limit(censoring, time)
    g_w = float(_left_limit(censoring, np.array([w]))[0])

    if (known_free.any() and g_w <= 0) or np.any(g_event[known_event] <= 0):
        raise DataError(f"Brier: 打ち切り分布の KM が horizon w={w} 以前に0になりました")

    weights = np.zeros(len(time))
    weights[known_event] = 1.0 / g_event[known_event]
    weights[known_free] = 1.0 / g_w
    return known_event.astype(float), weights


def brier_score(preds: PredictionSet) -> float:
    """
    IPCW 動的 Brier スコア

    ウィンドウ w までにイベントがあれば 1/G(t_i-)、w まで追跡できていれば 1/G(w-)、
    w より前に打ち切られていれば 0 の重みを付ける。
    G は評価データでの打ち切り分布の Kaplan-Meier 推定。

    Args:
        preds: 予測と観測（観測時間は w で打ち切り済みでもよい）

    Returns:
        Brier スコア（複数の (s, w) は人数で重み付け平均）

    Raises:
        DataError: 空、または打ち切り KM が w 以前に0になった場合
    """
    groups = _groups(preds)
    if not groups:
        raise DataError("Brier: 予測がありません")
    total = 0.0
    n = 0
    for g in groups:
        outcome, weights = _ipcw_terms(g)
        total += float(np.sum(weights * (outcome - g["risk"]) ** 2))
        n += len(outcome)
    return total / n


def constant_brier(preds: PredictionSet) -> float:
    """周辺 KM リスクを全員に与える定数予測の Brier スコア（比較基準）"""
    groups = _groups(preds)
    if not groups:
        raise DataError("Brier: 予測がありません")
    total = 0.0
    n = 0
    for g in groups:
        w = float(g["w"][0])
        marginal = kaplan_meier(g["time"], g["event"])
        p = 1.0 - float(np.asarray(marginal.survival_function_at_times([w]))[0])
        outcome, weights = _ipcw_terms(g)
        total += float(np.sum(weights * (outcome - p) ** 2))
        n += len(outcome)
    return total / n
