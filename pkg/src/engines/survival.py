"""
Cox 比例ハザードモデル

Breslow 近似の部分尤度を中心化共変量上の Newton-Raphson で最大化し、
Breslow 推定量でベースライン累積ハザードを求める。
スタチン開始後はハザード比 θ を乗じた生存関数も評価する。
"""

import logging
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import linalg

from src.core.exceptions import DataError, NumericError
from src.domain.models import CoxFit, StatinEffect, SurvivalRow

logger = logging.getLogger(__name__)

# Newton-Raphson の設定
MAX_NEWTON_STEPS = 50
STEP_PRECISION = 1e-8
DIVERGENCE_BOUND = 50.0
_TIME_TOL = 1e-9


def _partial_likelihood(
    X: np.ndarray, events: np.ndarray, group_end: np.ndarray, event_groups: np.ndarray, beta: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Breslow 部分尤度とその勾配・ヘッセ行列

    X, events は時間の降順に並んでいる前提。
    group_end[j] は j 番目の相異なる時刻（降順）の最終行インデックス、
    event_groups[j] はその時刻のイベント数。
    """
    eta = X @ beta
    eta_max = eta.max() if len(eta) else 0.0
    w = np.exp(eta - eta_max)
    s0 = np.cumsum(w)[group_end]
    s1 = np.cumsum(w[:, None] * X, axis=0)[group_end]
    s2 = np.cumsum(w[:, None, None] * (X[:, :, None] * X[:, None, :]), axis=0)[group_end]

    d = event_groups
    has = d > 0
    mean_x = s1[has] / s0[has, None]
    ll = float(eta[events].sum() - np.sum(d[has] * (np.log(s0[has]) + eta_max)))
    grad = X[events].sum(axis=0) - (d[has, None] * mean_x).sum(axis=0)
    info = (
        d[has, None, None]
        * (s2[has] / s0[has, None, None] - mean_x[:, :, None] * mean_x[:, None, :])
    ).sum(axis=0)
    return ll, grad, info


def _separated_binary(X: np.ndarray, events: np.ndarray) -> np.ndarray:
    """0/1 列のうち片方の水準でイベントが0件の列"""
    out = np.zeros(X.shape[1], dtype=bool)
    for j in range(X.shape[1]):
        col = X[:, j]
        if not np.all((col == 0) | (col == 1)):
            continue
        exposed = col == 1
        out[j] = not events[exposed].any() or not events[~exposed].any()
    return out


def fit_cox_arrays(
    X: np.ndarray,
    durations: np.ndarray,
    events: np.ndarray,
    names: Sequence[str],
    origin: float,
    horizon: float,
    drop_separated: bool = False,
) -> CoxFit:
    """
    配列入力で Cox モデルを推定

    Args:
        X: (n, p) 共変量行列
        durations: 起点からの観測時間（>0）
        events: イベント指示（bool）
        names: 共変量名
        origin: 時間の起点（絶対年齢）
        horizon: 打ち切り時点（絶対年齢）
        drop_separated: 0/1 共変量の片方の水準にイベントがない場合、係数0に固定する

    Returns:
        CoxFit

    Raises:
        DataError: イベントがない、共変量が非有限、時間が正でない場合
        NumericError: 単調尤度（完全分離）などで係数が発散した場合
    """
    X = np.asarray(X, dtype=float).reshape(len(durations), len(names))
    durations = np.asarray(durations, dtype=float)
    events = np.asarray(events, dtype=bool)
    window = horizon - origin
    if window <= 0:
        raise DataError("horizon は origin より後である必要があります")
    if not np.all(np.isfinite(X)):
        raise DataError("共変量に非有限値が含まれています")
    if np.any(durations <= 0) or not np.all(np.isfinite(durations)):
        raise DataError("観測時間は正の有限値である必要があります")

    # ウィンドウ後のイベントは打ち切り扱い
    late = durations > window + _TIME_TOL
    if late.any():
        events = events & ~late
        durations = np.minimum(durations, window)
    n_events = int(events.sum())
    if n_events == 0:
        raise DataError("no events: イベントが1件もありません")

    means = X.mean(axis=0) if len(X) else np.zeros(len(names))
    Xc = X - means
    spread = np.ptp(Xc, axis=0) if len(Xc) else np.zeros(len(names))
    active = spread > 1e-12
    if drop_separated:
        active &= ~_separated_binary(X, events)
    degenerate = [n for n, a in zip(names, active) if not a]
    if degenerate:
        logger.warning(f"情報量のない共変量（係数0に固定）: {degenerate}")

    order = np.lexsort((~events, -durations))
    Xa = Xc[order][:, active]
    ev = events[order]
    t = durations[order]
    # 降順に並べた相異なる時刻ごとのリスク集合境界
    change = np.flatnonzero(np.diff(t) != 0)
    group_end = np.concatenate([change, [len(t) - 1]])
    group_start = np.concatenate([[0], change + 1])
    event_groups = np.add.reduceat(ev.astype(float), group_start) if len(t) else np.zeros(0)

    p = int(active.sum())
    beta = np.zeros(p)
    ll, grad, info = _partial_likelihood(Xa, ev, group_end, event_groups, beta)
    iteration = 0
    for iteration in range(1, MAX_NEWTON_STEPS + 1):
        if p == 0:
            break
        try:
            step = linalg.solve(info, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError) as e:
            raise NumericError(f"情報行列が特異です（共線性の疑い）: {e}") from e

        # 対数尤度が下がる場合はステップ半減
        step_size = 1.0
        for _ in range(30):
            candidate = beta + step_size * step
            ll_new, grad_new, info_new = _partial_likelihood(Xa, ev, group_end, event_groups, candidate)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            step_size *= 0.5
        beta, ll, grad, info = candidate, ll_new, grad_new, info_new
        logger.debug(f"Newton 反復 {iteration}: logPL = {ll:.6f}, max|step| = {np.abs(step).max():.2e}")

        if np.abs(beta).max() > DIVERGENCE_BOUND:
            raise NumericError("単調尤度（完全分離）: 係数が発散しました")
        if np.abs(step_size * step).max() < STEP_PRECISION:
            break
    else:
        # 反復上限でもステップが縮まない場合は係数が無限大へ向かっている
        if p and np.abs(step_size * step).max() > 1e-3:
            raise NumericError("単調尤度: Newton-Raphson のステップが縮小しません")
        logger.warning(f"Cox Newton-Raphson が {MAX_NEWTON_STEPS} 反復で収束しませんでした")

    # 最終点の観測情報量から標準誤差
    se = np.full(p, np.nan)
    if p:
        try:
            se = np.sqrt(np.diag(linalg.inv(info)))
        except linalg.LinAlgError:
            logger.warning("情報行列が特異のため標準誤差を計算できません")

    # Breslow ベースライン（中心化共変量での値）
    eta = Xa @ beta
    w = np.exp(eta)
    s0 = np.cumsum(w)[group_end]
    hazard_jumps = event_groups / s0
    times_desc = t[group_end]
    keep = event_groups > 0
    jump_times = times_desc[keep][::-1]
    jumps = hazard_jumps[keep][::-1]
    cumhaz = np.cumsum(jumps)
    knots = [(float(origin), 0.0)] + [
        (float(origin + tj), float(hj)) for tj, hj in zip(jump_times, cumhaz)
    ]

    beta_full: dict[str, float] = {}
    se_full: dict[str, Optional[float]] = {}
    j = 0
    for name, is_active in zip(names, active):
        if is_active:
            beta_full[name] = float(beta[j])
            se_full[name] = float(se[j]) if np.isfinite(se[j]) else None
            j += 1
        else:
            beta_full[name] = 0.0
            se_full[name] = None

    logger.debug(
        f"Cox 推定完了: 起点 {origin}, n={len(durations)}, イベント {n_events}, 反復 {iteration}"
    )
    return CoxFit(
        beta=beta_full,
        beta_se=se_full,
        baseline_cumhaz=knots,
        origin=float(origin),
        horizon=float(horizon),
        covariate_means={n: float(m) for n, m in zip(names, means)},
        n_events=n_events,
        n_subjects=int(len(durations)),
        log_partial_likelihood=ll,
        n_iterations=iteration,
        degenerate=degenerate,
    )


def fit_cox(
    rows: Sequence[SurvivalRow],
    horizon: float,
    origin: float = 0.0,
) -> CoxFit:
    """
    SurvivalRow のリストから Cox モデルを推定

    Args:
        rows: 起点からの時間で表した生存データ
        horizon: 打ち切り時点（絶対時間）
        origin: 起点（絶対時間）

    Returns:
        CoxFit
    """
    if not rows:
        raise DataError("no events: 行がありません")
    names = list(rows[0].covariates)
    if any(list(r.covariates) != names for r in rows):
        if any(set(r.covariates) != set(names) for r in rows):
            raise DataError("行ごとに共変量名が異なります")
    X = np.array([[r.covariates[n] for n in names] for r in rows], dtype=float).reshape(len(rows), len(names))
    durations = np.array([r.time for r in rows], dtype=float)
    events = np.array([r.status == "event" for r in rows], dtype=bool)
    return fit_cox_arrays(X, durations, events, names, origin, horizon)


# =============================================================================
# 評価
# =============================================================================


def linear_predictor(fit: CoxFit, x: Mapping[str, float]) -> float:
    """中心化した x'β"""
    try:
        eta = sum(b * (float(x[n]) - fit.covariate_means[n]) for n, b in fit.beta.items())
    except KeyError as e:
        raise DataError(f"共変量が不足しています: {e}") from e
    if not np.isfinite(eta):
        raise DataError("共変量に非有限値が含まれています")
    return float(eta)


def cumulative_baseline(fit: CoxFit, t: float | np.ndarray) -> np.ndarray:
    """右連続階段関数としての Λ0(t)"""
    times, cum = fit.knots()
    idx = np.searchsorted(times, np.asarray(t, dtype=float) + _TIME_TOL, side="right") - 1
    return cum[np.clip(idx, 0, None)]


def _check_window(fit: CoxFit, t: float) -> None:
    if t < fit.origin - _TIME_TOL or t > fit.horizon + _TIME_TOL:
        raise DataError(f"t={t} が評価範囲 [{fit.origin}, {fit.horizon}] の外です")


def survival_ns(fit: CoxFit, x: Mapping[str, float], t: float) -> float:
    """
    スタチンなしの生存確率 S^NS(t) = exp(-Λ0(t)·exp(x'β))

    Args:
        fit: 推定済み Cox モデル
        x: 共変量
        t: 評価時点（絶対時間、origin <= t <= horizon）

    Returns:
        生存確率
    """
    _check_window(fit, t)
    eta = linear_predictor(fit, x)
    return float(np.exp(-float(cumulative_baseline(fit, t)) * np.exp(eta)))


def survival_s(
    fit: CoxFit,
    x: Mapping[str, float],
    t: float,
    tau_star: float,
    effect: StatinEffect,
) -> float:
    """
    τ* でスタチンを開始した場合の生存確率

    S^S(t) = S^NS(τ*)·(S^NS(t)/S^NS(τ*))^θ

    Raises:
        DataError: t < τ* または範囲外の場合
    """
    if t < tau_star - _TIME_TOL:
        raise DataError("t < tau_star: 開始前は survival_ns を使用してください")
    _check_window(fit, tau_star)
    _check_window(fit, t)
    eta = np.exp(linear_predictor(fit, x))
    lam_tau = float(cumulative_baseline(fit, tau_star)) * eta
    lam_t = float(cumulative_baseline(fit, t)) * eta
    return float(np.exp(-(lam_tau + effect.theta * (lam_t - lam_tau))))


def risk_window(fit: CoxFit, x: Mapping[str, float], s: float, w: float) -> float:
    """
    s から w 年以内のイベントリスク 1 - S^NS(s+w)

    Raises:
        DataError: fit の起点が s でない、または s+w が horizon を超える場合
    """
    if abs(fit.origin - s) > _TIME_TOL:
        raise DataError(f"モデルの起点 {fit.origin} と予測時点 s={s} が一致しません")
    return 1.0 - survival_ns(fit, x, s + w)


def risk_window_many(
    fit: CoxFit, X: np.ndarray, names: Sequence[str], s: float, w: float
) -> np.ndarray:
    """risk_window を行列 X（列順は names）の各行に適用"""
    if abs(fit.origin - s) > _TIME_TOL:
        raise DataError(f"モデルの起点 {fit.origin} と予測時点 s={s} が一致しません")
    _check_window(fit, s + w)
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise DataError("共変量に非有限値が含まれています")
    beta = np.array([fit.beta[n] for n in names])
    means = np.array([fit.covariate_means[n] for n in names])
    eta = (X - means) @ beta
    return 1.0 - np.exp(-float(cumulative_baseline(fit, s + w)) * np.exp(eta))
