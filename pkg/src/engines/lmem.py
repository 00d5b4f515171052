"""
多変量線形混合効果モデル（LMEM）

5つの時間変化リスク因子をアウトカム指示変数で積み上げた LMEM を
ECME型 EM アルゴリズムで推定し、過去の測定のみから BLUP を計算する。

モデル（因子 k、人物 i、測定 j、a = 年齢 - 中心化年齢）:
    y_ijk = β_k0 + β_k1·a_ij + [β_32·BPM | β_42·statin] + u_0ik + u_1ik·a_ij + ε_ijk
    (u_0i, u_1i) ~ MVN(0, Σ) （10x10 フル行列）, ε_ijk ~ N(0, σ_k²)

人物ごとの E ステップは (1, a, g, y) の人物×因子モーメントだけで表現でき、
全人物をバッチの 10x10 線形代数で一括処理する。
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from src.core.exceptions import DataError, NumericError
from src.domain.cohort import Cohort, PersonHistory
from src.domain.models import (
    FACTORS,
    BlupVector,
    LmemFit,
    LmemSpec,
    LongitudinalRecord,
    Measurement,
)

logger = logging.getLogger(__name__)

N_FACTORS = len(FACTORS)
N_RANDOM = 2 * N_FACTORS
LOG_2PI = float(np.log(2.0 * np.pi))
# EM で許容する対数尤度の相対的な減少（丸め誤差）
LL_DROP_TOL = 1e-6

# 追加固定項のパラメータ名
_EXTRA_NAMES = {"sbp": "sbp_bpm", "tchol": "tchol_statin"}


def beta_names() -> list[str]:
    """固定効果の名前（切片5, 傾き5, 追加項2）"""
    return (
        [f"{f}_intercept" for f in FACTORS]
        + [f"{f}_slope" for f in FACTORS]
        + [_EXTRA_NAMES["sbp"], _EXTRA_NAMES["tchol"]]
    )


@dataclass
class _Layout:
    """因子ごとの局所 (1, a, g) -> 推定パラメータ位置の対応"""

    x_index: list[list[int]]
    names: list[str]

    @property
    def n_params(self) -> int:
        return len(self.names)


@dataclass
class _EStep:
    """E ステップの結果"""

    beta: np.ndarray
    u_hat: np.ndarray
    post_cov: np.ndarray
    reml_g: Optional[np.ndarray]
    a_inv: np.ndarray
    log_likelihood: float


def _build_layout(moments: np.ndarray, spec: LmemSpec) -> _Layout:
    """追加固定項は指示変数が変動する場合のみ推定対象にする"""
    names = [f"{f}_intercept" for f in FACTORS] + [f"{f}_slope" for f in FACTORS]
    x_index = [[k, N_FACTORS + k] for k in range(N_FACTORS)]
    totals = moments.sum(axis=0)
    for k, factor in enumerate(FACTORS):
        if factor not in spec.extra_fixed_terms:
            continue
        n, g_sum = totals[k, 0, 0], totals[k, 0, 2]
        if 0 < g_sum < n:
            x_index[k].append(len(names))
            names.append(_EXTRA_NAMES[factor])
        else:
            logger.warning(
                f"{factor} の {spec.extra_fixed_terms[factor]} 指示変数が変動しないため係数を0に固定します"
            )
    return _Layout(x_index=x_index, names=names)


def _compute_moments(
    person_codes: np.ndarray,
    factor_idx: np.ndarray,
    ages: np.ndarray,
    flags: np.ndarray,
    values: np.ndarray,
    n_persons: int,
) -> np.ndarray:
    """人物×因子ごとの Σ w wᵀ（w = (1, a, g, y)）を (N, 5, 4, 4) で返す"""
    w = np.stack([np.ones_like(ages), ages, flags, values], axis=1)
    idx = person_codes * N_FACTORS + factor_idx
    size = n_persons * N_FACTORS
    out = np.zeros((size, 4, 4))
    for p in range(4):
        for q in range(p, 4):
            s = np.bincount(idx, weights=w[:, p] * w[:, q], minlength=size)
            out[:, p, q] = s
            out[:, q, p] = s
    return out.reshape(n_persons, N_FACTORS, 4, 4)


def _design_blocks(
    moments: np.ndarray, s2: np.ndarray, layout: _Layout
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    """
    β に依存しない R⁻¹ 重み付き積を組み立てる

    Returns:
        K = ZᵀR⁻¹Z (N,10,10), ZtRX (N,10,P), ZtRy (N,10),
        XtRX (P,P), XtRy (P,), yRy（全人物合計）
    """
    n = moments.shape[0]
    p = layout.n_params
    K = np.zeros((n, N_RANDOM, N_RANDOM))
    ZtRX = np.zeros((n, N_RANDOM, p))
    ZtRy = np.zeros((n, N_RANDOM))
    XtRX = np.zeros((p, p))
    XtRy = np.zeros(p)
    yRy = 0.0
    for k in range(N_FACTORS):
        inv = 1.0 / s2[k]
        Mk = moments[:, k]
        i0, i1 = k, N_FACTORS + k
        K[:, i0, i0] = Mk[:, 0, 0] * inv
        K[:, i0, i1] = K[:, i1, i0] = Mk[:, 0, 1] * inv
        K[:, i1, i1] = Mk[:, 1, 1] * inv
        ZtRy[:, i0] = Mk[:, 0, 3] * inv
        ZtRy[:, i1] = Mk[:, 1, 3] * inv
        totals = Mk.sum(axis=0)
        yRy += totals[3, 3] * inv
        cols = layout.x_index[k]
        for l, gl in enumerate(cols):
            ZtRX[:, i0, gl] = Mk[:, 0, l] * inv
            ZtRX[:, i1, gl] = Mk[:, 1, l] * inv
            XtRy[gl] += totals[l, 3] * inv
            for l2, gl2 in enumerate(cols):
                XtRX[gl, gl2] += totals[l, l2] * inv
    return K, ZtRX, ZtRy, XtRX, XtRy, yRy


def _e_step(
    moments: np.ndarray,
    sigma: np.ndarray,
    s2: np.ndarray,
    layout: _Layout,
    reml: bool,
) -> _EStep:
    """GLS で β を更新し、ランダム効果の事後平均・共分散と対数尤度を計算"""
    K, ZtRX, ZtRy, XtRX, XtRy, yRy = _design_blocks(moments, s2, layout)

    # (I + KΣ)⁻¹ を Σ⁻¹ なしで使う（Σ が特異でもよい）
    iks = np.eye(N_RANDOM)[None] + K @ sigma
    rhs = np.concatenate([K, ZtRX, ZtRy[..., None]], axis=2)
    sol = np.linalg.solve(iks, rhs)
    p = layout.n_params
    sol_k = sol[:, :, :N_RANDOM]
    sol_zx = sol[:, :, N_RANDOM : N_RANDOM + p]
    sol_zy = sol[:, :, -1]

    # XᵀV⁻¹X = XᵀR⁻¹X - (ZᵀR⁻¹X)ᵀ Σ (I+KΣ)⁻¹ ZᵀR⁻¹X
    sigma_zx = np.einsum("ij,njp->nip", sigma, sol_zx)
    A = XtRX - np.einsum("nip,niq->pq", ZtRX, sigma_zx)
    b = XtRy - np.einsum("nip,ni->p", ZtRX, np.einsum("ij,nj->ni", sigma, sol_zy))
    A = 0.5 * (A + A.T)
    try:
        beta = linalg.solve(A, b, assume_a="pos")
    except linalg.LinAlgError:
        beta = linalg.lstsq(A, b)[0]
    a_inv = linalg.pinvh(A)

    w_b = sol_zy - np.einsum("nip,p->ni", sol_zx, beta)
    u_hat = np.einsum("ij,nj->ni", sigma, w_b)

    # 対数尤度（行列式補題）
    n_obs = moments[:, :, 0, 0]
    log_det_r = (n_obs * np.log(s2)[None, :]).sum(axis=1)
    _, log_det_iks = np.linalg.slogdet(iks)
    b_vec = ZtRy - np.einsum("nip,p->ni", ZtRX, beta)
    r_r_r = yRy - 2.0 * beta @ XtRy + beta @ XtRX @ beta
    quad = r_r_r - float(np.sum(b_vec * u_hat))
    total_n = float(n_obs.sum())
    ll = -0.5 * (total_n * LOG_2PI + float(log_det_r.sum() + log_det_iks.sum()) + quad)

    reml_g = None
    if reml:
        _, log_det_a = np.linalg.slogdet(A)
        ll += -0.5 * log_det_a + 0.5 * layout.n_params * LOG_2PI
        reml_g = sigma_zx

    post_cov = sigma[None] - np.einsum("ij,njk,kl->nil", sigma, sol_k, sigma)
    return _EStep(
        beta=beta,
        u_hat=u_hat,
        post_cov=post_cov,
        reml_g=reml_g,
        a_inv=a_inv,
        log_likelihood=float(ll),
    )


def _m_step(
    moments: np.ndarray,
    state: _EStep,
    layout: _Layout,
    s2_floor: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Σ と σ² を期待完全データ尤度の最大化で更新"""
    n = moments.shape[0]
    u, C = state.u_hat, state.post_cov
    if state.reml_g is not None:
        G = state.reml_g
        C_u = C + np.einsum("nip,pq,njq->nij", G, state.a_inv, G)
    else:
        C_u = C
    sigma = (np.einsum("ni,nj->ij", u, u) + C_u.sum(axis=0)) / n
    sigma = 0.5 * (sigma + sigma.T)

    s2 = np.empty(N_FACTORS)
    for k in range(N_FACTORS):
        Mk = moments[:, k]
        cols = layout.x_index[k]
        c = np.zeros(4)
        c[3] = 1.0
        for l, gl in enumerate(cols):
            c[l] = -state.beta[gl]
        idx = [k, N_FACTORS + k]
        uk = u[:, idx]
        Ckk = C[:, idx][:, :, idx]
        Mzz = Mk[:, :2, :2]
        zr = np.einsum("nzq,q->nz", Mk[:, :2, :], c)
        ss = float(c @ Mk.sum(axis=0) @ c)
        ss += float(
            -2.0 * np.sum(uk * zr)
            + np.einsum("na,nab,nb->", uk, Mzz, uk)
            + np.einsum("nab,nba->", Mzz, Ckk)
        )
        if state.reml_g is not None:
            nl = len(cols)
            a_sub = state.a_inv[np.ix_(cols, cols)]
            Gk = state.reml_g[:, idx, :]
            term1 = np.einsum("nab,ba->", Mk[:, :nl, :nl], a_sub)
            term2 = np.einsum("nlj,njq,ql->", Mk[:, :nl, :2], Gk, state.a_inv[:, cols])
            term3 = np.einsum("nap,nab,nbq,qp->", Gk, Mzz, Gk, state.a_inv)
            ss += float(term1 - 2.0 * term2 + term3)
        n_k = float(Mk[:, 0, 0].sum())
        s2[k] = max(ss / n_k, s2_floor[k])
    return sigma, s2


def _initial_values(
    moments: np.ndarray, layout: _Layout
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """因子ごとの OLS から初期値を作る"""
    beta = np.zeros(layout.n_params)
    s2 = np.empty(N_FACTORS)
    totals = moments.sum(axis=0)
    for k in range(N_FACTORS):
        cols = layout.x_index[k]
        nl = len(cols)
        T = totals[k]
        coef = linalg.lstsq(T[:nl, :nl], T[:nl, 3])[0]
        beta[cols] = coef
        n_k = T[0, 0]
        var_y = max(T[3, 3] / n_k - (T[0, 3] / n_k) ** 2, 1e-8)
        s2[k] = 0.5 * var_y
    sigma = np.diag(np.concatenate([s2, 1e-3 * s2]))
    return beta, sigma, s2


def _as_frame(records) -> tuple[pd.DataFrame, int]:
    if isinstance(records, Cohort):
        m = records.measurements
    else:
        m = Cohort.from_records(list(records)).measurements
    if m.empty:
        return m, 0
    return m, int(m["person_id"].nunique())


def fit_lmem(
    records: Cohort | Sequence[LongitudinalRecord],
    spec: Optional[LmemSpec] = None,
    center_age: Optional[float] = None,
) -> LmemFit:
    """
    5アウトカムの LMEM を推定

    Args:
        records: 推定に用いるコホート（過去・未来の全測定を使用）
        spec: モデル指定（既定は ML, tol=1e-7, max_iter=500）
        center_age: 年齢の中心化基準（通常はランドマーク年齢）

    Returns:
        LmemFit（max_iter 内で収束しなければ converged=False）

    Raises:
        DataError: 測定のある人物が2人未満、年齢が非有限、または全欠損アウトカムがある場合
    """
    spec = spec or LmemSpec()
    m, n_persons = _as_frame(records)
    if n_persons < 2:
        raise DataError("LMEM の推定には測定のある人物が2人以上必要です")

    ages_raw = m["age"].to_numpy(dtype=float)
    if not np.all(np.isfinite(ages_raw)):
        raise DataError("測定年齢に非有限値があります")
    if center_age is None:
        center_age = float(np.round(ages_raw.mean()))

    factor_idx = m["factor"].map({f: k for k, f in enumerate(FACTORS)})
    if factor_idx.isna().any():
        raise DataError(f"未知のリスク因子: {sorted(set(m.loc[factor_idx.isna(), 'factor']))}")
    factor_idx = factor_idx.to_numpy(dtype=int)
    counts = np.bincount(factor_idx, minlength=N_FACTORS)
    for k, factor in enumerate(FACTORS):
        if counts[k] == 0:
            raise DataError(f"アウトカム {factor} の測定がすべて欠損しています")

    person_codes, _ = pd.factorize(m["person_id"])
    flags = np.zeros(len(m))
    for factor, column in spec.extra_fixed_terms.items():
        sel = factor_idx == FACTORS.index(factor)
        flags[sel] = m[column].to_numpy(dtype=float)[sel]
    values = m["value"].to_numpy(dtype=float)

    moments = _compute_moments(
        person_codes, factor_idx, ages_raw - center_age, flags, values, n_persons
    )
    layout = _build_layout(moments, spec)
    beta, sigma, s2 = _initial_values(moments, layout)
    s2_floor = 1e-10 * np.maximum(2.0 * s2, 1e-8)
    reml = spec.method == "reml"

    logger.info(
        f"LMEM 推定開始: {n_persons}人, 測定 {len(m)}件, 中心化年齢 {center_age}, 方法 {spec.method}"
    )
    history: list[float] = []
    converged = False
    iteration = 0
    state = None
    for iteration in range(1, spec.max_iter + 1):
        state = _e_step(moments, sigma, s2, layout, reml)
        ll = state.log_likelihood
        if history and ll < history[-1] - LL_DROP_TOL * max(1.0, abs(history[-1])):
            raise NumericError(
                f"EM 反復 {iteration}: 対数尤度が減少しました ({history[-1]:.6f} -> {ll:.6f})"
            )
        if history and ll < history[-1]:
            logger.debug(f"EM 反復 {iteration}: 丸め誤差程度の対数尤度の減少 ({history[-1] - ll:.2e})")
        logger.debug(f"EM 反復 {iteration}: logL = {ll:.6f}")
        if history and abs(ll - history[-1]) < spec.convergence_tol * max(abs(history[-1]), 1e-12):
            history.append(ll)
            converged = True
            break
        history.append(ll)
        sigma, s2 = _m_step(moments, state, layout, s2_floor)
    else:
        state = _e_step(moments, sigma, s2, layout, reml)
        history.append(state.log_likelihood)

    if not converged:
        logger.warning(f"LMEM が {spec.max_iter} 反復で収束しませんでした")
    else:
        logger.info(f"LMEM 収束: {iteration} 反復, logL = {state.log_likelihood:.4f}")

    se = np.sqrt(np.clip(np.diag(state.a_inv), 0.0, None))
    beta_full = {name: 0.0 for name in beta_names()}
    se_full: dict[str, Optional[float]] = {name: None for name in beta_names()}
    for i, name in enumerate(layout.names):
        beta_full[name] = float(state.beta[i])
        se_full[name] = float(se[i])

    return LmemFit(
        beta=beta_full,
        beta_se=se_full,
        sigma=sigma.tolist(),
        sigma_e={f: float(np.sqrt(s2[k])) for k, f in enumerate(FACTORS)},
        center_age=float(center_age),
        log_likelihood=state.log_likelihood,
        log_likelihood_history=history,
        n_iterations=iteration,
        converged=converged,
        method=spec.method,
        n_persons=n_persons,
        n_observations={f: int(counts[k]) for k, f in enumerate(FACTORS)},
    )


# =============================================================================
# BLUP
# =============================================================================


def _as_history(history) -> PersonHistory:
    if isinstance(history, PersonHistory):
        return history
    return PersonHistory.from_measurements(history)


def _intercepts_slopes(fit: LmemFit) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    b0 = np.array([fit.beta[f"{f}_intercept"] for f in FACTORS])
    b1 = np.array([fit.beta[f"{f}_slope"] for f in FACTORS])
    extra = np.array([fit.extra_coefficient(f) for f in FACTORS])
    return b0, b1, extra


def _row_flags(history: PersonHistory) -> np.ndarray:
    """各行の追加項指示変数（SBP 行は BPM、TCHOL 行は statin）"""
    g = np.zeros(len(history))
    g[history.factor_idx == FACTORS.index("sbp")] = history.bpm[history.factor_idx == FACTORS.index("sbp")]
    sel = history.factor_idx == FACTORS.index("tchol")
    g[sel] = history.statin[sel]
    return g


def predict_random_effects(fit: LmemFit, history: PersonHistory) -> np.ndarray:
    """
    ランダム効果の予測 û = Σ Zᵀ V⁻¹ (y - Xβ)

    Args:
        fit: 推定済み LMEM
        history: 使用する測定（すでに打ち切り済み）

    Returns:
        長さ10の û（空の履歴では 0）
    """
    if len(history) == 0:
        return np.zeros(N_RANDOM)
    sigma = fit.sigma_array()
    b0, b1, extra = _intercepts_slopes(fit)
    s2 = np.array([fit.sigma_e[f] ** 2 for f in FACTORS])

    k = history.factor_idx
    a = history.ages - fit.center_age
    n = len(history)
    Z = np.zeros((n, N_RANDOM))
    Z[np.arange(n), k] = 1.0
    Z[np.arange(n), N_FACTORS + k] = a
    r = history.values - (b0[k] + b1[k] * a + extra[k] * _row_flags(history))
    V = Z @ sigma @ Z.T + np.diag(s2[k])
    try:
        w = linalg.solve(V, r, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        w = linalg.lstsq(V, r)[0]
    return sigma @ Z.T @ w


def _evaluate(
    fit: LmemFit, u: np.ndarray, query_age: float, bpm: float, statin: float
) -> dict[str, float]:
    b0, b1, extra = _intercepts_slopes(fit)
    a = query_age - fit.center_age
    g = np.zeros(N_FACTORS)
    g[FACTORS.index("sbp")] = bpm
    g[FACTORS.index("tchol")] = statin
    values = b0 + b1 * a + extra * g + u[:N_FACTORS] + u[N_FACTORS:] * a
    return {f: float(values[k]) for k, f in enumerate(FACTORS)}


def blup_path(
    fit: LmemFit,
    history: PersonHistory | Sequence[Measurement],
    query_ages: Sequence[float],
    s_cut: float,
) -> list[BlupVector]:
    """
    同じ履歴から複数の年齢の BLUP を計算（û は1回だけ予測）

    Args:
        fit: 推定済み LMEM
        history: 人物の測定履歴（s_cut より後は使わない）
        query_ages: 予測する年齢
        s_cut: 履歴の打ち切り年齢

    Returns:
        query_ages と同順の BlupVector
    """
    past = _as_history(history).truncate(s_cut)
    u = predict_random_effects(fit, past)
    # BPM は最後の SBP 行、statin は最後の TCHOL 行の状態を持ち越す
    sbp_rows = past.factor_idx == FACTORS.index("sbp")
    tchol_rows = past.factor_idx == FACTORS.index("tchol")
    bpm = float(past.bpm[sbp_rows][-1]) if sbp_rows.any() else 0.0
    statin = float(past.statin[tchol_rows][-1]) if tchol_rows.any() else 0.0
    counts = np.bincount(past.factor_idx, minlength=N_FACTORS) if len(past) else np.zeros(N_FACTORS, dtype=int)
    n_past = {f: int(counts[k]) for k, f in enumerate(FACTORS)}
    return [
        BlupVector(
            values=_evaluate(fit, u, q, bpm, statin),
            query_age=float(q),
            history_cutoff=float(s_cut),
            n_past_obs=n_past,
        )
        for q in query_ages
    ]


def blup(
    fit: LmemFit,
    history: PersonHistory | Sequence[Measurement],
    query_age: float,
    s_cut: Optional[float] = None,
) -> BlupVector:
    """
    過去の測定のみを用いた BLUP

    Args:
        fit: 推定済み LMEM
        history: 人物の測定履歴
        query_age: 予測する年齢（s_cut 以上なら将来予測）
        s_cut: 履歴の打ち切り年齢（省略時は query_age）

    Returns:
        BlupVector
    """
    cutoff = query_age if s_cut is None else s_cut
    return blup_path(fit, history, [query_age], cutoff)[0]
