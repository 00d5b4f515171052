"""
合成コホート生成

真値パラメータが既知の CPRD 風コホートを生成する。
リスク因子の軌跡は多変量 LMEM（ランダム切片・傾き）に従い、
CVD イベントは登録時の潜在因子値による比例ハザードから逆関数法で発生させる。
"""

import logging

import numpy as np
import pandas as pd

from src.core.exceptions import ConfigError, DataError
from src.domain.cohort import MEASUREMENT_COLUMNS, PERSON_COLUMNS, Cohort
from src.domain.models import COMORBIDITIES, FACTORS, SimConfig

logger = logging.getLogger(__name__)


def _check_psd(sigma: np.ndarray) -> None:
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise ConfigError("true_sigma が対称ではありません")
    min_eig = np.linalg.eigvalsh(sigma).min()
    if min_eig < -1e-10 * max(1.0, np.abs(sigma).max()):
        raise ConfigError(f"true_sigma が半正定値ではありません（最小固有値 {min_eig:.3g}）")


def _sample_event_age(
    entry_age: float,
    target: float,
    starts: np.ndarray,
    rates: np.ndarray,
) -> float:
    """
    区分定数ハザードの累積が target に達する年齢を求める

    Args:
        entry_age: 追跡開始年齢
        target: 必要な累積ハザード（Exp(1) / exp(x'β)）
        starts: 区間開始年齢（昇順、starts[0] = 0）
        rates: 区間ごとのハザード率

    Returns:
        イベント年齢（到達しなければ inf）
    """
    remaining = target
    k = int(np.searchsorted(starts, entry_age, side="right")) - 1
    t = entry_age
    while k < len(starts):
        end = starts[k + 1] if k + 1 < len(starts) else np.inf
        rate = rates[k]
        if rate > 0:
            needed = remaining / rate
            if t + needed <= end:
                return t + needed
            remaining -= rate * (end - t)
        if not np.isfinite(end):
            return np.inf
        t = end
        k += 1
    return np.inf


def _simulate_person(
    person_id: int,
    config: SimConfig,
    sigma: np.ndarray,
    hazard: tuple[np.ndarray, np.ndarray],
) -> tuple[dict, dict, list[tuple]]:
    """1人分を独立な乱数ストリームで生成"""
    rng = np.random.default_rng([config.seed, person_id])

    sex = "M" if rng.random() < config.male_fraction else "F"
    practice_id = int(rng.integers(config.n_practices))
    lo, hi = config.entry_age_range
    entry_age = float(rng.uniform(lo, hi))

    u = rng.multivariate_normal(np.zeros(10), sigma, method="eigh")
    fixed = {name: float(rng.random() < config.comorbidity_prevalence.get(name, 0.0)) for name in COMORBIDITIES}
    fixed["townsend"] = float(rng.integers(1, 21))

    b0 = np.array([config.true_beta_lmem[f][0] for f in FACTORS])
    b1 = np.array([config.true_beta_lmem[f][1] for f in FACTORS])

    def latent(age: float) -> np.ndarray:
        a = age - config.reference_age
        return b0 + b1 * a + u[:5] + u[5:] * a

    # 登録時の潜在値でイベントハザードを決める
    x_entry = latent(entry_age)
    bpm_at_entry = x_entry[2] > config.bpm_threshold
    beta = config.true_cox_beta
    lp = sum(beta.get(f, 0.0) * x_entry[k] for k, f in enumerate(FACTORS))
    lp += sum(beta.get(name, 0.0) * fixed[name] for name in COMORBIDITIES)
    lp += beta.get("bp_medication", 0.0) * float(bpm_at_entry)
    lp += beta.get("townsend", 0.0) * fixed["townsend"]

    target = rng.exponential() / np.exp(lp)
    event = _sample_event_age(entry_age, target, *hazard)
    dropout = entry_age + (rng.exponential(1.0 / config.censor_rate) if config.censor_rate > 0 else np.inf)
    death = entry_age + (rng.exponential(1.0 / config.death_rate) if config.death_rate > 0 else np.inf)
    cap = min(config.max_age, entry_age + config.admin_followup)

    exit_age = float(min(event, death, dropout, cap))
    event_age = exit_age if event <= min(death, dropout, cap) else None
    death_age = exit_age if event_age is None and death <= min(dropout, cap) else None

    # 受診は一様ポアソン過程
    n_visits = int(rng.poisson(config.visit_rate * (exit_age - entry_age)))
    visit_ages = np.sort(rng.uniform(entry_age, exit_age, size=n_visits))

    bpm_start = entry_age if bpm_at_entry else None
    statin_start = entry_age if x_entry[3] > config.statin_threshold else None
    for age in visit_ages:
        x = latent(age)
        if bpm_start is None and x[2] > config.bpm_threshold:
            bpm_start = float(age)
        if statin_start is None and x[3] > config.statin_threshold:
            statin_start = float(age)

    sigma_e = np.array([config.true_sigma_e[f] for f in FACTORS])
    missing = np.array([config.missing_prob.get(f, 0.0) for f in FACTORS])
    rows = []
    for age in visit_ages:
        x = latent(age)
        bpm = int(bpm_start is not None and age >= bpm_start)
        statin = int(statin_start is not None and age >= statin_start)
        observed = rng.random(5) >= missing
        noise = rng.normal(0.0, 1.0, size=5) * sigma_e
        for k, factor in enumerate(FACTORS):
            if not observed[k]:
                continue
            value = x[k] + noise[k]
            if factor == "sbp":
                value += config.true_bpm_effect * bpm
            elif factor == "tchol":
                value += config.true_statin_effect * statin
            rows.append((person_id, practice_id, float(age), factor, float(value), bpm, statin))

    person = {
        "person_id": person_id,
        "practice_id": practice_id,
        "sex": sex,
        "entry_age": entry_age,
        "exit_age": exit_age,
        "event_age": event_age,
        "death_age": death_age,
        "statin_start_age": statin_start,
        "bpm_start_age": bpm_start,
        **fixed,
    }
    truth = {"u": u.tolist(), "linear_predictor": float(lp)}
    return person, truth, rows


def simulate_cohort(config: SimConfig) -> Cohort:
    """
    合成コホートを生成

    Args:
        config: シミュレーション設定

    Returns:
        Cohort（records() で LongitudinalRecord のリストを取得可能）

    Raises:
        ConfigError: 共分散が半正定値でない、因子設定が欠けている場合
    """
    cohort, _ = simulate_cohort_with_truth(config)
    return cohort


def simulate_cohort_with_truth(config: SimConfig) -> tuple[Cohort, dict]:
    """
    合成コホートと個人ごとの潜在値（オラクル用）を生成

    Returns:
        (Cohort, truth) truth は設定と person_id -> {u, linear_predictor}
    """
    sigma = np.asarray(config.true_sigma, dtype=float)
    _check_psd(sigma)
    for name in ("true_beta_lmem", "true_sigma_e"):
        absent = [f for f in FACTORS if f not in getattr(config, name)]
        if absent:
            raise ConfigError(f"{name} に因子がありません: {absent}")

    hazard = config.hazard_pieces()
    logger.info(f"コホート生成開始: {config.n_persons}人, seed={config.seed}")

    persons, rows, latent = [], [], {}
    for pid in range(config.n_persons):
        person, truth, measurements = _simulate_person(pid, config, sigma, hazard)
        persons.append(person)
        rows.extend(measurements)
        latent[pid] = truth

    if not persons:
        logger.info("n_persons=0 のため空のコホートを返します")
        return Cohort.empty(), {"config": config.model_dump(mode="json"), "persons": {}}

    persons_df = pd.DataFrame(persons, columns=PERSON_COLUMNS)
    for col in ("event_age", "death_age", "statin_start_age", "bpm_start_age"):
        persons_df[col] = persons_df[col].astype(float)
    measurements_df = pd.DataFrame(rows, columns=MEASUREMENT_COLUMNS)

    n_events = int(persons_df["event_age"].notna().sum())
    logger.info(
        f"コホート生成完了: {len(persons_df)}人, 測定 {len(measurements_df)}件, イベント {n_events}件"
    )
    truth = {"config": config.model_dump(mode="json"), "persons": latent}
    return Cohort(persons_df, measurements_df), truth


def split_practices(
    cohort: Cohort, fraction: float, seed: int
) -> tuple[Cohort, Cohort]:
    """
    診療所単位で導出用・検証用に分割

    Args:
        cohort: 分割対象のコホート
        fraction: 導出用に割り当てる診療所の割合 (0, 1)
        seed: 乱数シード

    Returns:
        (derivation, validation)

    Raises:
        DataError: 診療所が2未満、または fraction が範囲外の場合
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction は (0, 1) の範囲: {fraction}")
    practices = np.sort(cohort.persons["practice_id"].unique())
    if len(practices) < 2:
        raise DataError("診療所単位の分割には2つ以上の診療所が必要です")

    n_derivation = int(np.floor(fraction * len(practices) + 1e-9))
    n_derivation = min(max(n_derivation, 1), len(practices) - 1)
    rng = np.random.default_rng(seed)
    derivation_practices = rng.permutation(practices)[:n_derivation]

    mask = cohort.persons["practice_id"].isin(derivation_practices).to_numpy()
    derivation = cohort.filter_persons(mask)
    validation = cohort.filter_persons(~mask)
    logger.info(
        f"診療所分割: 導出 {n_derivation}/{len(practices)} 診療所 "
        f"({len(derivation)}人), 検証 {len(validation)}人"
    )
    return derivation, validation
