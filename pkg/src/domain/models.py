"""
ドメインモデル定義

シミュレーション設定、縦断レコード、推定済みモデル、リスクプロファイル、
Net Benefit 評価などシステム内でのデータ交換形式。
Pydanticを使用して型安全性と不変条件を保証。
"""

from enum import Enum
from typing import Literal, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr, field_validator, model_validator

# 時間変化リスク因子（LMEM のアウトカム順）
FACTORS: tuple[str, ...] = ("smoke", "hdl", "sbp", "tchol", "bmi")

# 時間固定の既往歴（0/1）
COMORBIDITIES: tuple[str, ...] = (
    "diabetes",
    "renal_disease",
    "depression",
    "migraine",
    "severe_mental_illness",
    "rheumatoid_arthritis",
    "atrial_fibrillation",
)

# L_a >= 60 でのみ Cox モデルに入る既往歴
LATE_ONSET_COMORBIDITIES: tuple[str, ...] = (
    "renal_disease",
    "rheumatoid_arthritis",
    "atrial_fibrillation",
)

LANDMARK_GRID: tuple[int, ...] = (40, 45, 50, 55, 60, 65, 70, 75, 80)

# 5年リスク閾値と予測ウィンドウ
RISK_THRESHOLD = 0.05
PREDICTION_WINDOW = 5.0
LANDMARK_HORIZON = 10.0

Sex = Literal["M", "F"]


class RiskClass(str, Enum):
    """ランドマーク年齢での5年CVDリスク分類"""

    VERY_HIGH = "very_high"
    HIGH = "high"
    MED_HIGH = "med_high"
    MED_LOW = "med_low"
    LOW = "low"

    @classmethod
    def from_risk(cls, risk: float) -> "RiskClass":
        """リスク値を分類（境界は上側閉区間）"""
        if risk > 0.05:
            return cls.VERY_HIGH
        if risk > 0.0375:
            return cls.HIGH
        if risk > 0.025:
            return cls.MED_HIGH
        if risk > 0.0125:
            return cls.MED_LOW
        return cls.LOW


# =============================================================================
# cohort_sim
# =============================================================================


def _default_sigma() -> list[list[float]]:
    """ランダム切片5個 + ランダム傾き5個の既定共分散"""
    sd = np.array([0.7, 0.7, 0.7, 0.7, 0.7, 0.05, 0.05, 0.05, 0.05, 0.05])
    corr = np.eye(10)
    # 切片と傾きの弱い負相関、SBP-TCHOL 切片の正相関
    for k in range(5):
        corr[k, 5 + k] = corr[5 + k, k] = -0.2
    corr[2, 3] = corr[3, 2] = 0.3
    corr[1, 4] = corr[4, 1] = -0.2
    return (corr * np.outer(sd, sd)).tolist()


class SimConfig(BaseModel):
    """合成コホート生成の設定（真値パラメータ込み）"""

    n_persons: int = Field(default=1000, ge=0, description="人数")
    n_practices: int = Field(default=20, ge=1, description="診療所数")
    male_fraction: float = Field(default=0.5, ge=0.0, le=1.0, description="男性割合")
    entry_age_range: tuple[float, float] = Field(
        default=(30.0, 70.0), description="登録年齢の一様分布範囲"
    )
    max_age: float = Field(default=95.0, description="追跡打ち切り年齢")
    admin_followup: float = Field(
        default=20.0, gt=0.0, description="登録から管理上の追跡終了までの年数"
    )
    reference_age: float = Field(default=60.0, description="真の切片を定義する年齢")

    true_beta_lmem: dict[str, tuple[float, float]] = Field(
        default_factory=lambda: {
            "smoke": (0.2, -0.005),
            "hdl": (0.0, 0.005),
            "sbp": (0.0, 0.03),
            "tchol": (0.0, 0.01),
            "bmi": (0.0, 0.01),
        },
        description="因子ごとの (切片, 年齢傾き)",
    )
    true_bpm_effect: float = Field(default=-0.5, description="SBP に対する降圧薬効果 β32")
    true_statin_effect: float = Field(
        default=-0.8, description="TCHOL に対するスタチン効果 β42"
    )
    true_sigma: list[list[float]] = Field(
        default_factory=_default_sigma, description="10x10 ランダム効果共分散"
    )
    true_sigma_e: dict[str, float] = Field(
        default_factory=lambda: {"smoke": 0.3, "hdl": 0.4, "sbp": 0.5, "tchol": 0.4, "bmi": 0.3},
        description="因子ごとの残差SD",
    )
    true_cox_beta: dict[str, float] = Field(
        default_factory=lambda: {
            "smoke": 0.4,
            "hdl": -0.25,
            "sbp": 0.35,
            "tchol": 0.3,
            "bmi": 0.15,
            "diabetes": 0.6,
            "bp_medication": 0.2,
            "depression": 0.15,
            "migraine": 0.1,
            "severe_mental_illness": 0.2,
            "renal_disease": 0.4,
            "rheumatoid_arthritis": 0.3,
            "atrial_fibrillation": 0.5,
            "townsend": 0.02,
        },
        description="イベントハザードの対数ハザード係数",
    )
    baseline_hazard_rate: float | list[tuple[float, float]] = Field(
        default=0.002,
        description="定数 [1/年] または年齢区分 (開始年齢, 率) のリスト",
    )
    visit_rate: float = Field(default=0.8, ge=0.0, description="受診率 [回/年]")
    missing_prob: dict[str, float] = Field(
        default_factory=lambda: {"smoke": 0.3, "hdl": 0.5, "sbp": 0.1, "tchol": 0.4, "bmi": 0.3},
        description="受診時に因子が未測定となる確率",
    )
    censor_rate: float = Field(default=0.02, ge=0.0, description="脱落ハザード [1/年]")
    death_rate: float = Field(default=0.0, ge=0.0, description="非CVD死亡ハザード [1/年]")
    comorbidity_prevalence: dict[str, float] = Field(
        default_factory=lambda: {
            "diabetes": 0.05,
            "renal_disease": 0.01,
            "depression": 0.12,
            "migraine": 0.08,
            "severe_mental_illness": 0.01,
            "rheumatoid_arthritis": 0.01,
            "atrial_fibrillation": 0.01,
        }
    )
    bpm_threshold: float = Field(
        default=1.5, description="潜在SBPがこの値を超えた受診で降圧薬開始"
    )
    statin_threshold: float = Field(
        default=1.5, description="潜在TCHOLがこの値を超えた受診でスタチン開始"
    )
    seed: int = Field(default=20240101, ge=0, lt=2**64)

    @field_validator("true_sigma")
    @classmethod
    def _check_sigma_shape(cls, v: list[list[float]]) -> list[list[float]]:
        arr = np.asarray(v, dtype=float)
        if arr.shape != (10, 10):
            raise ValueError(f"true_sigma は 10x10 である必要があります: {arr.shape}")
        return v

    @field_validator("missing_prob", "comorbidity_prevalence")
    @classmethod
    def _check_probabilities(cls, v: dict[str, float]) -> dict[str, float]:
        for name, p in v.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"確率は [0,1] の範囲: {name}={p}")
        return v

    @field_validator("baseline_hazard_rate")
    @classmethod
    def _check_hazard(cls, v):
        rates = [v] if isinstance(v, (int, float)) else [r for _, r in v]
        if any(r < 0 for r in rates):
            raise ValueError("ハザード率は非負である必要があります")
        return v

    @model_validator(mode="after")
    def _check_ranges(self) -> "SimConfig":
        lo, hi = self.entry_age_range
        if lo > hi:
            raise ValueError("entry_age_range は (min, max) で指定してください")
        if hi >= self.max_age:
            raise ValueError("登録年齢の上限は max_age 未満である必要があります")
        return self

    def hazard_pieces(self) -> tuple[np.ndarray, np.ndarray]:
        """ベースラインハザードを (区間開始年齢, 率) の配列に正規化"""
        if isinstance(self.baseline_hazard_rate, (int, float)):
            return np.array([0.0]), np.array([float(self.baseline_hazard_rate)])
        pieces = sorted(self.baseline_hazard_rate)
        starts = np.array([a for a, _ in pieces], dtype=float)
        rates = np.array([r for _, r in pieces], dtype=float)
        # 最初の区間より前は最初の率を延長
        starts[0] = 0.0
        return starts, rates


class Measurement(NamedTuple):
    """1回の測定値（標準化単位）"""

    age: float
    factor: str
    value: float
    bpm: int = 0
    statin: int = 0


class LongitudinalRecord(BaseModel):
    """1人分の不規則な反復測定と固定共変量"""

    person_id: int
    practice_id: int
    sex: Sex
    entry_age: float
    exit_age: float
    fixed_covariates: dict[str, float] = Field(default_factory=dict)
    measurements: list[Measurement] = Field(default_factory=list)
    event_age: Optional[float] = None
    death_age: Optional[float] = None
    statin_start_age: Optional[float] = None
    bpm_start_age: Optional[float] = None

    @model_validator(mode="after")
    def _check_ordering(self) -> "LongitudinalRecord":
        if self.entry_age > self.exit_age:
            raise ValueError(f"person {self.person_id}: entry_age > exit_age")
        for name in ("event_age", "death_age", "statin_start_age", "bpm_start_age"):
            value = getattr(self, name)
            if value is not None and not self.entry_age <= value <= self.exit_age:
                raise ValueError(f"person {self.person_id}: {name} が追跡期間外です")
        ages = [m.age for m in self.measurements]
        if any(a < self.entry_age or a > self.exit_age for a in ages):
            raise ValueError(f"person {self.person_id}: 測定年齢が追跡期間外です")
        if any(b < a for a, b in zip(ages, ages[1:])):
            raise ValueError(f"person {self.person_id}: 測定が年齢順ではありません")
        for m in self.measurements:
            if m.factor not in FACTORS:
                raise ValueError(f"未知のリスク因子: {m.factor}")
        return self


# =============================================================================
# lmem
# =============================================================================


class LmemSpec(BaseModel):
    """多変量線形混合効果モデルの指定"""

    outcomes: tuple[str, ...] = FACTORS
    extra_fixed_terms: dict[str, str] = Field(
        default_factory=lambda: {"sbp": "bpm", "tchol": "statin"}
    )
    convergence_tol: float = Field(default=1e-7, gt=0.0)
    max_iter: int = Field(default=500, ge=1)
    method: Literal["ml", "reml"] = "ml"

    @field_validator("outcomes")
    @classmethod
    def _check_outcomes(cls, v: tuple[str, ...]) -> tuple[str, ...]:
        if tuple(v) != FACTORS:
            raise ValueError(f"outcomes は {FACTORS} の順で指定してください")
        return tuple(v)


class LmemFit(BaseModel):
    """LMEM 推定結果（固定効果・ランダム効果共分散・残差SD）"""

    beta: dict[str, float] = Field(..., description="固定効果（{因子}_intercept 等）")
    beta_se: dict[str, Optional[float]] = Field(default_factory=dict)
    sigma: list[list[float]] = Field(..., description="(u0, u1) の 10x10 共分散")
    sigma_e: dict[str, float] = Field(..., description="因子ごとの残差SD")
    center_age: float = Field(..., description="年齢の中心化基準（ランドマーク年齢）")
    log_likelihood: float
    log_likelihood_history: list[float] = Field(default_factory=list)
    n_iterations: int
    converged: bool
    method: Literal["ml", "reml"] = "ml"
    n_persons: int = 0
    n_observations: dict[str, int] = Field(default_factory=dict)

    @field_validator("sigma")
    @classmethod
    def _check_sigma(cls, v: list[list[float]]) -> list[list[float]]:
        arr = np.asarray(v, dtype=float)
        if arr.shape != (10, 10):
            raise ValueError("sigma は 10x10 である必要があります")
        if not np.allclose(arr, arr.T, atol=1e-10):
            raise ValueError("sigma が対称ではありません")
        if np.linalg.eigvalsh(arr).min() < -1e-8 * max(1.0, np.abs(arr).max()):
            raise ValueError("sigma が半正定値ではありません")
        return v

    @field_validator("sigma_e")
    @classmethod
    def _check_sigma_e(cls, v: dict[str, float]) -> dict[str, float]:
        if any(s <= 0 for s in v.values()):
            raise ValueError("sigma_e は正である必要があります")
        return v

    def sigma_array(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=float)

    def extra_coefficient(self, factor: str) -> float:
        """SBP の降圧薬項、TCHOL のスタチン項（なければ 0）"""
        key = {"sbp": "sbp_bpm", "tchol": "tchol_statin"}.get(factor)
        return self.beta.get(key, 0.0) if key else 0.0


class BlupVector(BaseModel):
    """指定年齢における時間変化リスク因子の BLUP"""

    values: dict[str, float]
    query_age: float
    history_cutoff: float = Field(..., description="使用した測定の最大年齢の上限")
    n_past_obs: dict[str, int] = Field(default_factory=dict)

    @field_validator("values")
    @classmethod
    def _check_finite(cls, v: dict[str, float]) -> dict[str, float]:
        if not all(np.isfinite(x) for x in v.values()):
            raise ValueError("BLUP に非有限値が含まれています")
        return v


# =============================================================================
# survival
# =============================================================================


class SurvivalRow(BaseModel):
    """Cox モデル用の1行（時間は起点からの年数）"""

    person_id: int
    covariates: dict[str, float]
    time: float = Field(..., gt=0.0)
    status: Literal["event", "censored"]

    @field_validator("covariates")
    @classmethod
    def _check_finite(cls, v: dict[str, float]) -> dict[str, float]:
        if not all(np.isfinite(x) for x in v.values()):
            raise ValueError("共変量に非有限値が含まれています")
        return v


class CoxFit(BaseModel):
    """Cox 比例ハザードモデルの推定結果"""

    beta: dict[str, float]
    beta_se: dict[str, Optional[float]] = Field(default_factory=dict)
    baseline_cumhaz: list[tuple[float, float]] = Field(
        ..., description="(絶対年齢, Λ0) の階段関数ノット（中心化共変量での値）"
    )
    origin: float
    horizon: float
    covariate_means: dict[str, float] = Field(default_factory=dict)
    n_events: int = 0
    n_subjects: int = 0
    log_partial_likelihood: float = 0.0
    n_iterations: int = 0
    degenerate: list[str] = Field(default_factory=list, description="情報量ゼロの共変量")

    _knots: Optional[tuple[np.ndarray, np.ndarray]] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def _check_baseline(self) -> "CoxFit":
        if self.horizon <= self.origin:
            raise ValueError("horizon は origin より後である必要があります")
        if not self.baseline_cumhaz:
            raise ValueError("baseline_cumhaz が空です")
        t0, h0 = self.baseline_cumhaz[0]
        if abs(t0 - self.origin) > 1e-9 or h0 != 0.0:
            raise ValueError("baseline_cumhaz は (origin, 0) から始まる必要があります")
        times = [t for t, _ in self.baseline_cumhaz]
        values = [h for _, h in self.baseline_cumhaz]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("baseline_cumhaz の時間が昇順ではありません")
        if any(b < a - 1e-15 for a, b in zip(values, values[1:])):
            raise ValueError("baseline_cumhaz が非減少ではありません")
        if set(self.covariate_means) != set(self.beta):
            raise ValueError("covariate_means と beta の共変量名が一致しません")
        return self

    def knots(self) -> tuple[np.ndarray, np.ndarray]:
        """ノット時刻と累積ハザードを numpy 配列で返す（キャッシュ）"""
        if self._knots is None:
            arr = np.asarray(self.baseline_cumhaz, dtype=float)
            self._knots = (arr[:, 0].copy(), arr[:, 1].copy())
        return self._knots


class StatinEffect(BaseModel):
    """スタチンのハザード比"""

    theta: float = Field(default=0.8, gt=0.0, le=1.0)


# =============================================================================
# landmark
# =============================================================================


class LandmarkAge(BaseModel):
    """固定グリッド上のランドマーク年齢"""

    value: int

    @field_validator("value")
    @classmethod
    def _check_grid(cls, v: int) -> int:
        if v not in LANDMARK_GRID:
            raise ValueError(f"ランドマーク年齢はグリッド {LANDMARK_GRID} の値: {v}")
        return v

    def prediction_times(self) -> list[int]:
        """予測時点集合 P_La = {La, ..., La+10}"""
        return list(range(self.value, self.value + int(LANDMARK_HORIZON) + 1))


class LandmarkModels(BaseModel):
    """1つのランドマーク年齢（と性別）で推定したモデル一式"""

    la: LandmarkAge
    sex: Optional[Sex] = None
    lmem_fit: LmemFit
    cox_10y: CoxFit
    cox_5y: dict[int, Optional[CoxFit]] = Field(
        ..., description="予測時点 s -> 5年 Cox（推定不能なら None）"
    )
    covariate_names: list[str]
    townsend_mode: Literal["numeric", "dummies"] = "numeric"

    @model_validator(mode="after")
    def _check_grid(self) -> "LandmarkModels":
        expected = set(self.la.prediction_times())
        if set(self.cox_5y) != expected:
            raise ValueError("cox_5y は P_La の全11時点を含む必要があります")
        return self

    def unfittable(self) -> list[int]:
        return sorted(s for s, fit in self.cox_5y.items() if fit is None)


class RiskProfile(BaseModel):
    """予測時点グリッド上の個人別5年リスクと閾値交差時刻"""

    person_id: int
    la: int
    risks: dict[int, float] = Field(..., description="s -> r(s+5; x(s), s)")
    t_star: Optional[float] = None
    risk_class: Optional[RiskClass] = None
    history_cutoff: float
    covariates_10y: dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_profile(self) -> "RiskProfile":
        if any(not 0.0 <= r <= 1.0 for r in self.risks.values()):
            raise ValueError("リスクは [0,1] の範囲である必要があります")
        if self.t_star is not None and not (
            self.la - 1e-9 <= self.t_star <= self.la + LANDMARK_HORIZON + 1e-9
        ):
            raise ValueError("t_star が [La, La+10] の範囲外です")
        return self


# =============================================================================
# netbenefit
# =============================================================================


class Schedule(BaseModel):
    """f 年間隔のリスク評価スケジュール"""

    f: int = Field(..., ge=1, le=10)
    la: int
    visits: list[float]

    @model_validator(mode="after")
    def _check_visits(self) -> "Schedule":
        if not self.visits or self.visits[0] != self.la:
            raise ValueError("最初の受診はランドマーク年齢である必要があります")
        if any(b <= a for a, b in zip(self.visits, self.visits[1:])):
            raise ValueError("受診時刻は狭義単調増加である必要があります")
        if self.visits[-1] > self.la + LANDMARK_HORIZON:
            raise ValueError("受診時刻が La+10 を超えています")
        return self


class NbParams(BaseModel):
    """Net Benefit のパラメータ"""

    lambda_: float = Field(default=25_000.0, gt=0.0, alias="lambda", description="£/年")
    u_s: float = Field(default=0.997, gt=0.0, le=1.0, description="スタチン効用")
    c_s: float = Field(default=150.0, ge=0.0, description="スタチン費用 £/年")
    c_v: float = Field(default=18.39, ge=0.0, description="受診費用 £/回")
    theta: float = Field(default=0.8, gt=0.0, le=1.0, description="スタチンのハザード比")

    model_config = {"populate_by_name": True}


class NbRow(BaseModel):
    """1つのスケジュール f に対する評価行"""

    f: int
    k_star: Optional[int] = None
    tau_k_star: Optional[float] = None
    beyond_last_visit: bool = False
    expected_visits: float
    efly_ns: float
    efly_s: float
    qaly: float
    cost: float
    nb: float


class NbEvaluation(BaseModel):
    """個人の全スケジュール評価と最適頻度"""

    person_id: int
    la: int
    rows: list[NbRow]
    f_opt: int

    @model_validator(mode="after")
    def _check_optimum(self) -> "NbEvaluation":
        best = max(r.nb for r in self.rows)
        chosen = next(r for r in self.rows if r.f == self.f_opt)
        if chosen.nb < best - 1e-6:
            raise ValueError("f_opt が NB を最大化していません")
        for r in self.rows:
            if r.efly_ns + r.efly_s > LANDMARK_HORIZON + 1e-9:
                raise ValueError("EFLY の合計が10年を超えています")
        return self


class SweepGrid(BaseModel):
    """感度分析のグリッド（範囲は論拠となる推奨範囲内）"""

    lambda_: list[float] = Field(
        default_factory=lambda: [20_000.0, 22_500.0, 25_000.0, 27_500.0, 30_000.0],
        alias="lambda",
    )
    u_s: list[float] = Field(default_factory=lambda: [0.997, 0.998, 0.999, 1.0])
    c_s: list[float] = Field(default_factory=lambda: [4.0, 50.0, 150.0, 250.0, 320.0])
    c_v: list[float] = Field(default_factory=lambda: [15.0, 18.39, 100.0, 500.0, 1000.0])

    model_config = {"populate_by_name": True}

    def items(self) -> list[tuple[str, list[float]]]:
        return [("lambda", self.lambda_), ("u_s", self.u_s), ("c_s", self.c_s), ("c_v", self.c_v)]


# =============================================================================
# validation
# =============================================================================


class PredictionRow(BaseModel):
    """検証用の予測と観測の1行"""

    person_id: int
    s: float
    w: float
    predicted_risk: float
    observed_time: float = Field(..., gt=0.0, description="s からの経過年数")
    observed_status: Literal["event", "censored"]

    @field_validator("predicted_risk")
    @classmethod
    def _check_finite(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("predicted_risk が非有限です")
        return v


class PredictionSet(BaseModel):
    """動的 c-index / Brier スコアの入力"""

    rows: list[PredictionRow] = Field(default_factory=list)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "s": np.array([r.s for r in self.rows], dtype=float),
            "w": np.array([r.w for r in self.rows], dtype=float),
            "risk": np.array([r.predicted_risk for r in self.rows], dtype=float),
            "time": np.array([r.observed_time for r in self.rows], dtype=float),
            "event": np.array([r.observed_status == "event" for r in self.rows], dtype=bool),
        }


class CIndexResult(BaseModel):
    """c-index の推定値"""

    value: float = Field(..., ge=0.0, le=1.0)
    se: float
    n_pairs: float
