"""共通フィクスチャ"""

from typing import Callable, Optional

import numpy as np
import pytest

from src.domain.models import (
    FACTORS,
    CoxFit,
    LandmarkAge,
    LandmarkModels,
    LmemFit,
    RiskClass,
    RiskProfile,
    SimConfig,
)
from src.engines.lmem import beta_names


@pytest.fixture
def make_cox() -> Callable[..., CoxFit]:
    """ノットを直接指定した CoxFit（共変量 x、平均0）"""

    def _make(
        knots: list[tuple[float, float]],
        beta: Optional[dict[str, float]] = None,
        horizon: Optional[float] = None,
    ) -> CoxFit:
        beta = beta if beta is not None else {"x": 0.0}
        origin = knots[0][0]
        return CoxFit(
            beta=beta,
            baseline_cumhaz=knots,
            origin=origin,
            horizon=horizon if horizon is not None else origin + 10.0,
            covariate_means={name: 0.0 for name in beta},
        )

    return _make


@pytest.fixture
def constant_hazard_cox(make_cox) -> Callable[[int, float], CoxFit]:
    """la 起点・定数ハザード rate の10年 Cox（0.01年刻みのノット）"""

    def _make(la: int, rate: float) -> CoxFit:
        grid = np.arange(0, 1001) * 0.01
        knots = [(la + float(t), float(rate * t)) for t in grid]
        return make_cox(knots, beta={"x": 1.0})

    return _make


@pytest.fixture
def lmem_fit_factory() -> Callable[..., LmemFit]:
    """手で値を与えた LmemFit"""

    def _make(
        center_age: float = 50.0,
        intercepts: Optional[dict[str, float]] = None,
        slopes: Optional[dict[str, float]] = None,
        sigma: Optional[np.ndarray] = None,
        sigma_e: float = 0.5,
    ) -> LmemFit:
        beta = {name: 0.0 for name in beta_names()}
        for f, v in (intercepts or {}).items():
            beta[f"{f}_intercept"] = v
        for f, v in (slopes or {}).items():
            beta[f"{f}_slope"] = v
        sigma = sigma if sigma is not None else np.diag([0.5] * 5 + [0.01] * 5)
        return LmemFit(
            beta=beta,
            sigma=np.asarray(sigma).tolist(),
            sigma_e={f: sigma_e for f in FACTORS},
            center_age=center_age,
            log_likelihood=0.0,
            n_iterations=1,
            converged=True,
        )

    return _make


@pytest.fixture
def make_models(lmem_fit_factory) -> Callable[[int, CoxFit], LandmarkModels]:
    """10年 Cox だけを持つモデル一式（5年 Cox はすべて推定不能）"""

    def _make(la: int, cox_10y: CoxFit) -> LandmarkModels:
        landmark = LandmarkAge(value=la)
        return LandmarkModels(
            la=landmark,
            lmem_fit=lmem_fit_factory(center_age=float(la)),
            cox_10y=cox_10y,
            cox_5y={s: None for s in landmark.prediction_times()},
            covariate_names=list(cox_10y.beta),
        )

    return _make


@pytest.fixture
def make_profile() -> Callable[..., RiskProfile]:
    def _make(
        la: int,
        t_star: Optional[float],
        risk_class: RiskClass = RiskClass.HIGH,
        person_id: int = 1,
        x: float = 0.0,
    ) -> RiskProfile:
        return RiskProfile(
            person_id=person_id,
            la=la,
            risks={la: 0.04},
            t_star=t_star,
            risk_class=risk_class,
            history_cutoff=float(la),
            covariates_10y={"x": x},
        )

    return _make


@pytest.fixture
def small_sim_config() -> SimConfig:
    """テスト用の小さな合成コホート"""
    return SimConfig(n_persons=300, n_practices=6, seed=7)

