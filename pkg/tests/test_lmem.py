"""多変量 LMEM と BLUP のテスト"""

import numpy as np
import pandas as pd
import pytest

from src.core.exceptions import DataError, NumericError
from src.domain.cohort import Cohort, PersonHistory
from src.domain.models import FACTORS, LmemFit, LmemSpec, Measurement, SimConfig
from src.engines import lmem as lmem_engine
from src.engines.cohort_sim import simulate_cohort
from src.engines.lmem import beta_names, blup, blup_path, fit_lmem

# 治療なし・イベントなしで軌跡だけを生成する設定
TRAJECTORY_ONLY = dict(
    baseline_hazard_rate=0.0,
    censor_rate=0.0,
    death_rate=0.0,
    bpm_threshold=100.0,
    statin_threshold=100.0,
    missing_prob={f: 0.0 for f in FACTORS},
)


def _gls_oracle(fit: LmemFit, history: list[Measurement], query_age: float) -> dict[str, float]:
    """密行列で書いた条件付き期待値 (Σ⁻¹ + ZᵀR⁻¹Z)⁻¹ ZᵀR⁻¹ (y - Xβ)"""
    sigma = fit.sigma_array()
    n = len(history)
    k = np.array([FACTORS.index(m.factor) for m in history])
    a = np.array([m.age for m in history]) - fit.center_age
    y = np.array([m.value for m in history])
    g = np.array(
        [m.bpm if m.factor == "sbp" else m.statin if m.factor == "tchol" else 0 for m in history],
        dtype=float,
    )
    b0 = np.array([fit.beta[f"{f}_intercept"] for f in FACTORS])
    b1 = np.array([fit.beta[f"{f}_slope"] for f in FACTORS])
    extra = np.array([fit.extra_coefficient(f) for f in FACTORS])

    Z = np.zeros((n, 10))
    for i in range(n):
        Z[i, k[i]] = 1.0
        Z[i, 5 + k[i]] = a[i]
    R_inv = np.diag([1.0 / fit.sigma_e[FACTORS[j]] ** 2 for j in k])
    resid = y - (b0[k] + b1[k] * a + extra[k] * g)
    u = np.linalg.inv(np.linalg.inv(sigma) + Z.T @ R_inv @ Z) @ Z.T @ R_inv @ resid

    sbp = [m.bpm for m in history if m.factor == "sbp"]
    tchol = [m.statin for m in history if m.factor == "tchol"]
    g_q = np.zeros(5)
    g_q[FACTORS.index("sbp")] = sbp[-1] if sbp else 0
    g_q[FACTORS.index("tchol")] = tchol[-1] if tchol else 0
    aq = query_age - fit.center_age
    values = b0 + b1 * aq + extra * g_q + u[:5] + u[5:] * aq
    return {f: float(values[j]) for j, f in enumerate(FACTORS)}


class TestBlup:
    def test_empty_history_gives_fixed_effects(self, lmem_fit_factory):
        fit = lmem_fit_factory(
            center_age=50.0,
            intercepts={"sbp": 0.4, "bmi": -0.1},
            slopes={"sbp": 0.03, "bmi": 0.01},
        )

        vec = blup(fit, PersonHistory.empty(), 52.0)

        assert vec.values["sbp"] == pytest.approx(0.4 + 0.03 * 2)
        assert vec.values["bmi"] == pytest.approx(-0.1 + 0.01 * 2)
        assert vec.values["hdl"] == 0.0
        assert vec.n_past_obs == {f: 0 for f in FACTORS}

    def test_dense_measurements_dominate(self, lmem_fit_factory):
        sigma = np.diag([1.0] * 5 + [1e-6] * 5)
        fit = lmem_fit_factory(center_age=50.0, sigma=sigma, sigma_e=0.01)
        history = [Measurement(50.0 + 0.1 * k, "sbp", 2.0) for k in range(5)]

        vec = blup(fit, history, 50.0, s_cut=51.0)

        assert vec.values["sbp"] == pytest.approx(2.0, abs=1e-3)
        assert vec.values["tchol"] == pytest.approx(0.0, abs=1e-9)

    def test_measurements_after_cutoff_are_ignored(self, lmem_fit_factory):
        fit = lmem_fit_factory(center_age=50.0)
        past = [Measurement(48.0, "sbp", 1.0), Measurement(49.5, "tchol", -0.5)]
        future = past + [Measurement(52.0, "sbp", 5.0)]

        with_future = blup(fit, future, 55.0, s_cut=50.0)
        without = blup(fit, past, 55.0, s_cut=50.0)

        assert with_future.values == without.values
        assert with_future.history_cutoff == 50.0

    def test_path_matches_single_queries(self, lmem_fit_factory):
        fit = lmem_fit_factory(center_age=50.0, slopes={"sbp": 0.02})
        history = [Measurement(45.0, "sbp", 0.3), Measurement(49.0, "hdl", -0.2)]

        path = blup_path(fit, history, [50.0, 53.0, 60.0], 50.0)

        for vec in path:
            single = blup(fit, history, vec.query_age, s_cut=50.0)
            assert vec.values == pytest.approx(single.values)

    def test_treatment_state_is_carried_forward(self, lmem_fit_factory):
        fit = lmem_fit_factory(center_age=50.0)
        fit.beta["tchol_statin"] = -0.8
        history = [Measurement(49.0, "tchol", 0.5, bpm=0, statin=1)]

        vec = blup(fit, history, 55.0, s_cut=50.0)
        untreated = blup(fit, [Measurement(49.0, "tchol", 0.5)], 55.0, s_cut=50.0)

        assert vec.values["tchol"] < untreated.values["tchol"]

    def test_treatment_state_comes_from_own_factor_rows(self, lmem_fit_factory):
        fit = lmem_fit_factory(center_age=50.0)
        fit.beta["sbp_bpm"] = 0.7
        fit.beta["tchol_statin"] = -0.8
        own_rows = [
            Measurement(47.0, "tchol", 0.4, bpm=0, statin=1),
            Measurement(48.0, "sbp", 0.2, bpm=1, statin=0),
            Measurement(49.0, "hdl", 0.1, bpm=0, statin=0),
        ]
        flagged_everywhere = [
            Measurement(47.0, "tchol", 0.4, bpm=1, statin=1),
            Measurement(48.0, "sbp", 0.2, bpm=1, statin=1),
            Measurement(49.0, "hdl", 0.1, bpm=1, statin=1),
        ]

        vec = blup(fit, own_rows, 55.0, s_cut=50.0)
        expected = blup(fit, flagged_everywhere, 55.0, s_cut=50.0)

        assert vec.values["sbp"] == pytest.approx(expected.values["sbp"], abs=1e-12)
        assert vec.values["tchol"] == pytest.approx(expected.values["tchol"], abs=1e-12)

    def test_matches_dense_gls(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            A = rng.normal(scale=0.3, size=(10, 10))
            sigma = A @ A.T + 0.05 * np.eye(10)
            fit = LmemFit(
                beta={name: float(rng.normal(scale=0.5)) for name in beta_names()},
                sigma=(0.5 * (sigma + sigma.T)).tolist(),
                sigma_e={f: float(rng.uniform(0.1, 1.0)) for f in FACTORS},
                center_age=50.0,
                log_likelihood=0.0,
                n_iterations=1,
                converged=True,
            )
            history = [
                Measurement(
                    float(age),
                    str(rng.choice(FACTORS)),
                    float(rng.normal()),
                    int(rng.integers(2)),
                    int(rng.integers(2)),
                )
                for age in np.sort(rng.uniform(40.0, 50.0, size=4))
            ]
            query_age = float(rng.uniform(50.0, 60.0))

            vec = blup(fit, history, query_age, s_cut=50.0)
            expected = _gls_oracle(fit, history, query_age)

            for f in FACTORS:
                assert vec.values[f] == pytest.approx(expected[f], abs=1e-8)

    def test_linear_in_observations(self, lmem_fit_factory):
        fit = lmem_fit_factory(center_age=50.0)
        rng = np.random.default_rng(3)
        ages = [44.0, 46.5, 48.0, 49.0, 49.5]
        factors = ["sbp", "hdl", "sbp", "bmi", "tchol"]
        y1, y2 = rng.normal(size=5), rng.normal(size=5)

        def at_55(y):
            history = [Measurement(a, f, float(v)) for a, f, v in zip(ages, factors, y)]
            return blup(fit, history, 55.0, s_cut=50.0).values

        combined = at_55(2.0 * y1 - 0.5 * y2)
        v1, v2 = at_55(y1), at_55(y2)

        for f in FACTORS:
            assert combined[f] == pytest.approx(2.0 * v1[f] - 0.5 * v2[f], abs=1e-10)

    def test_reproduces_observed_value_at_query_age(self, lmem_fit_factory):
        fit = lmem_fit_factory(center_age=50.0, sigma_e=1e-6)
        history = [Measurement(45.0, "sbp", 0.3), Measurement(50.0, "sbp", 0.8)]

        vec = blup(fit, history, 50.0)

        assert vec.values["sbp"] == pytest.approx(0.8, abs=1e-6)

    def test_noiseless_line_is_extrapolated(self, lmem_fit_factory):
        fit = lmem_fit_factory(center_age=50.0, sigma_e=1e-4)
        history = [Measurement(a, "sbp", 0.1 + 0.2 * (a - 50.0)) for a in (46.0, 47.0, 48.0, 49.0, 50.0)]

        vec = blup(fit, history, 55.0, s_cut=50.0)

        assert vec.values["sbp"] == pytest.approx(1.1, abs=1e-4)

    def test_large_noise_shrinks_to_population_line(self, lmem_fit_factory):
        fit = lmem_fit_factory(center_age=50.0, intercepts={"sbp": 0.4}, sigma_e=1e4)
        history = [Measurement(48.0, "sbp", 3.0), Measurement(49.0, "sbp", 2.5)]

        vec = blup(fit, history, 50.0)

        assert vec.values["sbp"] == pytest.approx(0.4, abs=1e-6)


class TestFitLmem:
    @pytest.fixture(scope="class")
    def cohort(self) -> Cohort:
        return simulate_cohort(SimConfig(n_persons=400, n_practices=4, seed=21))

    @pytest.fixture(scope="class")
    def fit(self, cohort):
        return fit_lmem(cohort, center_age=50.0)

    def test_log_likelihood_is_monotone(self, fit):
        history = np.array(fit.log_likelihood_history)
        assert len(history) >= 2
        assert np.all(np.diff(history) >= -1e-6 * np.abs(history[:-1]))
        assert fit.log_likelihood == pytest.approx(history[-1])

    def test_recovers_simulated_parameters(self, cohort, fit):
        assert fit.beta["sbp_slope"] == pytest.approx(0.03, abs=0.015)
        assert fit.sigma_e["sbp"] == pytest.approx(0.5, abs=0.1)
        assert fit.n_persons == cohort.measurements["person_id"].nunique()
        assert fit.center_age == 50.0

    def test_sigma_is_positive_semidefinite(self, fit):
        assert np.linalg.eigvalsh(fit.sigma_array()).min() > -1e-8

    def test_log_likelihood_drop_raises(self, cohort, monkeypatch):
        original = lmem_engine._m_step

        def inflated_m_step(*args, **kwargs):
            sigma, s2 = original(*args, **kwargs)
            return sigma, s2 * 50.0

        monkeypatch.setattr(lmem_engine, "_m_step", inflated_m_step)

        with pytest.raises(NumericError, match="対数尤度"):
            fit_lmem(cohort, center_age=50.0)

    def test_requires_two_persons(self, cohort):
        one = cohort.subset(cohort.person_ids[:1])

        with pytest.raises(DataError):
            fit_lmem(one)

    def test_missing_outcome_raises(self, cohort):
        m = cohort.measurements
        without_hdl = Cohort(cohort.persons, m[m["factor"] != "hdl"].copy())

        with pytest.raises(DataError, match="hdl"):
            fit_lmem(without_hdl)

    def test_accepts_records(self, cohort):
        records = cohort.subset(cohort.person_ids[:150]).records()

        fit = fit_lmem(records, center_age=50.0)

        assert fit.n_persons == len({r.person_id for r in records if r.measurements})


class TestLmemRecovery:
    """既知の (β, Σ, σ_e) から生成した 2,000 人での推定精度"""

    @pytest.fixture(scope="class")
    def config(self) -> SimConfig:
        return SimConfig(n_persons=2000, n_practices=4, visit_rate=0.3, seed=5, **TRAJECTORY_ONLY)

    @pytest.fixture(scope="class")
    def fit(self, config):
        return fit_lmem(simulate_cohort(config), center_age=config.reference_age)

    def test_fixed_effects_within_three_se(self, config, fit):
        for f in FACTORS:
            intercept, slope = config.true_beta_lmem[f]
            for name, truth in ((f"{f}_intercept", intercept), (f"{f}_slope", slope)):
                se = fit.beta_se[name]
                assert se is not None and se > 0
                assert abs(fit.beta[name] - truth) <= 3.0 * se, name

    def test_untreated_cohort_fixes_treatment_terms(self, fit):
        assert fit.beta["sbp_bpm"] == 0.0
        assert fit.beta_se["sbp_bpm"] is None
        assert fit.beta_se["tchol_statin"] is None

    def test_sigma_diagonal_within_15_percent(self, config, fit):
        truth = np.diag(np.asarray(config.true_sigma))
        estimate = np.diag(fit.sigma_array())

        np.testing.assert_allclose(estimate, truth, rtol=0.15)

    def test_residual_sd(self, config, fit):
        for f in FACTORS:
            assert fit.sigma_e[f] == pytest.approx(config.true_sigma_e[f], rel=0.05)


def test_noiseless_data_gives_exact_fit():
    config = SimConfig(
        n_persons=300,
        n_practices=2,
        true_sigma=np.zeros((10, 10)).tolist(),
        true_sigma_e={f: 1e-4 for f in FACTORS},
        seed=9,
        **TRAJECTORY_ONLY,
    )

    fit = fit_lmem(simulate_cohort(config), LmemSpec(max_iter=50), center_age=60.0)

    for f in FACTORS:
        intercept, slope = config.true_beta_lmem[f]
        assert fit.beta[f"{f}_intercept"] == pytest.approx(intercept, abs=1e-5)
        assert fit.beta[f"{f}_slope"] == pytest.approx(slope, abs=1e-5)


def test_flat_trajectories_give_zero_slopes():
    config = SimConfig(
        n_persons=300,
        n_practices=2,
        true_beta_lmem={f: (0.1 * k, 0.0) for k, f in enumerate(FACTORS)},
        true_sigma=np.diag([0.49] * 5 + [0.0] * 5).tolist(),
        true_sigma_e={f: 1e-3 for f in FACTORS},
        seed=13,
        **TRAJECTORY_ONLY,
    )

    fit = fit_lmem(simulate_cohort(config), LmemSpec(max_iter=50), center_age=60.0)

    for f in FACTORS:
        assert fit.beta[f"{f}_slope"] == pytest.approx(0.0, abs=1e-4)


def test_unknown_factor_raises():
    persons = Cohort.empty().persons
    measurements = pd.DataFrame(
        {
            "person_id": [1, 2],
            "practice_id": [0, 0],
            "age": [40.0, 41.0],
            "factor": ["ldl", "ldl"],
            "value": [0.1, 0.2],
            "bpm": [0, 0],
            "statin": [0, 0],
        }
    )

    with pytest.raises(DataError):
        fit_lmem(Cohort(persons, measurements))
