"""検証指標のテスト"""

import numpy as np
import pytest

from src.agents.landmark import fit_landmark_models
from src.agents.validator import ValidatorAgent
from src.core.exceptions import DataError
from src.domain.models import FACTORS, CIndexResult, PredictionRow, PredictionSet, SimConfig
from src.engines.cohort_sim import simulate_cohort, split_practices
from src.engines.validation import (
    brier_score,
    constant_brier,
    dynamic_cindex,
    kaplan_meier,
    overall_cindex,
)


def _preds(risk, time, event, s=50.0, w=5.0) -> PredictionSet:
    return PredictionSet(
        rows=[
            PredictionRow(
                person_id=i,
                s=s,
                w=w,
                predicted_risk=float(r),
                observed_time=float(t),
                observed_status="event" if e else "censored",
            )
            for i, (r, t, e) in enumerate(zip(risk, time, event))
        ]
    )


class TestCIndex:
    def test_perfect_ordering(self):
        time = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        preds = _preds(1.0 / time, time, [True] * 5)

        result = dynamic_cindex(preds)

        assert result.value == 1.0
        assert result.n_pairs == 10

    def test_identical_predictions(self):
        time = np.array([1.0, 2.0, 3.0, 4.0])
        preds = _preds(np.full(4, 0.1), time, [True, False, True, False])

        assert dynamic_cindex(preds).value == 0.5

    def test_random_predictions(self):
        rng = np.random.default_rng(0)
        n = 10_000
        time = rng.uniform(0.1, 8.0, size=n)
        preds = _preds(rng.random(n), time, rng.random(n) < 0.5)

        assert dynamic_cindex(preds).value == pytest.approx(0.5, abs=0.02)

    def test_invariant_to_monotone_transform(self):
        rng = np.random.default_rng(1)
        risk = rng.random(300)
        time = rng.exponential(1.0 / (0.05 + risk))
        event = rng.random(300) < 0.7

        original = dynamic_cindex(_preds(risk, time, event))
        transformed = dynamic_cindex(_preds(np.log(risk), time, event))

        assert transformed.value == original.value

    def test_events_after_window_are_not_cases(self):
        preds = _preds([0.9, 0.1], [6.0, 7.0], [True, True])

        with pytest.raises(DataError):
            dynamic_cindex(preds)

    def test_event_at_window_end_is_not_a_case(self):
        preds = _preds([0.9, 0.5, 0.3, 0.1], [5.0, 5.0, 6.0, 2.0], [True, False, False, True])

        result = dynamic_cindex(preds)

        assert result.n_pairs == 3
        assert result.value == 0.0

    def test_overall_is_pair_weighted(self):
        results = [
            CIndexResult(value=0.8, se=0.01, n_pairs=100),
            CIndexResult(value=0.6, se=0.01, n_pairs=300),
        ]

        assert overall_cindex(results).value == pytest.approx(0.65)


class TestBrier:
    def test_perfect_predictions(self):
        time = np.array([1.0, 2.0, 5.0, 5.0])
        event = np.array([True, True, False, False])

        assert brier_score(_preds(event.astype(float), time, event)) == 0.0

    def test_constant_prediction_without_censoring(self):
        event = np.array([True] * 3 + [False] * 7)
        time = np.where(event, 2.0, 5.0)
        p, q = 0.2, 0.3

        value = brier_score(_preds(np.full(10, p), time, event))

        assert value == pytest.approx(q * (1 - p) ** 2 + (1 - q) * p**2)

    def test_marginal_baseline_without_censoring(self):
        event = np.array([True] * 3 + [False] * 7)
        time = np.where(event, 2.0, 5.0)

        assert constant_brier(_preds(np.full(10, 0.9), time, event)) == pytest.approx(0.3 * 0.7)

    def test_constant_prediction_minimized_at_event_rate(self):
        event = np.array([True] * 3 + [False] * 7)
        time = np.where(event, 2.0, 5.0)
        grid = np.linspace(0.0, 1.0, 101)

        scores = [brier_score(_preds(np.full(10, p), time, event)) for p in grid]

        assert grid[int(np.argmin(scores))] == pytest.approx(0.3)

    def test_ipcw_recovers_uncensored_score(self):
        rng = np.random.default_rng(4)
        n = 20_000
        w = 5.0
        rate = 0.05 * np.exp(rng.normal(size=n))
        t_event = rng.exponential(1.0 / rate)
        t_censor = rng.uniform(0.0, 15.0, size=n)
        risk = 1.0 - np.exp(-w * rate)

        outcome = t_event <= w
        oracle = float(np.mean((outcome - risk) ** 2))

        time = np.minimum(np.minimum(t_event, t_censor), w)
        event = t_event <= np.minimum(t_censor, w)
        estimate = brier_score(_preds(risk, time, event, w=w))

        assert estimate == pytest.approx(oracle, abs=0.01)

    def test_empty_raises(self):
        with pytest.raises(DataError):
            brier_score(PredictionSet())


def test_kaplan_meier_steps():
    kmf = kaplan_meier(np.array([1.0, 2.0, 2.0, 3.0]), np.array([True, True, False, True]))

    values = kmf.survival_function_at_times([0.5, 1.0, 2.0, 3.0]).to_numpy()

    np.testing.assert_allclose(values, [1.0, 0.75, 0.75 * 2 / 3, 0.0])


class TestValidatorOnSimulatedCohort:
    """既知の比例ハザードから生成したコホートでの導出・検証"""

    @pytest.fixture(scope="class")
    def results(self):
        base = SimConfig().true_cox_beta
        config = SimConfig(
            n_persons=6000,
            n_practices=6,
            baseline_hazard_rate=0.002,
            true_cox_beta={k: 2.0 * v if k in FACTORS else v for k, v in base.items()},
            seed=101,
        )
        derivation, validation = split_practices(simulate_cohort(config), 2 / 3, seed=3)
        agent = ValidatorAgent()
        return [
            agent.validate(fit_landmark_models(derivation, la, townsend_mode="numeric"), validation)
            for la in (50, 60)
        ]

    def test_overall_cindex_above_chance(self, results):
        table = ValidatorAgent.metrics_table(results)

        overall = table[table["level"] == "overall"].iloc[0]
        assert overall["c_index"] > 0.7

    def test_brier_beats_constant_at_every_landmark(self, results):
        for res in results:
            landmark = [row for row in res.rows if row["level"] == "landmark"][0]
            assert landmark["n_events"] > 0
            assert landmark["brier"] < landmark["brier_constant"]
