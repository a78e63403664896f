import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markov_sa.analysis import (MAX_C_IND, AnalysisError, InsufficientCheckpoints, concentration_ensemble,
                                concentration_shape, dumps, fit_as_rate, lp_moment_curve, moment_curve,
                                run_ensemble, summarize_concentration, write_summary_json)
from markov_sa.chain import TransitionKernel
from markov_sa.engine import TrajectoryRecord, UpdateMap, checkpoint_times
from markov_sa.schedule import StepSizeSchedule

LR1 = StepSizeSchedule("LR1", 1.0, 0.9)  # polynomial regime, zeta in (0, 0.35)
LR2 = StepSizeSchedule("LR2", 10.0, 0.5)
K2 = TransitionKernel([[0.3, 0.7], [0.6, 0.4]])


def synthetic(errors_fn, schedule=LR1, steps=10**6, seed=0):
    t = checkpoint_times(steps, 1.1)
    err = errors_fn(np.maximum(t, 1).astype(float))
    return TrajectoryRecord(seed, schedule, t, err, None, np.zeros(1), 0)


def constant_map(value=1.0):
    """Noise-free H(w, y) = value: every seed sees the same trajectory."""
    c = np.full(2, value)
    return UpdateMap(2, 2, lambda w, y: c, lambda w: c, c.copy(), 0.0, name="const")


class TestRateFit:
    @pytest.mark.parametrize("beta", [0.3, 0.5, 0.8])
    def test_recovers_slope(self, beta):
        rng = np.random.default_rng(1)
        rec = synthetic(lambda t: t**-beta * np.exp(rng.normal(0, 0.05, t.size)))
        assert fit_as_rate(rec, 0.1, decades=2).slope == pytest.approx(-beta, abs=0.02)

    def test_fast_decay_passes(self):
        fit = fit_as_rate(synthetic(lambda t: 5 * t**-0.8), 0.3, decades=2)
        assert fit.verdict and all(r == pytest.approx(10**-0.5, rel=0.05) for r in fit.decade_ratios)

    def test_constant_error_fails(self):
        fit = fit_as_rate(synthetic(lambda t: np.ones_like(t)), 0.3)
        assert not fit.verdict and fit.decade_ratios[0] >= 1

    def test_borderline_fails(self):
        # weighted error decays like t^{-0.25}: a decade only shrinks it by 10^{-0.25} = 0.56
        assert not fit_as_rate(synthetic(lambda t: t**-0.55), 0.3).verdict

    @given(st.lists(st.floats(1e-12, 1e6), min_size=200, max_size=200))
    @settings(max_examples=30)
    def test_envelope_non_increasing(self, xs):
        rec = synthetic(lambda t: np.resize(np.array(xs), t.size))
        env = fit_as_rate(rec, 0.2).envelope
        assert np.all(np.diff(env[:, 1]) <= 0)
        assert np.all(env[:, 1] >= env[:, 0] ** 0.2 * rec.errors[rec.times >= 1])

    def test_insufficient_checkpoints(self):
        with pytest.raises(InsufficientCheckpoints):
            fit_as_rate(synthetic(lambda t: 1 / t, steps=500), 0.2)

    def test_zeta_range(self):
        rec = synthetic(lambda t: 1 / t, schedule=StepSizeSchedule("LR1", 1.0, 0.9))
        with pytest.raises(AnalysisError):
            fit_as_rate(rec, 0.36)
        fit_as_rate(rec, 0.34)

    def test_w_star_needs_iterates(self):
        with pytest.raises(AnalysisError):
            fit_as_rate(synthetic(lambda t: 1 / t), 0.2, w_star=[0.0])

    def test_exp_regime(self):
        rec = synthetic(lambda t: np.exp(-2 * np.log(t + 1) ** (2 / 3)), schedule=LR2)
        fit = fit_as_rate(rec, 1.0, regime="exp")
        assert fit.regime == "exp" and fit.verdict
        flat = fit_as_rate(synthetic(lambda t: np.ones_like(t), schedule=LR2), 1.0, regime="exp")
        assert not flat.verdict

    def test_csv(self, tmp_path):
        fit = fit_as_rate(synthetic(lambda t: 1 / t), 0.2)
        fit.to_csv(tmp_path / "e.csv")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "t,envelope" and len(lines) == fit.envelope.shape[0] + 1


class TestShape:
    def test_values(self):
        shape, b = concentration_shape([0, math.e - 1], 0.5)
        assert b.tolist() == [0.0, 2.0]
        assert shape[1] == pytest.approx(math.exp(-2))


@pytest.fixture(scope="module")
def q_summary(qmap, triple_chain):
    return concentration_ensemble(qmap, triple_chain.kernel, LR2, 120, 3000, 9, jobs=4)


class TestConcentration:
    def test_rejects_lr1(self, qmap, triple_chain):
        with pytest.raises(AnalysisError):
            concentration_ensemble(qmap, triple_chain.kernel, StepSizeSchedule("LR1", 10.0, 0.9), 100, 100, 0)

    def test_min_seeds(self, qmap, triple_chain):
        with pytest.raises(AnalysisError):
            concentration_ensemble(qmap, triple_chain.kernel, LR2, 99, 100, 0)

    def test_deterministic_map_has_flat_quantiles(self):
        s = concentration_ensemble(constant_map(), K2, LR2, 100, 2000, 3, w0=np.array([5.0, -5.0]))
        assert np.all(s.quantiles == s.quantiles[0]) and s.quantile_slope == 0.0
        assert s.c_ind == 1 and s.polylog_ok and np.all(s.coverage == 1.0)

    def test_quantiles_monotone(self, q_summary):
        s = q_summary
        assert np.all(np.diff(s.quantiles) >= 0)
        assert s.n_divergent == 0 and 1 <= s.c_ind <= MAX_C_IND

    def test_coverage(self, q_summary):
        for d in q_summary.deltas:
            assert q_summary.coverage_at(d) >= 1 - d

    def test_reproducible(self, q_summary, qmap, triple_chain):
        again = concentration_ensemble(qmap, triple_chain.kernel, LR2, 120, 3000, 9, jobs=2)
        assert np.array_equal(again.max_weighted, q_summary.max_weighted)
        assert np.array_equal(again.weighted_at, q_summary.weighted_at)

    def test_divergent_seed_counted(self):
        deltas = np.array([0.5, 0.1])
        M = np.array([1.0, 2.0, math.nan, 3.0])
        S = np.ones((4, MAX_C_IND, 2))
        S[2] = math.nan
        s = summarize_concentration(M, S, deltas, np.arange(4), 1)
        assert s.n_divergent == 1 and not s.ok
        assert np.all(s.coverage <= 0.75)

    def test_to_dict_is_json(self, q_summary, tmp_path):
        write_summary_json(tmp_path / "s.json", concentration=q_summary)
        doc = json.loads((tmp_path / "s.json").read_text())
        assert doc["concentration"]["n_seeds"] == 120


class TestEnsemble:
    def test_members_distinct_and_reproducible(self, qmap, triple_chain):
        a = run_ensemble(qmap, triple_chain.kernel, LR2, 500, 4, 11, jobs=2)
        b = run_ensemble(qmap, triple_chain.kernel, LR2, 500, 4, 11, jobs=1)
        assert all(np.array_equal(x.final, y.final) for x, y in zip(a, b))
        assert not np.array_equal(a[0].final, a[1].final)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_members_are_none(self):
        # H overflows within a few dozen steps from any start
        m = UpdateMap(1, 2, lambda w, y: 1e10 * (np.asarray(w) + 1), lambda w: 1e10 * (np.asarray(w) + 1),
                      np.array([-1.0]), 0.0)
        assert run_ensemble(m, K2, LR2, 200, 3, 0) == [None, None, None]


class TestMoments:
    def test_geometric_decay(self):
        t = np.array([10, 100, 1000, 10_000])
        err = np.tile(1.0 / t, (100, 1))
        c = moment_curve(t, err, 2)
        assert np.allclose(c.mean, 1.0 / t.astype(float) ** 2) and c.decreasing
        assert np.all(c.stderr <= 1e-12 * c.mean)

    def test_jensen_ordering(self):
        rng = np.random.default_rng(0)
        t = np.arange(1, 11)
        err = rng.exponential(size=(200, 10)) / t
        m2, m3 = moment_curve(t, err, 2).mean, moment_curve(t, err, 3).mean
        first = err.mean(axis=0)
        assert np.all(m2 >= first**2) and np.all(m3 ** (1 / 3) >= m2 ** (1 / 2) * (1 - 1e-12))

    def test_min_seeds_and_p(self):
        with pytest.raises(AnalysisError):
            moment_curve([1, 2], np.ones((99, 2)), 2)
        with pytest.raises(AnalysisError):
            moment_curve([1, 2], np.ones((100, 2)), 1)

    def test_divergent_records_rejected(self):
        with pytest.raises(AnalysisError):
            lp_moment_curve([None], 2, min_seeds=1)

    def test_from_records(self, qmap, triple_chain):
        recs = run_ensemble(qmap, triple_chain.kernel, LR2, 20_000, 100, 5)
        c = lp_moment_curve(recs, 2)
        assert c.n_seeds == 100 and c.mean[-1] < c.mean[0]


def test_dumps_unwraps_numpy():
    doc = json.loads(dumps({"a": np.float64(0.1), "b": np.bool_(True), "c": np.arange(2)}))
    assert doc == {"a": 0.1, "b": True, "c": [0, 1]}
