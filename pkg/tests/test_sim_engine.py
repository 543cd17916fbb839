import numpy as np
import pytest

from pdtr import (
    DataValidationError,
    FixedRegime,
    GenerativeModel,
    MCConfig,
    NumericalError,
    draw_trajectory,
    oracle_conditional_value,
    run_mc,
)
from pdtr import sim_engine, streams
from pdtr.sim_engine import DELTA_DEFAULTS, parse_method
from pdtr.streams import substream


class TestLatentDisplays:
    def test_s1_frozen_noise_points(self):
        model = GenerativeModel("s1")
        X1 = np.zeros((1, 3))
        X2 = np.zeros((1, 3))
        a1 = np.array([1.0])
        a2 = np.array([1.0])
        Z = model._latents(X1, a1, X2, a2, np.zeros((1, 3)))
        assert Z[0, 0] == pytest.approx(0.1)   # -0.7 + 0.3 + 0.5
        assert Z[0, 1] == pytest.approx(1.5)   # +0.7 + 0.3 + 0.5
        assert Z[0, 2] == pytest.approx(0.1)   # gamma row 3: only the a2 term at this point

    def test_s3_frozen_noise_point(self):
        model = GenerativeModel("s3")
        X2 = np.array([[0.0, 0.0, 1.0, 0.0]])
        Z = model._latents(np.zeros((1, 4)), np.array([1.0]), X2, np.array([1.0]),
                           np.zeros((1, 3)))
        assert Z[0, 0] == pytest.approx(3.0)   # 1.5 * (0.5 + 1 + 0.5)
        assert Z[0, 1] == pytest.approx(-3.0)
        assert Z[0, 2] == pytest.approx(2.0 * (0.75 - 1 + 0.75))

    def test_outcome_table_override(self):
        model = GenerativeModel("s1", outcome_coefs=np.eye(3))
        data = model.simulate(50, substream(0, streams.SIM))
        model2 = GenerativeModel("s1")
        data2 = model2.simulate(50, substream(0, streams.SIM))
        # same latent draws, different outcome map
        np.testing.assert_allclose(data.Y[:, 0], data2.Y[:, 0])
        assert not np.allclose(data.Y[:, 2], data2.Y[:, 2])

    def test_delta_defaults(self):
        for design, want in DELTA_DEFAULTS.items():
            np.testing.assert_allclose(GenerativeModel(design).delta, want)


class TestSimulate:
    def test_uniform_assignment_frequencies(self):
        model = GenerativeModel("s2")
        data = model.simulate(100_000, substream(3, streams.SIM))
        for k in range(2):
            freq = data.A[k].mean()
            assert abs(freq - 0.5) < 0.005
            np.testing.assert_allclose(data.prop[k], 0.5)

    def test_regime_draw_records_unit_propensity(self):
        model = GenerativeModel("s1")
        ref = model.simulate(2, substream(0, streams.SIM))
        reg = FixedRegime([1, 0], ref.action_codes)
        data = model.simulate(100, substream(1, streams.SIM), regime=reg)
        assert (data.A[0] == 1).all() and (data.A[1] == 0).all()
        np.testing.assert_allclose(data.prop[0], 1.0)

    def test_common_random_numbers_across_regimes(self):
        # same stream, different regimes: identical baseline covariates
        model = GenerativeModel("s3")
        ref = model.simulate(2, substream(0, streams.SIM))
        ra = FixedRegime([1, 1], ref.action_codes)
        rb = FixedRegime([0, 0], ref.action_codes)
        da = model.simulate(50, substream(9, streams.SIM), regime=ra)
        db = model.simulate(50, substream(9, streams.SIM), regime=rb)
        np.testing.assert_array_equal(da.X[0], db.X[0])
        assert not np.allclose(da.Y, db.Y)

    def test_draw_trajectory_single(self):
        model = GenerativeModel("s4")
        t = draw_trajectory(model, None, substream(2, streams.SIM))
        assert len(t.stage_covariates) == 2
        assert len(t.outcomes) == 3

    def test_invalid_design_rejected(self):
        with pytest.raises(DataValidationError):
            GenerativeModel("s9")


class TestOracle:
    def test_s3_antisymmetry(self):
        model = GenerativeModel("s3")
        ref = model.simulate(2, substream(0, streams.SIM))
        reg = FixedRegime([1, 1], ref.action_codes)
        o = oracle_conditional_value(model, reg, 100_000, seed=11)
        se = np.sqrt(o.se[0] ** 2 + o.se[2] ** 2)
        assert abs(o.value[0] + o.value[2]) < 3 * se

    def test_s1_uniform_regime_mean_zero(self):
        model = GenerativeModel("s1")
        o = oracle_conditional_value(model, None, 1_000_000, seed=12)
        assert abs(o.value[0]) < 3 * o.se[0]

    def test_single_draw(self):
        model = GenerativeModel("s1")
        o = oracle_conditional_value(model, None, 1, seed=13)
        assert o.value.shape == (3,)


class TestMethodParsing:
    def test_known_methods(self):
        assert parse_method("prioritized") == ("prioritized", None)
        assert parse_method("qlearn_per_outcome") == ("qlearn", 1)
        assert parse_method("qlearn_per_outcome:3") == ("qlearn", 3)
        assert parse_method("composite_average") == ("composite_average", None)
        assert parse_method("tuned_composite") == ("tuned_composite", None)
        assert parse_method("fixed:1,-1") == ("fixed", [1.0, -1.0])

    def test_unknown_method_rejected(self):
        with pytest.raises(DataValidationError):
            parse_method("magic")
        with pytest.raises(DataValidationError):
            MCConfig(methods=("magic",), seed=0)

    def test_composite_average_uses_plain_mean(self):
        # the composite-average comparator trains on the unweighted mean outcome
        from pdtr.sim_engine import _fit_method
        from pdtr.q_regression import fit_greedy_qlearning
        from pdtr.data_model import standardize_outcomes
        model = GenerativeModel("s1")
        data = model.simulate(400, substream(4, streams.SIM))
        reg = _fit_method("composite_average", None, data, standardize_outcomes(data),
                          None, None, None)
        want = fit_greedy_qlearning(data, data.Y.mean(axis=1))
        got = reg.stage_actions(0, [data.X[0]], [], data.feas[0])
        np.testing.assert_array_equal(got, want.stage_actions(0, [data.X[0]], [], data.feas[0]))


class TestRunMC:
    def small_cfg(self, **kw):
        base = dict(n=120, reps=2, test_size=500, seed=77, n_lambda=20,
                    methods=("prioritized", "qlearn_per_outcome", "fixed:1,1"))
        base.update(kw)
        return MCConfig(**base)

    def test_single_rep_deterministic(self, tmp_path):
        model = GenerativeModel("s1")
        cfg = self.small_cfg(reps=1)
        r1 = run_mc(model, cfg)
        r2 = run_mc(model, cfg)
        assert repr(r1.aggregate()) == repr(r2.aggregate())  # nan-safe equality
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        r1.write_csv(str(p1))
        r2.write_csv(str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_worker_count_does_not_change_results(self):
        model = GenerativeModel("s1")
        r1 = run_mc(model, self.small_cfg(workers=1))
        r2 = run_mc(model, self.small_cfg(workers=2))
        assert r1.aggregate() == r2.aggregate()

    def test_failed_replications_excluded(self, monkeypatch):
        model = GenerativeModel("s1")
        real = sim_engine.run_replication

        def flaky(m, cfg, r):
            if r == 1:
                raise RuntimeError("boom")
            return real(m, cfg, r)

        monkeypatch.setattr(sim_engine, "run_replication", flaky)
        res = run_mc(model, self.small_cfg(reps=21))
        assert len(res.failures) == 1
        assert len(res.records) == 20
        assert res.aggregate()[0]["reps"] == 20

    def test_too_many_failures_abort(self, monkeypatch):
        model = GenerativeModel("s1")

        def broken(m, cfg, r):
            raise RuntimeError("boom")

        monkeypatch.setattr(sim_engine, "run_replication", broken)
        with pytest.raises(NumericalError, match="aborting"):
            run_mc(model, self.small_cfg(reps=4))

    def test_record_fields(self):
        model = GenerativeModel("s1")
        res = run_mc(model, self.small_cfg(reps=1))
        rec = res.records[0]["methods"]["prioritized"]
        assert set(rec) >= {"oracle", "aipw", "lo", "hi", "covered"}
        assert len(rec["oracle"]) == 3
        rows = res.aggregate()
        assert {r["method"] for r in rows} == {"prioritized", "qlearn_per_outcome", "fixed:1,1"}
        for row in rows:
            assert set(row) == {"design", "method", "outcome", "mean_value", "mc_se",
                                "coverage", "reps", "n", "seed"}
