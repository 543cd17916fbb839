import numpy as np
import pytest
from scipy.stats import norm

from pdtr import FixedRegime, GenerativeModel, NumericalError, backward_induce, conditional_value, fit_stage_K
from pdtr.data_model import Dataset, History
from pdtr.q_regression import (
    FeatureBasis,
    LinearEngine,
    QModelStack,
    SaturatedEngine,
    StageInputs,
    TreeEngine,
    design_matrix,
    fit_greedy_qlearning,
)
from pdtr import streams

from _oracles import DiscreteInstance
from test_data_model import make_dataset


def dataset_from_arrays(X1, A1, X2, A2, Y):
    n = len(A1)
    feas = np.ones((n, 2), dtype=bool)
    return Dataset(
        X=[X1, X2], A=[A1.astype(np.int64), A2.astype(np.int64)],
        feas=[feas, feas.copy()], prop=[np.full(n, 0.5), np.full(n, 0.5)],
        Y=Y if Y.ndim == 2 else Y[:, None],
        action_codes=[np.array([0, 1]), np.array([0, 1])],
        action_values=[np.array([-1.0, 1.0]), np.array([-1.0, 1.0])],
        outcome_names=[f"y_{j+1}" for j in range(Y.shape[1] if Y.ndim == 2 else 1)],
    )


class TestStageKFit:
    def test_constant_outcome_predицts_constant(self):
        d = make_dataset(n=60, seed=0)
        Y = np.full((60, 1), 2.75)
        model = fit_stage_K(d, targets=Y)
        si = StageInputs.from_dataset(d, 1)
        np.testing.assert_allclose(model.predict(si, d.A[1]), 2.75, atol=1e-9)

    def test_exact_linear_recovery(self):
        # noiseless data generated inside the basis span: fit interpolates
        rng = np.random.default_rng(5)
        n = 400
        X1 = rng.normal(size=(n, 2))
        A1 = rng.integers(0, 2, size=n)
        X2 = rng.normal(size=(n, 1))
        A2 = rng.integers(0, 2, size=n)
        sv = np.array([-1.0, 1.0])
        a1, a2 = sv[A1], sv[A2]
        Y = (0.3 + 1.2 * X1[:, 0] - 0.7 * X1[:, 1] + 0.4 * a1 + 0.9 * X2[:, 0]
             + 0.6 * a2 + 0.8 * X2[:, 0] * a2 - 0.5 * a1 * a2)
        d = dataset_from_arrays(X1, A1, X2, A2, Y)
        model = fit_stage_K(d)
        si = StageInputs.from_dataset(d, 1)
        np.testing.assert_allclose(model.predict(si, d.A[1])[:, 0], Y, atol=1e-8)

    def test_two_point_saturated(self):
        # n = d: intercept + one feature interpolates both points exactly
        X1 = np.array([[0.0], [1.0]])
        d = Dataset(
            X=[X1], A=[np.array([0, 0])], feas=[np.ones((2, 1), dtype=bool)],
            prop=[np.ones(2)], Y=np.array([[1.0], [3.0]]),
            action_codes=[np.array([0])], action_values=[np.array([1.0])],
            outcome_names=["y_1"],
        )
        model = fit_stage_K(d)
        si = StageInputs.from_dataset(d, 0)
        np.testing.assert_allclose(model.predict(si, d.A[0]), d.Y, atol=1e-8)

    def test_rank_deficiency_reported_with_condition_number(self):
        rng = np.random.default_rng(1)
        n = 50
        X1 = np.zeros((n, 2))
        X1[:, 0] = rng.normal(size=n) * 1e9
        X1[:, 1] = X1[:, 0]  # exact collinearity at huge scale
        d = Dataset(
            X=[X1], A=[rng.integers(0, 2, size=n).astype(np.int64)],
            feas=[np.ones((n, 2), dtype=bool)], prop=[np.full(n, 0.5)],
            Y=rng.normal(size=(n, 1)),
            action_codes=[np.array([0, 1])], action_values=[np.array([-1.0, 1.0])],
            outcome_names=["y_1"],
        )
        with pytest.raises(NumericalError, match="condition number"):
            fit_stage_K(d)

    def test_benign_collinearity_survives_via_ridge(self):
        rng = np.random.default_rng(2)
        n = 80
        X1 = rng.normal(size=(n, 2))
        X1[:, 1] = X1[:, 0]  # unit-scale duplicate column
        d = dataset_from_arrays(X1, rng.integers(0, 2, n), rng.normal(size=(n, 1)),
                                rng.integers(0, 2, n), rng.normal(size=n))
        model = fit_stage_K(d)
        si = StageInputs.from_dataset(d, 1)
        assert np.isfinite(model.predict(si, d.A[1])).all()

    def test_more_features_than_rows_rejected(self):
        d = make_dataset(n=5)
        with pytest.raises(NumericalError, match="features"):
            fit_stage_K(d)


class TestBackwardInduce:
    def test_k1_recursion_base(self):
        d = make_dataset(n=50, seed=3)
        d1 = Dataset(X=[d.X[0]], A=[d.A[0]], feas=[d.feas[0]], prop=[d.prop[0]], Y=d.Y,
                     action_codes=[d.action_codes[0]], action_values=[d.action_values[0]],
                     outcome_names=d.outcome_names)
        stack = backward_induce(d1)
        assert stack.K == 1
        ref = fit_stage_K(d1)
        np.testing.assert_array_equal(stack.stage_models[0].coef, ref.coef)

    def test_s3_fixed_regime_matches_analytic_value(self):
        # Always-(+1,+1): marginal values are exactly (3, 0, -3)
        model = GenerativeModel("s3")
        data = model.simulate(5000, streams.substream(7, streams.SIM))
        reg = FixedRegime([1, 1], data.action_codes)
        stack = backward_induce(data, downstream_rule=reg)
        si1 = stack.inputs(data, 0)
        a1 = reg.stage_actions(0, [data.X[0]], [], data.feas[0])
        fitted = stack.predict(si1, a1)
        # pseudo-outcome spread dominates the Monte Carlo error of the mean
        si2 = stack.inputs(data, 1)
        a2 = reg.stage_actions(1, [data.X[0], data.X[1]], [data.A[0]], data.feas[1])
        pseudo = stack.stage_models[1].predict(si2, a2)
        se = pseudo.std(axis=0, ddof=1) / np.sqrt(data.n)
        target = np.array([3.0, 0.0, -3.0])
        assert np.all(np.abs(fitted.mean(axis=0) - target) < 3 * se + 1e-9)

    def test_downstream_rule_changes_stage1_not_stageK(self):
        d = make_dataset(n=200, seed=4)
        s_a = backward_induce(d, downstream_rule=FixedRegime([0, 0], d.action_codes))
        s_b = backward_induce(d, downstream_rule=FixedRegime([0, 1], d.action_codes))
        np.testing.assert_array_equal(s_a.stage_models[1].coef, s_b.stage_models[1].coef)
        assert not np.allclose(s_a.stage_models[0].coef, s_b.stage_models[0].coef)

    def test_discrete_instance_matches_enumerated_means(self):
        # saturated fits at n=20000: all fitted cell values within 0.05 of truth
        rng = np.random.default_rng(11)
        data = DiscreteInstance.simulate(20_000, rng, noise_sd=0.2)
        reg = FixedRegime([1, 1], data.action_codes)
        stack = backward_induce(data, engine=SaturatedEngine(), downstream_rule=reg)
        si2 = stack.inputs(data, 1)
        fitted2 = stack.predict(si2, np.ones(data.n, dtype=np.int64))
        sv = np.array([-1.0, 1.0])
        truth2 = DiscreteInstance.mu(data.X[0][:, 0], sv[data.A[0]], data.X[1][:, 0], 1.0)
        assert np.abs(fitted2 - truth2).max() < 0.05
        # stage-1: exact mixture over P(X2 | X1, A1 = +1)
        si1 = stack.inputs(data, 0)
        fitted1 = stack.predict(si1, np.ones(data.n, dtype=np.int64))
        x1 = data.X[0][:, 0]
        p = np.where(x1 > 0, 0.75, 0.25)  # a1 = +1
        truth1 = (p[:, None] * DiscreteInstance.mu(x1, 1.0, 1.0, 1.0)
                  + (1 - p)[:, None] * DiscreteInstance.mu(x1, 1.0, 0.0, 1.0))
        assert np.abs(fitted1 - truth1).max() < 0.05


class TestConditionalValue:
    def test_stage_k_only_stack(self):
        d = make_dataset(n=60, seed=6)
        d1 = Dataset(X=[d.X[0]], A=[d.A[0]], feas=[d.feas[0]], prop=[d.prop[0]], Y=d.Y,
                     action_codes=[d.action_codes[0]], action_values=[d.action_values[0]],
                     outcome_names=d.outcome_names)
        stack = backward_induce(d1)
        h = History(stage=1, covariates=[d.X[0][3]], actions=[])
        si = stack.inputs(d1, 0)
        want = stack.predict(si, d1.A[0])[3]
        got = conditional_value(stack, h, int(d.action_codes[0][d.A[0][3]]), 0)
        assert got == pytest.approx(want[0], abs=1e-12)

    def test_saturated_training_point_equals_pseudo_outcome(self):
        rng = np.random.default_rng(3)
        data = DiscreteInstance.simulate(5000, rng, noise_sd=0.0)
        reg = FixedRegime([1, 1], data.action_codes)
        stack = backward_induce(data, engine=SaturatedEngine(), downstream_rule=reg)
        # noiseless saturated stage-2 fit equals mu exactly, so conditional_value
        # at (h1, a1) equals the empirical mixture of mu over observed X2 cells
        i = 17
        h = History(stage=1, covariates=[data.X[0][i]], actions=[])
        got = np.array([conditional_value(stack, h, 1, ell) for ell in range(2)])
        x1 = data.X[0][:, 0]
        rows = (x1 == x1[i]) & (data.A[0] == 1)
        emp = DiscreteInstance.mu(x1[i], 1.0, data.X[1][rows, 0], 1.0).mean(axis=0)
        np.testing.assert_allclose(got, emp, atol=1e-10)

    def test_enumeration_oracle_exact_on_discrete_instance(self):
        # exact finite-state computation vs the fitted pipeline, noiseless
        rng = np.random.default_rng(8)
        data = DiscreteInstance.simulate(30_000, rng, noise_sd=0.0)
        reg = FixedRegime([1, 1], data.action_codes)
        stack = backward_induce(data, engine=SaturatedEngine(), downstream_rule=reg)
        for x1 in DiscreteInstance.x1_support:
            h = History(stage=1, covariates=[np.array([x1])], actions=[])
            p = DiscreteInstance.p_x2(x1, 1.0)
            truth = (p * DiscreteInstance.mu(x1, 1.0, 1.0, 1.0)
                     + (1 - p) * DiscreteInstance.mu(x1, 1.0, 0.0, 1.0))
            got = np.array([conditional_value(stack, h, 1, ell) for ell in range(2)])
            # empirical X2 frequencies at n=30000: binomial error only
            assert np.abs(got - truth).max() < 0.05

    def test_outcome_index_out_of_range(self):
        d = make_dataset(n=50, seed=6)
        stack = backward_induce(d, downstream_rule=FixedRegime([0, 0], d.action_codes))
        h = History(stage=1, covariates=[d.X[0][0]], actions=[])
        with pytest.raises(Exception, match="out of range"):
            conditional_value(stack, h, 0, 7)


class TestEngineProperties:
    def test_linearity_in_targets(self):
        d = make_dataset(n=120, seed=7)
        engine = LinearEngine()
        si = StageInputs.from_dataset(d, 1)
        ya, yb = d.Y[:, 0], d.Y[:, 1]
        m_a = engine.fit_stage(si, d.A[1], ya)
        m_b = engine.fit_stage(si, d.A[1], yb)
        m_c = engine.fit_stage(si, d.A[1], 2.0 * ya - 3.5 * yb)
        pred = m_c.predict(si, d.A[1])[:, 0]
        combo = 2.0 * m_a.predict(si, d.A[1])[:, 0] - 3.5 * m_b.predict(si, d.A[1])[:, 0]
        np.testing.assert_allclose(pred, combo, atol=1e-9)

    def test_row_permutation_invariance(self):
        d = make_dataset(n=150, seed=9)
        perm = np.random.default_rng(0).permutation(d.n)
        dp = d.subset(perm)
        m1 = fit_stage_K(d)
        m2 = fit_stage_K(dp)
        np.testing.assert_allclose(m1.coef, m2.coef, atol=1e-10)

    def test_design_matrix_has_intercept_and_interactions(self):
        d = make_dataset(n=10, seed=1)
        si = StageInputs.from_dataset(d, 1)
        Phi = design_matrix(FeatureBasis(), si, d.A[1])
        assert np.allclose(Phi[:, 0], 1.0)
        # history (3+1+2) + past interaction (3) = 9, action 1, interactions 9
        assert Phi.shape[1] == 1 + 9 + 1 + 9

    def test_poly_degree_two_adds_squares(self):
        d = make_dataset(n=30, seed=1)
        si = StageInputs.from_dataset(d, 0)
        base = design_matrix(FeatureBasis(), si, d.A[0]).shape[1]
        quad = design_matrix(FeatureBasis(poly_degree=2), si, d.A[0]).shape[1]
        assert quad == base + 2 * 3  # squares appear in main and action blocks


class TestGreedyQLearning:
    def test_greedy_matches_manual_argmax(self):
        d = make_dataset(n=300, seed=10)
        reg = fit_greedy_qlearning(d, d.Y[:, 0])
        stack = reg.stack
        si2 = stack.inputs(d, 1)
        vals = stack.predict_all(si2)[:, :, 0]
        manual = np.argmax(np.where(d.feas[1], vals, -np.inf), axis=1)
        got = reg.stage_actions(1, [d.X[0], d.X[1]], [d.A[0]], d.feas[1])
        np.testing.assert_array_equal(got, manual)

    def test_tree_engine_round_trip(self):
        d = make_dataset(n=200, seed=12)
        engine = TreeEngine(n_trees=10, max_depth=3, seed=0)
        reg = fit_greedy_qlearning(d, d.Y[:, 0], engine)
        pos1 = reg.stage_actions(1, [d.X[0], d.X[1]], [d.A[0]], d.feas[1])
        doc = reg.to_doc()
        from pdtr.regime import regime_from_document, regime_document
        reg2 = regime_from_document(regime_document(reg))
        pos2 = reg2.stage_actions(1, [d.X[0], d.X[1]], [d.A[0]], d.feas[1])
        np.testing.assert_array_equal(pos1, pos2)

    def test_tree_engine_deterministic(self):
        d = make_dataset(n=150, seed=13)
        r1 = fit_greedy_qlearning(d, d.Y[:, 0], TreeEngine(n_trees=8, max_depth=3, seed=5))
        r2 = fit_greedy_qlearning(d, d.Y[:, 0], TreeEngine(n_trees=8, max_depth=3, seed=5))
        p1 = r1.stage_actions(0, [d.X[0]], [], d.feas[0])
        p2 = r2.stage_actions(0, [d.X[0]], [], d.feas[0])
        np.testing.assert_array_equal(p1, p2)
