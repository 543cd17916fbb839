import numpy as np
import pytest

from pdtr import (
    CompositeSpec,
    DataValidationError,
    FixedRegime,
    NumericalError,
    estimate_lambda,
    fibonacci_sphere,
    sphere_grid,
    standardize_outcomes,
    tuned_composite_regime,
)
from pdtr.data_model import Dataset
from pdtr.irl import composite_value
from pdtr.q_regression import fit_greedy_qlearning

from test_data_model import make_dataset


def with_outcomes(d, Y):
    return Dataset(X=d.X, A=d.A, feas=d.feas, prop=d.prop, Y=np.asarray(Y, dtype=float),
                   action_codes=d.action_codes, action_values=d.action_values,
                   outcome_names=[f"y_{j+1}" for j in range(np.asarray(Y).shape[1])])


def angle_deg(a, b):
    c = float(np.clip(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)), -1, 1))
    return np.degrees(np.arccos(c))


class TestCompositeSpec:
    def test_unit_norm_enforced(self):
        with pytest.raises(DataValidationError):
            CompositeSpec(np.array([1.0, 1.0]))

    def test_feature_map_validated(self):
        with pytest.raises(DataValidationError):
            CompositeSpec(np.array([1.0, 0.0]), "nope")

    def test_round4(self):
        spec = CompositeSpec(np.array([0.6, 0.8, 0.0]))
        assert spec.round4() == [0.6, 0.8, 0.0]


class TestClosedForm:
    def test_axis_case(self):
        # constant outcomes (1, 0, 0): plug-in values are exactly that vector
        d = with_outcomes(make_dataset(n=80, seed=0), np.tile([1.0, 0.0, 0.0], (80, 1)))
        reg = FixedRegime([1, 1], d.action_codes)
        lam = estimate_lambda(d, reg, feature_map="raw_outcomes")
        np.testing.assert_allclose(lam.lam, [1.0, 0.0, 0.0], atol=1e-9)

    def test_normalization_case(self):
        d = with_outcomes(make_dataset(n=80, seed=1), np.tile([3.0, 4.0, 0.0], (80, 1)))
        reg = FixedRegime([0, 1], d.action_codes)
        lam = estimate_lambda(d, reg, feature_map="raw_outcomes")
        np.testing.assert_allclose(lam.lam, [0.6, 0.8, 0.0], atol=1e-9)

    def test_zero_direction_is_error(self):
        d = with_outcomes(make_dataset(n=80, seed=2), np.zeros((80, 3)))
        reg = FixedRegime([0, 0], d.action_codes)
        with pytest.raises(NumericalError, match="undefined"):
            estimate_lambda(d, reg, feature_map="raw_outcomes")

    def test_standardized_requires_standardization(self):
        d = make_dataset(n=60, seed=3)
        reg = FixedRegime([0, 0], d.action_codes)
        with pytest.raises(DataValidationError, match="standardize"):
            estimate_lambda(d, reg)
        lam = estimate_lambda(standardize_outcomes(d), reg)
        assert abs(np.linalg.norm(lam.lam) - 1) < 1e-10

    def test_permutation_invariance(self):
        d = standardize_outcomes(make_dataset(n=90, seed=4))
        reg = FixedRegime([0, 1], d.action_codes)
        lam1 = estimate_lambda(d, reg)
        perm = np.random.default_rng(0).permutation(d.n)
        lam2 = estimate_lambda(d.subset(perm), reg)
        np.testing.assert_allclose(lam1.lam, lam2.lam, atol=1e-10)


class TestGridAgreement:
    def test_closed_form_vs_grid_small(self):
        # one instance here; the 10-instance sweep runs in the acceptance suite
        d = standardize_outcomes(make_dataset(n=120, seed=5))
        reg = FixedRegime([1, 0], d.action_codes)
        closed = estimate_lambda(d, reg)
        grid = estimate_lambda(d, reg, method="grid", grid_size=10000)
        assert angle_deg(closed.lam, grid.lam) < 2.0

    def test_linearity_of_composite_value(self):
        d = standardize_outcomes(make_dataset(n=100, seed=6))
        reg = FixedRegime([0, 1], d.action_codes)
        rng = np.random.default_rng(0)
        l1, l2 = rng.normal(size=3), rng.normal(size=3)
        a, b = 1.3, -0.4
        va = composite_value(d, reg, l1)
        vb = composite_value(d, reg, l2)
        vc = composite_value(d, reg, a * l1 + b * l2)
        assert vc == pytest.approx(a * va + b * vb, abs=1e-8)

    def test_lambda_hat_maximality(self):
        d = standardize_outcomes(make_dataset(n=100, seed=7))
        reg = FixedRegime([0, 1], d.action_codes)
        lam = estimate_lambda(d, reg)
        v_hat = composite_value(d, reg, lam.lam)
        rng = np.random.default_rng(1)
        g = rng.standard_normal((1000, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        vals = np.array([composite_value(d, reg, lv) for lv in g])
        assert v_hat >= vals.max() - 1e-9


class TestSphereGrids:
    def test_fibonacci_unit_norm(self):
        g = fibonacci_sphere(500)
        np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-12)

    def test_fibonacci_covering_radius_under_2deg(self):
        g = fibonacci_sphere(10000)
        rng = np.random.default_rng(3)
        probes = rng.standard_normal((200, 3))
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        cos = probes @ g.T
        worst = np.degrees(np.arccos(np.clip(cos.max(axis=1), -1, 1))).max()
        assert worst < 2.0

    def test_other_dims_fall_back_to_gaussian(self):
        g = sphere_grid(100, 4, seed=2)
        assert g.shape == (100, 4)
        np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-12)


class TestTunedComposite:
    def test_e1_reduces_to_single_outcome_qlearning(self):
        d = standardize_outcomes(make_dataset(n=300, seed=8))
        lam = CompositeSpec(np.array([1.0, 0.0, 0.0]))
        tuned = tuned_composite_regime(d, lam)
        ql = fit_greedy_qlearning(d, d.Y[:, 0])
        for k in range(2):
            X = [d.X[j] for j in range(k + 1)]
            A = [d.A[j] for j in range(k)]
            np.testing.assert_array_equal(tuned.stage_actions(k, X, A, d.feas[k]),
                                          ql.stage_actions(k, X, A, d.feas[k]))

    def test_negated_lambda_flips_choices(self):
        d = standardize_outcomes(make_dataset(n=300, seed=9))
        lam = np.array([0.5, 0.5, np.sqrt(0.5)])
        r_pos = tuned_composite_regime(d, CompositeSpec(lam))
        r_neg = tuned_composite_regime(d, CompositeSpec(-lam))
        si = r_pos.stack.inputs(d, 1)
        vals = r_pos.stack.predict_all(si)[:, :, 0]
        distinct = np.abs(vals[:, 0] - vals[:, 1]) > 1e-9
        a_pos = r_pos.stage_actions(1, [d.X[0], d.X[1]], [d.A[0]], d.feas[1])
        a_neg = r_neg.stage_actions(1, [d.X[0], d.X[1]], [d.A[0]], d.feas[1])
        assert (a_pos[distinct] != a_neg[distinct]).all()
