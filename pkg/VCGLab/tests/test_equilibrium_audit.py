import unittest

import numpy as np
import pandas as pd

from allocation import max_discretization_gap
from equilibrium_audit import (
    convergence_sweep,
    impossibility_certificate,
    posterior_regret,
    regret_upper_bound,
    uniform_convergence_gap,
)
from estimators import EstimatorKind, EstimatorSpec
from exceptions import BudgetExceeded, ConditionStarFails, EstimatorUnavailable, MissingLipschitzConstant
from instance import instance_from_dict
from scenarios import ScenarioSpec, build
from transfers import HPolicy, TransferKind, TransferRule

EX_POST = EstimatorSpec(EstimatorKind.EX_POST)
DD_PIVOT = TransferRule(TransferKind.DATA_DRIVEN_VCG, HPolicy.PIVOT)
SMALL_QUADRATIC = {"state_points": 11, "signal_points": 5, "theta_points": 3}


def small_quadratic(**params):
    return build(ScenarioSpec("quadratic_loss", dict(SMALL_QUADRATIC, **params))).instance


def index(instance, grid, agent, value):
    return instance.types.index_of(grid, agent, value)


class TestPosteriorRegret(unittest.TestCase):
    def test_ex_post_quadratic_is_truthful(self):
        report = posterior_regret(small_quadratic(), DD_PIVOT, EX_POST)
        self.assertLessEqual(report.epsilon, 1e-9)
        self.assertEqual(len(report.rows), 2 * 3 * 3 * 5 * 5)
        self.assertFalse(report.monte_carlo)

    def test_ex_post_quadratic_at_full_scale(self):
        instance = build(ScenarioSpec("quadratic_loss", {})).instance
        self.assertEqual(instance.states.size, 41)
        self.assertEqual(instance.types.signal_count(0), 9)
        self.assertEqual(instance.types.theta_count(0), 5)
        report = posterior_regret(instance, DD_PIVOT, EX_POST, workers=2)
        self.assertEqual(len(report.rows), 2 * (5 * 9) ** 2)
        self.assertLessEqual(report.epsilon, 1e-9 + max_discretization_gap(instance))

    def test_leave_one_out_matches_ex_post(self):
        instance = small_quadratic()
        second_stage = posterior_regret(instance, TransferRule(TransferKind.LEAVE_ONE_OUT, HPolicy.PIVOT),
                                        EstimatorSpec(EstimatorKind.LEAVE_ONE_OUT))
        ex_post = posterior_regret(instance, DD_PIVOT, EX_POST)
        self.assertLessEqual(second_stage.epsilon, 1e-9)
        self.assertEqual(len(second_stage.rows), len(ex_post.rows))
        np.testing.assert_allclose([row.gain for row in second_stage.rows],
                                   [row.gain for row in ex_post.rows], atol=1e-9)

    def test_message_driven_vcg_audits_without_estimator(self):
        report = posterior_regret(small_quadratic(), TransferRule(TransferKind.VCG))
        self.assertGreaterEqual(report.epsilon, 0.0)
        self.assertEqual(report.epsilon_se, 0.0)

    def test_data_driven_rule_needs_estimator(self):
        with self.assertRaises(EstimatorUnavailable):
            posterior_regret(small_quadratic(), DD_PIVOT)

    def test_ex_post_token_auction(self):
        built = build(ScenarioSpec("llm_kl", {"tokens": 3}))
        report = posterior_regret(built.instance, built.default_rule, EX_POST)
        self.assertLessEqual(report.epsilon, 1e-9)

    def test_unbiased_noise_linear_clicks(self):
        instance = build(ScenarioSpec("ctr_common", {"theta_points": 5, "state_points": 5})).instance
        noisy = EstimatorSpec(EstimatorKind.UNBIASED_NOISE, noise_h=0.05)
        self.assertLessEqual(posterior_regret(instance, DD_PIVOT, noisy).epsilon, 1e-9)

    def test_bernoulli_common_ctr_per_click(self):
        built = build(ScenarioSpec("ctr_common", {"theta_points": 5, "state_points": 5}))
        report = posterior_regret(built.instance, built.default_rule, EstimatorSpec(EstimatorKind.BERNOULLI_CTR, m=8))
        self.assertLessEqual(report.epsilon, 1e-9)

    def test_interdependent_values_break_truthfulness(self):
        built = build(ScenarioSpec("interdependent_counterexample", {}))
        instance = built.instance
        theta = (index(instance, "theta", 0, 0.3), index(instance, "theta", 1, 0.8))
        signals = (1, 0)
        report = posterior_regret(instance, built.default_rule, EX_POST, profiles=[(theta, signals)], agents=[0])
        self.assertEqual(len(report.rows), 1)
        row = report.rows[0]
        mean = float(instance.posterior_mean({0: 1, 1: 0})[0])
        self.assertAlmostEqual(row.gain, (0.8 - 0.5) * mean, places=12)
        self.assertEqual(instance.types.theta_value(0, row.best_dev_theta), 0.0)

    def test_offset_does_not_change_regret(self):
        instance = small_quadratic()
        noisy = EstimatorSpec(EstimatorKind.UNBIASED_NOISE, noise_h=0.2)
        rule = TransferRule(TransferKind.DATA_DRIVEN_VCG, HPolicy.ZERO)
        moved = TransferRule(TransferKind.DATA_DRIVEN_VCG, HPolicy.ZERO, h_offset=3.0)
        base = posterior_regret(instance, rule, noisy)
        shifted = posterior_regret(instance, moved, noisy)
        self.assertAlmostEqual(base.epsilon, shifted.epsilon, places=12)

    def test_budget(self):
        with self.assertRaises(BudgetExceeded):
            posterior_regret(small_quadratic(), DD_PIVOT, EX_POST, budget=10)

    def test_worker_count_does_not_change_results(self):
        instance = small_quadratic()
        law = EstimatorSpec(EstimatorKind.SAMPLE_MEAN, m=4, mc_samples=20, seed=3)
        serial = posterior_regret(instance, DD_PIVOT, law, workers=1).to_frame()
        parallel = posterior_regret(instance, DD_PIVOT, law, workers=4).to_frame()
        pd.testing.assert_frame_equal(serial, parallel)

    def test_zero_mass_profiles_are_skipped(self):
        tree = {
            "agents": 2,
            "state_grid": {"points": [0.0, 1.0]},
            "type_grids": [{"preferences": [0.0, 1.0], "signals": [0.0, 1.0]} for _ in range(2)],
            "signal_kernels": [[[1.0, 0.0], [0.0, 1.0]]] * 2,
            "utility": {"name": "quadratic_loss", "params": {"lipschitz": 8.0}},
            "outcome_space": {"mode": "interval", "lower": 0.0, "upper": 2.0, "resolution": 21},
            "allocation": "closed_form:quadratic",
            "metadata": {"scenario": "quadratic_loss"},
        }
        report = posterior_regret(instance_from_dict(tree), DD_PIVOT, EX_POST)
        self.assertGreater(report.skipped_profiles, 0)
        self.assertLessEqual(report.epsilon, 1e-9)


class TestRegretBound(unittest.TestCase):
    def test_ex_post_bound_is_zero(self):
        instance = small_quadratic()
        self.assertEqual(regret_upper_bound(instance, 0, EX_POST), 0.0)

    def test_bound_scales_with_noise(self):
        instance = small_quadratic()
        h = 0.2
        bound = regret_upper_bound(instance, 0, EstimatorSpec(EstimatorKind.UNBIASED_NOISE, noise_h=h))
        self.assertAlmostEqual(bound, 2 * instance.utilities[1].lipschitz * h, places=12)

    def test_constant_utilities_have_zero_bound(self):
        tree = {
            "agents": 2,
            "state_grid": {"points": [0.0, 1.0]},
            "type_grids": [{"preferences": [0.0], "signals": [0.0, 1.0]} for _ in range(2)],
            "signal_kernels": [[[0.8, 0.2], [0.2, 0.8]]] * 2,
            "utility": {"name": "constant", "params": {"value": 1.0}},
            "outcome_space": {"mode": "finite", "points": [[0.0], [1.0]]},
        }
        noisy = EstimatorSpec(EstimatorKind.UNBIASED_NOISE, noise_h=0.3)
        self.assertEqual(regret_upper_bound(instance_from_dict(tree), 0, noisy), 0.0)

    def test_missing_lipschitz(self):
        tree = {
            "agents": 2,
            "state_grid": {"points": [0.0, 1.0]},
            "type_grids": [{"preferences": [0.0], "signals": [0.0, 1.0]} for _ in range(2)],
            "signal_kernels": [[[0.8, 0.2], [0.2, 0.8]]] * 2,
            "utility": {"name": "quadratic_loss"},
            "outcome_space": {"mode": "interval", "lower": 0.0, "upper": 1.0, "resolution": 11},
        }
        with self.assertRaises(MissingLipschitzConstant):
            regret_upper_bound(instance_from_dict(tree), 0, EX_POST)

    def test_uniform_convergence_gap(self):
        instance = build(ScenarioSpec("quadratic_loss", {"state_model": "binary", "theta_points": 2,
                                                         "x_resolution": 21})).instance
        self.assertAlmostEqual(uniform_convergence_gap(instance, EX_POST), 0.0, places=12)
        noisy = EstimatorSpec(EstimatorKind.UNBIASED_NOISE, noise_h=0.1)
        self.assertAlmostEqual(uniform_convergence_gap(instance, noisy), 0.01, places=12)
        clicks = build(ScenarioSpec("ctr_common", {"theta_points": 3, "state_points": 3})).instance
        self.assertAlmostEqual(uniform_convergence_gap(clicks, noisy), 0.0, places=12)


class TestConvergenceSweep(unittest.TestCase):
    def test_ex_post_is_exact(self):
        result = convergence_sweep(small_quadratic(), DD_PIVOT, EX_POST, [4, 16])
        self.assertTrue(result.exact)
        self.assertIsNone(result.slope)

    def test_bernoulli_per_click_is_exact(self):
        built = build(ScenarioSpec("ctr_common", {"theta_points": 3, "state_points": 3}))
        result = convergence_sweep(built.instance, built.default_rule,
                                   EstimatorSpec(EstimatorKind.BERNOULLI_CTR), [4, 16, 64])
        self.assertTrue(result.exact)
        self.assertEqual([row.m for row in result.rows], [4, 16, 64])

    def test_sample_mean_within_bound(self):
        """Quadratic loss: the unbiased estimate shifts every report's transfer by the same
        constant, so ε_m is zero up to Monte Carlo noise and its slope is often undefined.
        The rate is checked on the regret bound instead, whose slope is −½."""
        instance = small_quadratic(theta_points=2)
        family = EstimatorSpec(EstimatorKind.SAMPLE_MEAN, noise_sigma=1.0, mc_samples=100, seed=7)
        result = convergence_sweep(instance, DD_PIVOT, family, [4, 16, 64, 256])
        for row in result.rows:
            self.assertLessEqual(row.epsilon, row.bound + 3 * row.se)
            self.assertTrue(np.isfinite(row.r_eps))
        bounds = [row.bound for row in result.rows]
        self.assertEqual(bounds, sorted(bounds, reverse=True))
        self.assertAlmostEqual(result.bound_slope, -0.5, delta=0.15)
        frame = result.to_frame()
        self.assertEqual(list(frame["m"]), [4, 16, 64, 256])
        np.testing.assert_allclose(frame["r_m"], np.array([4, 16, 64, 256], dtype=float) ** family.rate_kappa)

    def test_sizes_must_increase(self):
        with self.assertRaises(EstimatorUnavailable):
            convergence_sweep(small_quadratic(), DD_PIVOT, EstimatorSpec(EstimatorKind.SAMPLE_MEAN), [16, 4])


class TestImpossibilityCertificate(unittest.TestCase):
    def test_gaussian_witness(self):
        instance = small_quadratic(theta_points=5)
        record = impossibility_certificate(
            instance, s1=index(instance, "signal", 0, 2.0), s1_prime=index(instance, "signal", 0, -2.0),
            s2=index(instance, "signal", 1, 0.0), theta_a=index(instance, "theta", 0, 1.0),
            theta_b=index(instance, "theta", 0, -1.0), theta2=index(instance, "theta", 1, 0.0))
        self.assertTrue(record.certified)
        self.assertGreater(abs(record.delta_mean), 1e-3)
        self.assertAlmostEqual(record.gap, 2.0 * abs(record.delta_mean), places=9)

    def test_equal_signals_fail(self):
        instance = small_quadratic()
        with self.assertRaises(ConditionStarFails) as caught:
            impossibility_certificate(instance, s1=1, s1_prime=1, s2=2, theta_a=0, theta_b=2, theta2=1)
        self.assertIsNotNone(caught.exception.record)
        self.assertFalse(caught.exception.record.certified)

    def test_wallet_mean_gap(self):
        instance = build(ScenarioSpec("quadratic_loss", {"state_model": "wallet", "signal_levels": 3,
                                                         "theta_points": 3})).instance
        record = impossibility_certificate(instance, s1=2, s1_prime=0, s2=1, theta_a=2, theta_b=0, theta2=1)
        self.assertAlmostEqual(record.delta_mean, 2.0, places=12)
        self.assertAlmostEqual(record.var_s, 0.0, places=12)
        self.assertTrue(record.certified)


if __name__ == "__main__":
    unittest.main()
