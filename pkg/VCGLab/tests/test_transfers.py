import unittest

import numpy as np

from estimators import EstimatorKind, EstimatorSpec, build_law
from exceptions import MissingSecondStageReport, TransferRuleError, UnsupportedScenario
from models import EstimateDraw
from scenarios import ScenarioSpec, build
from transfers import (
    HPolicy,
    TransferKind,
    TransferRule,
    continuous_posterior_mean,
    data_driven_vcg_transfer,
    expected_transfer,
    generalized_vcg_integral,
    generalized_vcg_transfer,
    leave_one_out_estimate,
    leave_one_out_transfer,
    marginal_contribution,
    per_click_expected_payment,
    per_click_pivot,
    pivot_decomposition,
    posterior_shift_correction,
    regularized_data_driven_vcg_transfer,
    regularized_pivot_closed_form,
    split_payment,
    vcg_transfer,
)

EX_POST = EstimatorSpec(EstimatorKind.EX_POST)
DD_PIVOT = TransferRule(TransferKind.DATA_DRIVEN_VCG, HPolicy.PIVOT)
DD_ZERO = TransferRule(TransferKind.DATA_DRIVEN_VCG, HPolicy.ZERO)
POSTERIOR_11 = 0.64 / 0.68


def small_gaussian():
    return build(ScenarioSpec("quadratic_loss", {"state_points": 11, "signal_points": 5, "theta_points": 3})).instance


def binary():
    return build(ScenarioSpec("quadratic_loss", {"state_model": "binary", "theta_points": 2,
                                                 "x_resolution": 21})).instance


class TestMessageDriven(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.instance = small_gaussian()

    def test_vcg_without_offset(self):
        instance = self.instance
        for theta in [(0, 2), (1, 1), (2, 1)]:
            for signals in [(0, 4), (2, 2), (3, 0)]:
                gap = instance.types.theta_value(0, theta[0]) - instance.types.theta_value(1, theta[1])
                variance = instance.posterior_variance(dict(enumerate(signals)))[0]
                self.assertAlmostEqual(vcg_transfer(instance, 0, theta, signals, HPolicy.ZERO),
                                       -0.25 * gap ** 2 - variance, places=10)

    def test_single_agent_pivot_is_zero(self):
        instance = build(ScenarioSpec("quadratic_loss", {"agents": 1, "state_points": 11, "signal_points": 5,
                                                         "theta_points": 3})).instance
        self.assertEqual(vcg_transfer(instance, 0, (1,), (2,)), 0.0)
        draw = EstimateDraw(value=[0.4])
        self.assertEqual(data_driven_vcg_transfer(instance, 0, (1,), (2,), draw), 0.0)

    def test_generalized_binary(self):
        self.assertAlmostEqual(generalized_vcg_transfer(binary(), 0, (1, 0), (1, 1)), -POSTERIOR_11, places=10)

    def test_generalized_equal_biases_is_constant(self):
        instance = self.instance
        for signals in [(0, 0), (4, 1), (2, 3)]:
            self.assertEqual(generalized_vcg_transfer(instance, 1, (1, 1), signals, k=0.7), 0.7)

    def test_generalized_integral_matches_mean_difference(self):
        instance = self.instance
        theta = (2, 0)
        gap = instance.types.theta_value(0, 2) - instance.types.theta_value(1, 0)
        lhs = generalized_vcg_integral(instance, 0, theta, [1.3, -0.4]) \
            - generalized_vcg_integral(instance, 0, theta, [-0.8, -0.4])
        rhs = -gap * (continuous_posterior_mean(instance, [1.3, -0.4]) - continuous_posterior_mean(instance, [-0.8, -0.4]))
        self.assertAlmostEqual(lhs, rhs, places=8)

    def test_generalized_needs_quadratic(self):
        instance = build(ScenarioSpec("ctr_common", {"theta_points": 3, "state_points": 3})).instance
        with self.assertRaises(UnsupportedScenario):
            generalized_vcg_transfer(instance, 0, (0, 1), (0, 0))

    def test_message_driven_rejects_draw(self):
        with self.assertRaises(TransferRuleError):
            TransferRule(TransferKind.VCG).transfer(self.instance, 0, (0, 0), (0, 0), draw=EstimateDraw(value=[0.0]))


class TestDataDrivenQuadratic(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.instance = small_gaussian()

    def test_ex_post_pivot_decomposition(self):
        instance = self.instance
        for i in instance.agents:
            for theta in instance.theta_profiles():
                for signals in instance.signal_profiles():
                    value, se = expected_transfer(instance, DD_PIVOT, i, theta, signals, signals, EX_POST)
                    self.assertEqual(se, 0.0)
                    self.assertAlmostEqual(value, pivot_decomposition(instance, i, theta, signals)["total"], places=10)

    def test_binary_accuracy_reward(self):
        instance = binary()
        value, _ = expected_transfer(instance, DD_PIVOT, 0, (1, 1), (1, 1), (1, 1), EX_POST)
        self.assertAlmostEqual(value, (POSTERIOR_11 - 0.8) ** 2, places=12)
        self.assertAlmostEqual(value, 0.019931, places=5)

    def test_symmetric_noise_shifts_value(self):
        instance = binary()
        h = 0.1
        noisy = EstimatorSpec(EstimatorKind.UNBIASED_NOISE, noise_h=h)
        for theta in [(0, 1), (1, 1)]:
            for signals in [(0, 1), (1, 1)]:
                exact, _ = expected_transfer(instance, DD_ZERO, 0, theta, signals, signals, EX_POST)
                shifted, _ = expected_transfer(instance, DD_ZERO, 0, theta, signals, signals, noisy)
                self.assertAlmostEqual(shifted, exact - (instance.n_agents - 1) * h ** 2, places=12)

    def test_h_offset_shift(self):
        instance = self.instance
        law = build_law(EX_POST, instance.states)
        moved = TransferRule(TransferKind.DATA_DRIVEN_VCG, HPolicy.PIVOT, h_offset=2.5)
        base = DD_PIVOT.evaluate(instance, 1, (0, 2), (1, 3), law.points)
        np.testing.assert_allclose(moved.evaluate(instance, 1, (0, 2), (1, 3), law.points), base + 2.5, atol=1e-12)

    def test_draw_required(self):
        with self.assertRaises(TransferRuleError):
            DD_PIVOT.transfer(self.instance, 0, (0, 0), (0, 0))

    def test_split_payment(self):
        instance = self.instance
        draw = EstimateDraw(value=[0.7])
        upfront, adjustment = split_payment(instance, DD_PIVOT, 0, (2, 0), (3, 1), draw)
        self.assertAlmostEqual(upfront, vcg_transfer(instance, 0, (2, 0), (3, 1)), places=12)
        self.assertAlmostEqual(upfront + adjustment, DD_PIVOT.transfer(instance, 0, (2, 0), (3, 1), draw=draw),
                               places=12)

    def test_pivot_undefined_for_interdependent_values(self):
        instance = build(ScenarioSpec("interdependent_counterexample", {})).instance
        with self.assertRaises(TransferRuleError):
            DD_PIVOT.transfer(instance, 0, (1, 2), (0, 1), draw=EstimateDraw(value=[0.5]))

    def test_unknown_kind(self):
        with self.assertRaises(TransferRuleError):
            TransferRule("no_such_rule")


class TestLeaveOneOut(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.instance = small_gaussian()

    def test_two_agents_use_other_report(self):
        np.testing.assert_array_equal(leave_one_out_estimate(self.instance, 0, {0: [5.0], 1: [0.4]}), [0.4])

    def test_own_report_is_ignored(self):
        instance = self.instance
        first = leave_one_out_transfer(instance, 0, (2, 0), (3, 1), {0: [-2.0], 1: [0.4]})
        second = leave_one_out_transfer(instance, 0, (2, 0), (3, 1), {0: [2.0], 1: [0.4]})
        self.assertEqual(first, second)
        expected = data_driven_vcg_transfer(instance, 0, (2, 0), (3, 1), EstimateDraw(value=[0.4]))
        self.assertAlmostEqual(first, expected, places=12)

    def test_missing_report(self):
        with self.assertRaises(MissingSecondStageReport):
            leave_one_out_transfer(self.instance, 0, (2, 0), (3, 1), {0: [0.1]})

    def test_designated_report(self):
        instance = build(ScenarioSpec("quadratic_loss", {"agents": 3, "state_points": 7, "signal_points": 3,
                                                         "theta_points": 2})).instance
        reports = {0: [0.0], 1: [0.3], 2: [0.9]}
        np.testing.assert_allclose(leave_one_out_estimate(instance, 0, reports), [0.6], atol=1e-12)
        np.testing.assert_array_equal(leave_one_out_estimate(instance, 0, reports, "designated", {0: 2}), [0.9])
        with self.assertRaises(TransferRuleError):
            leave_one_out_estimate(instance, 0, reports, "designated", {0: 0})


class TestClickTransfers(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.built = build(ScenarioSpec("ctr_common", {"theta_low": 0.4, "theta_high": 0.5, "theta_points": 3,
                                                      "state_points": 5, "signal_levels": 3}))
        cls.instance = cls.built.instance

    def test_second_price(self):
        self.assertAlmostEqual(per_click_pivot(self.instance, 0, (2, 0)), 0.4, places=12)
        self.assertAlmostEqual(per_click_pivot(self.instance, 1, (2, 0)), 0.5, places=12)

    def test_second_price_three_bidders(self):
        instance = build(ScenarioSpec("ctr_common", {"agents": 3, "theta_low": 0.4, "theta_high": 0.5,
                                                     "theta_points": 3, "state_points": 3})).instance
        self.assertAlmostEqual(per_click_pivot(instance, 0, (2, 0, 1)), 0.45, places=12)

    def test_loser_pays_nothing(self):
        self.assertEqual(per_click_expected_payment(self.instance, 1, (2, 0), (1, 1)), 0.0)

    def test_per_click_matches_data_driven_pivot(self):
        instance = self.instance
        law = build_law(EstimatorSpec(EstimatorKind.BERNOULLI_CTR, m=4), instance.states)
        per_click = TransferRule(TransferKind.PER_CLICK_PIVOT)
        for i in instance.agents:
            for theta in instance.theta_profiles():
                for signals in [(0, 0), (1, 2), (2, 1)]:
                    np.testing.assert_allclose(per_click.evaluate(instance, i, theta, signals, law.points),
                                               DD_PIVOT.evaluate(instance, i, theta, signals, law.points),
                                               atol=1e-12)

    def test_unbiased_noise_matches_ex_post(self):
        instance = self.instance
        noisy = EstimatorSpec(EstimatorKind.UNBIASED_NOISE, noise_h=0.05)
        for theta in [(2, 0), (0, 1)]:
            for reported in [(0, 2), (2, 1)]:
                exact, _ = expected_transfer(instance, DD_PIVOT, 0, theta, reported, (1, 1), EX_POST)
                noisy_value, _ = expected_transfer(instance, DD_PIVOT, 0, theta, reported, (1, 1), noisy)
                self.assertAlmostEqual(noisy_value, exact, places=12)

    def test_own_signal_matters_only_through_allocation(self):
        instance = self.instance
        draws = np.array([[0.1], [0.5], [0.9]])
        np.testing.assert_array_equal(DD_PIVOT.evaluate(instance, 0, (2, 0), (0, 1), draws),
                                      DD_PIVOT.evaluate(instance, 0, (2, 0), (2, 1), draws))


class TestRegularizedTransfers(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.instance = build(ScenarioSpec("llm_kl", {})).instance
        cls.rule = TransferRule(TransferKind.REGULARIZED_DATA_DRIVEN_VCG, HPolicy.PIVOT)

    def test_marginal_contribution_identity(self):
        instance = self.instance
        for theta in instance.theta_profiles():
            for signals in instance.signal_profiles():
                for i in instance.agents:
                    value, _ = expected_transfer(instance, self.rule, i, theta, signals, signals, EX_POST)
                    expected = marginal_contribution(instance, i, theta, signals) \
                        + posterior_shift_correction(instance, i, theta, signals)
                    self.assertAlmostEqual(value, expected, places=9)

    def test_state_free_opponent_needs_no_correction(self):
        # agent 0's rewards ignore ω, so agent 1's pivot is the pure log-partition difference
        instance = self.instance
        for theta in instance.theta_profiles():
            for signals in instance.signal_profiles():
                self.assertAlmostEqual(posterior_shift_correction(instance, 1, theta, signals), 0.0, places=12)
                value, _ = expected_transfer(instance, self.rule, 1, theta, signals, signals, EX_POST)
                self.assertAlmostEqual(value, marginal_contribution(instance, 1, theta, signals), places=9)

    def test_closed_form_matches_direct(self):
        instance = self.instance
        for value in (0.0, 0.3, 0.9):
            draw = EstimateDraw(value=[value])
            for i in instance.agents:
                direct = regularized_data_driven_vcg_transfer(instance, i, (2, 1), (1, 0), draw)
                self.assertAlmostEqual(regularized_pivot_closed_form(instance, i, (2, 1), (1, 0), draw), direct,
                                       places=9)

    def test_needs_kl_objective(self):
        with self.assertRaises(UnsupportedScenario):
            regularized_data_driven_vcg_transfer(small_gaussian(), 0, (0, 0), (0, 0), EstimateDraw(value=[0.0]))


if __name__ == "__main__":
    unittest.main()
