import unittest

import numpy as np

from allocation import efficient_allocation
from equilibrium_audit import deviation_payoffs
from exceptions import InvalidScenarioParameters, PreconditionFails, UnsupportedScenario
from scenarios import (
    ScenarioName,
    ScenarioSpec,
    build,
    ctr_click_process,
    individual_ctr_manipulation_demo,
    interdependent_counterexample_demo,
    list_scenarios,
    total_variance_identity,
)
from transfers import TransferKind, TransferRule


class TestRegistry(unittest.TestCase):
    def test_every_scenario_is_listed(self):
        names = [name for name, _ in list_scenarios()]
        self.assertEqual(sorted(names), sorted(s.value for s in ScenarioName))

    def test_defaults_build(self):
        for name in ("ctr_common", "ctr_individual", "llm_kl", "interdependent_counterexample"):
            built = build(ScenarioSpec(name, {}))
            self.assertEqual(built.instance.metadata["scenario"], name)

    def test_unknown_scenario(self):
        with self.assertRaises(InvalidScenarioParameters):
            ScenarioSpec("no_such_scenario")

    def test_unknown_parameter(self):
        with self.assertRaises(InvalidScenarioParameters):
            build(ScenarioSpec("ctr_common", {"reserve_price": 0.1}))

    def test_out_of_range_parameters(self):
        with self.assertRaises(InvalidScenarioParameters):
            build(ScenarioSpec("quadratic_loss", {"state_model": "binary", "accuracy": 0.4}))
        with self.assertRaises(InvalidScenarioParameters):
            build(ScenarioSpec("ctr_common", {"ctr_high": 1.2}))
        with self.assertRaises(InvalidScenarioParameters):
            build(ScenarioSpec("llm_kl", {"alpha": 0.0}))
        with self.assertRaises(InvalidScenarioParameters):
            build(ScenarioSpec("quadratic_loss", {"state_model": "wallet", "agents": 3}))


class TestQuadraticScenario(unittest.TestCase):
    def test_total_variance(self):
        instance = build(ScenarioSpec("quadratic_loss", {"state_points": 21, "signal_points": 7})).instance
        for signal in range(7):
            lhs, rhs = total_variance_identity(instance, 0, signal)
            self.assertAlmostEqual(lhs, rhs, places=9)
            self.assertGreaterEqual(lhs, 0.0)

    def test_wallet_state_is_signal_sum(self):
        instance = build(ScenarioSpec("quadratic_loss", {"state_model": "wallet", "signal_levels": 4})).instance
        for signals in instance.signal_profiles():
            self.assertAlmostEqual(instance.posterior_mean(dict(enumerate(signals)))[0], sum(signals), places=12)

    def test_variance_identity_needs_two_agents(self):
        instance = build(ScenarioSpec("quadratic_loss", {"agents": 3, "state_points": 7, "signal_points": 3,
                                                         "theta_points": 2})).instance
        with self.assertRaises(UnsupportedScenario):
            total_variance_identity(instance, 0, 0)


class TestClickScenarios(unittest.TestCase):
    def test_highest_value_wins_common_ctr(self):
        instance = build(ScenarioSpec("ctr_common", {"theta_points": 4, "state_points": 3})).instance
        for theta in instance.theta_profiles():
            for signals in [(0, 0), (2, 1)]:
                winner = int(np.argmax(efficient_allocation(instance, theta, signals)))
                self.assertEqual(winner, int(np.argmax(theta)))

    def test_click_process_edges(self):
        instance = build(ScenarioSpec("ctr_common", {})).instance
        never = ctr_click_process(instance, (8, 3), 0, 0.0, 100, seed=1)
        self.assertEqual(never.clicks, 0)
        self.assertEqual(never.payment, 0.0)
        always = ctr_click_process(instance, (8, 3), 0, 1.0, 100, seed=1)
        self.assertEqual(always.clicks, 100)
        self.assertAlmostEqual(always.payment, 100 * always.price, places=12)
        self.assertAlmostEqual(always.price, instance.types.theta_value(1, 3), places=12)

    def test_click_process_average(self):
        instance = build(ScenarioSpec("ctr_common", {})).instance
        outcome = ctr_click_process(instance, (8, 3), 0, 0.5, 10_000, seed=4)
        per_impression = outcome.payment / outcome.impressions
        se = outcome.price * np.sqrt(0.25 / outcome.impressions)
        self.assertLess(abs(per_impression - 0.5 * outcome.price), 4 * se)

    def test_click_process_rejects_bad_rates(self):
        instance = build(ScenarioSpec("ctr_common", {})).instance
        with self.assertRaises(InvalidScenarioParameters):
            ctr_click_process(instance, (0, 0), 0, 1.5, 10)
        with self.assertRaises(InvalidScenarioParameters):
            ctr_click_process(instance, (0, 0), 0, 0.5, 0)

    def test_individual_manipulation(self):
        built = build(ScenarioSpec("ctr_individual", {}))
        record = individual_ctr_manipulation_demo(built, [0.5, 0.4], [0.3, 0.6])
        self.assertAlmostEqual(record.truthful_payoff, 0.0, places=12)
        self.assertAlmostEqual(record.best_payoff, 0.03, places=12)
        self.assertAlmostEqual(record.gain, 0.03, places=12)
        self.assertAlmostEqual(record.gain, record.audited_gain, places=12)
        self.assertAlmostEqual(record.gain, record.expected_gain, places=12)
        self.assertLessEqual(record.details["data_driven_gain"], 1e-9)
        self.assertEqual(record.best_deviation, {"theta": 1.0, "signal": 1.0})
        self.assertTrue(record.details["corner_is_maximizer"])
        self.assertIn({"theta": 1.0, "signal": 1.0}, record.details["maximizers"])
        self.assertNotIn({"theta": 0.5, "signal": 0.3}, record.details["maximizers"])

    def test_individual_audited_payoffs(self):
        built = build(ScenarioSpec("ctr_individual", {}))
        instance = built.instance
        theta = (instance.types.index_of("theta", 0, 0.5), instance.types.index_of("theta", 1, 0.4))
        signals = (instance.types.index_of("signal", 0, 0.3), instance.types.index_of("signal", 1, 0.6))
        payoffs = deviation_payoffs(instance, TransferRule(TransferKind.PER_CLICK_PIVOT),
                                    built.default_estimator, 0, theta, signals)
        corner = payoffs[-1, -1]
        self.assertAlmostEqual(corner, 0.03, places=12)
        self.assertAlmostEqual(float(payoffs.max()), corner, places=12)
        self.assertAlmostEqual(payoffs[theta[0], signals[0]], 0.0, places=12)

    def test_individual_equal_values(self):
        built = build(ScenarioSpec("ctr_individual", {}))
        record = individual_ctr_manipulation_demo(built, [0.4, 0.4], [0.3, 0.6])
        self.assertAlmostEqual(record.gain, 0.0, places=12)
        self.assertLessEqual(record.audited_gain, 1e-9)

    def test_individual_precondition(self):
        built = build(ScenarioSpec("ctr_individual", {}))
        with self.assertRaises(PreconditionFails):
            individual_ctr_manipulation_demo(built, [0.4, 0.5], [0.3, 0.6])


class TestInterdependentScenario(unittest.TestCase):
    def test_understating_pays(self):
        built = build(ScenarioSpec("interdependent_counterexample", {}))
        record = interdependent_counterexample_demo(built, [0.3, 0.8], [1.0, 0.0])
        self.assertAlmostEqual(record.details["posterior_mean"], 0.5, places=12)
        self.assertAlmostEqual(record.gain, 0.15, places=12)
        self.assertAlmostEqual(record.audited_gain, 0.15, places=12)
        self.assertAlmostEqual(record.expected_gain, 0.15, places=12)
        self.assertEqual(record.best_deviation, {"theta": 0.0, "signal": 1.0})
        self.assertAlmostEqual(record.best_payoff - record.truthful_payoff, record.gain, places=12)

    def test_zero_state_has_no_gain(self):
        built = build(ScenarioSpec("interdependent_counterexample", {"states": (0.0,)}))
        record = interdependent_counterexample_demo(built, [0.3, 0.8], [1.0, 0.0])
        self.assertEqual(record.gain, 0.0)
        self.assertLessEqual(record.audited_gain, 1e-12)

    def test_precondition(self):
        built = build(ScenarioSpec("interdependent_counterexample", {}))
        with self.assertRaises(PreconditionFails):
            interdependent_counterexample_demo(built, [0.8, 0.3], [1.0, 0.0])

    def test_wrong_scenario(self):
        built = build(ScenarioSpec("ctr_individual", {}))
        with self.assertRaises(UnsupportedScenario):
            interdependent_counterexample_demo(built, [0.3, 0.8], [1.0, 0.0])


if __name__ == "__main__":
    unittest.main()
