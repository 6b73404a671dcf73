import copy
import os
import unittest

import numpy as np

from exceptions import InvalidInstance, MissingLipschitzConstant, ZeroMassEvent
from instance import (
    check_utility_lipschitz,
    instance_from_dict,
    interim_payoff,
    load_instance,
    posterior_lipschitz_constant,
)
from models import StateGrid

HERE = os.path.dirname(os.path.abspath(__file__))
BINARY_PATH = os.path.join(HERE, "..", "instances", "binary_quadratic.json")


def binary_tree(accuracy=0.8, utility=None, preferences=(0.0, 1.0), full_support=True):
    kernel = [[accuracy, 1 - accuracy], [1 - accuracy, accuracy]]
    return {
        "name": "binary",
        "agents": 2,
        "state_grid": {"points": [0.0, 1.0], "prior": [0.5, 0.5]},
        "type_grids": [{"preferences": list(preferences), "signals": [0.0, 1.0]} for _ in range(2)],
        "signal_kernels": [kernel, kernel],
        "utility": utility or {"name": "quadratic_loss", "params": {"lipschitz": 8.0}},
        "outcome_space": {"mode": "interval", "lower": 0.0, "upper": 2.0, "resolution": 21},
        "allocation": "closed_form:quadratic",
        "full_support": full_support,
        "metadata": {"scenario": "quadratic_loss", "state_model": "binary"},
    }


class TestPosterior(unittest.TestCase):
    def setUp(self):
        self.instance = instance_from_dict(binary_tree())

    def test_two_agreeing_signals(self):
        posterior = self.instance.posterior({0: 1, 1: 1})
        self.assertAlmostEqual(posterior[1], 0.64 / 0.68, places=12)
        self.assertAlmostEqual(posterior.sum(), 1.0, places=12)

    def test_single_signal(self):
        self.assertAlmostEqual(self.instance.posterior({1: 1})[1], 0.8, places=12)

    def test_empty_conditioning_is_prior(self):
        np.testing.assert_allclose(self.instance.posterior({}), self.instance.prior.state_mass, atol=1e-12)

    def test_perfect_signal_gives_point_mass(self):
        instance = instance_from_dict(binary_tree(accuracy=1.0, full_support=False))
        np.testing.assert_allclose(instance.posterior({0: 1}), [0.0, 1.0], atol=1e-12)

    def test_zero_mass_event(self):
        instance = instance_from_dict(binary_tree(accuracy=1.0, full_support=False))
        self.assertEqual(instance.signal_mass({0: 1, 1: 0}), 0.0)
        with self.assertRaises(ZeroMassEvent):
            instance.posterior({0: 1, 1: 0})

    def test_full_support_declared_on_sparse_prior(self):
        with self.assertRaises(InvalidInstance):
            instance_from_dict(binary_tree(accuracy=1.0, full_support=True))

    def test_marginal_reconstruction(self):
        instance = self.instance
        for j in instance.agents:
            rebuilt = sum(instance.signal_mass({j: s}) * instance.posterior({j: s}) for s in range(2))
            np.testing.assert_allclose(rebuilt, instance.prior.state_mass, atol=1e-12)

    def test_posterior_moments(self):
        p = 0.64 / 0.68
        self.assertAlmostEqual(self.instance.posterior_mean({0: 1, 1: 1})[0], p, places=12)
        self.assertAlmostEqual(self.instance.posterior_variance({0: 1, 1: 1})[0], p * (1 - p), places=12)


class TestInterimPayoff(unittest.TestCase):
    def setUp(self):
        self.instance = instance_from_dict(binary_tree())

    def test_constant_utility(self):
        instance = instance_from_dict(binary_tree(utility={"name": "constant", "params": {"value": 2.5}}))
        self.assertAlmostEqual(interim_payoff(instance, 0, [0.3], 1, (1, 0)), 2.5, places=12)

    def test_quadratic_at_own_bias(self):
        # x = θ_i leaves −E[ω² | s]
        self.assertAlmostEqual(interim_payoff(self.instance, 0, [0.0], 0, (1, 1)), -0.64 / 0.68, places=12)

    def test_linear_click_value(self):
        tree = binary_tree(utility={"name": "click_value", "params": {"coordinate": 0}}, preferences=(1.0, 2.0))
        tree["outcome_space"] = {"mode": "finite", "points": [[1.0, 0.0], [0.0, 1.0]]}
        tree["allocation"] = "grid_argmax"
        instance = instance_from_dict(tree)
        self.assertAlmostEqual(interim_payoff(instance, 0, [1.0, 0.0], 1, (1, 1)), 2 * 0.64 / 0.68, places=12)
        self.assertAlmostEqual(interim_payoff(instance, 1, [1.0, 0.0], 1, (1, 1)), 0.0, places=12)

    def test_matches_manual_sum(self):
        instance = self.instance
        base = interim_payoff(instance, 1, [0.7], 1, (0, 1))
        x = np.array([0.7])
        weights = instance.posterior({0: 0, 1: 1})
        manual = float(weights @ (-(0.7 - 1.0 - instance.states.points[:, 0]) ** 2))
        self.assertAlmostEqual(base, manual, places=12)
        self.assertAlmostEqual(instance.interim_payoff(1, x, 1, (0, 1)), manual, places=12)


class TestValidation(unittest.TestCase):
    def test_load_shipped_instance(self):
        instance = load_instance(BINARY_PATH)
        self.assertEqual(instance.n_agents, 2)
        self.assertEqual(instance.closed_form, "quadratic")
        self.assertTrue(instance.full_support)

    def test_missing_section(self):
        tree = binary_tree()
        del tree["signal_kernels"]
        with self.assertRaises(InvalidInstance):
            instance_from_dict(tree)

    def test_state_prior_must_sum_to_one(self):
        tree = binary_tree()
        tree["state_grid"]["prior"] = [0.7, 0.7]
        with self.assertRaises(InvalidInstance):
            instance_from_dict(tree)

    def test_duplicate_states(self):
        with self.assertRaises(InvalidInstance):
            StateGrid(points=[0.0, 0.0])

    def test_ctr_states_must_be_probabilities(self):
        tree = binary_tree()
        tree["state_grid"]["points"] = [0.0, 1.5]
        tree["metadata"] = {"ctr": True}
        with self.assertRaises(InvalidInstance):
            instance_from_dict(tree)

    def test_unknown_utility(self):
        with self.assertRaises(InvalidInstance):
            instance_from_dict(binary_tree(utility={"name": "no_such_utility"}))

    def test_only_kl_regularization(self):
        tree = binary_tree()
        tree["regularization"] = {"alpha": 1.0, "reference": [0.5, 0.5]}
        self.assertEqual(instance_from_dict(tree).regularization.divergence, "kl")
        tree["regularization"]["divergence"] = "chi_squared"
        with self.assertRaises(InvalidInstance):
            instance_from_dict(tree)

    def test_agent_count_mismatch(self):
        tree = copy.deepcopy(binary_tree())
        tree["type_grids"] = tree["type_grids"][:1]
        with self.assertRaises(InvalidInstance):
            instance_from_dict(tree)


class TestLipschitz(unittest.TestCase):
    def test_declared_constant_holds(self):
        instance = instance_from_dict(binary_tree())
        self.assertLessEqual(check_utility_lipschitz(instance, 0), 8.0)

    def test_declared_constant_too_small(self):
        instance = instance_from_dict(binary_tree(utility={"name": "quadratic_loss", "params": {"lipschitz": 0.1}}))
        with self.assertRaises(InvalidInstance):
            check_utility_lipschitz(instance, 0)

    def test_missing_constant(self):
        instance = instance_from_dict(binary_tree(utility={"name": "quadratic_loss"}))
        with self.assertRaises(MissingLipschitzConstant):
            check_utility_lipschitz(instance, 0)

    def test_uninformative_signals(self):
        instance = instance_from_dict(binary_tree(accuracy=0.5))
        self.assertAlmostEqual(posterior_lipschitz_constant(instance), 0.0, places=12)

    def test_informative_signals(self):
        self.assertGreater(posterior_lipschitz_constant(instance_from_dict(binary_tree())), 0.0)


if __name__ == "__main__":
    unittest.main()
