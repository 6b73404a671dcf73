import unittest
from scenarios import ScenarioSpec, build
from equilibrium_audit import posterior_regret

class TestMinimalAudit(unittest.TestCase):
    def test_minimal_input(self):
        built = build(ScenarioSpec("quadratic_loss", {"state_points": 7, "signal_points": 3, "theta_points": 2}))
        report = posterior_regret(built.instance, built.default_rule, built.default_estimator)
        frame = report.to_frame()
        self.assertIn("gain", frame.columns)
        self.assertIn("best_dev_theta", frame.columns)
        self.assertGreaterEqual(len(report.rows), 1)
        self.assertLessEqual(report.epsilon, 1e-9)
