"""
run_experiments.py - Batch front door for mechanism experiments

    python run_experiments.py run --config configs/quadratic_expost.json
    python run_experiments.py sweep configs/quadratic_sweep.json --m 4..4096
    python run_experiments.py certify-impossibility configs/impossibility.json
    python run_experiments.py list-scenarios

Exit codes: 0 success, 2 configuration error, 3 audit budget exceeded,
4 numerical failure.
"""
from typing import Any, Dict, List, Optional, Sequence
import argparse
import logging
import sys

import numpy as np

from allocation import max_discretization_gap
from config import LOGGING_FORMAT, LOGGING_LEVEL, MC_SE_MULTIPLIER, ZERO_REGRET_TOL
from equilibrium_audit import (
    as_law,
    convergence_sweep,
    impossibility_certificate,
    posterior_regret,
    regret_upper_bound,
)
from exceptions import (
    BudgetExceeded,
    ConditionStarFails,
    ConfigError,
    EstimatorUnavailable,
    InvalidInstance,
    InvalidScenarioParameters,
    MechanismLabError,
    MissingLipschitzConstant,
    PreconditionFails,
    TransferRuleError,
    UnsupportedScenario,
)
from experiment_config import ExperimentConfig
from models import RateSweep, SweepRow
from reports import ReportWriter, package_versions, with_provenance
from scenarios import (
    BuiltScenario,
    ScenarioSpec,
    build,
    individual_ctr_manipulation_demo,
    interdependent_counterexample_demo,
    list_scenarios,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_NUMERICAL = 4

CONFIG_ERRORS = (ConfigError, InvalidScenarioParameters, UnsupportedScenario, EstimatorUnavailable,
                 TransferRuleError, InvalidInstance, PreconditionFails)


def parse_m_list(text: str) -> List[int]:
    """'4..4096' expands to 4, 16, 64, ... up to 4096; '4,16,64' is taken literally."""
    try:
        if ".." in text:
            start, stop = (int(part) for part in text.split("..", 1))
            if start < 1 or stop < start:
                raise ValueError
            values = []
            m = start
            while m <= stop:
                values.append(m)
                m *= 4
            return values
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"Cannot read sample sizes from '{text}'")


def _provenance(config: ExperimentConfig) -> Dict[str, Any]:
    return {"config_hash": config.config_hash(), "seed": config.effective_seed,
            "versions": package_versions(), "config_name": config.name}


def _build(config: ExperimentConfig) -> BuiltScenario:
    return build(ScenarioSpec(config.scenario.name, dict(config.scenario.params)))


def _worst_row(report, instance) -> Optional[Dict[str, Any]]:
    row = report.worst_row
    if row is None:
        return None
    return {"agent": row.agent, "theta_idx": list(row.theta), "s_idx": list(row.signals),
            "best_dev_theta": row.best_dev_theta, "best_dev_s": row.best_dev_s,
            "best_dev_theta_value": instance.types.theta_value(row.agent, row.best_dev_theta),
            "gain": row.gain, "se": row.se}


def _discretization_gap(config: ExperimentConfig, built: BuiltScenario) -> Optional[float]:
    instance = built.instance
    if instance.closed_form is None and instance.allocation_mode != "kl_closed_form":
        return None
    return max_discretization_gap(instance, limit=config.audit.discretization_profiles)


def _certificate(config: ExperimentConfig, built: BuiltScenario) -> Dict[str, Any]:
    section = config.certificate
    if section is None:
        raise ConfigError("This command needs a 'certificate' section")
    types = built.instance.types
    try:
        record = impossibility_certificate(
            built.instance,
            s1=types.index_of("signal", 0, section.s1),
            s1_prime=types.index_of("signal", 0, section.s1_prime),
            s2=types.index_of("signal", 1, section.s2),
            theta_a=types.index_of("theta", 0, section.theta_a),
            theta_b=types.index_of("theta", 0, section.theta_b),
            theta2=types.index_of("theta", 1, section.theta2),
        )
    except ConditionStarFails as e:
        logger.warning(f"Condition (✳) fails: {e}")
        record = e.record
    return record.to_dict()


def _demo(config: ExperimentConfig, built: BuiltScenario) -> Optional[Dict[str, Any]]:
    if config.demo is None:
        return None
    scenario = built.instance.metadata.get("scenario")
    if scenario == "ctr_individual":
        return individual_ctr_manipulation_demo(built, config.demo.theta, config.demo.signals).to_dict()
    if scenario == "interdependent_counterexample":
        return interdependent_counterexample_demo(built, config.demo.theta, config.demo.signals).to_dict()
    raise ConfigError(f"Scenario {scenario} has no scripted demo")


def run(config: ExperimentConfig) -> Dict[str, str]:
    """Audit one scenario × rule × estimator and write regret_report.csv, rate_sweep.csv, summary.json."""
    built = _build(config)
    instance = built.instance
    rule = config.build_rule(built)
    spec = config.build_estimator(built)
    law = as_law(instance, rule, spec)
    report = posterior_regret(instance, rule, law, budget=config.audit.budget, workers=config.audit.workers)
    gap = _discretization_gap(config, built)
    try:
        bound = max(regret_upper_bound(instance, i, law) for i in instance.agents)
    except MissingLipschitzConstant as e:
        logger.warning(f"No regret bound: {e}")
        bound = None

    tolerance = ZERO_REGRET_TOL + (gap or 0.0) + MC_SE_MULTIPLIER * report.epsilon_se
    labels = dict(scenario=config.scenario.name, rule=rule.label, estimator=spec.label,
                  m=spec.m, seed=config.effective_seed)
    r_m = spec.rate() if spec.m else None
    single = RateSweep(rows=[SweepRow(m=spec.m or 0, epsilon=report.epsilon, bound=bound,
                                      r_m=r_m if r_m is not None else float("nan"),
                                      r_eps=r_m * report.epsilon if r_m is not None else float("nan"),
                                      se=report.epsilon_se,
                                      mean_abs_dev=float(np.max(law.mean_abs_deviation(instance.states))))],
                       slope=None, exact=report.epsilon <= ZERO_REGRET_TOL)
    summary = {
        "command": "run",
        **labels,
        "epsilon": report.epsilon,
        "epsilon_se": report.epsilon_se,
        "agent_epsilon": [report.agent_epsilon(i) for i in instance.agents],
        "tolerance": tolerance,
        "zero_within_tolerance": report.epsilon <= tolerance,
        "discretization_gap": gap,
        "regret_bound": bound,
        "profiles_audited": len(report.rows),
        "skipped_profiles": report.skipped_profiles,
        "monte_carlo": report.monte_carlo,
        "worst": _worst_row(report, instance),
        "provenance": _provenance(config),
    }
    if config.certificate is not None:
        summary["certificate"] = _certificate(config, built)
    demo = _demo(config, built)
    if demo is not None:
        summary["demo"] = demo

    writer = ReportWriter(config.output_dir)
    writer.add_table("regret_report.csv", with_provenance(report.to_frame(), **labels))
    sweep_labels = dict(labels)
    sweep_labels.pop("m")
    writer.add_table("rate_sweep.csv", with_provenance(single.to_frame(), m=None, **sweep_labels))
    writer.add_document("summary.json", summary)
    logger.info(f"ε = {report.epsilon:.6g} (tolerance {tolerance:.3g})")
    return writer.write()


def sweep(config: ExperimentConfig, m_list: Optional[Sequence[int]] = None) -> Dict[str, str]:
    """ε_m over the sample-size list; writes rate_sweep.csv, rate_sweep_long.csv, summary.json."""
    built = _build(config)
    instance = built.instance
    rule = config.build_rule(built)
    family = config.build_estimator(built)
    m_list = list(m_list) if m_list is not None else list(config.sweep.m)
    if any(b <= a for a, b in zip(m_list, m_list[1:])):
        raise ConfigError(f"Sample sizes must be strictly increasing: {m_list}")
    result = convergence_sweep(instance, rule, family, m_list,
                               budget=config.audit.budget, workers=config.audit.workers)
    labels = dict(scenario=config.scenario.name, rule=rule.label, estimator=family.kind.value,
                  m=None, seed=config.effective_seed)
    frame = result.to_frame()
    rows = result.rows
    summary = {
        "command": "sweep",
        **labels,
        "m": m_list,
        "epsilon": [row.epsilon for row in rows],
        "epsilon_se": [row.se for row in rows],
        "bound": [row.bound for row in rows],
        "r_eps": [row.r_eps for row in rows],
        "slope": result.slope,
        "bound_slope": result.bound_slope,
        "exact": result.exact,
        "within_bound": all(row.bound is None or row.epsilon <= row.bound + MC_SE_MULTIPLIER * row.se
                            for row in rows),
        "provenance": _provenance(config),
    }
    labels.pop("m")
    writer = ReportWriter(config.output_dir)
    writer.add_table("rate_sweep.csv", with_provenance(frame, m=None, **labels))
    writer.add_table("rate_sweep_long.csv", with_provenance(result.to_long_frame(), m=None, **labels))
    writer.add_document("summary.json", summary)
    logger.info(f"Sweep slope {result.slope}, bound slope {result.bound_slope}")
    return writer.write()


def certify(config: ExperimentConfig) -> Dict[str, str]:
    built = _build(config)
    record = _certificate(config, built)
    record["provenance"] = _provenance(config)
    writer = ReportWriter(config.output_dir)
    writer.add_document("certificate.json", record)
    return writer.write()


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Audit data-driven VCG mechanisms on finite instances.")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "audit one configuration"),
                            ("sweep", "regret across estimator sample sizes"),
                            ("certify-impossibility", "witness for message-driven impossibility")):
        command = commands.add_parser(name, help=help_text)
        command.add_argument("config_path", nargs="?", help="experiment config (JSON)")
        command.add_argument("--config", dest="config_flag", help="experiment config (JSON)")
        command.add_argument("--seed", type=int, default=None, help="override the master seed")
        command.add_argument("--workers", type=int, default=None, help="audit worker threads")
        command.add_argument("--out", default=None, help="output directory")
        if name == "sweep":
            command.add_argument("--m", default=None, help="sample sizes, e.g. 4..4096 or 4,16,64")
    commands.add_parser("list-scenarios", help="registered scenario names")
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=LOGGING_LEVEL, format=LOGGING_FORMAT)
    args = parse_args(argv)
    if args.command == "list-scenarios":
        for name, description in list_scenarios():
            print(f"{name:32s} {description}")
        return EXIT_OK
    try:
        path = args.config_flag or args.config_path
        if path is None:
            raise ConfigError("No config given (use --config PATH)")
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        config = ExperimentConfig.load(path).with_overrides(args.seed, args.workers, args.out)
        if args.command == "run":
            written = run(config)
        elif args.command == "sweep":
            written = sweep(config, parse_m_list(args.m) if args.m else None)
        else:
            written = certify(config)
    except CONFIG_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExceeded as e:
        logger.error(f"BudgetExceeded: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except (MechanismLabError, FloatingPointError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    for filename, path in written.items():
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
