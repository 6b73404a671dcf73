"""
Equilibrium audit: exhaustive unilateral-deviation search for posterior
equilibrium regret, the Lipschitz regret bound, convergence sweeps over the
estimator sample size and the message-driven impossibility certificate.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
import logging
import sys

import numpy as np
from tqdm import tqdm

from allocation import efficient_allocation
from config import AUDIT_BUDGET, DEFAULT_WORKERS, TIE_TOL, ZERO_REGRET_TOL
from estimators import EstimatorKind, EstimatorLaw, EstimatorSpec, build_law, log_log_slope
from exceptions import (
    BudgetExceeded,
    ConditionStarFails,
    EstimatorUnavailable,
    MissingLipschitzConstant,
    NumericalError,
    ZeroMassEvent,
)
from instance import Instance
from models import ImpossibilityCertificate, Profile, RateSweep, RegretReport, RegretRow, SweepRow
from transfers import HPolicy, TransferRule, generalized_vcg_transfer, vcg_transfer

logger = logging.getLogger(__name__)

EstimatorLike = Union[EstimatorSpec, EstimatorLaw, None]


def as_law(instance: Instance, rule: TransferRule, estimator: EstimatorLike) -> EstimatorLaw:
    if isinstance(estimator, EstimatorLaw):
        return estimator
    if estimator is None:
        if rule.data_driven:
            raise EstimatorUnavailable(f"{rule.kind.value} needs an estimator")
        estimator = EstimatorSpec(EstimatorKind.EX_POST)
    return build_law(estimator, instance.states, instance.n_agents)


def _with(profile: Profile, i: int, value: int) -> Profile:
    return tuple(profile[:i]) + (value,) + tuple(profile[i + 1:])


class _GroupAudit:
    """All true profiles sharing the others' reports (θ_{−i}, s_{−i}) for one agent."""

    def __init__(self, instance: Instance, rule: TransferRule, law: EstimatorLaw, i: int):
        self.instance = instance
        self.rule = rule
        self.law = law
        self.i = i
        self.theta_count = instance.types.theta_count(i)
        self.signal_count = instance.types.signal_count(i)

    def tables(self, theta_others: Profile, signals_others: Profile):
        """Transfers and own utilities for every report (θ′_i, s′_i) against fixed others."""
        instance, law, i = self.instance, self.law, self.i
        L, M = self.theta_count, self.signal_count
        K, Q = law.weights.shape
        D = L * M
        transfers = np.zeros((D, K, Q))
        own = np.zeros((D, L, K))
        valid = np.zeros(D, dtype=bool)
        for d in range(D):
            a, b = divmod(d, M)
            theta_r, signals_r = _with(theta_others, i, a), _with(signals_others, i, b)
            try:
                x = efficient_allocation(instance, theta_r, signals_r)
            except ZeroMassEvent:
                continue
            transfers[d] = self.rule.evaluate(instance, i, theta_r, signals_r, law.points)
            for a0 in range(L):
                own[d, a0] = instance.utility_on_states(i, x, a0, _with(theta_others, i, a0))
            valid[d] = True
        expected_transfers = np.sum(transfers * law.weights[None, :, :], axis=2)
        return transfers, own, expected_transfers, valid

    @staticmethod
    def payoffs(own, expected_transfers, valid, a0: int, weights: np.ndarray) -> np.ndarray:
        values = own[:, a0, :] @ weights + expected_transfers @ weights
        values[~valid] = -np.inf
        return values

    def __call__(self, task) -> Tuple[List[RegretRow], int]:
        theta_others, signals_others, targets = task
        instance, law, i = self.instance, self.law, self.i
        M = self.signal_count
        transfers, own, expected_transfers, valid = self.tables(theta_others, signals_others)

        rows, skipped = [], 0
        for a0, b0 in targets:
            theta_true, signals_true = _with(theta_others, i, a0), _with(signals_others, i, b0)
            if instance.signal_mass(dict(enumerate(signals_true))) <= 0:
                skipped += 1
                continue
            weights = instance.posterior_given(signals_true)
            values = self.payoffs(own, expected_transfers, valid, a0, weights)
            truth = a0 * M + b0
            gain = float(values.max() - values[truth])
            best = truth if gain <= TIE_TOL else int(np.argmax(values))
            if not np.isfinite(gain):
                raise NumericalError(f"Non-finite regret for agent {i} at θ={theta_true}, s={signals_true}")
            se = 0.0
            if law.monte_carlo and best != truth:
                per_replication = float((own[best, a0] - own[truth, a0]) @ weights) \
                    + weights @ (transfers[best] - transfers[truth])
                se = float(per_replication.std(ddof=1) / np.sqrt(per_replication.size))
            rows.append(RegretRow(agent=i, theta=theta_true, signals=signals_true,
                                  best_dev_theta=best // M, best_dev_s=best % M, gain=gain, se=se))
        return rows, skipped


def _group_tasks(instance: Instance, i: int, profiles: Optional[Iterable[Tuple[Profile, Profile]]]):
    """Group true profiles by (θ_{−i}, s_{−i}); each task carries its own (θ_i, s_i) targets."""
    groups: Dict[Tuple[Profile, Profile], List[Tuple[int, int]]] = {}
    if profiles is None:
        own = [(a, b) for a in range(instance.types.theta_count(i)) for b in range(instance.types.signal_count(i))]
        for theta in instance.theta_profiles():
            if theta[i] != 0:
                continue
            for signals in instance.signal_profiles():
                if signals[i] != 0:
                    continue
                groups[(theta, signals)] = list(own)
    else:
        for theta, signals in profiles:
            key = (_with(theta, i, 0), _with(signals, i, 0))
            groups.setdefault(key, []).append((theta[i], signals[i]))
    return [(theta, signals, targets) for (theta, signals), targets in groups.items()]


def posterior_regret(instance: Instance, rule: TransferRule, estimator: EstimatorLike = None,
                     budget: int = AUDIT_BUDGET, workers: int = DEFAULT_WORKERS,
                     profiles: Optional[Sequence[Tuple[Profile, Profile]]] = None,
                     agents: Optional[Sequence[int]] = None) -> RegretReport:
    """Best unilateral deviation gain for every agent and true profile.

    `profiles` restricts the audit to selected (θ, s) profiles; `agents` to selected agents.
    """
    law = as_law(instance, rule, estimator)
    agents = instance.agents if agents is None else tuple(agents)
    tasks = {i: _group_tasks(instance, i, profiles) for i in agents}
    evaluations = sum(
        len(targets) * instance.types.theta_count(i) * instance.types.signal_count(i)
        for i in agents for _, _, targets in tasks[i]
    )
    if evaluations > budget:
        raise BudgetExceeded(f"Audit needs {evaluations} deviation evaluations, budget is {budget}")
    logger.info(f"Auditing {rule.label} with {law.spec.label}: {evaluations} deviation evaluations")

    jobs = [(i, task) for i in agents for task in tasks[i]]
    auditors = {i: _GroupAudit(instance, rule, law, i) for i in agents}

    def run(job):
        i, task = job
        return auditors[i](task)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    rows = [row for group_rows, _ in results for row in group_rows]
    rows.sort(key=lambda row: (row.agent, row.theta, row.signals))
    report = RegretReport(rows=rows, monte_carlo=law.monte_carlo,
                          skipped_profiles=sum(skipped for _, skipped in results))
    logger.info(f"Audit finished: ε={report.epsilon:.6g} over {len(rows)} profiles")
    return report


def deviation_payoffs(instance: Instance, rule: TransferRule, estimator: EstimatorLike, i: int,
                      theta: Profile, signals: Profile) -> np.ndarray:
    """Agent i's interim payoff for every report (θ′_i, s′_i) at the true profile (θ, s).

    Returns a (θ count, signal count) array; reports whose conditioning event has
    zero mass are -inf.
    """
    if instance.signal_mass(dict(enumerate(signals))) <= 0:
        raise ZeroMassEvent(f"Signal profile {signals} has zero mass")
    audit = _GroupAudit(instance, rule, as_law(instance, rule, estimator), i)
    _, own, expected_transfers, valid = audit.tables(_with(theta, i, 0), _with(signals, i, 0))
    values = audit.payoffs(own, expected_transfers, valid, theta[i], instance.posterior_given(signals))
    return values.reshape(audit.theta_count, audit.signal_count)


def regret_upper_bound(instance: Instance, i: int, estimator: Union[EstimatorSpec, EstimatorLaw]) -> float:
    """2 · max_s Σ_{j≠i} L_j · E[‖ω − ω̂‖ | s]."""
    constants = []
    for j in instance.others(i):
        lipschitz = instance.utilities[j].lipschitz
        if lipschitz is None:
            raise MissingLipschitzConstant(f"Agent {j} declares no Lipschitz constant")
        constants.append(lipschitz)
    if not constants or sum(constants) == 0:
        return 0.0
    law = estimator if isinstance(estimator, EstimatorLaw) else build_law(estimator, instance.states, instance.n_agents)
    deviation = law.mean_abs_deviation(instance.states)
    worst = 0.0
    for signals in instance.signal_profiles():
        if instance.signal_mass(dict(enumerate(signals))) <= 0:
            continue
        worst = max(worst, float(instance.posterior_given(signals) @ deviation))
    return 2.0 * sum(constants) * worst


def uniform_convergence_gap(instance: Instance, estimator: Union[EstimatorSpec, EstimatorLaw]) -> float:
    """sup over i, θ_i, probe allocations x and signal profiles of |v_i − E_{ω̂} u_i|."""
    law = estimator if isinstance(estimator, EstimatorLaw) else build_law(estimator, instance.states, instance.n_agents)
    profiles = [s for s in instance.signal_profiles() if instance.signal_mass(dict(enumerate(s))) > 0]
    posteriors = np.array([instance.posterior_given(s) for s in profiles])
    reference = tuple(0 for _ in instance.agents)
    worst = 0.0
    for i in instance.agents:
        utility = instance.utilities[i]
        for x in instance.outcome_space.probe_points():
            for t in range(instance.types.theta_count(i)):
                theta = instance.types.theta_value(i, t)
                profile = instance.theta_values(_with(reference, i, t))
                exact = utility(x, instance.states.points, theta, profile)
                estimated = law.expectation(utility(x, law.points, theta, profile))
                worst = max(worst, float(np.max(np.abs(posteriors @ (exact - estimated)))))
    return worst


def convergence_sweep(instance: Instance, rule: TransferRule, family: EstimatorSpec, m_list: Sequence[int],
                      budget: int = AUDIT_BUDGET, workers: int = DEFAULT_WORKERS) -> RateSweep:
    """ε_m, the regret bound and r_m·ε_m across sample sizes, with the log-log slope of ε_m."""
    m_list = [int(m) for m in m_list]
    if any(m < 1 for m in m_list) or any(b <= a for a, b in zip(m_list, m_list[1:])):
        raise EstimatorUnavailable(f"Sample sizes must be positive and strictly increasing: {m_list}")
    rows = []
    for m in tqdm(m_list, desc="sweep", disable=not sys.stderr.isatty()):
        spec = family.with_m(m)
        law = build_law(spec, instance.states, instance.n_agents)
        report = posterior_regret(instance, rule, law, budget=budget, workers=workers)
        try:
            bound = max(regret_upper_bound(instance, i, law) for i in instance.agents)
        except MissingLipschitzConstant as e:
            logger.warning(f"No regret bound at m={m}: {e}")
            bound = None
        r_m = family.rate(m)
        epsilon = report.epsilon
        rows.append(SweepRow(m=m, epsilon=epsilon, bound=bound, r_m=r_m, r_eps=r_m * epsilon,
                             se=report.epsilon_se,
                             mean_abs_dev=float(np.max(law.mean_abs_deviation(instance.states)))))
        logger.info(f"m={m}: ε={epsilon:.6g} (se {report.epsilon_se:.3g}), bound={bound}")

    epsilons = [row.epsilon for row in rows]
    exact = all(eps <= ZERO_REGRET_TOL for eps in epsilons)
    slope = None if exact else log_log_slope(m_list, epsilons, tol=ZERO_REGRET_TOL)
    if slope is None and not exact:
        logger.warning("Fewer than two nonzero ε_m values; slope undefined")
    bounds = [row.bound for row in rows]
    bound_slope = log_log_slope(m_list, bounds, tol=ZERO_REGRET_TOL) if all(b is not None for b in bounds) else None
    return RateSweep(rows=rows, slope=slope, bound_slope=bound_slope, exact=exact)


def impossibility_certificate(instance: Instance, s1: int, s1_prime: int, s2: int,
                              theta_a: int, theta_b: int, theta2: int) -> ImpossibilityCertificate:
    """Witness that no transfer is both a VCG and a generalized VCG transfer for agent 1.

    Arguments are grid indices: s1, s1_prime into agent 0's signals, s2 into agent 1's,
    theta_a, theta_b into agent 0's preferences and theta2 into agent 1's.
    """
    types = instance.types
    signals, signals_prime = (s1, s2), (s1_prime, s2)
    mean_s = float(instance.posterior_mean(dict(enumerate(signals)))[0])
    mean_sp = float(instance.posterior_mean(dict(enumerate(signals_prime)))[0])
    var_s = float(instance.posterior_variance(dict(enumerate(signals)))[0])
    var_sp = float(instance.posterior_variance(dict(enumerate(signals_prime)))[0])
    t2 = types.theta_value(1, theta2)
    ta, tb = types.theta_value(0, theta_a), types.theta_value(0, theta_b)
    record = ImpossibilityCertificate(
        s1=float(types.signal_value(0, s1)[0]), s1_prime=float(types.signal_value(0, s1_prime)[0]),
        s2=float(types.signal_value(1, s2)[0]), theta2=t2, theta_a=ta, theta_b=tb,
        mean_s=mean_s, mean_s_prime=mean_sp, var_s=var_s, var_s_prime=var_sp,
        delta_mean=mean_s - mean_sp,
    )
    if abs(record.delta_mean) <= ZERO_REGRET_TOL:
        raise ConditionStarFails(f"E[ω|s] = E[ω|s'] (gap {record.delta_mean:.3g}); no witness", record)

    def implied_h_difference(theta_1: int) -> float:
        # h_1 = generalized VCG (k = 0) minus the Groves sum, compared across s1 and s1'
        theta = (theta_1, theta2)

        def h(sig):
            return generalized_vcg_transfer(instance, 0, theta, sig) - vcg_transfer(instance, 0, theta, sig, HPolicy.ZERO)

        return h(signals) - h(signals_prime)

    def identity(theta_value: float) -> float:
        return var_s - var_sp - (theta_value - t2) * record.delta_mean

    record.rhs_a, record.rhs_b = identity(ta), identity(tb)
    record.implied_h_diff_a = implied_h_difference(theta_a)
    record.implied_h_diff_b = implied_h_difference(theta_b)
    for implied, rhs in ((record.implied_h_diff_a, record.rhs_a), (record.implied_h_diff_b, record.rhs_b)):
        if abs(implied - rhs) > ZERO_REGRET_TOL:
            raise NumericalError(f"Transfer classes disagree with the closed-form identity: {implied} vs {rhs}")
    record.gap = abs(record.rhs_a - record.rhs_b)
    record.expected_gap = abs(ta - tb) * abs(record.delta_mean)
    record.certified = record.gap > ZERO_REGRET_TOL and abs(record.gap - record.expected_gap) <= ZERO_REGRET_TOL
    logger.info(f"Impossibility certificate: ΔE={record.delta_mean:.6g}, gap={record.gap:.6g}, "
                f"certified={record.certified}")
    return record
