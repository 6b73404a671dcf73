"""
Transfer rules.

Sign convention: t_i is the transfer paid *to* agent i; charges are negative.
Every rule exposes a vectorised evaluator over estimate draws ω̂ so that audits
can integrate a whole estimator law in one call.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Mapping, Optional, Tuple, Union
import logging

import numpy as np
from scipy.integrate import quad
from scipy.stats import norm

from allocation import efficient_allocation, kl_divergence, kl_partition_function, aggregate_rewards
from estimators import EstimatorLaw, EstimatorSpec, build_law
from exceptions import (
    TransferRuleError,
    UnsupportedScenario,
    EstimatorUnavailable,
    MissingSecondStageReport,
)
from instance import Instance
from models import EstimateDraw, Profile

logger = logging.getLogger(__name__)


class TransferKind(Enum):
    VCG = "vcg"
    GENERALIZED_VCG = "generalized_vcg"
    DATA_DRIVEN_VCG = "data_driven_vcg"
    REGULARIZED_DATA_DRIVEN_VCG = "regularized_data_driven_vcg"
    PER_CLICK_PIVOT = "per_click_pivot"
    PER_IMPRESSION = "per_impression"
    LEAVE_ONE_OUT = "leave_one_out"


MESSAGE_DRIVEN = {TransferKind.VCG, TransferKind.GENERALIZED_VCG}


class HPolicy(Enum):
    ZERO = "zero"
    PIVOT = "pivot"


def _others_utility(instance: Instance, i: int, x: np.ndarray, omega_hat: np.ndarray, theta: Profile) -> np.ndarray:
    """Σ_{j≠i} u_j(x, ω̂, θ_j), vectorised over the leading axes of ω̂."""
    total = np.zeros(omega_hat.shape[:-1])
    profile = instance.theta_values(theta)
    for j in instance.others(i):
        total = total + instance.utilities[j](x, omega_hat, instance.types.theta_value(j, theta[j]), profile)
    return total


def _others_interim(instance: Instance, i: int, x: np.ndarray, theta: Profile, signals: Profile,
                    agents: Tuple[int, ...]) -> float:
    """Σ_{j≠i} v_j(x, θ_j, s) with the posterior conditioned on `agents`' signals."""
    return sum(instance.interim_payoff(j, x, theta[j], signals, agents=agents, theta_profile=theta)
               for j in instance.others(i))


def _regularization_penalty(instance: Instance, x: np.ndarray) -> float:
    objective = instance.regularization
    if objective is None:
        return 0.0
    return objective.alpha * kl_divergence(x, objective.reference)


def _click_coordinate(instance: Instance, j: int) -> int:
    coordinate = getattr(instance.utilities[j], "coordinate", None)
    if coordinate is None or not instance.metadata.get("ctr"):
        raise UnsupportedScenario("Per-click rules need a single-slot CTR scenario")
    return coordinate


@dataclass(frozen=True)
class TransferRule:
    """A payment rule with its h-offset policy.

    h_offset adds a constant to every agent's h_i. k_offset is the constant k_i
    of the generalized VCG class. For leave-one-out rules `aggregation` is
    'mean' or 'designated'; `designated` maps agent i to the agent whose
    second-stage report forms ω̂_{−i}.
    """
    kind: TransferKind
    h_policy: HPolicy = HPolicy.PIVOT
    h_offset: float = 0.0
    k_offset: float = 0.0
    aggregation: str = "mean"
    designated: Optional[Dict[int, int]] = field(default=None, hash=False, compare=False)

    def __post_init__(self):
        try:
            if isinstance(self.kind, str):
                object.__setattr__(self, "kind", TransferKind(self.kind))
            if isinstance(self.h_policy, str):
                object.__setattr__(self, "h_policy", HPolicy(self.h_policy))
        except ValueError as e:
            raise TransferRuleError(str(e))
        if self.aggregation not in ("mean", "designated"):
            raise TransferRuleError(f"Unknown leave-one-out aggregation '{self.aggregation}'")

    @property
    def data_driven(self) -> bool:
        return self.kind not in MESSAGE_DRIVEN

    @property
    def label(self) -> str:
        if self.kind in (TransferKind.PER_CLICK_PIVOT, TransferKind.PER_IMPRESSION, TransferKind.GENERALIZED_VCG):
            return self.kind.value
        return f"{self.kind.value}[{self.h_policy.value}]"

    def evaluate(self, instance: Instance, i: int, theta: Profile, signals: Profile,
                 omega_hat: np.ndarray) -> np.ndarray:
        """t_i(θ, s, ω̂) for every draw in omega_hat (shape (..., d))."""
        omega_hat = np.asarray(omega_hat, dtype=float)
        kind = self.kind
        if kind in MESSAGE_DRIVEN:
            value = self._message_driven(instance, i, theta, signals)
            return np.full(omega_hat.shape[:-1], value)
        x = efficient_allocation(instance, theta, signals)
        if kind == TransferKind.PER_CLICK_PIVOT:
            price = per_click_pivot(instance, i, theta)
            return -price * float(x[i]) * omega_hat[..., _click_coordinate(instance, i)] + self.h_offset
        if kind == TransferKind.PER_IMPRESSION:
            charge = np.zeros(omega_hat.shape[:-1])
            for j in instance.others(i):
                bid = instance.types.theta_value(j, theta[j]) * omega_hat[..., _click_coordinate(instance, j)]
                charge = np.maximum(charge, bid)
            return -float(x[i]) * charge + self.h_offset
        if kind == TransferKind.REGULARIZED_DATA_DRIVEN_VCG and instance.regularization is None:
            raise UnsupportedScenario("Regularized transfers need an instance with a KL objective")

        value = _others_utility(instance, i, x, omega_hat, theta) - _regularization_penalty(instance, x)
        if self.h_policy == HPolicy.PIVOT:
            self._check_pivot(instance)
            x_minus = efficient_allocation(instance, theta, signals, instance.others(i))
            value = value - _others_utility(instance, i, x_minus, omega_hat, theta) \
                + _regularization_penalty(instance, x_minus)
        return value + self.h_offset

    def _check_pivot(self, instance: Instance):
        if instance.profile_dependent:
            raise TransferRuleError("Pivot offsets are undefined when utilities depend on the whole profile")

    def _message_driven(self, instance: Instance, i: int, theta: Profile, signals: Profile) -> float:
        if self.kind == TransferKind.GENERALIZED_VCG:
            return generalized_vcg_transfer(instance, i, theta, signals, k=self.k_offset)
        x = efficient_allocation(instance, theta, signals)
        value = _others_interim(instance, i, x, theta, signals, instance.agents) - _regularization_penalty(instance, x)
        if self.h_policy == HPolicy.PIVOT:
            self._check_pivot(instance)
            others = instance.others(i)
            x_minus = efficient_allocation(instance, theta, signals, others)
            value -= _others_interim(instance, i, x_minus, theta, signals, others) - _regularization_penalty(instance, x_minus)
        return value + self.h_offset

    def transfer(self, instance: Instance, i: int, theta: Profile, signals: Profile,
                 draw: Optional[EstimateDraw] = None,
                 second_stage: Optional[Mapping[int, np.ndarray]] = None) -> float:
        """Realized transfer to agent i for one report profile."""
        if not self.data_driven:
            if draw is not None:
                raise TransferRuleError(f"{self.kind.value} is message-driven and takes no estimate draw")
            return self._message_driven(instance, i, theta, signals)
        if self.kind == TransferKind.LEAVE_ONE_OUT:
            if second_stage is None:
                raise MissingSecondStageReport("Leave-one-out transfer needs second-stage reports")
            estimate = leave_one_out_estimate(instance, i, second_stage, self.aggregation, self.designated)
            if estimate is None:
                return self.h_offset
            return float(self.evaluate(instance, i, theta, signals, estimate[None, :])[0])
        if draw is None:
            raise TransferRuleError(f"{self.kind.value} needs an estimate draw")
        return float(self.evaluate(instance, i, theta, signals, draw.value[None, :])[0])


def vcg_transfer(instance: Instance, i: int, theta: Profile, signals: Profile,
                 h_policy: HPolicy = HPolicy.PIVOT) -> float:
    """h_i(θ_{−i}; s) + Σ_{j≠i} v_j(x*(θ,s), θ_j, s)."""
    return TransferRule(TransferKind.VCG, h_policy=HPolicy(h_policy)).transfer(instance, i, theta, signals)


def _require_quadratic(instance: Instance):
    if instance.metadata.get("scenario") != "quadratic_loss" or instance.n_agents != 2:
        raise UnsupportedScenario("Generalized VCG transfers ship only for the two-agent quadratic-loss scenario")


def generalized_vcg_transfer(instance: Instance, i: int, theta: Profile, signals: Profile, k: float = 0.0) -> float:
    """k_i(s_{−i}; θ) − (θ_i − θ_j)·E[ω|s]."""
    _require_quadratic(instance)
    j = 1 - i
    gap = instance.types.theta_value(i, theta[i]) - instance.types.theta_value(j, theta[j])
    mean = float(instance.posterior_mean(dict(enumerate(signals)))[0])
    return k - gap * mean


def _gaussian_posterior_moments(instance: Instance, signal_values) -> Tuple[float, float]:
    """Mean and variance of ω on the state grid under continuous Gaussian signal likelihoods."""
    if instance.metadata.get("state_model") != "gaussian":
        raise UnsupportedScenario("Continuous signal likelihoods exist only for the Gaussian state model")
    sigma = float(instance.metadata["signal_sigma"])
    states = instance.states.points[:, 0]
    log_weights = np.log(instance.prior.state_mass)
    for value in signal_values:
        log_weights = log_weights + norm.logpdf(value, loc=states, scale=sigma)
    weights = np.exp(log_weights - log_weights.max())
    weights /= weights.sum()
    mean = float(weights @ states)
    return mean, float(weights @ (states - mean) ** 2)


def continuous_posterior_mean(instance: Instance, signal_values) -> float:
    return _gaussian_posterior_moments(instance, signal_values)[0]


def generalized_vcg_integral(instance: Instance, i: int, theta: Profile, signal_values,
                             lower: float = 0.0) -> float:
    """−(θ_i − θ_j) ∫_{lower}^{s_i} ∂/∂v E[ω | v, s_j] dv, integrated numerically.

    Under Gaussian likelihoods ∂E[ω|v, s_j]/∂v = Var[ω|v, s_j]/σ_s².
    """
    _require_quadratic(instance)
    j = 1 - i
    gap = instance.types.theta_value(i, theta[i]) - instance.types.theta_value(j, theta[j])
    sigma = float(instance.metadata["signal_sigma"])
    s_other = float(signal_values[j])

    def slope(v):
        return _gaussian_posterior_moments(instance, [v, s_other])[1] / sigma ** 2

    integral, _ = quad(slope, lower, float(signal_values[i]), epsabs=1e-13, epsrel=1e-12, limit=200)
    return -gap * integral


def data_driven_vcg_transfer(instance: Instance, i: int, theta: Profile, signals: Profile,
                             draw: EstimateDraw, h_policy: HPolicy = HPolicy.PIVOT) -> float:
    """h_i(θ_{−i}, s_{−i}, ω̂) + Σ_{j≠i} u_j(x*(θ,s), ω̂, θ_j)."""
    rule = TransferRule(TransferKind.DATA_DRIVEN_VCG, h_policy=HPolicy(h_policy))
    return rule.transfer(instance, i, theta, signals, draw=draw)


def expected_transfer(instance: Instance, rule: TransferRule, i: int,
                      reported_theta: Profile, reported_signals: Profile, true_signals: Profile,
                      estimator: Union[EstimatorSpec, EstimatorLaw, None] = None) -> Tuple[float, float]:
    """Σ_ω P(ω|s) E_{ω̂|ω}[t_i(θ′, s′, ω̂)], with a Monte Carlo standard error (0 for exact laws)."""
    if not rule.data_driven:
        return rule.transfer(instance, i, reported_theta, reported_signals), 0.0
    if estimator is None:
        raise EstimatorUnavailable(f"{rule.kind.value} needs an estimator law")
    law = estimator if isinstance(estimator, EstimatorLaw) else build_law(estimator, instance.states, instance.n_agents)
    weights = instance.posterior_given(true_signals)
    values = rule.evaluate(instance, i, reported_theta, reported_signals, law.points)
    value = float(weights @ law.expectation(values))
    if not law.monte_carlo:
        return value, 0.0
    per_replication = weights @ values
    return value, float(per_replication.std(ddof=1) / np.sqrt(per_replication.size))


def regularized_data_driven_vcg_transfer(instance: Instance, i: int, theta: Profile, signals: Profile,
                                         draw: EstimateDraw, h_policy: HPolicy = HPolicy.PIVOT) -> float:
    """h_i + Σ_{j≠i} u_j(x*, ω̂, θ_j) − α ρ(x*, x_0)."""
    if instance.allocation_mode != "kl_closed_form" or instance.regularization is None:
        raise UnsupportedScenario("Regularized transfers need the KL-regularized token scenario")
    rule = TransferRule(TransferKind.REGULARIZED_DATA_DRIVEN_VCG, h_policy=HPolicy(h_policy))
    return rule.transfer(instance, i, theta, signals, draw=draw)


def log_partition(instance: Instance, theta: Profile, signals: Profile, agents: Tuple[int, ...]) -> float:
    objective = instance.regularization
    rewards = aggregate_rewards(instance, theta, signals, agents)
    return kl_partition_function(rewards, objective.reference, objective.alpha)[1]


def marginal_contribution(instance: Instance, i: int, theta: Profile, signals: Profile) -> float:
    """α[log Z(θ, s) − log Z(θ_{−i}, s_{−i})] − v_i(x*(θ,s), θ_i, s)."""
    if instance.regularization is None:
        raise UnsupportedScenario("Marginal contribution form needs a KL objective")
    alpha = instance.regularization.alpha
    x = efficient_allocation(instance, theta, signals)
    own = instance.interim_payoff(i, x, theta[i], signals, theta_profile=theta)
    return alpha * (log_partition(instance, theta, signals, instance.agents)
                    - log_partition(instance, theta, signals, instance.others(i))) - own


def posterior_shift_correction(instance: Instance, i: int, theta: Profile, signals: Profile) -> float:
    """Σ_{j≠i} [v_j(x*_{−i}, θ_j, s_{−i}) − v_j(x*_{−i}, θ_j, s)].

    The ex-post expected pivot transfer equals marginal_contribution plus this
    term; it vanishes when i's signal does not move the others' valuation of x*_{−i}.
    """
    others = instance.others(i)
    x_minus = efficient_allocation(instance, theta, signals, others)
    return _others_interim(instance, i, x_minus, theta, signals, others) \
        - _others_interim(instance, i, x_minus, theta, signals, instance.agents)


def regularized_pivot_closed_form(instance: Instance, i: int, theta: Profile, signals: Profile,
                                  draw: EstimateDraw) -> float:
    """Log-partition form of the regularized pivot transfer, with the u_j − v_j corrections."""
    if instance.regularization is None:
        raise UnsupportedScenario("Regularized pivot closed form needs a KL objective")
    others = instance.others(i)
    omega_hat = draw.value[None, :]
    x = efficient_allocation(instance, theta, signals)
    x_minus = efficient_allocation(instance, theta, signals, others)
    full_correction = float(_others_utility(instance, i, x, omega_hat, theta)[0]) \
        - _others_interim(instance, i, x, theta, signals, instance.agents)
    minus_correction = float(_others_utility(instance, i, x_minus, omega_hat, theta)[0]) \
        - _others_interim(instance, i, x_minus, theta, signals, others)
    return marginal_contribution(instance, i, theta, signals) + full_correction - minus_correction


def per_click_pivot(instance: Instance, i: int, theta: Profile) -> float:
    """Per-click price max_{j≠i} θ_j, charged on the winner's realized clicks."""
    if not instance.metadata.get("ctr"):
        raise UnsupportedScenario("Per-click pivot prices need a single-slot CTR scenario")
    bids = [instance.types.theta_value(j, theta[j]) for j in instance.others(i)]
    return max(bids) if bids else 0.0


def per_click_expected_payment(instance: Instance, i: int, theta: Profile, signals: Profile) -> float:
    """price · x*_i · E[ω_i | s]."""
    x = efficient_allocation(instance, theta, signals)
    mean = instance.posterior_mean(dict(enumerate(signals)))[_click_coordinate(instance, i)]
    return per_click_pivot(instance, i, theta) * float(x[i]) * float(mean)


def leave_one_out_estimate(instance: Instance, i: int, reports: Mapping[int, np.ndarray],
                           aggregation: str = "mean",
                           designated: Optional[Mapping[int, int]] = None) -> Optional[np.ndarray]:
    """ω̂_{−i} from the other agents' second-stage reports; None when there are no others."""
    others = instance.others(i)
    missing = [j for j in others if j not in reports]
    if missing:
        raise MissingSecondStageReport(f"No second-stage report from agent(s) {missing}")
    if not others:
        return None
    if aggregation == "designated":
        source = (designated or {}).get(i, others[0])
        if source == i or source not in others:
            raise TransferRuleError(f"Agent {i} cannot be priced with agent {source}'s report")
        return np.atleast_1d(np.asarray(reports[source], dtype=float))
    return np.mean([np.atleast_1d(np.asarray(reports[j], dtype=float)) for j in others], axis=0)


def leave_one_out_transfer(instance: Instance, i: int, theta: Profile, signals: Profile,
                           reports: Mapping[int, np.ndarray], h_policy: HPolicy = HPolicy.PIVOT,
                           aggregation: str = "mean", designated: Optional[Dict[int, int]] = None) -> float:
    """Data-driven VCG transfer evaluated at ω̂_{−i}; constant in agent i's own report."""
    rule = TransferRule(TransferKind.LEAVE_ONE_OUT, h_policy=HPolicy(h_policy),
                        aggregation=aggregation, designated=designated)
    return rule.transfer(instance, i, theta, signals, second_stage=reports)


def split_payment(instance: Instance, rule: TransferRule, i: int, theta: Profile, signals: Profile,
                  draw: EstimateDraw) -> Tuple[float, float]:
    """(upfront, adjustment): the message-driven charge at reporting, then the settlement once ω̂ is known."""
    if not rule.data_driven:
        raise TransferRuleError("Only data-driven rules settle in two payments")
    message_rule = TransferRule(TransferKind.VCG, h_policy=rule.h_policy, h_offset=rule.h_offset)
    upfront = message_rule.transfer(instance, i, theta, signals)
    total = rule.transfer(instance, i, theta, signals, draw=draw)
    return upfront, total - upfront


def pivot_decomposition(instance: Instance, i: int, theta: Profile, signals: Profile) -> Dict[str, float]:
    """Accuracy reward (E[ω|s] − E[ω|s_j])² and bias payment ¼(θ_i − θ_j)² of the quadratic pivot."""
    _require_quadratic(instance)
    j = 1 - i
    joint_mean = float(instance.posterior_mean(dict(enumerate(signals)))[0])
    other_mean = float(instance.posterior_mean({j: signals[j]})[0])
    gap = instance.types.theta_value(i, theta[i]) - instance.types.theta_value(j, theta[j])
    accuracy = (joint_mean - other_mean) ** 2
    bias = 0.25 * gap ** 2
    return {"accuracy_reward": accuracy, "bias_payment": bias, "total": accuracy - bias}
