"""
scenarios.py - Registered instance families with their closed forms and default rules

quadratic_loss          two or more agents pick an action near ω plus their own bias
ctr_common              single ad slot, one click-through rate shared by every ad
ctr_individual          single ad slot, each agent knows its own click-through rate
llm_kl                  agents bid on the token distribution of a KL-regularized generator
interdependent_counterexample
                        a preference type that enters the other agent's payoff
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.stats import binom, norm

from config import ZERO_REGRET_TOL
from equilibrium_audit import deviation_payoffs, posterior_regret
from estimators import EstimatorKind, EstimatorSpec
from exceptions import InvalidInstance, InvalidScenarioParameters, PreconditionFails, UnsupportedScenario
from instance import Instance
from models import DeviationRecord, JointPrior, OutcomeSpace, Profile, RegularizedObjective, StateGrid, TypeGrid
from transfers import HPolicy, TransferKind, TransferRule, per_click_pivot
from utilities import ClickValueUtility, InterdependentClickUtility, QuadraticLossUtility, TokenRewardUtility

logger = logging.getLogger(__name__)


class ScenarioName(Enum):
    QUADRATIC_LOSS = "quadratic_loss"
    CTR_COMMON = "ctr_common"
    CTR_INDIVIDUAL = "ctr_individual"
    LLM_KL = "llm_kl"
    INTERDEPENDENT_COUNTEREXAMPLE = "interdependent_counterexample"


@dataclass
class ScenarioSpec:
    name: ScenarioName
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.name, str):
            try:
                self.name = ScenarioName(self.name)
            except ValueError:
                raise InvalidScenarioParameters(
                    f"Unknown scenario '{self.name}'. Known: {[s.value for s in ScenarioName]}")


@dataclass
class BuiltScenario:
    """A validated instance with the rule and estimator it is usually audited with."""
    instance: Instance
    default_rule: TransferRule
    default_estimator: EstimatorSpec
    params: Dict[str, Any]


@dataclass
class ClickOutcome:
    clicks: int
    impressions: int
    price: float
    payment: float
    sample_ctr: float


Builder = Callable[[Dict[str, Any]], BuiltScenario]
SCENARIOS: Dict[ScenarioName, Tuple[Builder, Dict[str, Any], str]] = {}


def register_scenario(name: ScenarioName, description: str, **defaults):
    def decorator(fn: Builder) -> Builder:
        SCENARIOS[name] = (fn, defaults, description)
        return fn
    return decorator


def _resolve_params(name: ScenarioName, params: Dict[str, Any]) -> Dict[str, Any]:
    _, defaults, _ = SCENARIOS[name]
    unknown = sorted(set(params) - set(defaults))
    if unknown:
        raise InvalidScenarioParameters(f"{name.value} does not take parameter(s) {unknown}")
    resolved = dict(defaults)
    resolved.update(params)
    return resolved


def _require(condition: bool, message: str):
    if not condition:
        raise InvalidScenarioParameters(message)


def build(spec: ScenarioSpec) -> BuiltScenario:
    """Construct and validate the instance for a scenario spec."""
    if isinstance(spec, dict):
        spec = ScenarioSpec(**spec)
    builder, _, _ = SCENARIOS[spec.name]
    params = _resolve_params(spec.name, spec.params)
    try:
        built = builder(params)
    except InvalidInstance as e:
        raise InvalidScenarioParameters(f"{spec.name.value}: {e}")
    logger.info(f"Built scenario {spec.name.value}: {built.instance.n_agents} agents, "
                f"{built.instance.states.size} states")
    return built


def list_scenarios() -> List[Tuple[str, str]]:
    return [(name.value, description) for name, (_, _, description) in SCENARIOS.items()]


# Quadratic loss

def _gaussian_signal_kernel(states: np.ndarray, grid: np.ndarray, sigma: float) -> np.ndarray:
    """P(s_k | ω): N(ω, σ²) binned at the midpoints of the signal grid."""
    edges = np.concatenate([[-np.inf], (grid[1:] + grid[:-1]) / 2, [np.inf]])
    low, high = edges[None, :-1], edges[None, 1:]
    omega = states[:, None]
    upper_tail = norm.sf(low, loc=omega, scale=sigma) - norm.sf(high, loc=omega, scale=sigma)
    lower_tail = norm.cdf(high, loc=omega, scale=sigma) - norm.cdf(low, loc=omega, scale=sigma)
    return np.where(low > omega, upper_tail, lower_tail)


def _quadratic_states(params: Dict[str, Any]):
    model = params["state_model"]
    n = params["agents"]
    if model == "gaussian":
        sigma, signal_sigma = float(params["sigma"]), float(params["signal_sigma"])
        _require(sigma > 0 and signal_sigma > 0, "σ and the signal σ must be positive")
        _require(params["state_points"] >= 2 and params["signal_points"] >= 2, "Grids need at least two points")
        omega = np.linspace(-params["truncation"] * sigma, params["truncation"] * sigma, params["state_points"])
        state_mass = norm.pdf(omega / sigma)
        state_mass = state_mass / state_mass.sum()
        signals = np.linspace(-params["signal_span"], params["signal_span"], params["signal_points"])
        kernel = _gaussian_signal_kernel(omega, signals, signal_sigma)
        return omega, [signals] * n, lambda type_masses: JointPrior.from_independent_kernels(
            state_mass, type_masses, [kernel] * n)
    if model == "binary":
        accuracy, p = float(params["accuracy"]), float(params["state_prob"])
        _require(0.5 < accuracy < 1.0, "Signal accuracy must lie in (0.5, 1)")
        _require(0.0 < p < 1.0, "State probability must lie in (0, 1)")
        kernel = np.array([[accuracy, 1 - accuracy], [1 - accuracy, accuracy]])
        return np.array([0.0, 1.0]), [np.array([0.0, 1.0])] * n, \
            lambda type_masses: JointPrior.from_independent_kernels([1 - p, p], type_masses, [kernel] * n)
    if model == "wallet":
        _require(n == 2, "The wallet model is defined for two agents")
        levels = int(params["signal_levels"])
        _require(levels >= 2, "Wallet signals need at least two levels")
        omega = np.arange(2 * levels - 1, dtype=float)
        table = np.zeros((omega.size, levels, levels))
        for a in range(levels):
            for b in range(levels):
                table[a + b, a, b] = 1.0 / levels ** 2
        signals = np.arange(levels, dtype=float)
        return omega, [signals, signals], lambda type_masses: JointPrior.from_state_signal_table(table, type_masses)
    raise InvalidScenarioParameters(f"Unknown state model '{model}'")


@register_scenario(ScenarioName.QUADRATIC_LOSS,
                   "Agents choose x near ω plus a private bias θ_i; closed-form x* and transfers",
                   agents=2, state_model="gaussian", sigma=1.0, signal_sigma=1.0, state_points=41,
                   truncation=3.0, signal_points=9, signal_span=4.0, theta_points=5, theta_range=1.0,
                   accuracy=0.8, state_prob=0.5, signal_levels=3, x_resolution=161, lipschitz_pad=3.0)
def build_quadratic_loss(params: Dict[str, Any]) -> BuiltScenario:
    n = int(params["agents"])
    _require(1 <= n <= 4, "quadratic_loss supports one to four agents")
    _require(params["theta_points"] >= 1 and params["theta_range"] >= 0, "Bias grid needs at least one point")
    omega, signal_grids, make_prior = _quadratic_states(params)
    thetas = np.linspace(-params["theta_range"], params["theta_range"], params["theta_points"])
    if params["state_model"] == "binary":
        thetas = np.linspace(0.0, params["theta_range"], params["theta_points"])
    type_masses = [np.full(thetas.size, 1.0 / thetas.size)] * n
    prior = make_prior(type_masses)

    lower, upper = thetas.min() + omega.min(), thetas.max() + omega.max()
    # |∂u/∂ω| = 2|x − θ − ω|, bounded on X × Θ × Ω widened by the pad
    reach = (upper - thetas.min() - omega.min()) + params["lipschitz_pad"]
    utilities = [QuadraticLossUtility(lipschitz=2.0 * reach, sup_bound=reach ** 2) for _ in range(n)]
    instance = Instance(
        name="quadratic_loss",
        states=StateGrid(points=omega),
        types=TypeGrid(preferences=[thetas] * n, signals=signal_grids),
        prior=prior,
        utilities=utilities,
        outcome_space=OutcomeSpace(mode="interval", lower=float(lower), upper=float(upper),
                                   resolution=int(params["x_resolution"])),
        allocation_mode="closed_form:quadratic",
        closed_form="quadratic",
        full_support=params["state_model"] != "wallet",
        metadata={"scenario": "quadratic_loss", "state_model": params["state_model"],
                  "signal_sigma": float(params["signal_sigma"]), "sigma": float(params["sigma"])},
    )
    return BuiltScenario(instance=instance,
                         default_rule=TransferRule(TransferKind.DATA_DRIVEN_VCG, HPolicy.PIVOT),
                         default_estimator=EstimatorSpec(EstimatorKind.EX_POST),
                         params=params)


def total_variance_identity(instance: Instance, i: int, signal_j: int) -> Tuple[float, float]:
    """Both sides of Var[E[ω|s_i,s_j] | s_j] = Var[ω|s_j] − E[Var[ω|s_i,s_j] | s_j] for two agents."""
    if instance.n_agents != 2:
        raise UnsupportedScenario("The variance identity is checked on two-agent instances")
    j = 1 - i
    outer_mass = instance.signal_mass({j: signal_j})
    means, variances, masses = [], [], []
    for s_i in range(instance.types.signal_count(i)):
        mass = instance.signal_mass({i: s_i, j: signal_j})
        if mass <= 0:
            continue
        conditioning = {i: s_i, j: signal_j}
        means.append(float(instance.posterior_mean(conditioning)[0]))
        variances.append(float(instance.posterior_variance(conditioning)[0]))
        masses.append(mass / outer_mass)
    means, variances, masses = np.array(means), np.array(variances), np.array(masses)
    lhs = float(masses @ (means - masses @ means) ** 2)
    rhs = float(instance.posterior_variance({j: signal_j})[0]) - float(masses @ variances)
    return lhs, rhs


# Single-slot click-through auctions

def _vertices(n: int) -> OutcomeSpace:
    return OutcomeSpace(mode="finite", points=np.eye(n))


@register_scenario(ScenarioName.CTR_COMMON,
                   "Single slot, one common click-through rate; highest value per click wins",
                   agents=2, theta_low=0.1, theta_high=0.9, theta_points=9, state_points=5,
                   ctr_low=0.1, ctr_high=0.9, signal_levels=3, m=16)
def build_ctr_common(params: Dict[str, Any]) -> BuiltScenario:
    n = int(params["agents"])
    _require(n >= 2, "An auction needs at least two agents")
    _require(0.0 <= params["ctr_low"] <= params["ctr_high"] <= 1.0, "Click-through rates must lie in [0, 1]")
    _require(params["theta_low"] >= 0 and params["theta_high"] >= params["theta_low"],
             "Values per click must be nonnegative and ordered")
    _require(params["signal_levels"] >= 1, "Pilot signals need at least one level")
    ctr = np.linspace(params["ctr_low"], params["ctr_high"], params["state_points"])
    thetas = np.linspace(params["theta_low"], params["theta_high"], params["theta_points"])
    levels = int(params["signal_levels"])
    # pilot signal: clicks out of (levels − 1) trial impressions
    kernel = binom.pmf(np.arange(levels)[None, :], levels - 1, ctr[:, None])
    prior = JointPrior.from_independent_kernels(np.full(ctr.size, 1.0 / ctr.size),
                                                [np.full(thetas.size, 1.0 / thetas.size)] * n, [kernel] * n)
    top = float(thetas.max())
    instance = Instance(
        name="ctr_common",
        states=StateGrid(points=ctr),
        types=TypeGrid(preferences=[thetas] * n, signals=[np.arange(levels, dtype=float)] * n),
        prior=prior,
        utilities=[ClickValueUtility(j, coordinate=0, lipschitz=top, sup_bound=top) for j in range(n)],
        outcome_space=_vertices(n),
        allocation_mode="closed_form:ctr_winner",
        closed_form="ctr_winner",
        full_support=prior.full_support,
        metadata={"scenario": "ctr_common", "ctr": True},
    )
    return BuiltScenario(instance=instance,
                         default_rule=TransferRule(TransferKind.PER_CLICK_PIVOT),
                         default_estimator=EstimatorSpec(EstimatorKind.BERNOULLI_CTR, m=int(params["m"])),
                         params=params)


@register_scenario(ScenarioName.CTR_INDIVIDUAL,
                   "Single slot, each agent privately knows its own click-through rate",
                   agents=2, thetas=(0.2, 0.4, 0.5, 0.8, 1.0), ctr_support=(0.3, 0.6, 1.0), m=4)
def build_ctr_individual(params: Dict[str, Any]) -> BuiltScenario:
    n = int(params["agents"])
    _require(n >= 2, "An auction needs at least two agents")
    support = np.asarray(params["ctr_support"], dtype=float)
    thetas = np.asarray(params["thetas"], dtype=float)
    _require(support.size >= 1 and np.all((support >= 0) & (support <= 1)), "Click-through rates must lie in [0, 1]")
    _require(thetas.size >= 1 and np.all(thetas >= 0), "Values per click must be nonnegative")
    states = np.array(np.meshgrid(*[support] * n, indexing="ij")).reshape(n, -1).T
    # s_i = ω_i exactly: each state maps to one signal profile
    kernel = np.zeros((states.shape[0],) + (support.size,) * n)
    for k, omega in enumerate(states):
        kernel[(k,) + tuple(int(np.flatnonzero(support == value)[0]) for value in omega)] = 1.0
    prior = JointPrior(state_mass=np.full(states.shape[0], 1.0 / states.shape[0]),
                       type_masses=[np.full(thetas.size, 1.0 / thetas.size)] * n, signal_kernel=kernel)
    top = float(thetas.max())
    instance = Instance(
        name="ctr_individual",
        states=StateGrid(points=states),
        types=TypeGrid(preferences=[thetas] * n, signals=[support] * n),
        prior=prior,
        utilities=[ClickValueUtility(j, coordinate=j, lipschitz=top, sup_bound=top) for j in range(n)],
        outcome_space=_vertices(n),
        allocation_mode="closed_form:ctr_winner",
        closed_form="ctr_winner",
        metadata={"scenario": "ctr_individual", "ctr": True},
    )
    return BuiltScenario(instance=instance,
                         default_rule=TransferRule(TransferKind.PER_CLICK_PIVOT),
                         default_estimator=EstimatorSpec(EstimatorKind.BERNOULLI_CTR, m=int(params["m"])),
                         params=params)


def ctr_click_process(instance: Instance, theta: Profile, winner: int, omega: float,
                      impressions: int, seed: int = 0) -> ClickOutcome:
    """Bernoulli clicks on the winner's ad and the realized per-click pivot payment."""
    if not instance.metadata.get("ctr"):
        raise UnsupportedScenario("Click processes need a CTR scenario")
    if not 0.0 <= omega <= 1.0:
        raise InvalidScenarioParameters(f"Click-through rate {omega} is outside [0, 1]")
    if impressions < 1:
        raise InvalidScenarioParameters("At least one impression is needed")
    clicks = int(np.random.default_rng(seed).binomial(impressions, omega))
    price = per_click_pivot(instance, winner, theta)
    return ClickOutcome(clicks=clicks, impressions=impressions, price=price,
                        payment=clicks * price, sample_ctr=clicks / impressions)


def individual_ctr_manipulation_demo(built: BuiltScenario, theta: Sequence[float],
                                     signals: Sequence[float]) -> DeviationRecord:
    """Agent 0 overstates (θ, s) to win the slot under per-click pivot prices.

    The record also carries the audited gain under the data-driven pivot with an
    unbiased external click estimator, which removes the manipulation.
    """
    instance = built.instance
    types = instance.types
    if instance.metadata.get("scenario") != "ctr_individual" or instance.n_agents != 2:
        raise UnsupportedScenario("The manipulation demo runs on the two-agent individual-CTR scenario")
    theta_idx = tuple(types.index_of("theta", j, value) for j, value in enumerate(theta))
    signal_idx = tuple(types.index_of("signal", j, value) for j, value in enumerate(signals))
    t1, t2 = float(theta[0]), float(theta[1])
    s1, s2 = float(signals[0]), float(signals[1])
    if not (t1 * s1 < t2 * s2 and t1 >= t2):
        raise PreconditionFails("The demo needs θ₁s₁ < θ₂s₂ (agent 1 loses) and θ₁ ≥ θ₂")

    corner = (types.theta_count(0) - 1, types.signal_count(0) - 1)
    corner_theta, corner_signal = types.theta_value(0, corner[0]), float(types.signal_value(0, corner[1])[0])
    if corner_theta * corner_signal < t2 * s2:
        raise PreconditionFails("The top corner of agent 1's grids does not win the slot")

    estimator = built.default_estimator
    per_click_rule = TransferRule(TransferKind.PER_CLICK_PIVOT)
    payoffs = deviation_payoffs(instance, per_click_rule, estimator, 0, theta_idx, signal_idx)
    truthful_payoff = float(payoffs[theta_idx[0], signal_idx[0]])
    top = float(payoffs.max())
    # every winning report pays the runner-up's value per click; prefer the largest θ′s′ among ties
    maximizers = [(int(a), int(b)) for a, b in zip(*np.nonzero(payoffs >= top - ZERO_REGRET_TOL))]
    best = max(maximizers, key=lambda ab: (types.theta_value(0, ab[0]) * float(types.signal_value(0, ab[1])[0]),
                                           ab[0], ab[1]))
    best_theta, best_signal = types.theta_value(0, best[0]), float(types.signal_value(0, best[1])[0])

    profile = [(theta_idx, signal_idx)]
    per_click = posterior_regret(instance, per_click_rule, estimator, profiles=profile, agents=[0])
    data_driven = posterior_regret(instance, TransferRule(TransferKind.DATA_DRIVEN_VCG, HPolicy.PIVOT), estimator,
                                   profiles=profile, agents=[0])
    record = DeviationRecord(
        scenario="ctr_individual", agent=0, theta=[t1, t2], signals=[s1, s2],
        truthful_payoff=truthful_payoff,
        best_deviation={"theta": best_theta, "signal": best_signal},
        best_payoff=float(payoffs[best]), gain=float(payoffs[best]) - truthful_payoff,
        expected_gain=(t1 - t2) * s1, audited_gain=per_click.epsilon,
        details={
            "estimator": estimator.label,
            "maximizers": [{"theta": types.theta_value(0, a), "signal": float(types.signal_value(0, b)[0])}
                           for a, b in maximizers],
            "corner_is_maximizer": corner in maximizers,
            "data_driven_gain": data_driven.epsilon,
        },
    )
    logger.info(f"Individual-CTR demo: per-click gain {record.audited_gain:.6g}, "
                f"data-driven gain {data_driven.epsilon:.3g}")
    return record


# Token auction with KL regularization

@register_scenario(ScenarioName.LLM_KL,
                   "Agents bid on a KL-regularized token distribution; softmax closed form",
                   agents=2, tokens=2, alpha=1.0, reference=None, states=(0.0, 0.5, 1.0),
                   thetas=(0.0, 0.5, 1.0), signal_low=0.2, signal_slope=0.6,
                   preferences=None, relevance=None, resolution=50)
def build_llm_kl(params: Dict[str, Any]) -> BuiltScenario:
    n, size = int(params["agents"]), int(params["tokens"])
    states = np.asarray(params["states"], dtype=float)
    thetas = np.asarray(params["thetas"], dtype=float)
    _require(n >= 1, "At least one agent is needed")
    _require(2 <= size <= 8, "Token auctions ship with two to eight tokens")
    _require(1 <= states.size <= 8, "Token auctions ship with at most eight states")
    _require(params["alpha"] > 0, "α must be positive")
    low, slope = float(params["signal_low"]), float(params["signal_slope"])
    on = low + slope * states
    _require(bool(np.all((on >= 0) & (on <= 1))), "Signal probabilities must lie in [0, 1]")
    kernel = np.column_stack([1 - on, on])

    preferences = params["preferences"] or [np.eye(size)[k % size] for k in range(n)]
    relevance = params["relevance"]
    if relevance is None:
        relevance = [np.zeros(size)] + [0.5 * np.eye(size)[(k + 1) % size] for k in range(1, n)]
    _require(len(preferences) == n and len(relevance) == n, "One preference and relevance row per agent")
    reference = np.full(size, 1.0 / size) if params["reference"] is None else np.asarray(params["reference"], float)
    _require(reference.shape == (size,), "The reference distribution needs one entry per token")

    top = float(np.max(np.abs(thetas)))
    utilities = [
        TokenRewardUtility(preferences[k], relevance[k], lipschitz=top * float(np.max(np.abs(relevance[k]))))
        for k in range(n)
    ]
    instance = Instance(
        name="llm_kl",
        states=StateGrid(points=states),
        types=TypeGrid(preferences=[thetas] * n, signals=[np.array([0.0, 1.0])] * n),
        prior=JointPrior.from_independent_kernels(np.full(states.size, 1.0 / states.size),
                                                  [np.full(thetas.size, 1.0 / thetas.size)] * n, [kernel] * n),
        utilities=utilities,
        outcome_space=OutcomeSpace(mode="simplex", tokens=[f"t{k}" for k in range(size)],
                                   resolution=int(params["resolution"])),
        allocation_mode="kl_closed_form",
        regularization=RegularizedObjective(alpha=float(params["alpha"]), reference=reference),
        metadata={"scenario": "llm_kl"},
    )
    return BuiltScenario(instance=instance,
                         default_rule=TransferRule(TransferKind.REGULARIZED_DATA_DRIVEN_VCG, HPolicy.PIVOT),
                         default_estimator=EstimatorSpec(EstimatorKind.EX_POST),
                         params=params)


# Interdependent preferences

@register_scenario(ScenarioName.INTERDEPENDENT_COUNTEREXAMPLE,
                   "Agent 1's type lowers agent 2's value; truthful reporting fails under data-driven VCG",
                   thetas=(0.0, 0.3, 0.5, 0.8, 1.0), states=(0.0, 0.5, 1.0), signal_low=0.2, signal_slope=0.6)
def build_interdependent_counterexample(params: Dict[str, Any]) -> BuiltScenario:
    thetas = np.asarray(params["thetas"], dtype=float)
    states = np.asarray(params["states"], dtype=float)
    _require(bool(np.all(thetas >= 0)) and 0.0 in thetas, "Types must be nonnegative and include 0")
    _require(bool(np.all(states >= 0)), "States must be nonnegative")
    on = float(params["signal_low"]) + float(params["signal_slope"]) * states
    _require(bool(np.all((on >= 0) & (on <= 1))), "Signal probabilities must lie in [0, 1]")
    kernel = np.column_stack([1 - on, on])
    top = float(thetas.max())
    # u_1 = θ_1 x_1 ω and u_2 = (θ_2 − θ_1) x_2 ω
    utilities = [InterdependentClickUtility(0, (1.0, 0.0), lipschitz=top),
                 InterdependentClickUtility(1, (-1.0, 1.0), lipschitz=top)]
    instance = Instance(
        name="interdependent_counterexample",
        states=StateGrid(points=states),
        types=TypeGrid(preferences=[thetas] * 2, signals=[np.array([0.0, 1.0])] * 2),
        prior=JointPrior.from_independent_kernels(np.full(states.size, 1.0 / states.size),
                                                  [np.full(thetas.size, 1.0 / thetas.size)] * 2, [kernel] * 2),
        utilities=utilities,
        outcome_space=_vertices(2),
        metadata={"scenario": "interdependent_counterexample"},
    )
    return BuiltScenario(instance=instance,
                         default_rule=TransferRule(TransferKind.DATA_DRIVEN_VCG, HPolicy.ZERO),
                         default_estimator=EstimatorSpec(EstimatorKind.EX_POST),
                         params=params)


def interdependent_counterexample_demo(built: BuiltScenario, theta: Sequence[float],
                                       signals: Sequence[float]) -> DeviationRecord:
    """Agent 0 understates its type to 0 and collects a larger data-driven transfer."""
    instance = built.instance
    types = instance.types
    if instance.metadata.get("scenario") != "interdependent_counterexample":
        raise UnsupportedScenario("The interdependent demo runs on the interdependent counterexample")
    t1, t2 = float(theta[0]), float(theta[1])
    if not t1 < t2:
        raise PreconditionFails("The demo needs θ₁ < θ₂")
    theta_idx = tuple(types.index_of("theta", j, value) for j, value in enumerate(theta))
    signal_idx = tuple(types.index_of("signal", j, value) for j, value in enumerate(signals))
    mean = float(instance.posterior_mean(dict(enumerate(signal_idx)))[0])
    if mean < 0:
        raise PreconditionFails("The demo needs E[ω|s] ≥ 0")

    payoffs = deviation_payoffs(instance, built.default_rule, built.default_estimator, 0, theta_idx, signal_idx)
    truth = (theta_idx[0], signal_idx[0])
    top = float(payoffs.max())
    maximizers = [(int(a), int(b)) for a, b in zip(*np.nonzero(payoffs >= top - ZERO_REGRET_TOL))]
    if truth in maximizers:
        best = truth
    else:
        # among ties keep the true signal and the smallest preference report
        best = min(maximizers, key=lambda ab: (ab[1] != truth[1], ab[0], ab[1]))
    report = posterior_regret(instance, built.default_rule, built.default_estimator,
                              profiles=[(theta_idx, signal_idx)], agents=[0])
    truthful_payoff = float(payoffs[truth])
    record = DeviationRecord(
        scenario="interdependent_counterexample", agent=0, theta=[t1, t2],
        signals=[float(v) for v in signals], truthful_payoff=truthful_payoff,
        best_deviation={"theta": types.theta_value(0, best[0]),
                        "signal": float(types.signal_value(0, best[1])[0])},
        best_payoff=float(payoffs[best]), gain=float(payoffs[best]) - truthful_payoff,
        expected_gain=t2 * mean - max(t1, t2 - t1) * mean, audited_gain=report.epsilon,
        details={
            "posterior_mean": mean,
            "maximizers": [{"theta": types.theta_value(0, a), "signal": float(types.signal_value(0, b)[0])}
                           for a, b in maximizers],
            "rule": built.default_rule.label,
        },
    )
    logger.info(f"Interdependent demo: gain {record.gain:.6g}, audited {record.audited_gain:.6g}")
    return record
