"""
Allocation solver.

Efficient allocations maximise Σ_j v_j(x, θ_j, s) over the outcome space, by a
registered closed form when the instance declares one and by exhaustive grid
search otherwise. Ties go to the lowest candidate index. The α-regularized
generation distribution for KL penalties is available in closed form.
"""
from threading import Lock
from typing import Callable, Dict, Optional, Sequence, Tuple
from weakref import WeakKeyDictionary, proxy
from functools import lru_cache
import logging

import numpy as np
from scipy.special import logsumexp, softmax, rel_entr

from config import TIE_TOL, SIMPLEX_ORACLE_STEP
from exceptions import (
    EmptyOutcomeSpace,
    NoClosedForm,
    ZeroReferenceMass,
    NonPositiveAlpha,
    DivergenceUndefined,
    InvalidInstance,
)
from instance import Instance
from models import Profile, simplex_lattice

logger = logging.getLogger(__name__)

ClosedForm = Callable[[Instance, Profile, Profile, Tuple[int, ...]], np.ndarray]
CLOSED_FORMS: Dict[str, ClosedForm] = {}


def register_closed_form(name: str):
    def decorator(fn: ClosedForm) -> ClosedForm:
        CLOSED_FORMS[name] = fn
        return fn
    return decorator


def lowest_index_argmax(values: np.ndarray, tol: float = TIE_TOL) -> int:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise EmptyOutcomeSpace("No candidate allocations")
    return int(np.flatnonzero(values >= values.max() - tol)[0])


# KL-regularized generation

def _check_alpha(alpha: float):
    if not alpha > 0:
        raise NonPositiveAlpha(f"α must be positive, got {alpha}")


def _check_reference(reference: np.ndarray) -> np.ndarray:
    reference = np.asarray(reference, dtype=float)
    if np.any(reference <= 0):
        raise ZeroReferenceMass("Reference distribution must put positive mass on every token")
    return reference / reference.sum()


def kl_partition_function(rewards, reference, alpha: float) -> Tuple[float, float]:
    """Z = Σ_t x_0(t) exp(R(t)/α), returned as (Z, log Z) via log-sum-exp."""
    _check_alpha(alpha)
    reference = _check_reference(reference)
    log_z = float(logsumexp(np.asarray(rewards, dtype=float) / alpha, b=reference))
    return float(np.exp(log_z)), log_z


def kl_regularized_distribution(rewards, reference, alpha: float) -> np.ndarray:
    """x*(t) ∝ x_0(t) exp(R(t)/α)."""
    _check_alpha(alpha)
    reference = _check_reference(reference)
    x = softmax(np.log(reference) + np.asarray(rewards, dtype=float) / alpha)
    return x / x.sum()


def kl_divergence(x, reference) -> float:
    terms = rel_entr(np.asarray(x, dtype=float), np.asarray(reference, dtype=float))
    if not np.all(np.isfinite(terms)):
        raise DivergenceUndefined("x puts mass where the reference has none")
    return float(terms.sum())


def regularized_objective_value(rewards, x, reference, alpha: float) -> float:
    """Σ_t R(t) x(t) − α·KL(x ‖ x_0)."""
    _check_alpha(alpha)
    x = np.asarray(x, dtype=float)
    return float(np.dot(rewards, x)) - alpha * kl_divergence(x, reference)


def brute_force_simplex_argmax(rewards, reference, alpha: float,
                               step: float = SIMPLEX_ORACLE_STEP) -> Tuple[np.ndarray, float]:
    """Exhaustive search of the regularized objective on a simplex lattice (|T| ≤ 3)."""
    _check_alpha(alpha)
    rewards = np.asarray(rewards, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if rewards.size > 3:
        raise InvalidInstance("Simplex oracle is limited to at most three tokens")
    lattice = simplex_lattice(rewards.size, int(round(1.0 / step)))
    with np.errstate(divide='ignore', invalid='ignore'):
        penalty = rel_entr(lattice, reference).sum(axis=1)
    values = lattice @ rewards - alpha * penalty
    values[~np.isfinite(values)] = -np.inf
    best = int(np.argmax(values))
    return lattice[best], float(values[best])


# Closed forms registered by scenario name

@register_closed_form("quadratic")
def quadratic_closed_form(instance: Instance, theta: Profile, signals: Profile,
                          agents: Tuple[int, ...]) -> np.ndarray:
    """x* = mean of active biases + E[ω | active signals]."""
    biases = [instance.types.theta_value(j, theta[j]) for j in agents]
    mean = instance.posterior({j: signals[j] for j in agents}) @ instance.states.points[:, 0]
    return np.array([float(np.mean(biases)) + float(mean)])


@register_closed_form("ctr_winner")
def ctr_winner_closed_form(instance: Instance, theta: Profile, signals: Profile,
                           agents: Tuple[int, ...]) -> np.ndarray:
    """Slot goes to the highest θ_j · E[ω_j | s]; vertex e_w of the winner set."""
    weights = instance.posterior({j: signals[j] for j in agents})
    # agents left out of the subset never win
    scores = np.full(instance.n_agents, -np.inf)
    for j in agents:
        coordinate = getattr(instance.utilities[j], "coordinate", 0)
        scores[j] = instance.types.theta_value(j, theta[j]) * float(weights @ instance.states.points[:, coordinate])
    vertex = np.zeros(instance.n_agents)
    vertex[lowest_index_argmax(scores)] = 1.0
    return vertex


@register_closed_form("kl")
def kl_closed_form(instance: Instance, theta: Profile, signals: Profile,
                   agents: Tuple[int, ...]) -> np.ndarray:
    objective = instance.regularization
    return kl_regularized_distribution(aggregate_rewards(instance, theta, signals, agents),
                                       objective.reference, objective.alpha)


def aggregate_rewards(instance: Instance, theta: Profile, signals: Profile,
                      agents: Tuple[int, ...]) -> np.ndarray:
    """R(t | θ, s) = Σ_j E_{ω|s}[r_j(t, ω, θ_j)] over the active agents."""
    weights = instance.posterior({j: signals[j] for j in agents})
    total = np.zeros(len(instance.outcome_space.tokens))
    for j in agents:
        rewards = instance.utilities[j].rewards(instance.states.points, instance.types.theta_value(j, theta[j]))
        total = total + weights @ rewards
    return total


class AllocationSolver:
    """Efficient allocations of one instance, memoised per (θ, s, active agents)."""

    def __init__(self, instance: Instance):
        # proxy: the registry below is keyed weakly by the instance
        self.instance = proxy(instance)
        self._candidates = None
        self._solve = lru_cache(maxsize=None)(self._compute)

    @property
    def candidates(self) -> np.ndarray:
        if self._candidates is None:
            self._candidates = self.instance.outcome_space.candidates()
        return self._candidates

    def allocate(self, theta: Profile, signals: Profile,
                 agents: Optional[Sequence[int]] = None) -> np.ndarray:
        agents = self.instance.agents if agents is None else tuple(agents)
        if self.instance.profile_dependent:
            theta_key = tuple(theta)
        else:
            theta_key = tuple(theta[j] for j in agents)
        return self._solve(agents, theta_key, tuple(signals[j] for j in agents))

    def _compute(self, agents, theta_key, signal_key) -> np.ndarray:
        instance = self.instance
        theta = theta_key if instance.profile_dependent else self._expand(theta_key, agents)
        signals = self._expand(signal_key, agents)
        mode = instance.allocation_mode
        if len(agents) == 0:
            x = self._empty_allocation()
        elif mode == "kl_closed_form":
            x = kl_closed_form(instance, theta, signals, agents)
        elif mode.startswith("closed_form:"):
            name = mode.split(":", 1)[1]
            if name not in CLOSED_FORMS:
                raise NoClosedForm(f"No closed form registered under '{name}'")
            x = CLOSED_FORMS[name](instance, theta, signals, agents)
        else:
            values = self.social_values(theta, signals, agents)
            x = self.candidates[lowest_index_argmax(values)]
        x = np.asarray(x, dtype=float)
        x.setflags(write=False)
        return x

    def _expand(self, key, agents) -> Tuple[int, ...]:
        profile = [0] * self.instance.n_agents
        for j, value in zip(agents, key):
            profile[j] = value
        return tuple(profile)

    def _empty_allocation(self) -> np.ndarray:
        if self.instance.regularization is not None:
            return _check_reference(self.instance.regularization.reference)
        return self.candidates[0]

    def social_value(self, x: np.ndarray, theta: Profile, signals: Profile,
                     agents: Optional[Sequence[int]] = None) -> float:
        """Σ_j v_j(x, θ_j, s), minus α·KL(x ‖ x_0) for regularized instances."""
        instance = self.instance
        agents = instance.agents if agents is None else tuple(agents)
        if not agents:
            total = 0.0
        else:
            weights = instance.posterior({j: signals[j] for j in agents})
            total = sum(float(weights @ instance.utility_on_states(j, x, theta[j], theta)) for j in agents)
        objective = instance.regularization
        if objective is not None:
            total -= objective.alpha * kl_divergence(x, objective.reference)
        return total

    def social_values(self, theta: Profile, signals: Profile, agents: Tuple[int, ...]) -> np.ndarray:
        candidates = self.candidates
        if len(candidates) == 0:
            raise EmptyOutcomeSpace("Outcome space has no candidates")
        instance = self.instance
        weights = instance.posterior({j: signals[j] for j in agents})
        profile = instance.theta_values(theta)
        values = np.zeros(len(candidates))
        for c, x in enumerate(candidates):
            for j in agents:
                utility = instance.utilities[j]
                values[c] += float(weights @ utility(x, instance.states.points,
                                                     instance.types.theta_value(j, theta[j]), profile))
        objective = instance.regularization
        if objective is not None:
            with np.errstate(divide='ignore', invalid='ignore'):
                penalty = rel_entr(candidates, objective.reference).sum(axis=1)
            values = values - objective.alpha * penalty
            values[~np.isfinite(values)] = -np.inf
        return values


_SOLVERS: "WeakKeyDictionary[Instance, AllocationSolver]" = WeakKeyDictionary()
_SOLVERS_LOCK = Lock()


def solver_for(instance: Instance) -> AllocationSolver:
    with _SOLVERS_LOCK:
        solver = _SOLVERS.get(instance)
        if solver is None:
            solver = AllocationSolver(instance)
            _SOLVERS[instance] = solver
        return solver


def efficient_allocation(instance: Instance, theta: Profile, signals: Profile,
                         agents: Optional[Sequence[int]] = None) -> np.ndarray:
    """x*(θ, s) over the given agents (all agents by default)."""
    return solver_for(instance).allocate(theta, signals, agents)


def grid_vs_closed_form_gap(instance: Instance, theta: Profile, signals: Profile) -> float:
    """Σv at the grid argmax minus Σv at the closed-form optimum (≤ 0 up to rounding)."""
    if instance.closed_form is None and instance.allocation_mode != "kl_closed_form":
        raise NoClosedForm(f"Instance '{instance.name}' has no registered closed form")
    solver = solver_for(instance)
    agents = instance.agents
    closed = solver.allocate(theta, signals)
    values = solver.social_values(theta, signals, agents)
    grid_best = solver.candidates[lowest_index_argmax(values)]
    return solver.social_value(grid_best, theta, signals) - solver.social_value(closed, theta, signals)


def max_discretization_gap(instance: Instance, profiles=None, limit: Optional[int] = None) -> float:
    """Largest |grid_vs_closed_form_gap| over profiles (all positive-mass profiles by default).

    With `limit`, an evenly spaced subset of at most that many profiles is checked.
    """
    if profiles is None:
        profiles = [(theta, signals) for theta in instance.theta_profiles() for signals in instance.signal_profiles()
                    if instance.signal_mass(dict(enumerate(signals))) > 0]
    if limit is not None and len(profiles) > limit:
        picks = np.unique(np.linspace(0, len(profiles) - 1, limit).round().astype(int))
        profiles = [profiles[k] for k in picks]
    worst = 0.0
    for theta, signals in profiles:
        worst = max(worst, abs(grid_vs_closed_form_gap(instance, theta, signals)))
    return worst
