"""
Payoff plugins u_i(x, ω, θ_i).

Every utility is vectorised over ω: `omega` may have any leading shape with the
state coordinates on the last axis, and the result has the leading shape.
Estimates ω̂ need not lie on the state grid.
"""
from abc import ABC, abstractmethod
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np

from exceptions import InvalidInstance

logger = logging.getLogger(__name__)


class Utility(ABC):
    """Abstract payoff of a single agent."""

    profile_dependent = False

    def __init__(self, lipschitz: Optional[float] = None, sup_bound: Optional[float] = None):
        if lipschitz is not None and lipschitz < 0:
            raise InvalidInstance("Lipschitz constant must be nonnegative")
        self.lipschitz = lipschitz
        self.sup_bound = sup_bound

    @abstractmethod
    def __call__(self, x: np.ndarray, omega: np.ndarray, theta: float,
                 profile: Optional[Sequence[float]] = None) -> np.ndarray:
        pass

    @property
    def linear_in_state(self) -> bool:
        return False


class QuadraticLossUtility(Utility):
    """u = −(x − θ − ω)²: the agent wants the action to match the state plus a bias."""

    def __call__(self, x, omega, theta, profile=None):
        omega = np.asarray(omega, dtype=float)
        return -(float(x[0]) - theta - omega[..., 0]) ** 2


class ClickValueUtility(Utility):
    """u = θ · x_agent · ω_coordinate: value per click times the chance of a click."""

    def __init__(self, agent: int, coordinate: int = 0, **kwargs):
        super().__init__(**kwargs)
        self.agent = agent
        self.coordinate = coordinate

    def __call__(self, x, omega, theta, profile=None):
        omega = np.asarray(omega, dtype=float)
        return theta * float(x[self.agent]) * omega[..., self.coordinate]

    @property
    def linear_in_state(self) -> bool:
        return True


class InterdependentClickUtility(Utility):
    """u = (Σ_k w_k θ_k) · x_agent · ω with weights over the whole preference profile."""

    profile_dependent = True

    def __init__(self, agent: int, weights: Sequence[float], **kwargs):
        super().__init__(**kwargs)
        self.agent = agent
        self.weights = np.asarray(weights, dtype=float)

    def __call__(self, x, omega, theta, profile=None):
        if profile is None:
            raise InvalidInstance("Interdependent preferences need the full preference profile")
        omega = np.asarray(omega, dtype=float)
        coefficient = float(np.dot(self.weights, np.asarray(profile, dtype=float)))
        return coefficient * float(x[self.agent]) * omega[..., 0]

    @property
    def linear_in_state(self) -> bool:
        return True


class TokenRewardUtility(Utility):
    """Expected reward of a generation distribution x over tokens.

    r(t, ω, θ) = θ · (preference[t] + relevance[t] · ω), so u = Σ_t x(t) r(t, ω, θ).
    """

    def __init__(self, preference: Sequence[float], relevance: Sequence[float], **kwargs):
        super().__init__(**kwargs)
        self.preference = np.asarray(preference, dtype=float)
        self.relevance = np.asarray(relevance, dtype=float)
        if self.preference.shape != self.relevance.shape:
            raise InvalidInstance("Token preference and relevance must have the same length")

    def rewards(self, omega, theta) -> np.ndarray:
        """Per-token rewards with shape omega.shape[:-1] + (|T|,)."""
        omega = np.asarray(omega, dtype=float)
        return theta * (self.preference + self.relevance * omega[..., 0:1])

    def __call__(self, x, omega, theta, profile=None):
        return self.rewards(omega, theta) @ np.asarray(x, dtype=float)

    @property
    def linear_in_state(self) -> bool:
        return True


class ConstantUtility(Utility):
    """u = c, independent of everything."""

    def __init__(self, value: float = 0.0, **kwargs):
        kwargs.setdefault("lipschitz", 0.0)
        super().__init__(**kwargs)
        self.value = float(value)

    def __call__(self, x, omega, theta, profile=None):
        omega = np.asarray(omega, dtype=float)
        return np.full(omega.shape[:-1], self.value)

    @property
    def linear_in_state(self) -> bool:
        return True


class CombinedUtility(Utility):
    """Σ_k a_k · u_k + c."""

    def __init__(self, terms: List[Tuple[float, Utility]], constant: float = 0.0):
        lipschitz = None
        if all(term.lipschitz is not None for _, term in terms):
            lipschitz = sum(abs(weight) * term.lipschitz for weight, term in terms)
        super().__init__(lipschitz=lipschitz)
        self.terms = terms
        self.constant = float(constant)
        self.profile_dependent = any(term.profile_dependent for _, term in terms)

    def __call__(self, x, omega, theta, profile=None):
        total = self.constant
        for weight, term in self.terms:
            total = total + weight * term(x, omega, theta, profile)
        return total

    @property
    def linear_in_state(self) -> bool:
        return all(term.linear_in_state for _, term in self.terms)


def shifted(utility: Utility, constant: float) -> Utility:
    return CombinedUtility([(1.0, utility)], constant=constant)


UTILITY_REGISTRY: Dict[str, Callable[..., Utility]] = {
    "quadratic_loss": lambda agent, **params: QuadraticLossUtility(**params),
    "click_value": lambda agent, coordinate=0, **params: ClickValueUtility(agent, coordinate, **params),
    "interdependent_click": lambda agent, weights, **params: InterdependentClickUtility(agent, weights, **params),
    "token_reward": lambda agent, preference, relevance, **params: TokenRewardUtility(preference, relevance, **params),
    "constant": lambda agent, value=0.0, **params: ConstantUtility(value, **params),
}


def build_utility(name: str, agent: int, params: Optional[Dict] = None) -> Utility:
    """Instantiate a named built-in utility for one agent."""
    if name not in UTILITY_REGISTRY:
        raise InvalidInstance(f"Unknown utility '{name}'. Built-ins: {sorted(UTILITY_REGISTRY)}")
    logger.debug(f"Agent {agent} utility: {name} {params or {}}")
    return UTILITY_REGISTRY[name](agent, **(params or {}))
