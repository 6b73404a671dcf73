"""
Instance core: the tuple (N, X, Ω, Θ, S, P, u) on finite grids.

Profiles of preference types and signals are tuples of grid indices, one entry
per agent. Posteriors condition on any subset of agents' signals.
"""
from functools import lru_cache
from itertools import combinations, product
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Any
import json
import logging

import numpy as np

from config import PROB_TOL, TABLE_CHECK_LIMIT
from exceptions import InvalidInstance, ZeroMassEvent, MissingLipschitzConstant
from models import StateGrid, TypeGrid, JointPrior, OutcomeSpace, RegularizedObjective, Profile
from utilities import Utility, build_utility

logger = logging.getLogger(__name__)


class Instance:
    """A fully specified mechanism-design instance.

    Immutable after construction; the posterior cache is the only internal
    state and is safe to share across worker threads.
    """

    def __init__(self, name: str, states: StateGrid, types: TypeGrid, prior: JointPrior,
                 utilities: List[Utility], outcome_space: OutcomeSpace,
                 allocation_mode: str = "grid_argmax",
                 closed_form: Optional[str] = None,
                 regularization: Optional[RegularizedObjective] = None,
                 full_support: bool = False,
                 metadata: Optional[Dict[str, Any]] = None,
                 check: bool = True):
        self.name = name
        self.states = states
        self.types = types
        self.prior = prior
        self.utilities = list(utilities)
        self.outcome_space = outcome_space
        self.allocation_mode = allocation_mode
        self.closed_form = closed_form
        self.regularization = regularization
        self.full_support = full_support
        self.metadata = dict(metadata or {})
        self._joint = prior.state_signal_table
        self._joint.setflags(write=False)
        self._posterior_cached = lru_cache(maxsize=None)(self._compute_posterior)
        if check:
            validate(self)
        logger.debug(f"Instance '{name}' ready: {self.n_agents} agents, {states.size} states, "
                     f"outcome mode {outcome_space.mode}")

    @property
    def n_agents(self) -> int:
        return self.types.n_agents

    @property
    def agents(self) -> Tuple[int, ...]:
        return tuple(range(self.n_agents))

    @property
    def profile_dependent(self) -> bool:
        return any(utility.profile_dependent for utility in self.utilities)

    def others(self, i: int) -> Tuple[int, ...]:
        return tuple(j for j in self.agents if j != i)

    def theta_values(self, theta: Profile) -> List[float]:
        return [self.types.theta_value(j, idx) for j, idx in enumerate(theta)]

    def theta_profiles(self) -> Iterable[Profile]:
        return product(*[range(self.types.theta_count(j)) for j in self.agents])

    def signal_profiles(self) -> Iterable[Profile]:
        return product(*[range(self.types.signal_count(j)) for j in self.agents])

    def signal_vector(self, signals: Profile, agents: Optional[Sequence[int]] = None) -> np.ndarray:
        agents = self.agents if agents is None else agents
        return np.concatenate([self.types.signal_value(j, signals[j]) for j in agents])

    # Bayes tables

    def _compute_posterior(self, key: Tuple[Tuple[int, int], ...]) -> Tuple[np.ndarray, float]:
        conditioned = dict(key)
        index = [slice(None)]
        sum_axes = []
        for j in self.agents:
            if j in conditioned:
                index.append(conditioned[j])
            else:
                index.append(slice(None))
                sum_axes.append(j + 1)
        joint = self._joint.sum(axis=tuple(sum_axes), keepdims=True) if sum_axes else self._joint
        # summed axes keep size 1, so the stored slice picks index 0 there
        index = [0 if axis in sum_axes else idx for axis, idx in enumerate(index)]
        weights = np.asarray(joint[tuple(index)], dtype=float).reshape(-1)
        mass = float(weights.sum())
        if mass <= 0.0:
            return weights, 0.0
        result = weights / mass
        result.setflags(write=False)
        return result, mass

    def _key(self, conditioning: Mapping[int, int]) -> Tuple[Tuple[int, int], ...]:
        key = tuple(sorted((int(j), int(s)) for j, s in conditioning.items()))
        for j, s in key:
            if not 0 <= j < self.n_agents or not 0 <= s < self.types.signal_count(j):
                raise InvalidInstance(f"Signal index {s} of agent {j} is off the grid")
        return key

    def posterior(self, conditioning: Mapping[int, int]) -> np.ndarray:
        """P(ω | conditioned signals) over the state grid."""
        posterior, mass = self._posterior_cached(self._key(conditioning))
        if mass <= 0.0:
            raise ZeroMassEvent(f"Signal event {dict(conditioning)} has prior mass 0")
        return posterior

    def signal_mass(self, conditioning: Mapping[int, int]) -> float:
        return self._posterior_cached(self._key(conditioning))[1]

    def posterior_given(self, signals: Profile, agents: Optional[Sequence[int]] = None) -> np.ndarray:
        agents = self.agents if agents is None else agents
        return self.posterior({j: signals[j] for j in agents})

    def posterior_mean(self, conditioning: Mapping[int, int]) -> np.ndarray:
        return self.posterior(conditioning) @ self.states.points

    def posterior_variance(self, conditioning: Mapping[int, int]) -> np.ndarray:
        weights = self.posterior(conditioning)
        mean = weights @ self.states.points
        return weights @ (self.states.points - mean) ** 2

    # Payoffs

    def utility_on_states(self, i: int, x: np.ndarray, theta_index: int,
                          theta_profile: Optional[Profile] = None) -> np.ndarray:
        """u_i(x, ω, θ_i) for every grid state."""
        profile = self.theta_values(theta_profile) if theta_profile is not None else None
        return np.asarray(self.utilities[i](x, self.states.points,
                                            self.types.theta_value(i, theta_index), profile), dtype=float)

    def interim_payoff(self, i: int, x: np.ndarray, theta_index: int, signals: Profile,
                       agents: Optional[Sequence[int]] = None,
                       theta_profile: Optional[Profile] = None) -> float:
        """v_i(x, θ_i, s) = Σ_ω P(ω|s) u_i(x, ω, θ_i)."""
        weights = self.posterior_given(signals, agents)
        return float(weights @ self.utility_on_states(i, x, theta_index, theta_profile))


def posterior(instance: Instance, conditioning: Mapping[int, int]) -> np.ndarray:
    return instance.posterior(conditioning)


def interim_payoff(instance: Instance, i: int, x, theta_index: int, signals: Profile,
                   theta_profile: Optional[Profile] = None) -> float:
    return instance.interim_payoff(i, np.atleast_1d(np.asarray(x, dtype=float)), theta_index, signals,
                                   theta_profile=theta_profile)


def validate(instance: Instance):
    """Run every table invariant; raises InvalidInstance on the first violation."""
    n = instance.n_agents
    prior = instance.prior
    if prior.signal_kernel.ndim != n + 1 or len(prior.type_masses) != n or len(instance.utilities) != n:
        raise InvalidInstance("Agent count differs between type grids, prior and utilities")
    if prior.state_mass.shape[0] != instance.states.size:
        raise InvalidInstance("State prior length does not match the state grid")
    for j in range(n):
        if prior.signal_kernel.shape[j + 1] != instance.types.signal_count(j):
            raise InvalidInstance(f"Signal kernel axis {j + 1} does not match agent {j}'s signal grid")
        if prior.type_masses[j].shape[0] != instance.types.theta_count(j):
            raise InvalidInstance(f"Type prior of agent {j} does not match its preference grid")
    if instance.full_support and not prior.full_support:
        raise InvalidInstance("Instance declares full support but the prior has empty cells")
    if instance.metadata.get("ctr") and (np.any(instance.states.points < 0) or np.any(instance.states.points > 1)):
        raise InvalidInstance("Click-through rates must lie in [0, 1]")

    for j in range(n):
        _check_marginal_reconstruction(instance, j)
    _check_sufficiency(instance)
    _check_utilities_finite(instance)


def _check_marginal_reconstruction(instance: Instance, j: int):
    rebuilt = np.zeros(instance.states.size)
    for s_j in range(instance.types.signal_count(j)):
        mass = instance.signal_mass({j: s_j})
        if mass > 0:
            rebuilt += mass * instance.posterior({j: s_j})
    if np.max(np.abs(rebuilt - instance.prior.state_mass)) > PROB_TOL:
        raise InvalidInstance(f"Posteriors over agent {j}'s signals do not reproduce the state prior")


def _check_sufficiency(instance: Instance):
    prior = instance.prior
    cells = prior.signal_kernel.size * int(np.prod([len(m) for m in prior.type_masses]))
    if cells > TABLE_CHECK_LIMIT:
        logger.debug(f"Skipping sufficiency table check ({cells} cells); product form guarantees it")
        return
    table = prior.table()
    n = instance.n_agents
    for i in range(n):
        keep = (0, 1 + i, 1 + n + i)
        drop = tuple(axis for axis in range(table.ndim) if axis not in keep)
        marginal = table.sum(axis=drop)  # (ω, θ_i, s_i)
        by_signal = marginal.sum(axis=1)  # (ω, s_i)
        for t in range(marginal.shape[1]):
            for s in range(marginal.shape[2]):
                mass = marginal[:, t, s].sum()
                if mass <= 0:
                    continue
                gap = np.abs(marginal[:, t, s] / mass - by_signal[:, s] / by_signal[:, s].sum()).sum()
                if gap > PROB_TOL:
                    raise InvalidInstance(f"Signal of agent {i} is not sufficient for ω (gap {gap:.3g})")


def _check_utilities_finite(instance: Instance, max_candidates: int = 64):
    candidates = instance.outcome_space.probe_points(max_candidates)
    reference_profile = tuple(0 for _ in instance.agents)
    for i in instance.agents:
        for x in candidates:
            for t in range(instance.types.theta_count(i)):
                profile = reference_profile[:i] + (t,) + reference_profile[i + 1:]
                values = instance.utility_on_states(i, x, t, profile)
                if not np.all(np.isfinite(values)):
                    raise InvalidInstance(f"Utility of agent {i} is not finite at x={x.tolist()}")


def posterior_lipschitz_constant(instance: Instance) -> float:
    """max δ_TV(P(·|s), P(·|s')) / ‖s − s'‖ over positive-mass signal profiles."""
    profiles = [s for s in instance.signal_profiles() if instance.signal_mass(dict(enumerate(s))) > 0]
    posteriors = np.array([instance.posterior_given(s) for s in profiles])
    vectors = np.array([instance.signal_vector(s) for s in profiles])
    best = 0.0
    for a, b in combinations(range(len(profiles)), 2):
        distance = float(np.linalg.norm(vectors[a] - vectors[b]))
        if distance <= 0:
            continue
        total_variation = 0.5 * float(np.abs(posteriors[a] - posteriors[b]).sum())
        best = max(best, total_variation / distance)
    return best


def check_utility_lipschitz(instance: Instance, i: int, samples: int = 256, seed: int = 0) -> float:
    """Compare the declared L_u,i with sampled finite differences in ω.

    Returns the largest observed ratio |Δu| / ‖Δω‖.
    """
    utility = instance.utilities[i]
    if utility.lipschitz is None:
        raise MissingLipschitzConstant(f"Agent {i} declares no Lipschitz constant")
    rng = np.random.default_rng(seed)
    points = instance.states.points
    low, high = points.min(axis=0), points.max(axis=0)
    candidates = instance.outcome_space.probe_points()
    worst = 0.0
    for _ in range(samples):
        x = candidates[rng.integers(len(candidates))]
        profile = tuple(int(rng.integers(instance.types.theta_count(j))) for j in instance.agents)
        theta = instance.types.theta_value(i, profile[i])
        omega = rng.uniform(low, high, size=(2, points.shape[1]))
        values = utility(x, omega, theta, instance.theta_values(profile))
        distance = float(np.linalg.norm(omega[0] - omega[1]))
        if distance <= 0:
            continue
        difference = abs(float(values[0] - values[1]))
        if difference > utility.lipschitz * distance + 1e-9:
            raise InvalidInstance(f"Agent {i}: |Δu|={difference:.6g} exceeds L·‖Δω‖="
                                  f"{utility.lipschitz * distance:.6g}")
        worst = max(worst, difference / distance)
    return worst


def instance_from_dict(tree: Dict[str, Any]) -> Instance:
    """Build an instance from the JSON instance-definition schema (see README)."""
    try:
        n = int(tree["agents"])
        state_section = tree["state_grid"]
        states = StateGrid(points=state_section["points"])
        state_mass = state_section.get("prior", np.full(states.size, 1.0 / states.size))

        type_sections = tree["type_grids"]
        if len(type_sections) != n:
            raise InvalidInstance(f"Expected {n} type grids, got {len(type_sections)}")
        types = TypeGrid(preferences=[section["preferences"] for section in type_sections],
                         signals=[section["signals"] for section in type_sections])
        type_masses = [
            section.get("prior", np.full(types.theta_count(j), 1.0 / types.theta_count(j)))
            for j, section in enumerate(type_sections)
        ]

        kernels = tree["signal_kernels"]
        if isinstance(kernels, dict) and "joint" in kernels:
            prior = JointPrior(state_mass=state_mass, type_masses=type_masses, signal_kernel=kernels["joint"])
        else:
            prior = JointPrior.from_independent_kernels(state_mass, type_masses, kernels)

        utility_section = tree["utility"]
        if isinstance(utility_section, dict):
            utility_section = [utility_section] * n
        utilities = [build_utility(section["name"], j, section.get("params")) for j, section in enumerate(utility_section)]

        space = dict(tree["outcome_space"])
        mode = space.pop("mode")
        outcome_space = OutcomeSpace(mode=mode, **space)

        regularization = None
        if "regularization" in tree:
            section = tree["regularization"]
            regularization = RegularizedObjective(alpha=float(section["alpha"]),
                                                  reference=np.asarray(section["reference"], dtype=float),
                                                  divergence=section.get("divergence", "kl"))
        allocation = tree.get("allocation", "grid_argmax")
        closed_form = allocation.split(":", 1)[1] if allocation.startswith("closed_form:") else None
        return Instance(name=tree.get("name", "custom"), states=states, types=types, prior=prior,
                        utilities=utilities, outcome_space=outcome_space,
                        allocation_mode=allocation, closed_form=closed_form,
                        regularization=regularization,
                        full_support=bool(tree.get("full_support", False)),
                        metadata=tree.get("metadata"))
    except KeyError as e:
        raise InvalidInstance(f"Instance definition is missing section {e}")
    except TypeError as e:
        raise InvalidInstance(f"Malformed instance definition: {e}")


def load_instance(filename: str) -> Instance:
    with open(filename, 'r') as f:
        tree = json.load(f)
    logger.info(f"Loaded instance definition from {filename}")
    return instance_from_dict(tree)
