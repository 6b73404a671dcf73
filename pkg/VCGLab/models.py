from dataclasses import dataclass, field, asdict
from typing import List, Dict, Optional, Tuple, Any
import logging

import numpy as np
import pandas as pd

from config import PROB_TOL
from exceptions import InvalidInstance, EmptyOutcomeSpace

logger = logging.getLogger(__name__)

Profile = Tuple[int, ...]


def _as_matrix(values, name: str) -> np.ndarray:
    """Coerce a list of scalars or vectors into a read-only (count, dim) float array."""
    array = np.asarray(values, dtype=float)
    if array.ndim == 1:
        array = array[:, None]
    if array.ndim != 2 or array.shape[0] == 0:
        raise InvalidInstance(f"{name} must be a nonempty list of points")
    if not np.all(np.isfinite(array)):
        raise InvalidInstance(f"{name} contains non-finite values")
    if len(np.unique(array, axis=0)) != array.shape[0]:
        raise InvalidInstance(f"{name} points must be distinct")
    array.setflags(write=False)
    return array


def _as_distribution(values, size: int, name: str) -> np.ndarray:
    mass = np.asarray(values, dtype=float)
    if mass.shape != (size,):
        raise InvalidInstance(f"{name} must have {size} entries, got shape {mass.shape}")
    if np.any(mass < 0):
        raise InvalidInstance(f"{name} has negative mass")
    if abs(mass.sum() - 1.0) > PROB_TOL * max(1, size):
        raise InvalidInstance(f"{name} sums to {mass.sum():.15g}, not 1")
    mass = mass / mass.sum()
    mass.setflags(write=False)
    return mass


@dataclass(frozen=True)
class StateGrid:
    """Ordered state vectors. Rows are states, columns are coordinates."""
    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _as_matrix(self.points, "state grid"))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def index_of(self, value) -> int:
        target = np.atleast_1d(np.asarray(value, dtype=float))
        hits = np.flatnonzero(np.all(np.abs(self.points - target) <= PROB_TOL, axis=1))
        if len(hits) == 0:
            raise InvalidInstance(f"State {target.tolist()} is not on the grid")
        return int(hits[0])


@dataclass(frozen=True)
class TypeGrid:
    """Per-agent preference grids Θ_i and signal grids S_i."""
    preferences: List[np.ndarray]
    signals: List[np.ndarray]

    def __post_init__(self):
        if len(self.preferences) == 0 or len(self.preferences) != len(self.signals):
            raise InvalidInstance("Type grid needs one preference grid and one signal grid per agent")
        object.__setattr__(self, "preferences", [
            _as_matrix(grid, f"preference grid of agent {i}") for i, grid in enumerate(self.preferences)
        ])
        object.__setattr__(self, "signals", [
            _as_matrix(grid, f"signal grid of agent {i}") for i, grid in enumerate(self.signals)
        ])

    @property
    def n_agents(self) -> int:
        return len(self.preferences)

    def theta_count(self, i: int) -> int:
        return self.preferences[i].shape[0]

    def signal_count(self, i: int) -> int:
        return self.signals[i].shape[0]

    def theta_value(self, i: int, index: int) -> float:
        """Scalar view of a preference type; built-in utilities use the first coordinate."""
        return float(self.preferences[i][index, 0])

    def signal_value(self, i: int, index: int) -> np.ndarray:
        return self.signals[i][index]

    def index_of(self, grid: str, i: int, value) -> int:
        points = self.preferences[i] if grid == "theta" else self.signals[i]
        target = np.atleast_1d(np.asarray(value, dtype=float))
        hits = np.flatnonzero(np.all(np.abs(points - target) <= 1e-9, axis=1))
        if len(hits) == 0:
            raise InvalidInstance(f"{grid} value {target.tolist()} is not on agent {i}'s grid")
        return int(hits[0])


@dataclass(frozen=True)
class JointPrior:
    """Product-form prior P(ω)·Π_i P(θ_i)·P(s|ω).

    `signal_kernel` has shape (|Ω|, |S_1|, ..., |S_n|); each state slice sums to one.
    Independent per-agent kernels are combined with `from_independent_kernels`.
    """
    state_mass: np.ndarray
    type_masses: List[np.ndarray]
    signal_kernel: np.ndarray

    def __post_init__(self):
        state_mass = _as_distribution(self.state_mass, len(self.state_mass), "state prior")
        type_masses = [
            _as_distribution(mass, len(mass), f"type prior of agent {i}")
            for i, mass in enumerate(self.type_masses)
        ]
        kernel = np.asarray(self.signal_kernel, dtype=float)
        if kernel.ndim != 1 + len(type_masses) or kernel.shape[0] != len(state_mass):
            raise InvalidInstance(f"Signal kernel shape {kernel.shape} does not match the grids")
        if np.any(kernel < 0):
            raise InvalidInstance("Signal kernel has negative entries")
        row_sums = kernel.reshape(kernel.shape[0], -1).sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-9):
            raise InvalidInstance("Every state slice of the signal kernel must sum to 1")
        kernel = kernel / row_sums.reshape((-1,) + (1,) * (kernel.ndim - 1))
        kernel.setflags(write=False)
        object.__setattr__(self, "state_mass", state_mass)
        object.__setattr__(self, "type_masses", type_masses)
        object.__setattr__(self, "signal_kernel", kernel)

    @classmethod
    def from_independent_kernels(cls, state_mass, type_masses, kernels: List[np.ndarray]) -> "JointPrior":
        """Conditionally independent signals: P(s|ω) = Π_i P(s_i|ω)."""
        joint = None
        for kernel in kernels:
            kernel = np.asarray(kernel, dtype=float)
            kernel = kernel / kernel.sum(axis=1, keepdims=True)
            if joint is None:
                joint = kernel
            else:
                joint = joint[..., None] * kernel.reshape((kernel.shape[0],) + (1,) * (joint.ndim - 1) + (kernel.shape[1],))
        return cls(state_mass=state_mass, type_masses=type_masses, signal_kernel=joint)

    @classmethod
    def from_state_signal_table(cls, table, type_masses) -> "JointPrior":
        """Build from a joint P(ω, s) table (e.g. states that are functions of signals)."""
        table = np.asarray(table, dtype=float)
        state_mass = table.reshape(table.shape[0], -1).sum(axis=1)
        if np.any(state_mass <= 0):
            raise InvalidInstance("Every state needs positive marginal mass")
        kernel = table / state_mass.reshape((-1,) + (1,) * (table.ndim - 1))
        return cls(state_mass=state_mass, type_masses=type_masses, signal_kernel=kernel)

    @property
    def state_signal_table(self) -> np.ndarray:
        """P(ω, s) with shape (|Ω|, |S_1|, ..., |S_n|)."""
        shape = (-1,) + (1,) * (self.signal_kernel.ndim - 1)
        return self.state_mass.reshape(shape) * self.signal_kernel

    def table(self) -> np.ndarray:
        """Full mass table over (ω, θ_1..θ_n, s_1..s_n)."""
        joint = self.state_signal_table
        n = len(self.type_masses)
        type_table = np.ones(())
        for mass in self.type_masses:
            type_table = np.multiply.outer(type_table, mass)
        table = joint.reshape((joint.shape[0],) + (1,) * n + joint.shape[1:])
        return table * type_table.reshape((1,) + type_table.shape + (1,) * n)

    @property
    def full_support(self) -> bool:
        return bool(np.all(self.signal_kernel > 0) and np.all(self.state_mass > 0)
                    and all(np.all(mass > 0) for mass in self.type_masses))


@dataclass(frozen=True)
class OutcomeSpace:
    """Feasible allocations: a finite point list, a token simplex or a compact interval."""
    mode: str
    points: Optional[np.ndarray] = None
    tokens: Optional[List[str]] = None
    lower: Optional[float] = None
    upper: Optional[float] = None
    resolution: int = 1000

    def __post_init__(self):
        if self.mode == "finite":
            if self.points is None or len(self.points) == 0:
                raise EmptyOutcomeSpace("Finite outcome space has no points")
            object.__setattr__(self, "points", _as_matrix(self.points, "outcome space"))
        elif self.mode == "simplex":
            if not self.tokens:
                raise EmptyOutcomeSpace("Simplex outcome space needs at least one token")
            if self.resolution < 2:
                raise InvalidInstance("Simplex search resolution must be at least 2 cells per coordinate")
        elif self.mode == "interval":
            if self.lower is None or self.upper is None or self.upper < self.lower:
                raise EmptyOutcomeSpace("Interval outcome space needs lower <= upper")
            if self.resolution < 2:
                raise InvalidInstance("Interval search resolution must be at least 2 points")
        else:
            raise InvalidInstance(f"Unknown outcome space mode: {self.mode}")

    @property
    def dim(self) -> int:
        if self.mode == "finite":
            return self.points.shape[1]
        if self.mode == "simplex":
            return len(self.tokens)
        return 1

    def candidates(self) -> np.ndarray:
        """Search grid for argmax: the points themselves, a simplex lattice or an interval grid."""
        if self.mode == "finite":
            return self.points
        if self.mode == "interval":
            return np.linspace(self.lower, self.upper, self.resolution)[:, None]
        return simplex_lattice(len(self.tokens), self.resolution)

    def probe_points(self, limit: int = 64) -> np.ndarray:
        """A small spread of feasible allocations for invariant checks."""
        if self.mode == "simplex":
            size = len(self.tokens)
            return np.vstack([np.eye(size), np.full((1, size), 1.0 / size)])
        if self.mode == "interval":
            return np.linspace(self.lower, self.upper, min(limit, self.resolution))[:, None]
        if len(self.points) <= limit:
            return self.points
        picks = np.linspace(0, len(self.points) - 1, limit).round().astype(int)
        return self.points[picks]

    def contains(self, x: np.ndarray, tol: float = PROB_TOL) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.mode == "finite":
            return bool(np.any(np.all(np.abs(self.points - x) <= tol, axis=1)))
        if self.mode == "interval":
            return bool(self.lower - tol <= x[0] <= self.upper + tol)
        return bool(len(x) == len(self.tokens) and np.all(x >= -tol) and abs(x.sum() - 1.0) <= tol)


def simplex_lattice(size: int, cells: int) -> np.ndarray:
    """All points of the simplex whose coordinates are multiples of 1/cells."""
    if size == 1:
        return np.ones((1, 1))
    if size == 2:
        grid = np.arange(cells + 1) / cells
        return np.column_stack([grid, 1.0 - grid])
    rows = []
    for head in range(cells + 1):
        tail = simplex_lattice(size - 1, cells - head) * (cells - head) / cells if head < cells \
            else np.zeros((1, size - 1))
        rows.append(np.column_stack([np.full(len(tail), head / cells), tail]))
    return np.vstack(rows)


@dataclass(frozen=True)
class RegularizedObjective:
    """α-regularized welfare with a KL penalty toward a reference distribution x_0."""
    alpha: float
    reference: np.ndarray
    divergence: str = "kl"

    def __post_init__(self):
        if self.divergence != "kl":
            raise InvalidInstance(f"Only the KL divergence has a closed form, got '{self.divergence}'")


@dataclass(frozen=True)
class EstimateDraw:
    """One realized state estimate; m is None for the ex-post estimator."""
    value: np.ndarray
    m: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "value", np.atleast_1d(np.asarray(self.value, dtype=float)))


@dataclass
class RegretRow:
    agent: int
    theta: Profile
    signals: Profile
    best_dev_theta: int
    best_dev_s: int
    gain: float
    se: float = 0.0


@dataclass
class RegretReport:
    """Per-agent, per-profile best-deviation gains and the resulting ε."""
    rows: List[RegretRow]
    monte_carlo: bool = False
    skipped_profiles: int = 0

    @property
    def epsilon(self) -> float:
        return max([0.0] + [row.gain for row in self.rows])

    @property
    def worst_row(self) -> Optional[RegretRow]:
        if not self.rows:
            return None
        return max(self.rows, key=lambda row: row.gain)

    @property
    def epsilon_se(self) -> float:
        worst = self.worst_row
        return worst.se if worst is not None else 0.0

    def agent_epsilon(self, i: int) -> float:
        return max([0.0] + [row.gain for row in self.rows if row.agent == i])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "agent": [row.agent for row in self.rows],
            "theta_idx": ["-".join(map(str, row.theta)) for row in self.rows],
            "s_idx": ["-".join(map(str, row.signals)) for row in self.rows],
            "best_dev_theta": [row.best_dev_theta for row in self.rows],
            "best_dev_s": [row.best_dev_s for row in self.rows],
            "gain": [row.gain for row in self.rows],
            "se": [row.se for row in self.rows],
        }, columns=["agent", "theta_idx", "s_idx", "best_dev_theta", "best_dev_s", "gain", "se"])


@dataclass
class SweepRow:
    m: int
    epsilon: float
    bound: Optional[float]
    r_m: float
    r_eps: float
    se: float
    mean_abs_dev: float


@dataclass
class RateSweep:
    """ε_m across sample sizes with the fitted log-log slope."""
    rows: List[SweepRow]
    slope: Optional[float]
    bound_slope: Optional[float] = None
    exact: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "m": [row.m for row in self.rows],
            "epsilon": [row.epsilon for row in self.rows],
            "bound": [row.bound for row in self.rows],
            "r_m": [row.r_m for row in self.rows],
            "r_eps": [row.r_eps for row in self.rows],
            "se": [row.se for row in self.rows],
        }, columns=["m", "epsilon", "bound", "r_m", "r_eps", "se"])

    def to_long_frame(self) -> pd.DataFrame:
        frame = self.to_frame()
        frame["mean_abs_dev"] = [row.mean_abs_dev for row in self.rows]
        return frame.melt(id_vars=["m"], var_name="series", value_name="value")


@dataclass
class ImpossibilityCertificate:
    """Witness that no message-driven transfer implements the efficient rule."""
    s1: float
    s1_prime: float
    s2: float
    theta2: float
    theta_a: float
    theta_b: float
    mean_s: float
    mean_s_prime: float
    var_s: float
    var_s_prime: float
    delta_mean: float
    rhs_a: Optional[float] = None
    rhs_b: Optional[float] = None
    implied_h_diff_a: Optional[float] = None
    implied_h_diff_b: Optional[float] = None
    gap: Optional[float] = None
    expected_gap: Optional[float] = None
    certified: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class DeviationRecord:
    """Outcome of a scripted manipulation demo."""
    scenario: str
    agent: int
    theta: List[float]
    signals: List[float]
    truthful_payoff: float
    best_deviation: Dict[str, float]
    best_payoff: float
    gain: float
    expected_gain: float
    audited_gain: float
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
