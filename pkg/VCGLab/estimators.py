"""
State estimators with commonly known conditional laws ω̂ | ω.

Finite-support kinds (ex-post, ±h noise, Bernoulli clicks at moderate m) are
returned as exact mass functions. Sample-mean kinds are seeded samplers: the
stream for replication r at state k is keyed by (seed, k, r) only, and a size-m
estimate uses the first m raw draws of that stream, so datasets are nested
across a sweep over m.
"""
from dataclasses import dataclass, replace
from enum import Enum
from itertools import product
from typing import Callable, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd
from scipy.stats import binom

from config import DEFAULT_MC_SAMPLES, DEFAULT_RATE_KAPPA, EXACT_SUPPORT_LIMIT, PROB_TOL
from exceptions import EstimatorUnavailable
from models import StateGrid

logger = logging.getLogger(__name__)


class EstimatorKind(Enum):
    EX_POST = "ex_post"
    UNBIASED_NOISE = "unbiased_noise"
    SAMPLE_MEAN = "sample_mean"
    BERNOULLI_CTR = "bernoulli_ctr"
    LEAVE_ONE_OUT = "leave_one_out"


@dataclass(frozen=True)
class EstimatorSpec:
    """Designer's estimator. `m` is the sample size (None for ex-post)."""
    kind: EstimatorKind
    m: Optional[int] = None
    noise_h: float = 0.1
    noise_sigma: float = 1.0
    rate_kappa: float = DEFAULT_RATE_KAPPA
    mc_samples: int = DEFAULT_MC_SAMPLES
    seed: int = 0
    base: Optional["EstimatorSpec"] = None
    reports: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.kind, str):
            try:
                object.__setattr__(self, "kind", EstimatorKind(self.kind))
            except ValueError:
                raise EstimatorUnavailable(f"Unknown estimator kind '{self.kind}'")
        if self.m is not None and self.m < 1:
            raise EstimatorUnavailable(f"Sample size must be positive, got {self.m}")
        if self.noise_h < 0 or self.noise_sigma < 0:
            raise EstimatorUnavailable("Noise scales must be nonnegative")

    def with_m(self, m: int) -> "EstimatorSpec":
        base = self.base.with_m(m) if self.base is not None else None
        return replace(self, m=m, base=base)

    def rate(self, m: Optional[int] = None) -> float:
        """r_m = m^κ."""
        m = self.m if m is None else m
        return float(m) ** self.rate_kappa if m else float("inf")

    @property
    def label(self) -> str:
        if self.kind == EstimatorKind.EX_POST:
            return "ex_post"
        if self.kind == EstimatorKind.UNBIASED_NOISE:
            return f"unbiased_noise(h={self.noise_h:g})"
        if self.kind == EstimatorKind.LEAVE_ONE_OUT:
            base = self.base.label if self.base is not None else "ex_post"
            return f"leave_one_out({base})"
        return f"{self.kind.value}(m={self.m})"


@dataclass(frozen=True)
class FiniteLaw:
    """Exact mass function of ω̂ given one state."""
    points: np.ndarray
    masses: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.masses @ self.points


class SeededSampler:
    """Draws ω̂ given one state from reproducible per-replication streams."""

    def __init__(self, spec: EstimatorSpec, omega: np.ndarray, state_index: int = 0):
        self.spec = spec
        self.omega = np.atleast_1d(np.asarray(omega, dtype=float))
        self.state_index = state_index

    @property
    def m(self) -> Optional[int]:
        return self.spec.m

    def _rng(self, replication: int, stream: int = 0) -> np.random.Generator:
        key = (self.state_index, replication) if stream == 0 else (self.state_index, replication, stream)
        return np.random.default_rng(np.random.SeedSequence(self.spec.seed, spawn_key=key))

    def _draw(self, spec: EstimatorSpec, rng: np.random.Generator) -> np.ndarray:
        d = self.omega.shape[0]
        if spec.kind == EstimatorKind.SAMPLE_MEAN:
            return self.omega + spec.noise_sigma * rng.standard_normal((spec.m, d)).mean(axis=0)
        if spec.kind == EstimatorKind.BERNOULLI_CTR:
            return (rng.random((spec.m, d)) < self.omega).mean(axis=0)
        if spec.kind == EstimatorKind.UNBIASED_NOISE:
            return self.omega + spec.noise_h * np.where(rng.random(d) < 0.5, -1.0, 1.0)
        if spec.kind == EstimatorKind.EX_POST:
            return self.omega.copy()
        raise EstimatorUnavailable(f"No sampler for {spec.kind.value}")

    def sample(self, replications: int) -> np.ndarray:
        spec = self.spec
        draws = np.empty((replications, self.omega.shape[0]))
        for r in range(replications):
            if spec.kind == EstimatorKind.LEAVE_ONE_OUT:
                base = spec.base or EstimatorSpec(EstimatorKind.EX_POST)
                draws[r] = np.mean([self._draw(base, self._rng(r, stream=agent + 1))
                                    for agent in range(spec.reports)], axis=0)
            else:
                draws[r] = self._draw(spec, self._rng(r))
        return draws


def _product_law(coordinate_laws: List[Tuple[np.ndarray, np.ndarray]]) -> FiniteLaw:
    values = [values for values, _ in coordinate_laws]
    masses = [masses for _, masses in coordinate_laws]
    points = np.array(list(product(*values)), dtype=float)
    weights = np.array([np.prod(combo) for combo in product(*masses)], dtype=float)
    return FiniteLaw(points=points, masses=weights)


def _finite_law(spec: EstimatorSpec, omega: np.ndarray) -> Optional[FiniteLaw]:
    d = omega.shape[0]
    if spec.kind == EstimatorKind.EX_POST:
        return FiniteLaw(points=omega[None, :].copy(), masses=np.ones(1))
    if spec.kind == EstimatorKind.UNBIASED_NOISE:
        h = spec.noise_h
        law = _product_law([(np.array([w - h, w + h]), np.array([0.5, 0.5])) for w in omega])
        if np.max(np.abs(law.mean - omega)) > PROB_TOL:
            raise EstimatorUnavailable("Noise law is not mean-zero")
        return law
    if spec.kind == EstimatorKind.BERNOULLI_CTR:
        if spec.m is None:
            raise EstimatorUnavailable("bernoulli_ctr needs a sample size m")
        if np.any(omega < 0) or np.any(omega > 1):
            raise EstimatorUnavailable("bernoulli_ctr needs click probabilities in [0, 1]")
        if (spec.m + 1) ** d > EXACT_SUPPORT_LIMIT:
            return None
        clicks = np.arange(spec.m + 1)
        coordinate_laws = []
        for p in omega:
            masses = binom.pmf(clicks, spec.m, p)
            keep = masses > 0
            coordinate_laws.append((clicks[keep] / spec.m, masses[keep] / masses[keep].sum()))
        return _product_law(coordinate_laws)
    if spec.kind == EstimatorKind.LEAVE_ONE_OUT:
        if not spec.reports or spec.reports < 1:
            raise EstimatorUnavailable("Leave-one-out estimates need at least one other agent's report")
        base = _finite_law(spec.base or EstimatorSpec(EstimatorKind.EX_POST), omega)
        if base is None or len(base.masses) ** spec.reports > EXACT_SUPPORT_LIMIT:
            return None
        combos = list(product(range(len(base.masses)), repeat=spec.reports))
        points = np.array([base.points[list(combo)].mean(axis=0) for combo in combos])
        masses = np.array([np.prod(base.masses[list(combo)]) for combo in combos])
        return FiniteLaw(points=points, masses=masses)
    if spec.kind == EstimatorKind.SAMPLE_MEAN:
        if spec.m is None:
            raise EstimatorUnavailable("sample_mean needs a sample size m")
        return None
    raise EstimatorUnavailable(f"Unknown estimator kind {spec.kind}")


def conditional_law(spec: EstimatorSpec, omega, state_index: int = 0) -> Union[FiniteLaw, SeededSampler]:
    """Law of ω̂ given ω: an exact FiniteLaw where the support is small, else a SeededSampler."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    law = _finite_law(spec, omega)
    if law is not None:
        return law
    return SeededSampler(spec, omega, state_index)


@dataclass
class EstimatorLaw:
    """ω̂ | ω for every grid state, as padded arrays.

    points has shape (|Ω|, Q, d) and weights (|Ω|, Q); rows of weights sum to one.
    In Monte Carlo mode every weight is 1/Q and axis 1 indexes replications.
    """
    spec: EstimatorSpec
    points: np.ndarray
    weights: np.ndarray
    monte_carlo: bool

    @property
    def support_size(self) -> int:
        return self.points.shape[1]

    def expectation(self, values: np.ndarray) -> np.ndarray:
        """E[f(ω̂) | ω_k] for values f evaluated at `points`."""
        return np.sum(self.weights * values, axis=1)

    def mean_abs_deviation(self, states: StateGrid) -> np.ndarray:
        """E[‖ω̂ − ω_k‖ | ω_k] for every state."""
        distances = np.linalg.norm(self.points - states.points[:, None, :], axis=2)
        return self.expectation(distances)


def build_law(spec: EstimatorSpec, states: StateGrid, n_agents: Optional[int] = None) -> EstimatorLaw:
    """Evaluate conditional_law at every grid state and pack the result for audits."""
    if spec.kind == EstimatorKind.LEAVE_ONE_OUT and spec.reports is None:
        if n_agents is None:
            raise EstimatorUnavailable("Leave-one-out law needs the number of agents")
        spec = replace(spec, reports=n_agents - 1)
    laws = [conditional_law(spec, omega, k) for k, omega in enumerate(states.points)]
    d = states.dim
    if all(isinstance(law, FiniteLaw) for law in laws):
        width = max(len(law.masses) for law in laws)
        points = np.repeat(states.points[:, None, :], width, axis=1).astype(float)
        weights = np.zeros((len(laws), width))
        for k, law in enumerate(laws):
            points[k, :len(law.masses)] = law.points
            weights[k, :len(law.masses)] = law.masses
        return EstimatorLaw(spec=spec, points=points, weights=weights, monte_carlo=False)

    replications = spec.mc_samples
    if replications < 2:
        raise EstimatorUnavailable("Monte Carlo laws need at least two replications")
    points = np.empty((len(laws), replications, d))
    for k, omega in enumerate(states.points):
        sampler = laws[k] if isinstance(laws[k], SeededSampler) else SeededSampler(spec, omega, k)
        points[k] = sampler.sample(replications)
    weights = np.full((len(laws), replications), 1.0 / replications)
    logger.debug(f"Sampled {spec.label} law: {len(laws)} states x {replications} replications")
    return EstimatorLaw(spec=spec, points=points, weights=weights, monte_carlo=True)


def log_log_slope(ms: Sequence[float], values: Sequence[float], tol: float = 0.0) -> Optional[float]:
    """OLS slope of log(value) on log(m), dropping values at or below tol."""
    ms = np.asarray(ms, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = values > tol
    if keep.sum() < 2:
        return None
    slope, _ = np.polyfit(np.log(ms[keep]), np.log(values[keep]), 1)
    return float(slope)


@dataclass
class ConvergenceTable:
    frame: pd.DataFrame
    slope: Optional[float]
    monotone: bool


def empirical_convergence(spec: EstimatorSpec, omega, m_list: Sequence[int],
                          deviation: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                          replications: Optional[int] = None) -> ConvergenceTable:
    """Table of m ↦ E‖ω̂_m − ω‖ with standard errors and the log-log slope."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    deviation = deviation or (lambda diff: np.linalg.norm(diff, axis=-1))
    rows = []
    for m in m_list:
        law = conditional_law(replace(spec.with_m(m), mc_samples=replications or spec.mc_samples), omega)
        if isinstance(law, FiniteLaw):
            values = deviation(law.points - omega)
            rows.append({"m": m, "mean_abs_dev": float(law.masses @ values), "se": 0.0})
        else:
            draws = law.sample(replications or spec.mc_samples)
            values = deviation(draws - omega)
            rows.append({"m": m, "mean_abs_dev": float(values.mean()),
                         "se": float(values.std(ddof=1) / np.sqrt(len(values)))})
    frame = pd.DataFrame(rows, columns=["m", "mean_abs_dev", "se"])
    means = frame["mean_abs_dev"].to_numpy()
    errors = frame["se"].to_numpy()
    monotone = bool(np.all(means[1:] <= means[:-1] + 3 * np.maximum(errors[1:], errors[:-1]) + PROB_TOL))
    slope = log_log_slope(frame["m"], means, tol=PROB_TOL)
    logger.info(f"Convergence of {spec.kind.value} at ω={omega.tolist()}: slope={slope}, monotone={monotone}")
    return ConvergenceTable(frame=frame, slope=slope, monotone=monotone)


def uniform_integrability_proxy(spec: EstimatorSpec, states: StateGrid, m_list: Sequence[int]) -> float:
    """sup over grid ω and m of E‖r_m(ω̂_m − ω)‖."""
    worst = 0.0
    for m in m_list:
        law = build_law(spec.with_m(m), states)
        worst = max(worst, spec.rate(m) * float(np.max(law.mean_abs_deviation(states))))
    return worst
