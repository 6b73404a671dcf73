from dataclasses import dataclass, field, asdict, replace
from typing import Any, Dict, List, Optional
import hashlib
import json
import logging

from config import AUDIT_BUDGET, DEFAULT_MC_SAMPLES, DEFAULT_RATE_KAPPA, DEFAULT_WORKERS, OUTPUT_DIR
from estimators import EstimatorKind, EstimatorSpec
from exceptions import ConfigError
from scenarios import BuiltScenario, ScenarioName
from transfers import HPolicy, TransferKind, TransferRule

logger = logging.getLogger(__name__)

DEFAULT_SWEEP = [4, 16, 64, 256, 1024, 4096]


@dataclass
class ScenarioSection:
    """Which instance family to build and its parameters"""
    name: str
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass
class TransferSection:
    """Payment rule; kind None means the scenario's default rule"""
    kind: Optional[str] = None
    h_policy: str = "pivot"
    h_offset: float = 0.0
    k_offset: float = 0.0
    aggregation: str = "mean"
    mc_samples: int = DEFAULT_MC_SAMPLES
    seed: Optional[int] = None


@dataclass
class EstimatorSection:
    """Designer's estimator; kind None means the scenario's default estimator"""
    kind: Optional[str] = None
    m: Optional[int] = None
    noise_h: float = 0.1
    noise_sigma: float = 1.0
    rate_kappa: float = DEFAULT_RATE_KAPPA


@dataclass
class SweepSection:
    m: List[int] = field(default_factory=lambda: list(DEFAULT_SWEEP))


@dataclass
class AuditSection:
    budget: int = AUDIT_BUDGET
    workers: int = DEFAULT_WORKERS
    discretization_profiles: int = 200


@dataclass
class CertificateSection:
    """Grid values (not indices) for the impossibility witness"""
    s1: float
    s1_prime: float
    s2: float
    theta_a: float
    theta_b: float
    theta2: float


@dataclass
class DemoSection:
    """Profile (grid values) for the scripted manipulation demos"""
    theta: List[float]
    signals: List[float]


@dataclass
class ExperimentConfig:
    """Complete experiment definition"""
    scenario: ScenarioSection
    name: str = "experiment"
    transfer: TransferSection = field(default_factory=TransferSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    audit: AuditSection = field(default_factory=AuditSection)
    certificate: Optional[CertificateSection] = None
    demo: Optional[DemoSection] = None
    seed: int = 0
    output_dir: str = OUTPUT_DIR

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Raise ConfigError on names or numbers no experiment can run with."""
        try:
            ScenarioName(self.scenario.name)
            if self.transfer.kind is not None:
                TransferKind(self.transfer.kind)
            HPolicy(self.transfer.h_policy)
            if self.estimator.kind is not None:
                EstimatorKind(self.estimator.kind)
        except ValueError as e:
            raise ConfigError(str(e))
        if not isinstance(self.scenario.params, dict):
            raise ConfigError("scenario.params must be an object")
        try:
            self._validate_numbers()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Non-numeric config value: {e}")

    def _validate_numbers(self):
        for label, seed in (("seed", self.seed), ("transfer.seed", self.transfer.seed)):
            if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
                raise ConfigError(f"{label} must be an integer, got {seed!r}")
        m_list = self.sweep.m
        if not m_list or any(int(m) != m or m < 1 for m in m_list) or any(b <= a for a, b in zip(m_list, m_list[1:])):
            raise ConfigError(f"sweep.m must be a strictly increasing list of positive sizes, got {m_list}")
        if self.audit.budget <= 0:
            raise ConfigError("audit.budget must be positive")
        if self.audit.workers < 1:
            raise ConfigError("audit.workers must be at least 1")
        if self.transfer.mc_samples < 2:
            raise ConfigError("transfer.mc_samples must be at least 2")
        if self.estimator.m is not None and self.estimator.m < 1:
            raise ConfigError("estimator.m must be positive")

    @property
    def effective_seed(self) -> int:
        return self.seed if self.transfer.seed is None else self.transfer.seed

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """sha256 of the canonical JSON, ignoring where outputs go and how many workers run."""
        tree = self.to_dict()
        tree.pop("output_dir")
        tree["audit"].pop("workers")
        canonical = json.dumps(tree, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save(self, filename: str):
        with open(filename, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        if not isinstance(data, dict) or "scenario" not in data:
            raise ConfigError("Config needs a 'scenario' section")
        known = {"scenario", "name", "transfer", "estimator", "sweep", "audit", "certificate", "demo", "seed", "output_dir"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config section(s): {unknown}")
        try:
            certificate = data.get("certificate")
            demo = data.get("demo")
            return cls(
                scenario=ScenarioSection(**data["scenario"]),
                name=data.get("name", "experiment"),
                transfer=TransferSection(**data.get("transfer", {})),
                estimator=EstimatorSection(**data.get("estimator", {})),
                sweep=SweepSection(**data.get("sweep", {})),
                audit=AuditSection(**data.get("audit", {})),
                certificate=CertificateSection(**certificate) if certificate is not None else None,
                demo=DemoSection(**demo) if demo is not None else None,
                seed=data.get("seed", 0),
                output_dir=data.get("output_dir", OUTPUT_DIR),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Malformed config section: {e}")

    @classmethod
    def load(cls, filename: str) -> 'ExperimentConfig':
        """Load and validate a config from a JSON file."""
        try:
            with open(filename, 'r') as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError(f"Cannot read config {filename}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config {filename} is not valid JSON: {e}")
        config = cls.from_dict(data)
        logger.info(f"Loaded config '{config.name}' for scenario {config.scenario.name}")
        return config

    def with_overrides(self, seed: Optional[int] = None, workers: Optional[int] = None,
                       output_dir: Optional[str] = None) -> 'ExperimentConfig':
        """Apply command-line flags; --seed replaces both the master and the transfer seed."""
        config = self
        if seed is not None:
            config = replace(config, seed=seed, transfer=replace(config.transfer, seed=seed))
        if workers is not None:
            config = replace(config, audit=replace(config.audit, workers=workers))
        if output_dir is not None:
            config = replace(config, output_dir=output_dir)
        return config

    def build_rule(self, built: BuiltScenario) -> TransferRule:
        section = self.transfer
        if section.kind is None:
            return replace(built.default_rule, h_offset=section.h_offset)
        return TransferRule(TransferKind(section.kind), h_policy=HPolicy(section.h_policy),
                            h_offset=section.h_offset, k_offset=section.k_offset,
                            aggregation=section.aggregation)

    def build_estimator(self, built: BuiltScenario) -> EstimatorSpec:
        section = self.estimator
        base = built.default_estimator
        kind = EstimatorKind(section.kind) if section.kind is not None else base.kind
        m = section.m if section.m is not None else (base.m if kind == base.kind else None)
        if m is None and kind in (EstimatorKind.SAMPLE_MEAN, EstimatorKind.BERNOULLI_CTR):
            m = self.sweep.m[0]
        return EstimatorSpec(kind, m=m, noise_h=section.noise_h, noise_sigma=section.noise_sigma,
                             rate_kappa=section.rate_kappa, mc_samples=self.transfer.mc_samples,
                             seed=self.effective_seed)
