"""Experiment configuration: one JSON document drives the whole pipeline.

Every field has a default, so `{}` is a valid config that runs the
full-scale experiment end-to-end.  Sections mirror the pipeline stages;
unknown keys are rejected rather than silently ignored.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace

from .adversarial import AdvConfig
from .agents import DqnConfig, PpoConfig
from .dae import DaeConfig
from .errors import ConfigError
from .ontology import Ontology, default_ontology, micro_ontology

ONTOLOGY_NAMES = ("default", "micro")
AGENT_KINDS = ("dqn", "wdqn", "ppo")
COMBINATIONS = ("vanilla", "SeqAvg", "SeqPrd")


@dataclass(frozen=True)
class ExperimentConfig:
    ontology: str = "default"        # "default", "micro", or a JSON file path
    out_dir: str = "runs/exp"
    seeds: tuple = (0,)              # one training run per seed per variant
    n_dialogs: int = 900
    corpus_seed: int = 11
    agents: tuple = AGENT_KINDS
    combinations: tuple = COMBINATIONS
    # estimator combination parameters shared by all shaped variants
    tau: float = 10.0
    b: float = -0.5
    alpha: float = 5.0
    # classifier-analysis settings
    testset_dialogs: int = 400
    testset_seed: int = 97
    threshold: float = 0.5
    n_bins: int = 100
    dae: DaeConfig = field(default_factory=DaeConfig)
    gan: AdvConfig = field(default_factory=AdvConfig)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if any(int(s) != s for s in self.seeds):
            raise ConfigError("seeds must be integers")
        for a in self.agents:
            if a not in AGENT_KINDS:
                raise ConfigError(f"unknown agent kind {a!r}, expected one of {AGENT_KINDS}")
        for c in self.combinations:
            if c not in COMBINATIONS:
                raise ConfigError(f"unknown combination {c!r}, expected one of {COMBINATIONS}")
        if not self.agents or not self.combinations:
            raise ConfigError("agents and combinations must be non-empty")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.n_bins < 2:
            raise ConfigError("n_bins must be at least 2")
        if self.n_dialogs < 1 or self.testset_dialogs < 1:
            raise ConfigError("dialog counts must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["agents"] = list(self.agents)
        d["combinations"] = list(self.combinations)
        return d

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_SECTIONS = {"dae": DaeConfig, "gan": AdvConfig, "dqn": DqnConfig, "ppo": PpoConfig}
_TUPLE_FIELDS = ("seeds", "agents", "combinations")
_SCALAR_FIELDS = (
    "ontology", "out_dir", "n_dialogs", "corpus_seed", "tau", "b", "alpha",
    "testset_dialogs", "testset_seed", "threshold", "n_bins",
)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            section = raw.pop(name)
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            try:
                kwargs[name] = cls(**section)
            except TypeError as e:
                raise ConfigError(f"config section {name!r}: {e}") from e
    for name in _TUPLE_FIELDS:
        if name in raw:
            kwargs[name] = tuple(raw.pop(name))
    for name in _SCALAR_FIELDS:
        if name in raw:
            kwargs[name] = raw.pop(name)
    if raw:
        raise ConfigError(f"unknown config keys: {sorted(raw)}")
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    cfg = config_from_dict(raw)
    if cfg.ontology not in ONTOLOGY_NAMES and not os.path.exists(cfg.ontology):
        raise ConfigError(f"ontology file not found: {cfg.ontology}")
    return cfg


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def resolve_ontology(cfg: ExperimentConfig) -> Ontology:
    if cfg.ontology == "default":
        return default_ontology()
    if cfg.ontology == "micro":
        return micro_ontology()
    return Ontology.load(cfg.ontology)


def with_overrides(cfg: ExperimentConfig, seed=None, out=None) -> ExperimentConfig:
    """Apply the global CLI flags: --seed pins the run-seed list, --out
    redirects artifacts."""
    if seed is not None:
        cfg = replace(cfg, seeds=(int(seed),))
    if out is not None:
        cfg = replace(cfg, out_dir=str(out))
    return cfg
