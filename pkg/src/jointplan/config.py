"""Run configuration: one YAML file, every field defaulted.

Unknown keys are rejected so typos surface as configuration errors instead of
silently falling back to defaults.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from jointplan.energy import EnergyWeights, default_weights
from jointplan.errors import ConfigurationError
from jointplan.inference import LbpOptions
from jointplan.learning.fit import FitOptions
from jointplan.learning.losses import LossWeights
from jointplan.planner import MODES
from jointplan.sim.episode import EpisodeOptions
from jointplan.sim.scenario import Scenario, load_scenario, scenario_from_dict
from jointplan.trajectory import SamplerProfile

CONFIG_ENV = "JOINTPLAN_CONFIG"

DEFAULTS = {
    "scenario": {"builtin": "dense_merge", "params": {}},  # or a scenario file path
    "mode": "interactive",      # interactive | non_interactive | both
    "seed": 0,                  # an int, or an explicit list of seeds
    "episodes": 1,              # seeds seed .. seed + episodes - 1
    "workers": 1,
    "out": "out",
    "weights": None,            # path to a weights file; None uses the built-in defaults
    "sampler": {},              # SamplerProfile fields
    "lbp": {},                  # LbpOptions fields used while planning
    "episode": {"radius": 30.0, "max_agents": 8},
    "fit": {
        "traces": [],           # trace files or glob patterns
        "init": None,           # weights file to start from; defaults to `weights`
        "epsilon": 0.5,
        "stride": 1,            # use every n-th tick as a training scene
        "gradient_check": False,
        "options": {},          # FitOptions fields
    },
    "distill": {
        "corpus": None,         # corpus directory; None uses the packaged toy corpus
        "splits": 10,
        "train": None,          # scenes per split; None uses the corpus manifest
        "test": None,
        "epsilon": 0.5,
        "lambdas": {"distill_feature": 0.0},  # LossWeights fields
        "options": {},          # FitOptions fields for the students
        "teacher_options": {"steps": 300, "growth": 1.1},
    },
    "infer": {"fixture": None, "max_states": 10 ** 6,
              "lbp": {"max_iterations": 2000, "damping": 0.5, "tolerance": 1e-13}},
    "plot": {"trace": None, "scale": 8.0},
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigurationError(f"unknown config key {where + k!r}")
        free = k in ("params", "sampler", "lbp", "options", "teacher_options", "lambdas", "scenario")
        if isinstance(base[k], dict) and not free:
            if not isinstance(v, dict):
                raise ConfigurationError(f"config key {where + k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    base_dir: Path

    @property
    def modes(self) -> tuple:
        m = self.raw["mode"]
        if m == "both":
            return MODES
        if m not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES + ('both',)}, got {m!r}")
        return (m,)

    @property
    def seeds(self) -> list:
        s = self.raw["seed"]
        if isinstance(s, (list, tuple)):
            if not s:
                raise ConfigurationError("seed list is empty")
            return [int(x) for x in s]
        n = int(self.raw["episodes"])
        if n < 1:
            raise ConfigurationError("episodes must be >= 1")
        return list(range(int(s), int(s) + n))

    def scenario(self, seed: int) -> Scenario:
        sc = self.raw["scenario"]
        if isinstance(sc, str):
            return load_scenario(self.path(sc), seed)
        if isinstance(sc, dict) and "path" in sc:
            return load_scenario(self.path(sc["path"]), seed)
        return scenario_from_dict(sc, seed)

    @property
    def workers(self) -> int:
        n = int(self.raw["workers"])
        if n < 1:
            raise ConfigurationError("workers must be >= 1")
        return n

    @property
    def out(self) -> Path:
        return self.path(self.raw["out"])

    def path(self, p) -> Path:
        p = Path(os.path.expanduser(str(p)))
        return p if p.is_absolute() else self.base_dir / p

    def existing(self, p, what: str) -> Path:
        q = self.path(p)
        if not q.is_file():
            raise ConfigurationError(f"{what} not found: {q}")
        return q

    def weights(self, key=None) -> EnergyWeights:
        p = self.raw["weights"] if key is None else key
        if p is None:
            return default_weights()
        return EnergyWeights.from_text(self.existing(p, "weights file").read_text())

    def profile(self) -> SamplerProfile:
        return SamplerProfile.from_dict(self.raw["sampler"] or {})

    def lbp(self, section: str | None = None) -> LbpOptions:
        d = self.raw["lbp"] if section is None else self.raw[section]["lbp"]
        try:
            return LbpOptions(**(d or {}))
        except TypeError as e:
            raise ConfigurationError(f"bad lbp options: {e}") from None

    def episode_options(self) -> EpisodeOptions:
        e = self.raw["episode"]
        prof = self.profile()
        return EpisodeOptions(replan_period=prof.dt, profile=prof, lbp=self.lbp(),
                              radius=float(e["radius"]), max_agents=int(e["max_agents"]))

    def fit_options(self, section: str = "fit", key: str = "options") -> FitOptions:
        try:
            return FitOptions.from_dict(self.raw[section][key] or {})
        except TypeError as e:
            raise ConfigurationError(f"bad {section}.{key}: {e}") from None

    def loss_weights(self) -> LossWeights:
        return LossWeights.from_dict(self.raw["distill"]["lambdas"] or {})


def from_dict(d: dict | None, base_dir=".") -> RunConfig:
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigurationError("config must be a mapping at the top level")
    return RunConfig(_merge(DEFAULTS, d), Path(base_dir))


def load_config(path=None) -> RunConfig:
    """Load ``path``, else the file named by $JOINTPLAN_CONFIG, else pure defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        d = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse config {p}: {e}") from None
    return from_dict(d, p.parent)
