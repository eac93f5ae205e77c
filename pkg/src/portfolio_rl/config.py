"""Experiment configuration: JSON file plus command-line overrides, validated up front."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .data import GENERATORS, UniverseSpec
from .environment import REWARD_KINDS
from .errors import ConfigError

AGENT_KINDS = ("buy_and_hold", "uniform", "random", "oracle", "smm", "var", "rnn",
               "dsrqn", "reinforce", "msm")

# hyperparameters each agent kind accepts, with defaults
AGENT_DEFAULTS = {
    "buy_and_hold": {"weights": None},
    "uniform": {},
    "random": {"concentration": 1.0},
    "oracle": {},
    "smm": {"lookback": None},
    "var": {"p": None, "p_max": 12, "horizon": 5, "alpha": 1.0, "online": True, "online_lr": None},
    "rnn": {"hidden": 32, "fit_epochs": 150, "lr": 1e-2, "horizon": 1, "alpha": 1.0, "online": True,
            "online_lr": None},
    "dsrqn": {"channels": 16, "hidden": 64, "lr": 1e-3},
    "reinforce": {"channels": 16, "hidden": 64, "lr": 1e-3, "kappa": 50.0, "kappa_anneal": 1.001,
                  "baseline": True},
    "msm": {"channels": 8, "hidden": 16, "mixture_hidden": 32, "lr": 1e-3, "kappa": 50.0,
            "kappa_anneal": 1.001, "baseline": True},
}
DEFAULT_EPISODES = {"dsrqn": 1000, "reinforce": 7500, "msm": 10000}
PRETRAINABLE = ("reinforce", "msm")
PRETRAIN_DEFAULTS = {"N": 2000, "epochs": 1000, "lam": 1e-4, "lr": 1e-3, "batch": 64,
                     "patience": 50, "mean": 0.0}


def _check_keys(d: dict, allowed, where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    universe: Union[dict, str] = field(default_factory=lambda: {"generator": "sine", "M": 2, "T": 500})
    agent: dict = field(default_factory=lambda: {"kind": "uniform"})
    reward_kind: str = "log_return"
    window: int = 60
    beta: float = 0.002
    gamma: float = 1.0
    seed: int = 0
    episodes: Optional[int] = None
    split: Union[float, int, str] = 0.7
    out: str = "runs/default"
    pretrain: Optional[dict] = None
    name: Optional[str] = None

    def __post_init__(self):
        self.validate()

    # ---- construction

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        _check_keys(d, [f.name for f in fields(cls)], "config")
        return cls(**copy.deepcopy(d))

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def with_overrides(self, pairs) -> "ExperimentConfig":
        """Apply `key=value` strings; dotted keys reach into nested objects, values parse as JSON."""
        d = self.to_dict()
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = key.strip().split(".")
            node = d
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    node[p] = {}
                node = node[p]
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)

    # ---- validation and resolution

    def validate(self) -> None:
        if isinstance(self.universe, dict):
            try:
                UniverseSpec.from_dict(self.universe)
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"bad universe: {exc}") from None
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        elif not isinstance(self.universe, str):
            raise ConfigError("universe must be an object or a CSV path")
        if not isinstance(self.agent, dict) or "kind" not in self.agent:
            raise ConfigError("agent needs a kind")
        kind = self.agent["kind"]
        if kind not in AGENT_KINDS:
            raise ConfigError(f"unknown agent kind {kind!r}; expected one of {AGENT_KINDS}")
        _check_keys({k: v for k, v in self.agent.items() if k != "kind"}, AGENT_DEFAULTS[kind], f"{kind} agent")
        if self.reward_kind not in REWARD_KINDS:
            raise ConfigError(f"unknown reward kind {self.reward_kind!r}")
        if int(self.window) < 2:
            raise ConfigError("window must be at least 2")
        if self.beta < 0 or not 0 <= self.gamma <= 1:
            raise ConfigError("need beta >= 0 and 0 <= gamma <= 1")
        if self.episodes is not None and int(self.episodes) < 1:
            raise ConfigError("episodes must be positive")
        if self.pretrain is not None:
            if kind not in PRETRAINABLE:
                raise ConfigError(f"{kind} agents cannot be pre-trained")
            _check_keys(self.pretrain, PRETRAIN_DEFAULTS, "pretrain")
        if isinstance(self.split, float) and not 0 < self.split < 1:
            raise ConfigError("fractional split must lie in (0, 1)")

    def universe_spec(self) -> UniverseSpec:
        if isinstance(self.universe, str):
            return UniverseSpec("csv", params={"path": self.universe})
        return UniverseSpec.from_dict(self.universe)

    def agent_params(self) -> dict:
        kind = self.agent["kind"]
        out = dict(AGENT_DEFAULTS[kind])
        out.update({k: v for k, v in self.agent.items() if k != "kind"})
        return out

    def pretrain_params(self) -> dict:
        out = dict(PRETRAIN_DEFAULTS)
        out.update(self.pretrain or {})
        return out

    def n_episodes(self) -> int:
        if self.episodes is not None:
            return int(self.episodes)
        return DEFAULT_EPISODES.get(self.agent["kind"], 1)

    def split_index(self, timestamps) -> int:
        """Price index where the test range starts."""
        T = len(timestamps)
        s = self.split
        if isinstance(s, str):
            try:
                day = np.datetime64(s, "D")
            except ValueError:
                raise ConfigError(f"bad split date {s!r}") from None
            idx = int(np.searchsorted(timestamps, day))
        elif isinstance(s, float):
            idx = int(round(s * T))
        else:
            idx = int(s)
        lo, hi = int(self.window), T - 2
        if not lo <= idx <= hi:
            raise ConfigError(f"split index {idx} outside [{lo}, {hi}] for {T} prices and window {self.window}")
        return idx

    @property
    def label(self) -> str:
        return self.name or self.agent["kind"]


__all__ = ["ExperimentConfig", "AGENT_KINDS", "AGENT_DEFAULTS", "PRETRAIN_DEFAULTS", "GENERATORS"]
