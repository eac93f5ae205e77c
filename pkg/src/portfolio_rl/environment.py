"""Backtest environment: observations, rebalancing with costs, rewards and episodes.

Clock convention: at clock t the agent sees the T log returns ending at
price t and chooses weights held from price t to price t+1.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import PortfolioVector, PriceFrame
from .errors import ValidationError, ZeroVarianceError
from .metrics import PerformanceReport, performance_report

log = logging.getLogger(__name__)

REWARD_KINDS = ("log_return", "dsr")
BANKRUPTCY_REWARD = -10.0
DSR_FLOOR = 1e-12
DEFAULT_WINDOW = 60


@dataclass
class DSRState:
    """Exponential moving estimates of the first and second moments of returns."""

    A: float
    B: float
    eta: float = 0.01

    @classmethod
    def from_returns(cls, returns, eta=0.01) -> "DSRState":
        r = np.asarray(returns, dtype=float)
        return cls(float(r.mean()), float((r * r).mean()), eta)

    def sharpe(self) -> float:
        return self.A / math.sqrt(self.B - self.A ** 2)


def dsr_update(state: DSRState, r: float):
    """Differential Sharpe ratio of return `r`, then the moment update.

    D = (B dA - A dB / 2) / (B - A^2)^(3/2) with dA = r - A, dB = r^2 - B,
    the first-order sensitivity of the moving Sharpe ratio to the decay rate.
    """
    var = state.B - state.A ** 2
    if var <= DSR_FLOOR:
        raise ZeroVarianceError(f"moving variance {var:.3g} is below the floor {DSR_FLOOR}")
    dA = r - state.A
    dB = r * r - state.B
    D = (state.B * dA - 0.5 * state.A * dB) / var ** 1.5
    return float(D), DSRState(state.A + state.eta * dA, state.B + state.eta * dB, state.eta)


@dataclass(frozen=True)
class AgentObservation:
    log_window: np.ndarray  # T x M log returns, oldest first
    current_weights: PortfolioVector
    t: int = 0


@dataclass(frozen=True)
class EnvStep:
    observation: Optional[AgentObservation]
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class MarketEnv:
    """Open-loop market replay with proportional transaction costs.

    The portfolio starts in cash, so the first allocation pays beta on the
    full budget. Between decisions the held weights drift with prices.
    """

    def __init__(self, frame: PriceFrame, window: int = DEFAULT_WINDOW, beta: float = 0.002,
                 reward_kind: str = "log_return", start: Optional[int] = None,
                 end: Optional[int] = None, eta: float = 0.01):
        if reward_kind not in REWARD_KINDS:
            raise ValidationError(f"unknown reward kind {reward_kind!r}")
        if window < 1:
            raise ValidationError("window must be at least 1")
        if beta < 0:
            raise ValidationError("beta must be non-negative")
        self.frame = frame
        self.window = int(window)
        self.beta = float(beta)
        self.reward_kind = reward_kind
        self.eta = eta
        p = frame.values
        self._simple = p[1:] / p[:-1] - 1.0
        self._log = np.log(p[1:] / p[:-1])
        self.start = self.window if start is None else int(start)
        self.end = frame.T - 1 if end is None else int(end)
        if self.start < self.window:
            raise ValidationError(f"start {self.start} leaves fewer than {self.window} warmup returns")
        if not self.start < self.end <= frame.T - 1:
            raise ValidationError(f"empty episode range [{self.start}, {self.end}) for {frame.T} prices")
        self.reset()

    @property
    def M(self) -> int:
        return self.frame.M

    @property
    def n_steps(self) -> int:
        return self.end - self.start

    def reset(self) -> AgentObservation:
        self.t = self.start
        self.done = False
        self.wealth = 1.0
        self.invested = False
        self.current_weights = PortfolioVector.uniform(self.M)
        self.dsr = None
        if self.reward_kind == "dsr":
            warm = self._simple[self.start - self.window:self.start].mean(axis=1)
            self.dsr = DSRState.from_returns(warm, self.eta)
        return self.observe()

    def observe(self) -> AgentObservation:
        return AgentObservation(self._log[self.t - self.window:self.t].copy(), self.current_weights, self.t)

    def log_windows(self) -> np.ndarray:
        """All observation windows of the episode, shape (n_steps, T, M); action independent."""
        idx = np.arange(self.start, self.end)[:, None] + np.arange(-self.window, 0)[None, :]
        return self._log[idx]

    def next_simple_returns(self) -> np.ndarray:
        """Simple returns realized over the coming step (used by oracles and TD targets)."""
        return self._simple[self.t].copy()

    def step(self, action) -> EnvStep:
        if self.done:
            raise ValidationError("episode finished; call reset()")
        w = action if isinstance(action, PortfolioVector) else PortfolioVector(np.asarray(action, float))
        if w.M != self.M:
            raise ValidationError(f"action has {w.M} weights, universe has {self.M}")
        prev = self.current_weights.weights if self.invested else np.zeros(self.M)
        cost = self.beta * float(np.abs(prev - w.weights).sum())
        r = self._simple[self.t]
        raw = float(w.weights @ r)
        g = raw - cost
        info = {"t": self.t, "raw_return": raw, "cost": cost, "net_return": g,
                "weights": w.weights.copy(), "asset_returns": r.copy()}
        self.t += 1
        self.invested = True
        if 1.0 + g <= 0.0:
            self.done = True
            self.wealth = 0.0
            info["bankrupt"] = True
            return EnvStep(None, BANKRUPTCY_REWARD, True, info)
        self.wealth *= 1.0 + g
        if self.reward_kind == "log_return":
            reward = math.log1p(g)
        else:
            reward, self.dsr = dsr_update(self.dsr, g)
        gross = w.weights * (1.0 + r)
        self.current_weights = PortfolioVector.from_raw(gross / gross.sum(), w.short_allowed)
        self.done = self.t >= self.end
        obs = None if self.done else self.observe()
        return EnvStep(obs, reward, self.done, info)


@dataclass
class Trajectory:
    observations: list
    actions: list
    rewards: list
    costs: list
    net_returns: list
    bankrupt: bool = False

    def weights_matrix(self) -> np.ndarray:
        return np.array([a.weights for a in self.actions])

    def to_csv(self, path, assets: Sequence[str]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["t", "reward", "cost", *[f"w_{a}" for a in assets]])
            for obs, a, rew, c in zip(self.observations, self.actions, self.rewards, self.costs):
                wr.writerow([obs.t, repr(float(rew)), repr(float(c)), *(repr(float(x)) for x in a.weights)])


def run_episode(env: MarketEnv, agent, hooks: Sequence[Callable] = (), annualize: bool = False):
    """One pass over the environment's range. Returns (trajectory, report).

    The agent needs act(observation) -> PortfolioVector; optional
    begin_episode(env) and observe(step) are called when present. Hooks
    receive (observation, action, step) after every transition.
    """
    obs = env.reset()
    if hasattr(agent, "begin_episode"):
        agent.begin_episode(env)
    traj = Trajectory([], [], [], [], [])
    while True:
        action = agent.act(obs)
        if not isinstance(action, PortfolioVector):
            action = PortfolioVector(np.asarray(action, float))
        step = env.step(action)
        traj.observations.append(obs)
        traj.actions.append(action)
        traj.rewards.append(step.reward)
        traj.costs.append(step.info["cost"])
        traj.net_returns.append(step.info["net_return"])
        if hasattr(agent, "observe"):
            agent.observe(step)
        for h in hooks:
            h(obs, action, step)
        if step.done:
            traj.bankrupt = bool(step.info.get("bankrupt", False))
            if traj.bankrupt:
                log.warning("bankruptcy at t=%d", step.info["t"])
            break
        obs = step.observation
    report = performance_report(traj.net_returns, annualize=annualize)
    return traj, report
