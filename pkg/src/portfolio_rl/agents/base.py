"""Agent protocol and simple baseline agents."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..data import PortfolioVector
from ..environment import AgentObservation
from ..optimizer import DEFAULT_BETA, smm_step


class Agent:
    """Maps observations to portfolio vectors.

    Subclasses override `act`; `begin_episode` and `observe` are optional hooks.
    """

    name = "agent"

    def begin_episode(self, env) -> None:
        pass

    def act(self, obs: AgentObservation) -> PortfolioVector:
        raise NotImplementedError

    def observe(self, step) -> None:
        pass


class BuyAndHold(Agent):
    """Buy the target allocation once, then let it drift."""

    name = "buy_and_hold"

    def __init__(self, weights=None):
        self.weights = weights
        self._first = True

    def begin_episode(self, env):
        self._first = True

    def act(self, obs):
        if self._first:
            self._first = False
            M = obs.log_window.shape[1]
            return PortfolioVector.uniform(M) if self.weights is None else PortfolioVector(self.weights)
        return obs.current_weights


class UniformRebalance(Agent):
    name = "uniform"

    def act(self, obs):
        return PortfolioVector.uniform(obs.log_window.shape[1])


class RandomAgent(Agent):
    name = "random"

    def __init__(self, seed=0, concentration=1.0):
        self.rng = np.random.default_rng(seed)
        self.concentration = concentration

    def act(self, obs):
        M = obs.log_window.shape[1]
        return PortfolioVector.from_raw(self.rng.dirichlet(np.full(M, self.concentration)))


class OracleAgent(Agent):
    """Holds the asset with the largest next-step return (peeks at the future)."""

    name = "oracle"

    def begin_episode(self, env):
        self.env = env

    def act(self, obs):
        r = self.env.next_simple_returns()
        return PortfolioVector.basis(r.size, int(np.argmax(r)))


class SMMAgent(Agent):
    """Sequential Markowitz model: Sharpe-with-costs QP on each observation window."""

    name = "smm"

    def __init__(self, beta=DEFAULT_BETA, lookback: Optional[int] = None, seed=0):
        self.beta, self.lookback, self.seed = beta, lookback, seed

    def act(self, obs):
        window = obs.log_window if self.lookback is None else obs.log_window[-self.lookback:]
        return smm_step(window, obs.current_weights, self.beta, self.seed)
