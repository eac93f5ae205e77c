"""Model-free learners: tabular Q-learning, DSRQN and REINFORCE (for any window policy)."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import special

from ..data import PortfolioVector
from ..environment import MarketEnv, run_episode
from ..errors import TrainingDivergedError, ValidationError
from ..tensor import Adam, Tensor, clip_grad_norm, l2_penalty, lgamma, no_grad
from ..tensor import core
from .base import Agent

log = logging.getLogger(__name__)

DEFAULT_KAPPA = 50.0
KAPPA_ANNEAL = 1.001
SAMPLE_FLOOR = 1e-12


# ---------------------------------------------------------------- tabular

@dataclass
class FiniteMDP:
    """Explicit MDP: P[s, a, s'] transition probabilities, R[s, a] rewards."""

    P: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        S, A = self.R.shape
        if self.P.shape != (S, A, S) or not np.allclose(self.P.sum(axis=2), 1.0):
            raise ValidationError("P must be (S, A, S) row-stochastic matching R")

    @property
    def n_states(self):
        return self.R.shape[0]

    @property
    def n_actions(self):
        return self.R.shape[1]

    @classmethod
    def random(cls, n_states, n_actions, rng) -> "FiniteMDP":
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        return cls(P, rng.uniform(0.0, 1.0, size=(n_states, n_actions)))


@dataclass
class QTable:
    q: np.ndarray
    alpha: float
    gamma: float
    visits: Optional[np.ndarray] = None

    def greedy_policy(self) -> np.ndarray:
        return self.q.argmax(axis=1)


def q_learning_tabular(mdp: FiniteMDP, steps: int = 200_000, alpha=1.0, gamma: float = 0.9,
                       epsilon: float = 1.0, seed: int = 0, decay="rescaled",
                       episode_length: Optional[int] = None) -> QTable:
    """Q-learning with epsilon-greedy behaviour.

    The step size for a pair visited n times is alpha / n**decay for a
    numeric `decay` (0 keeps it constant), or alpha / (1 + (1 - gamma) n)
    for decay="rescaled", which removes the slow bias decay of a plain 1/n
    schedule at large gamma. Episodes restart from a uniformly drawn
    state every `episode_length` steps.
    """
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    q = np.zeros((S, A))
    n = np.zeros((S, A))
    if alpha == 0:
        return QTable(q, 0.0, gamma, n)
    # pre-draw randomness in blocks for speed
    cumP = np.cumsum(mdp.P, axis=2)
    R = mdp.R
    s = int(rng.integers(S))
    u_explore = rng.random(steps)
    u_action = rng.integers(A, size=steps)
    u_next = rng.random(steps)
    restart = rng.integers(S, size=steps)
    rescaled = decay == "rescaled"
    ql = q.tolist()
    nl = n.tolist()
    cl = cumP.tolist()
    Rl = R.tolist()
    for k in range(steps):
        if episode_length and k % episode_length == 0:
            s = int(restart[k])
        row = ql[s]
        if u_explore[k] < epsilon:
            a = int(u_action[k])
        else:
            a = max(range(A), key=row.__getitem__)
        cp = cl[s][a]
        x = u_next[k]
        s2 = 0
        while s2 < S - 1 and x >= cp[s2]:
            s2 += 1
        nl[s][a] += 1.0
        if rescaled:
            step = alpha / (1.0 + (1.0 - gamma) * (nl[s][a] - 1.0))
        else:
            step = alpha / nl[s][a] ** decay
        target = Rl[s][a] + gamma * max(ql[s2])
        row[a] += step * (target - row[a])
        s = s2
    return QTable(np.array(ql), alpha, gamma, np.array(nl))


# ---------------------------------------------------------------- Dirichlet policy

def dirichlet_log_prob(probs, actions, kappa):
    """log Dir(actions; kappa * probs) per row, differentiable in `probs`."""
    alpha = core.as_tensor(probs) * kappa
    a = np.clip(np.asarray(actions, dtype=float), SAMPLE_FLOOR, None)
    a = a / a.sum(axis=-1, keepdims=True)
    norm = special.gammaln(kappa)  # sum of concentrations is kappa
    return norm - lgamma(alpha).sum(axis=-1) + ((alpha - 1.0) * Tensor(np.log(a))).sum(axis=-1)


def sample_dirichlet(rng, probs, kappa):
    alpha = np.maximum(np.asarray(probs) * kappa, 1e-6)
    a = rng.dirichlet(alpha)
    a = np.clip(a, SAMPLE_FLOOR, None)
    return a / a.sum()


class PolicyAgent(Agent):
    """Acts with a window policy net; deterministic mean action unless `stochastic`."""

    def __init__(self, net, stochastic=False, kappa=DEFAULT_KAPPA, seed=0, name="reinforce"):
        self.net, self.stochastic, self.kappa = net, stochastic, kappa
        self.rng = np.random.default_rng(seed)
        self.name = name

    def begin_episode(self, env):
        with no_grad():
            self._feats = self.net.encode(env.log_windows()).data
        self._start = env.start

    def act(self, obs):
        f = self._feats[obs.t - self._start]
        with no_grad():
            p = self.net.decide(Tensor(f[None]), Tensor(obs.current_weights.weights[None])).data[0]
        if self.stochastic:
            p = sample_dirichlet(self.rng, p, self.kappa)
        return PortfolioVector.from_raw(p)


def discounted_returns(rewards, gamma):
    G = np.zeros(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        G[i] = acc
    return G


@dataclass
class ReinforceConfig:
    episodes: int = 7500
    gamma: float = 1.0
    lr: float = 1e-3
    kappa: float = DEFAULT_KAPPA
    kappa_anneal: float = KAPPA_ANNEAL
    baseline: bool = True
    baseline_decay: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    seed: int = 0


@dataclass
class LearningCurve:
    episodes: list = field(default_factory=list)
    train_return: list = field(default_factory=list)
    test_return: list = field(default_factory=list)

    def to_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["episode", "train_return", "test_return"])
            for e, a, b in zip(self.episodes, self.train_return, self.test_return):
                wr.writerow([e, repr(float(a)), "" if b is None else repr(float(b))])


def evaluate_policy(net, env) -> float:
    """Cumulative log reward of the deterministic (mean) policy over `env`'s range."""
    traj, _ = run_episode(env, PolicyAgent(net))
    return float(np.sum(traj.rewards))


def reinforce_train(net, env: MarketEnv, episodes: Optional[int] = None, gamma: Optional[float] = None,
                    config: Optional[ReinforceConfig] = None, eval_env: Optional[MarketEnv] = None,
                    eval_every: int = 1, callback: Optional[Callable] = None):
    """Monte-Carlo policy gradient with Dirichlet exploration around the softmax mean.

    Each episode rolls out stochastic actions over the whole range, forms
    reward-to-go returns, subtracts a per-step baseline (a moving average
    of past episodes' returns) and applies one Adam update. `callback`
    receives (episode, train_return, test_return) and may return True to stop.
    Returns (net, learning curve).
    """
    cfg = copy.copy(config) if config is not None else ReinforceConfig()
    if episodes is not None:
        cfg.episodes = episodes
    if gamma is not None:
        cfg.gamma = gamma
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.parameters(trainable_only=True), lr=cfg.lr)
    curve = LearningCurve()
    windows = env.log_windows()
    kappa = cfg.kappa
    baseline = None
    for ep in range(cfg.episodes):
        with no_grad():
            feats = net.encode(windows).data
        obs = env.reset()
        past, acts, rewards = [], [], []
        while True:
            k = obs.t - env.start
            with no_grad():
                p = net.decide(Tensor(feats[k][None]), Tensor(obs.current_weights.weights[None])).data[0]
            a = sample_dirichlet(rng, p, kappa)
            step = env.step(PortfolioVector.from_raw(a))
            past.append(obs.current_weights.weights)
            acts.append(a)
            rewards.append(step.reward)
            if step.done:
                break
            obs = step.observation
        if step.info.get("bankrupt") and len(rewards) == 1:
            log.warning("episode %d bankrupt at the first step; skipped", ep)
            continue
        G = discounted_returns(rewards, cfg.gamma)
        n = len(G)
        if cfg.baseline:
            if baseline is None or baseline.size != n:
                baseline = G.copy()
            adv = G - baseline
            baseline = cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * G
        else:
            adv = G
        if np.any(adv != 0.0):
            probs = net(windows[:n], np.array(past))
            logp = dirichlet_log_prob(probs, np.array(acts), kappa)
            loss = -(logp * Tensor(adv)).sum() * (1.0 / n)
            if cfg.weight_decay:
                loss = loss + cfg.weight_decay * l2_penalty(net.parameters(trainable_only=True))
            opt.zero_grad()
            loss.backward()
            if not all(np.all(np.isfinite(p.grad)) for p in opt.params if p.grad is not None):
                raise TrainingDivergedError(f"non-finite policy gradient at episode {ep}")
            if cfg.grad_clip:
                clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step()
        kappa *= cfg.kappa_anneal
        train_ret = float(np.sum(rewards))
        test_ret = None
        if eval_env is not None and (ep % eval_every == 0 or ep == cfg.episodes - 1):
            test_ret = evaluate_policy(net, eval_env)
        curve.episodes.append(ep)
        curve.train_return.append(train_ret)
        curve.test_return.append(test_ret)
        if callback is not None and callback(ep, train_ret, test_ret):
            break
    return net, curve


# ---------------------------------------------------------------- DSRQN

class DsrqnAgent(Agent):
    """Soft recurrent Q-network trained online by one-step TD (no replay).

    The head estimates one action value per asset (the value of holding
    that asset alone); the portfolio is softmax(q). Because the market is
    open-loop, every asset's one-step reward is observable, so all M
    values are regressed on each transition toward
    log(1 + r_i - beta |w_prev - e_i|_1) + gamma * max_j q_j(s').
    """

    name = "dsrqn"

    def __init__(self, net, gamma=0.9, lr=1e-3, beta=0.002, train=True):
        self.net, self.gamma, self.beta, self.train = net, gamma, beta, train
        self.opt = Adam(net.parameters(trainable_only=True), lr=lr)
        self._pending = None

    def begin_episode(self, env):
        self._pending = None

    def q_values(self, obs) -> np.ndarray:
        with no_grad():
            return self.net.q_values(obs.log_window[None], obs.current_weights.weights[None]).data[0]

    def act(self, obs):
        q = self.q_values(obs)
        self._pending = obs
        e = np.exp(q - q.max())
        return PortfolioVector.from_raw(e / e.sum())

    def observe(self, step):
        if not self.train or self._pending is None:
            return
        obs = self._pending
        r = step.info["asset_returns"]
        prev = obs.current_weights.weights
        M = r.size
        cost = self.beta * (np.abs(prev).sum() - np.abs(prev) + np.abs(1.0 - prev))
        rewards = np.log(np.maximum(1.0 + r - cost, 1e-12))
        nxt = None if step.done else step.observation
        self.td_update(obs, rewards, nxt)

    def td_update(self, obs, asset_rewards, next_obs=None) -> float:
        """One TD step for observation `obs`; returns the squared TD error."""
        target = np.broadcast_to(np.asarray(asset_rewards, dtype=float), (self.net.M,)).copy()
        if next_obs is not None and self.gamma:
            target = target + self.gamma * self.q_values(next_obs).max()
        q = self.net.q_values(obs.log_window[None], obs.current_weights.weights[None])
        if not np.all(np.isfinite(q.data)):
            raise TrainingDivergedError("non-finite action values")
        d = q - Tensor(target[None])
        loss = (d * d).sum() * 0.5
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return float(loss.data) * 2.0


def dsrqn_step(agent: DsrqnAgent, obs, asset_rewards=None, next_obs=None, train=True) -> PortfolioVector:
    """Act on `obs`; in train mode first apply the TD update for (obs, rewards, next_obs)."""
    if train and asset_rewards is not None:
        agent.td_update(obs, asset_rewards, next_obs)
    q = agent.q_values(obs)
    e = np.exp(q - q.max())
    return PortfolioVector.from_raw(e / e.sum())
