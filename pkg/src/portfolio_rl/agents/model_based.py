"""System-identification agents: VAR(p), GRU one-step predictor and the planner."""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..data import PortfolioVector, ReturnsFrame
from ..errors import UnfittedModelError, ValidationError
from ..optimizer import ConvergenceWarning, ObjectiveSpec, solve_qp
from ..tensor import Adam, Affine, GRUCell, Module, Tensor, mse_loss, no_grad, tanh
from ..tensor import core
from .base import Agent

log = logging.getLogger(__name__)

MAX_SPECTRAL_RADIUS = 1.5
SHRINKAGE = 0.1
VAR_LMS_RATE = 1e-4


def _values(returns) -> np.ndarray:
    if isinstance(returns, ReturnsFrame):
        return returns.as_kind("log").values
    x = np.asarray(returns, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def shrink_covariance(S, shrinkage=SHRINKAGE):
    """Pull a covariance toward its diagonal."""
    S = np.asarray(S, dtype=float)
    return (1.0 - shrinkage) * S + shrinkage * np.diag(np.diag(S))


# ---------------------------------------------------------------- VAR

@dataclass
class VarModel:
    """x_t = c + sum_i A_i x_{t-i} + e_t."""

    p: int
    c: np.ndarray
    A: np.ndarray  # (p, M, M); A[i] multiplies the lag i+1
    fitted: bool = True
    residual_cov: Optional[np.ndarray] = None
    mse: float = float("nan")

    @property
    def M(self) -> int:
        return self.c.size

    def parameter_count(self) -> int:
        return self.M * self.M * self.p + self.M

    def companion(self) -> np.ndarray:
        M, p = self.M, self.p
        C = np.zeros((M * p, M * p))
        C[:M, :] = np.concatenate(list(self.A), axis=1)
        if p > 1:
            C[M:, :-M] = np.eye(M * (p - 1))
        return C

    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.companion())).max())

    def predict_next(self, history: np.ndarray) -> np.ndarray:
        """One-step prediction from the last p rows of `history` (oldest first)."""
        y = self.c.copy()
        for i in range(self.p):
            y = y + self.A[i] @ history[-1 - i]
        return y

    @classmethod
    def empty(cls, M, p) -> "VarModel":
        return cls(p, np.zeros(M), np.zeros((p, M, M)), fitted=False)


def _lag_design(X, p, first=None):
    """Regressor rows [1, x_{t-1}, ..., x_{t-p}] and targets x_t for t >= first."""
    T, M = X.shape
    first = p if first is None else first
    rows = [np.ones((T - first, 1))]
    for i in range(1, p + 1):
        rows.append(X[first - i:T - i])
    return np.hstack(rows), X[first:]


def fit_var(returns, p: int, ridge: float = 1e-8) -> VarModel:
    """Least-squares VAR(p) fit of the stacked lag regression."""
    X = _values(returns)
    T, M = X.shape
    if p < 1:
        raise ValidationError("VAR order must be at least 1")
    if T <= M * p + 1 + p:
        raise ValidationError(f"{T} samples cannot identify a VAR({p}) on {M} assets")
    Z, Y = _lag_design(X, p)
    return _fit_design(Z, Y, p, M, ridge)


def _fit_design(Z, Y, p, M, ridge):
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        warnings.warn("rank-deficient VAR design; using ridge regularization", RuntimeWarning, stacklevel=3)
        B = np.linalg.solve(Z.T @ Z + ridge * np.eye(Z.shape[1]), Z.T @ Y)
    else:
        B = np.linalg.lstsq(Z, Y, rcond=None)[0]
    resid = Y - Z @ B
    c = B[0]
    A = np.stack([B[1 + i * M:1 + (i + 1) * M].T for i in range(p)])
    dof = max(Y.shape[0] - Z.shape[1], 1)
    cov = resid.T @ resid / dof
    return VarModel(p, c, A, True, cov, float((resid ** 2).mean()))


def aic_scores(returns, p_max: int) -> np.ndarray:
    """ln(MSE_p) + 2p/N for p = 1..p_max over a common estimation sample."""
    X = _values(returns)
    T, M = X.shape
    if p_max < 1 or T <= M * p_max + 1 + p_max:
        raise ValidationError(f"p_max={p_max} infeasible for {T} samples on {M} assets")
    scores = []
    for p in range(1, p_max + 1):
        Z, Y = _lag_design(X, p, first=p_max)
        B = np.linalg.lstsq(Z, Y, rcond=None)[0]
        mse = float(((Y - Z @ B) ** 2).mean())
        scores.append(np.log(mse) + 2.0 * p / Y.shape[0])
    return np.array(scores)


def select_order_aic(returns, p_max: int) -> int:
    scores = aic_scores(returns, p_max)
    return int(np.argmin(scores)) + 1  # argmin keeps the first (smallest p) on ties


# ---------------------------------------------------------------- RNN predictor

class RnnPredictor(Module):
    """GRU state manager with an affine read-out predicting the next log-return vector."""

    def __init__(self, M: int, hidden: int = 32, seed=0, input_scale: float = 1.0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.M, self.hidden = M, hidden
        self.gru = GRUCell(M, hidden, rng, name="predictor.gru")
        self.out = Affine(hidden, M, rng, name="predictor.out")
        object.__setattr__(self, "input_scale", float(input_scale))
        object.__setattr__(self, "fitted", False)
        object.__setattr__(self, "residual_cov", None)
        object.__setattr__(self, "optimizer", None)
        self.reset()

    def reset(self):
        """Fresh hidden state (called at the start of every episode)."""
        object.__setattr__(self, "h", np.zeros(self.hidden))
        object.__setattr__(self, "_buffer", [])

    def readout(self, h):
        return self.out(tanh(h))

    def forward(self, xs, h=None):
        """Scaled predictions for a (B, T, M) or (T, M) sequence of scaled inputs."""
        states = self.gru(xs, h)
        return [self.readout(s) for s in states], states

    def observe(self, x) -> np.ndarray:
        """Advance the hidden state with a real observation; return the next-step prediction."""
        with no_grad():
            h = self.gru.step(Tensor(np.asarray(x) * self.input_scale), Tensor(self.h)).data
            object.__setattr__(self, "h", h)
            return self.readout(Tensor(h)).data / self.input_scale

    def warm_up(self, window) -> np.ndarray:
        self.reset()
        pred = None
        for x in np.asarray(window):
            pred = self.observe(x)
        return pred

    def fit(self, returns, epochs=200, lr=1e-2, bptt=32, seed=0, weight_decay=0.0, verbose=False):
        """Train on one log-return series with truncated BPTT; returns per-epoch losses."""
        X = _values(returns)
        if X.shape[1] != self.M:
            raise ValidationError(f"series has {X.shape[1]} columns, predictor expects {self.M}")
        std = X.std()
        object.__setattr__(self, "input_scale", 1.0 / std if std > 0 else 1.0)
        Z = X * self.input_scale
        opt = Adam(self.parameters(trainable_only=True), lr=lr)
        losses = []
        n = Z.shape[0] - 1
        for ep in range(epochs):
            h = np.zeros(self.hidden)
            total = 0.0
            for s in range(0, n, bptt):
                e = min(s + bptt, n)
                preds, states = self(Tensor(Z[s:e]), Tensor(h))
                loss = mse_loss(core.stack(preds, axis=0), Tensor(Z[s + 1:e + 1]))
                if weight_decay:
                    from ..tensor import l2_penalty
                    loss = loss + weight_decay * l2_penalty(self.parameters(True))
                opt.zero_grad()
                loss.backward()
                opt.step()
                h = states[-1].data
                total += float(loss.data) * (e - s)
            losses.append(total / n)
            if verbose and ep % 20 == 0:
                log.info("rnn epoch %d loss %.4g", ep, losses[-1])
        object.__setattr__(self, "optimizer", Adam(self.parameters(trainable_only=True), lr=lr * 0.1))
        object.__setattr__(self, "fitted", True)
        # residual covariance of one-step predictions on the training series
        self.reset()
        preds = np.array([self.observe(x) for x in X[:-1]])
        resid = X[1:] - preds
        object.__setattr__(self, "residual_cov", np.atleast_2d(np.cov(resid.T)) if len(resid) > 2 else None)
        self.reset()
        return losses


# ---------------------------------------------------------------- prediction / planning

def predict_path(model, window, L: int, state=None, return_state=False):
    """Recursive L-step rollout feeding predictions back as inputs.

    `state` continues a previous rollout (as returned with return_state=True);
    otherwise the rollout starts from `window` (VAR) or from the predictor's
    current hidden state warmed on `window` (RNN).
    """
    if L < 1:
        raise ValidationError("horizon must be at least 1")
    if not getattr(model, "fitted", False):
        raise UnfittedModelError("model must be fitted before prediction")
    if isinstance(model, VarModel):
        if model.spectral_radius() > MAX_SPECTRAL_RADIUS:
            raise ValidationError(f"VAR companion spectral radius {model.spectral_radius():.3f} "
                                  f"exceeds {MAX_SPECTRAL_RADIUS}; refusing to roll out")
        hist = np.asarray(window if state is None else state, dtype=float)
        if hist.ndim == 1:
            hist = hist[:, None]
        if hist.shape[0] < model.p:
            raise ValidationError(f"window shorter than VAR order {model.p}")
        hist = list(hist[-model.p:])
        path = []
        for _ in range(L):
            y = model.predict_next(np.array(hist))
            path.append(y)
            hist = hist[1:] + [y]
        path = np.array(path)
        return (path, np.array(hist)) if return_state else path
    # recurrent predictor
    if state is None:
        if window is not None:
            model.warm_up(window)
        h = model.h.copy()
        with no_grad():
            x = model.readout(Tensor(h)).data / model.input_scale
    else:
        h, x = state
    path = []
    with no_grad():
        for step in range(L):
            if step > 0 or state is not None:
                h = model.gru.step(Tensor(x * model.input_scale), Tensor(h)).data
                x = model.readout(Tensor(h)).data / model.input_scale
            path.append(x)
    path = np.array(path)
    return (path, (h, x)) if return_state else path


def plan_action(predicted, w0, beta, objective="risk_aversion", alpha=1.0, sigma=None, seed=0):
    """Allocation maximizing `objective` under the predicted mean path and covariance."""
    P = np.atleast_2d(np.asarray(predicted, dtype=float))
    M = P.shape[1]
    mu = P.mean(axis=0)
    S = np.eye(M) if sigma is None else np.asarray(sigma, dtype=float)
    if not isinstance(w0, PortfolioVector):
        w0 = PortfolioVector(w0)
    kw = {"beta": beta, "w0": w0, "seed": seed}
    if objective == "risk_aversion":
        spec = ObjectiveSpec("risk_aversion", alpha=alpha, **kw)
    elif objective == "sharpe":
        spec = ObjectiveSpec("sharpe", **kw)
    elif objective == "target_return":
        spec = ObjectiveSpec("target_return", target=float(mu.mean()), **kw)
    else:
        raise ValidationError(f"unknown planning objective {objective!r}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return solve_qp(mu, S, spec).weights


def online_update(model, window, lr: Optional[float] = None, bptt: int = 8):
    """One adaptive step on the newest (regressors, target) pair; the last row of `window` is the target."""
    if not getattr(model, "fitted", False):
        raise UnfittedModelError("online update needs a fitted model")
    X = np.asarray(window, dtype=float)
    if isinstance(model, VarModel):
        lr = VAR_LMS_RATE if lr is None else lr
        if X.shape[0] < model.p + 1:
            raise ValidationError("window too short for the VAR order")
        err = X[-1] - model.predict_next(X[:-1])
        model.c = model.c + lr * err
        A = model.A.copy()
        for i in range(model.p):
            A[i] = A[i] + lr * np.outer(err, X[-2 - i])
        model.A = A
        return model
    # recurrent: one Adam step over the last `bptt` transitions from a zero state
    seg = X[-(bptt + 1):] * model.input_scale
    if seg.shape[0] < 2:
        return model
    opt = model.optimizer or Adam(model.parameters(trainable_only=True), lr=lr or 1e-3)
    if lr is not None:
        opt.lr = lr
    object.__setattr__(model, "optimizer", opt)
    preds, _ = model(Tensor(seg[:-1]))
    loss = mse_loss(preds[-1], Tensor(seg[-1]))
    opt.zero_grad()
    loss.backward()
    opt.step()
    return model


# ---------------------------------------------------------------- agent

class ModelBasedAgent(Agent):
    """Predict a return path, then plan with the one-step optimizer."""

    def __init__(self, model, beta=0.002, horizon=5, alpha=1.0, objective="risk_aversion",
                 online=True, online_lr=None, sigma=None, seed=0):
        self.model = model
        self.beta, self.horizon, self.alpha = beta, horizon, alpha
        self.objective, self.online, self.online_lr = objective, online, online_lr
        self.seed = seed
        res = sigma if sigma is not None else getattr(model, "residual_cov", None)
        self.sigma = shrink_covariance(res) if res is not None else None
        self.name = "var" if isinstance(model, VarModel) else "rnn"
        self._last_t = None

    def begin_episode(self, env):
        self._last_t = None
        self._history = None
        if isinstance(self.model, RnnPredictor):
            self.model.reset()

    def act(self, obs):
        window = obs.log_window
        if isinstance(self.model, RnnPredictor):
            if self._last_t is not None and obs.t == self._last_t + 1:
                if self.online:
                    hist = np.vstack([self._history, window[-1:]])[-(9):]
                    online_update(self.model, hist, self.online_lr)
                    self._history = hist
                self.model.observe(window[-1])
            else:
                self.model.warm_up(window)
                self._history = window[-9:]
            path = predict_path(self.model, None, self.horizon)
        else:
            if self.online and self._last_t is not None and obs.t == self._last_t + 1:
                online_update(self.model, window[-(self.model.p + 1):], self.online_lr)
            path = predict_path(self.model, window, self.horizon)
        self._last_t = obs.t
        return plan_action(path, obs.current_weights, self.beta, self.objective,
                           self.alpha, self.sigma, self.seed)
