"""Supervised pre-training of window policies against the Sharpe-with-costs QP."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import PortfolioVector
from .errors import InfeasibleError, PortfolioError, TrainingDivergedError, ValidationError
from .metrics import moments
from .optimizer import DEFAULT_BETA, ConvergenceWarning, ObjectiveSpec, solve_qp
from .tensor import Adam, Tensor, l2_penalty, mse_loss, no_grad
from .tensor.checkpoint import load_arrays, save_arrays

log = logging.getLogger(__name__)

MAX_RETRIES = 10
DIAG_SCALE = 0.02
DIAG_FLOOR = 1e-3
OFFDIAG_SCALE = 0.01
DATASET_FORMAT = "portfolio-rl-dataset/1"


@dataclass(frozen=True)
class SupervisedPair:
    window: np.ndarray  # T x M log returns
    weights: np.ndarray  # current allocation fed to the net
    target: np.ndarray  # QP allocation for the next step
    L: Optional[np.ndarray] = None


@dataclass
class Dataset:
    """Stacked pairs: windows (N, T, M), weights (N, M), targets (N, M)."""

    windows: np.ndarray
    weights: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.windows.shape[0]

    def __getitem__(self, i) -> SupervisedPair:
        return SupervisedPair(self.windows[i], self.weights[i], self.targets[i])

    @classmethod
    def from_pairs(cls, pairs, meta=None) -> "Dataset":
        pairs = list(pairs)
        if not pairs:
            raise ValidationError("no pairs")
        return cls(np.stack([p.window for p in pairs]), np.stack([p.weights for p in pairs]),
                   np.stack([p.target for p in pairs]), dict(meta or {}))

    def save(self, path) -> None:
        meta = {"format": DATASET_FORMAT, **self.meta, "N": len(self)}
        save_arrays({"windows": self.windows, "weights": self.weights, "targets": self.targets}, path, meta)

    @classmethod
    def load(cls, path) -> "Dataset":
        arrays, meta = load_arrays(path)
        return cls(arrays["windows"], arrays["weights"], arrays["targets"], meta or {})


def random_cholesky(rng, M) -> np.ndarray:
    L = np.tril(rng.normal(0.0, OFFDIAG_SCALE, size=(M, M)), -1)
    L[np.diag_indices(M)] = np.abs(rng.normal(0.0, DIAG_SCALE, size=M)) + DIAG_FLOOR
    return L


def qp_target(window, w0, beta, seed=0) -> np.ndarray:
    m = moments(window)
    spec = ObjectiveSpec("sharpe", beta=beta, w0=PortfolioVector.from_raw(w0), seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        sol = solve_qp(m.mean, m.covariance, spec)
    return sol.weights.weights


def make_pair(rng, M, T, beta, mean=0.0) -> SupervisedPair:
    w = rng.dirichlet(np.ones(M))
    L = random_cholesky(rng, M)
    X = mean + rng.standard_normal((T, M)) @ L.T
    y = qp_target(X, w, beta)
    return SupervisedPair(X, w, y, L)


def generate_dataset(N: int, M: int, T: int, beta: float = DEFAULT_BETA, seed: int = 0,
                     mean: float = 0.0) -> Dataset:
    """N i.i.d. (window, weights) -> QP target pairs.

    Each pair draws from its own child seed stream, so content does not
    depend on generation order. A pair whose QP fails is redrawn up to
    ten times from the same stream.
    """
    if N < 1 or T < 3 or M < 1:
        raise ValidationError("need N >= 1, T >= 3, M >= 1")
    pairs = []
    for child in np.random.SeedSequence(seed).spawn(N):
        rng = np.random.default_rng(child)
        for attempt in range(MAX_RETRIES + 1):
            try:
                pairs.append(make_pair(rng, M, T, beta, mean))
                break
            except PortfolioError as exc:
                log.debug("pair resampled after %s", exc)
        else:
            raise InfeasibleError(f"QP failed {MAX_RETRIES} times for one pair")
    return Dataset.from_pairs(pairs, {"M": M, "T": T, "beta": beta, "seed": seed, "mean": mean})


@dataclass
class PretrainCurve:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "train_mse", "val_mse"])
            for i, (a, b) in enumerate(zip(self.train_mse, self.val_mse)):
                wr.writerow([i, repr(float(a)), repr(float(b))])


def _mse(net, X, W, Y, batch=256) -> float:
    tot = 0.0
    with no_grad():
        for i in range(0, len(X), batch):
            p = net(X[i:i + batch], W[i:i + batch]).data
            tot += float(((p - Y[i:i + batch]) ** 2).sum())
    return tot / max(len(X), 1)


def pretrain(net, data: Dataset, lam: float = 1e-4, epochs: int = 1000, lr: float = 1e-3,
             batch: int = 64, patience: int = 50, val_frac: float = 0.2, seed: int = 0):
    """Adam on squared error plus lam * ||theta||^2 with early stopping on validation error.

    The parameters with the best validation error are restored at the end.
    A single-pair dataset trains and validates on that pair. Returns
    (net, curve).
    """
    if len(data) == 0:
        raise ValidationError("empty dataset")
    X, W, Y = data.windows, data.weights, data.targets
    if X.shape[2] != net.M or W.shape[1] != net.M:
        raise ValidationError(f"dataset has {X.shape[2]} assets, net expects {net.M}")
    rng = np.random.default_rng(seed)
    n = len(X)
    order = rng.permutation(n)
    n_val = int(round(val_frac * n)) if n > 1 else 0
    val, tr = order[:n_val], order[n_val:]
    if n_val == 0:
        val = tr
    params = net.parameters(trainable_only=True)
    opt = Adam(params, lr=lr)
    curve = PretrainCurve()
    best, best_state, since = np.inf, net.state_dict(), 0
    for epoch in range(epochs):
        perm = rng.permutation(tr)
        for i in range(0, len(perm), batch):
            idx = perm[i:i + batch]
            pred = net(X[idx], W[idx])
            loss = mse_loss(pred, Tensor(Y[idx]))
            if lam:
                loss = loss + l2_penalty(params) * lam
            if not np.isfinite(loss.data):
                net.load_state_dict(best_state)
                raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}; best parameters restored")
            opt.zero_grad()
            loss.backward()
            opt.step()
        curve.train_mse.append(_mse(net, X[tr], W[tr], Y[tr]))
        v = _mse(net, X[val], W[val], Y[val])
        curve.val_mse.append(v)
        if v < best:
            best, best_state, since = v, net.state_dict(), 0
            curve.best_epoch = epoch
        else:
            since += 1
            if since >= patience:
                curve.stopped_early = True
                break
    net.load_state_dict(best_state)
    return net, curve
