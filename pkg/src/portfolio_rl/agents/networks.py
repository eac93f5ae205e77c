"""Policy and value networks over observation windows.

All networks split into `encode(windows)`, which depends only on the
market window, and `decide(features, past_weights)`. Because the
environment is open-loop, a whole episode can be encoded in one batch.
"""

from __future__ import annotations

from itertools import combinations
from math import comb

import numpy as np

from ..errors import ShapeError
from ..tensor import Affine, Conv2D, GRUCell, MaxPool2D, Module, Tensor, no_grad
from ..tensor import core

DEFAULT_INPUT_SCALE = 100.0


class WindowEncoder(Module):
    """Two 3x3 convolutions over the (asset x time) plane, max-pool, then a GRU along time.

    Input (B, T, H) windows; output (B, hidden) final GRU states.
    """

    def __init__(self, H: int, T: int, channels=16, hidden=64, kernel=(3, 3), rng=None, name="encoder"):
        super().__init__()
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.H, self.T, self.name = H, T, name
        self.conv1 = Conv2D(1, channels, kernel, rng=rng, name=f"{name}.conv1")
        self.conv2 = Conv2D(channels, channels, kernel, rng=rng, name=f"{name}.conv2")
        ph = 2 if H >= 2 else 1
        pw = 2 if T >= 2 else 1
        self.pool = MaxPool2D((ph, pw), name=f"{name}.pool")
        self.Hp, self.Tp = H // ph, T // pw
        self.gru = GRUCell(channels * self.Hp, hidden, rng, name=f"{name}.gru")
        self.hidden = hidden

    def forward(self, windows):
        x = core.as_tensor(windows)
        if x.ndim != 3 or x.shape[1:] != (self.T, self.H):
            raise ShapeError(f"expected (B, {self.T}, {self.H}) windows, got {x.shape}", layer=self.name)
        B = x.shape[0]
        img = core.transpose(x, (0, 2, 1)).reshape(B, 1, self.H, self.T)
        f = core.relu(self.conv1(img))
        f = core.relu(self.conv2(f))
        f = self.pool(f)  # (B, C, Hp, Tp)
        seq = core.transpose(f, (0, 3, 1, 2)).reshape(B, self.Tp, -1)
        return self.gru(seq)[-1]


class PolicyNet(Module):
    """Window encoder and an affine head on [state, past weights] producing softmax weights."""

    def __init__(self, M, T, channels=16, hidden=64, seed=0, input_scale=DEFAULT_INPUT_SCALE):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.M, self.T = M, T
        self.encoder = WindowEncoder(M, T, channels, hidden, rng=rng, name="policy.encoder")
        self.head = Affine(hidden + M, M, rng, name="policy.head")
        object.__setattr__(self, "input_scale", float(input_scale))

    def encode(self, windows):
        return self.encoder(Tensor(np.asarray(windows) * self.input_scale))

    def logits(self, features, past):
        return self.head(core.concat([core.as_tensor(features), core.as_tensor(past)], axis=-1))

    def decide(self, features, past):
        return core.softmax(self.logits(features, past), axis=-1)

    def forward(self, windows, past):
        return self.decide(self.encode(windows), past)


class DsrqnNet(PolicyNet):
    """Same topology as the policy net; the head emits action values, softmax maps them to weights."""

    def q_values(self, windows, past):
        return self.logits(self.encode(windows), past)


class MixtureNet(Module):
    """Universe-specific head: scores and past weights to an allocation."""

    def __init__(self, M, hidden=32, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.M = M
        self.n_scores = M + comb(M, 2)
        self.scores_in = Affine(self.n_scores, hidden, rng, name="mixture.scores")
        self.action_in = Affine(M, hidden, rng, bias=False, name="mixture.action")
        self.out = Affine(hidden, M, rng, name="mixture.out")

    @property
    def input_width(self) -> int:
        return self.n_scores

    def forward(self, scores, past):
        h = core.tanh(self.scores_in(scores) + self.action_in(past))
        return core.softmax(self.out(h), axis=-1)


class ScoreMachine(Module):
    """Shared extractor scoring a k-asset window with one scalar."""

    def __init__(self, k, T, channels=8, hidden=16, rng=None, name="sm"):
        super().__init__()
        self.k = k
        self.encoder = WindowEncoder(k, T, channels, hidden, rng=rng, name=f"{name}.encoder")
        self.score = Affine(hidden, 1, rng, name=f"{name}.score")

    def forward(self, windows):
        return self.score(self.encoder(windows))[..., 0]


class ScoreMachines(Module):
    """Mixture of score machines.

    SM1 scores each asset alone, SM2 each lexicographic pair (i < j); both
    are shared across assets and universes. The mixture net is sized to
    the universe.
    """

    def __init__(self, M, T, channels=8, hidden=16, mixture_hidden=32, seed=0,
                 input_scale=DEFAULT_INPUT_SCALE, sm1=None, sm2=None):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.M, self.T = M, T
        self.sm1 = sm1 if sm1 is not None else ScoreMachine(1, T, channels, hidden, rng, name="sm1")
        self.sm2 = sm2 if sm2 is not None else ScoreMachine(2, T, channels, hidden, rng, name="sm2")
        self.pairs = list(combinations(range(M), 2))
        if M >= 2:
            self.mixture = MixtureNet(M, mixture_hidden, seed=int(rng.integers(2 ** 31)))
        object.__setattr__(self, "input_scale", float(input_scale))

    @property
    def n_first_order(self) -> int:
        return self.M

    @property
    def n_second_order(self) -> int:
        return len(self.pairs)

    def score_machine_parameter_count(self) -> int:
        return self.sm1.parameter_count(False) + self.sm2.parameter_count(False)

    def scores(self, windows):
        """(B, M + C(M,2)) scores: first-order block, then pairs in lexicographic order."""
        X = np.asarray(windows) * self.input_scale
        B, T, M = X.shape
        if M != self.M:
            raise ShapeError(f"universe has {M} assets, machines built for {self.M}", layer="msm")
        singles = X.transpose(0, 2, 1).reshape(B * M, T, 1)
        s1 = self.sm1(Tensor(singles)).reshape(B, M)
        if not self.pairs:
            return s1
        idx = np.array(self.pairs)
        pairs = X[:, :, idx].transpose(0, 2, 1, 3).reshape(B * len(self.pairs), T, 2)
        s2 = self.sm2(Tensor(pairs)).reshape(B, len(self.pairs))
        return core.concat([s1, s2], axis=-1)

    def encode(self, windows):
        return self.scores(windows)

    def decide(self, features, past):
        past = core.as_tensor(past)
        if self.M == 1:
            return Tensor(np.ones(past.shape))
        return self.mixture(features, past)

    def forward(self, windows, past):
        return self.decide(self.encode(windows), past)


def msm_transfer(sm: ScoreMachines, new_M: int, mixture_hidden=None, seed=0) -> ScoreMachines:
    """Reuse frozen score machines on a universe of `new_M` assets with a fresh mixture."""
    sm.sm1.freeze()
    sm.sm2.freeze()
    hidden = mixture_hidden or (sm.mixture.out.W.shape[0] if sm.M >= 2 else 32)
    out = ScoreMachines(new_M, sm.T, mixture_hidden=hidden, seed=seed, input_scale=sm.input_scale,
                        sm1=sm.sm1, sm2=sm.sm2)
    return out


def msm_forward(sm: ScoreMachines, obs):
    """Allocation for one observation."""
    from ..data import PortfolioVector
    with no_grad():
        p = sm(obs.log_window[None], obs.current_weights.weights[None]).data[0]
    return PortfolioVector.from_raw(p)
