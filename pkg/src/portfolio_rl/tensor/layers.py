"""Layers, losses and parameter containers built on the tensor core."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from ..errors import ShapeError
from . import core
from .core import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Container of parameters and sub-modules (registered in attribute order)."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "frozen", False)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
            self._modules.pop(key, None)
        elif isinstance(value, Module):
            self._modules[key] = value
            self._params.pop(key, None)
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix="", trainable_only=False):
        for k, p in self._params.items():
            if trainable_only and not p.requires_grad:
                continue
            yield prefix + k, p
        for k, m in self._modules.items():
            yield from m.named_parameters(prefix + k + ".", trainable_only)

    def parameters(self, trainable_only=False):
        return [p for _, p in self.named_parameters(trainable_only=trainable_only)]

    def parameter_count(self, trainable_only=True) -> int:
        return int(sum(p.size for p in self.parameters(trainable_only)))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        """Mask gradients: parameters stop receiving updates."""
        object.__setattr__(self, "frozen", True)
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self):
        object.__setattr__(self, "frozen", False)
        for p in self.parameters():
            p.requires_grad = True
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise ShapeError(f"missing parameters {sorted(missing)}")
        for k, p in own.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ShapeError(f"shape {v.shape} for {k}, expected {p.shape}", layer=k)
            p.data = v.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def xavier_uniform(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class Affine(Module):
    """y = x W + b with W of shape (n_in, n_out)."""

    def __init__(self, n_in, n_out, rng=None, bias=True, name="affine"):
        super().__init__()
        rng = _rng(rng)
        self.n_in, self.n_out, self.name = n_in, n_out, name
        self.W = Parameter(xavier_uniform(rng, (n_in, n_out), n_in, n_out))
        if bias:
            self.b = Parameter(np.zeros(n_out))
        else:
            object.__setattr__(self, "b", None)

    def forward(self, x):
        x = core.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"expected last dimension {self.n_in}, got {x.shape}", layer=self.name)
        y = core.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class Conv2D(Module):
    """2D convolution over (channel, height, width) inputs; 'same' padding by default."""

    def __init__(self, c_in, c_out, kernel=(3, 3), stride=1, padding="same", rng=None, name="conv2d"):
        super().__init__()
        rng = _rng(rng)
        kh, kw = core._pair(kernel)
        self.c_in, self.c_out, self.kernel, self.name = c_in, c_out, (kh, kw), name
        self.stride = core._pair(stride)
        if padding == "same":
            if self.stride != (1, 1) or kh % 2 == 0 or kw % 2 == 0:
                raise ShapeError("'same' padding needs stride 1 and odd kernels", layer=name)
            padding = (kh // 2, kw // 2)
        self.padding = core._pair(padding)
        fan_in, fan_out = c_in * kh * kw, c_out * kh * kw
        self.W = Parameter(xavier_uniform(rng, (c_out, c_in, kh, kw), fan_in, fan_out))
        self.b = Parameter(np.zeros(c_out))

    def output_shape(self, H, W):
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        return (H + 2 * ph - kh) // sh + 1, (W + 2 * pw - kw) // sw + 1

    def forward(self, x):
        x = core.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"expected (B, {self.c_in}, H, W), got {x.shape}", layer=self.name)
        return core.conv2d(x, self.W, self.b, self.stride, self.padding)


class MaxPool2D(Module):
    def __init__(self, kernel=(2, 2), name="maxpool"):
        super().__init__()
        self.kernel, self.name = core._pair(kernel), name

    def forward(self, x):
        try:
            return core.max_pool2d(x, self.kernel)
        except ShapeError as exc:
            raise ShapeError(str(exc), layer=self.name) from None


class Dropout(Module):
    """Inverted dropout: active in training mode only."""

    def __init__(self, rate=0.1, rng=None):
        super().__init__()
        self.rate = float(rate)
        object.__setattr__(self, "rng", _rng(rng))

    def forward(self, x):
        x = core.as_tensor(x)
        if not self.training or self.rate <= 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep


class GRUCell(Module):
    """Gated recurrent unit with update, reset and candidate gates.

    Parameters: input weights (n_in, 3 n_h), recurrent weights
    (n_h, 3 n_h) and one bias per gate, 3 (n_h n_in + n_h^2 + n_h) in total.
    """

    def __init__(self, n_in, n_h, rng=None, name="gru"):
        super().__init__()
        rng = _rng(rng)
        self.n_in, self.n_h, self.name = n_in, n_h, name
        self.Wx = Parameter(np.concatenate(
            [xavier_uniform(rng, (n_in, n_h), n_in, n_h) for _ in range(3)], axis=1))
        self.Wh = Parameter(np.concatenate([orthogonal(rng, n_h) for _ in range(3)], axis=1))
        self.b = Parameter(np.zeros(3 * n_h))

    def init_state(self, batch=None):
        return Tensor(np.zeros(self.n_h if batch is None else (batch, self.n_h)))

    def step(self, x, h):
        x, h = core.as_tensor(x), core.as_tensor(h)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"expected input width {self.n_in}, got {x.shape}", layer=self.name)
        n = self.n_h
        gx = core.matmul(x, self.Wx) + self.b
        gh = core.matmul(h, self.Wh[:, :2 * n])
        z = core.sigmoid(gx[..., :n] + gh[..., :n])
        r = core.sigmoid(gx[..., n:2 * n] + gh[..., n:])
        cand = core.tanh(gx[..., 2 * n:] + core.matmul(r * h, self.Wh[:, 2 * n:]))
        return (1.0 - z) * cand + z * h

    def forward(self, xs, h=None):
        """Run over a sequence (list of inputs or array with time on axis -2); returns all states."""
        if isinstance(xs, (list, tuple)):
            steps = list(xs)
        else:
            xs = core.as_tensor(xs)
            steps = [xs[..., t, :] for t in range(xs.shape[-2])]
        if h is None:
            batch = steps[0].shape[:-1]
            h = Tensor(np.zeros(batch + (self.n_h,)))
        states = []
        for x in steps:
            h = self.step(x, h)
            states.append(h)
        return states


def mse_loss(pred, target):
    """Mean over samples of the squared Euclidean error (sum over the last axis)."""
    pred, target = core.as_tensor(pred), core.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}", layer="mse")
    d = pred - target
    sq = (d * d).sum(axis=-1) if d.ndim else d * d
    return sq.mean()


def l2_penalty(params):
    total = None
    for p in params:
        term = (p * p).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def parameter_count(*modules) -> int:
    return int(sum(m.parameter_count() for m in modules))


def forward_backward(graph, x, target, loss="mse", weight_decay: float = 0.0):
    """Forward `x` through `graph`, score against `target`, backpropagate.

    Returns (loss value, {parameter name: gradient}).
    """
    graph.zero_grad()
    pred = graph(x)
    if loss != "mse":
        raise ValueError(f"unknown loss {loss!r}")
    value = mse_loss(pred, target)
    if weight_decay:
        value = value + weight_decay * l2_penalty(graph.parameters(trainable_only=True))
    if value.requires_grad:
        value.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for k, p in graph.named_parameters(trainable_only=True)}
    return float(value.data), grads


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, f"layer{i}", layer)

    def forward(self, x):
        for m in self._modules.values():
            x = m(x)
        return x


class Activation(Module):
    def __init__(self, fn):
        super().__init__()
        object.__setattr__(self, "fn", fn)

    def forward(self, x):
        return self.fn(x)


class Softmax(Activation):
    def __init__(self):
        super().__init__(core.softmax)
