"""Small differentiable building blocks on float64 numpy arrays.

Layers follow a functional cache convention: ``forward(x)`` returns
``(y, cache)`` and ``backward(dy, cache)`` returns ``dx`` while *adding*
parameter gradients into ``layer.grads``. Running one layer several times per
step (weight sharing) therefore just works, as long as each backward gets the
cache of its own forward call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .dataset import LabelSchema


class Module:
    """Parameter container with hierarchical names (``child.param``)."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def children(self) -> dict[str, "Module"]:
        return {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children().items():
            yield from child.modules(f"{prefix}{name}.")

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {p + k: v for p, m in self.modules() for k, v in m.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {p + k: v for p, m in self.modules() for k, v in m.grads.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for p, m in self.modules():
            out.update({p + k: v.copy() for k, v in m.params.items()})
            out.update({p + k: v.copy() for k, v in m.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set()
        for p, m in self.modules():
            for store in (m.params, m.buffers):
                for k in store:
                    key = p + k
                    expected.add(key)
                    if key not in state:
                        raise KeyError(f"missing entry {key!r} in state")
                    value = np.asarray(state[key], dtype=np.float64)
                    if value.shape != store[k].shape:
                        raise ValueError(f"shape mismatch for {key!r}: {value.shape} vs {store[k].shape}")
                    store[k][...] = value
        extra = set(state) - expected
        if extra:
            raise KeyError(f"unexpected entries in state: {sorted(extra)[:3]}")

    def zero_grad(self) -> None:
        for _, m in self.modules():
            for g in m.grads.values():
                g.fill(0.0)

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def n_params(self) -> int:
        return sum(v.size for v in self.named_parameters().values())


def glorot_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.W = self.add_param("W", glorot_uniform(rng, n_in, n_out))
        self.b = self.add_param("b", np.zeros(n_out))

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"Linear expects (B, {self.n_in}) input, got {x.shape}")
        return x @ self.W + self.b, x

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x = cache
        if dy.shape != (x.shape[0], self.n_out):
            raise ValueError(f"gradient shape {dy.shape} does not match output {(x.shape[0], self.n_out)}")
        self.grads["W"] += x.T @ dy
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.W.T


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish_forward(x: np.ndarray):
    s = sigmoid(x)
    return x * s, (x, s)


def swish_backward(dy: np.ndarray, cache) -> np.ndarray:
    x, s = cache
    return dy * (s + x * s * (1.0 - s))


class Swish(Module):
    def forward(self, x):
        return swish_forward(x)

    def backward(self, dy, cache):
        return swish_backward(dy, cache)


def leaky_relu_forward(x: np.ndarray, slope: float = 0.2):
    return np.where(x > 0, x, slope * x), (x, slope)


def leaky_relu_backward(dy: np.ndarray, cache) -> np.ndarray:
    x, slope = cache
    return dy * np.where(x > 0, 1.0, slope)


class BatchNorm1d(Module):
    """Batch normalization over the batch axis.

    ``momentum=None`` switches the running statistics to a cumulative average,
    used when re-estimating them after weight averaging. With ``streams`` the
    layer keeps one set of running statistics per named input stream while
    ``gamma`` and ``beta`` stay shared; callers pick the stream per forward.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float | None = 0.1,
                 streams: tuple[str, ...] | None = None):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.dim, self.eps, self.momentum = dim, eps, momentum
        self.streams = tuple(streams) if streams else None
        self.gamma = self.add_param("gamma", np.ones(dim))
        self.beta = self.add_param("beta", np.zeros(dim))
        for suffix in self._suffixes():
            self.buffers["running_mean" + suffix] = np.zeros(dim)
            self.buffers["running_var" + suffix] = np.ones(dim)
        self.num_batches = dict.fromkeys(self._suffixes(), 0)

    def _suffixes(self):
        return [""] if self.streams is None else [f"_{s}" for s in self.streams]

    def _suffix(self, stream: str | None) -> str:
        if self.streams is None:
            if stream is not None:
                raise ValueError("this BatchNorm1d has no streams")
            return ""
        if stream not in self.streams:
            raise ValueError(f"unknown stream {stream!r}; expected one of {self.streams}")
        return f"_{stream}"

    def reset_running_stats(self) -> None:
        for suffix in self._suffixes():
            self.buffers["running_mean" + suffix][...] = 0.0
            self.buffers["running_var" + suffix][...] = 1.0
            self.num_batches[suffix] = 0

    def forward(self, x: np.ndarray, stream: str | None = None):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"BatchNorm1d expects (B, {self.dim}) input, got {x.shape}")
        suffix = self._suffix(stream)
        if not self.training:
            inv_std = 1.0 / np.sqrt(self.buffers["running_var" + suffix] + self.eps)
            xhat = (x - self.buffers["running_mean" + suffix]) * inv_std
            return self.gamma * xhat + self.beta, (xhat, inv_std, False)
        B = x.shape[0]
        if B < 2:
            raise ValueError("BatchNorm1d in train mode needs a batch of at least 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._update_running(suffix, mean, var * B / (B - 1))
        return self.gamma * xhat + self.beta, (xhat, inv_std, True)

    def _update_running(self, suffix, mean, unbiased_var):
        self.num_batches[suffix] += 1
        m = 1.0 / self.num_batches[suffix] if self.momentum is None else self.momentum
        rm, rv = self.buffers["running_mean" + suffix], self.buffers["running_var" + suffix]
        rm *= 1.0 - m
        rm += m * mean
        rv *= 1.0 - m
        rv += m * unbiased_var

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        xhat, inv_std, batch_stats = cache
        self.grads["gamma"] += (dy * xhat).sum(axis=0)
        self.grads["beta"] += dy.sum(axis=0)
        dxhat = dy * self.gamma
        if not batch_stats:
            return dxhat * inv_std
        B = dy.shape[0]
        return inv_std / B * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return {str(i): layer for i, layer in enumerate(self.layers)}

    def forward(self, x, stream: str | None = None):
        """Run every layer; ``stream`` is handed to stream-aware batch-norm layers."""
        caches = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm1d) and layer.streams is not None:
                x, c = layer.forward(x, stream)
            else:
                x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(dy, c)
        return dy


# -- per-category softmax cross-entropy ----------------------------------------

def block_softmax(logits: np.ndarray, schema: LabelSchema) -> np.ndarray:
    """Softmax applied independently inside every category block."""
    probs = np.empty_like(logits, dtype=np.float64)
    for block in schema.blocks:
        z = logits[:, block]
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs[:, block] = e / e.sum(axis=1, keepdims=True)
    return probs


def category_softmax_ce(logits: np.ndarray, targets: np.ndarray, schema: LabelSchema):
    """Mean over the batch of the summed per-category cross-entropies.

    Returns ``(loss, probs, grad_logits)`` with ``grad_logits = (probs - targets) / B``.
    """
    if logits.ndim != 2 or logits.shape[1] != schema.n_classes or targets.shape != logits.shape:
        raise ValueError(
            f"logits {logits.shape} and targets {targets.shape} must both be (B, {schema.n_classes})"
        )
    B = logits.shape[0]
    probs = np.empty_like(logits, dtype=np.float64)
    total = 0.0
    for block in schema.blocks:
        z = logits[:, block]
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        log_p = z - lse
        probs[:, block] = np.exp(log_p)
        total -= float((targets[:, block] * log_p).sum())
    return total / B, probs, (probs - targets) / B


# -- optimisation --------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 3e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float
    total_epochs: int
    min_lr: float = 0.0

    def __call__(self, epoch: int) -> float:
        w = (1.0 + math.cos(math.pi * epoch / self.total_epochs)) / 2.0
        # written as a convex combination so both endpoints are exact
        return self.base_lr * w + self.min_lr * (1.0 - w)


# -- verification --------------------------------------------------------------

def grad_check(f: Callable[[np.ndarray], float], grad, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``grad`` is either the analytic gradient at ``x`` or a callable producing
    it. Each coordinate's error is scaled by ``max(1, |analytic|, |numeric|)``.
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(grad(x.copy()) if callable(grad) else grad, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"gradient shape {analytic.shape} does not match point {x.shape}")
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        num_flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
