"""Small numpy MLPs with hand-written reverse mode, a diagonal Gaussian head, and Adam.

Networks are ``affine -> tanh -> ... -> affine``. Every function accepts a
single input vector or a (B, d) batch; gradients of batched calls are summed
over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import fmt

MLP_MAGIC = "CIMER-MLP v1"
HIDDEN = (256, 128)
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {i}: weight {W.shape} / bias {b.shape} mismatch")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {W.shape[1]} != previous output")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, final_scale: float = 0.01) -> "MlpParams":
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
            if i == len(sizes) - 2:
                W *= final_scale
                b *= final_scale
            weights.append(W)
            biases.append(b)
        return cls(weights, biases)

    def save(self, path) -> None:
        lines = [f"{MLP_MAGIC} layers={','.join(str(s) for s in self.sizes)}"]
        for W, b in zip(self.weights, self.biases):
            lines += [" ".join(fmt(v) for v in row) for row in W]
            lines.append(" ".join(fmt(v) for v in b))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "MlpParams":
        lines = Path(path).read_text().splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 3 or " ".join(head[:2]) != MLP_MAGIC or not head[2].startswith("layers="):
            raise ShapeError(f"{path}:1: malformed header")
        sizes = [int(s) for s in head[2][len("layers="):].split(",")]
        rows = iter(lines[1:])
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            W = np.array([[float(v) for v in next(rows).split()] for _ in range(fan_out)])
            b = np.array([float(v) for v in next(rows).split()])
            if W.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ShapeError(f"{path}: layer shape mismatch")
            weights.append(W)
            biases.append(b)
        return cls(weights, biases)


@dataclass
class GradientBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = None
    log_std: np.ndarray | None = None

    @property
    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        if self.log_std is not None:
            out.append(self.log_std)
        return out


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (params.sizes[0],) or x.ndim > 2:
        raise ShapeError(f"input shape {x.shape} does not match network input {params.sizes[0]}")
    return x


def _forward_cache(params: MlpParams, x: np.ndarray):
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W.T + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def forward(params: MlpParams, x) -> np.ndarray:
    x = _check_input(params, x)
    return _forward_cache(params, x)[-1]


def backward(params: MlpParams, x, output_grad) -> GradientBundle:
    """Gradient of ``sum(output * output_grad)`` w.r.t. every parameter and the input."""
    x = _check_input(params, x)
    g = np.asarray(output_grad, dtype=float)
    single = x.ndim == 1
    if single:
        x, g = x[None], g[None]
    if g.shape != (x.shape[0], params.sizes[-1]):
        raise ShapeError(f"output_grad shape {g.shape} does not match output {params.sizes[-1]}")
    acts = _forward_cache(params, x)
    n = len(params.weights)
    dW = [None] * n
    db = [None] * n
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        dW[i] = g.T @ acts[i]
        db[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return GradientBundle(dW, db, g[0] if single else g)


@dataclass
class GaussianPolicy:
    mean_net: MlpParams
    log_std: np.ndarray

    def __post_init__(self):
        self.log_std = np.clip(np.asarray(self.log_std, dtype=float), LOG_STD_MIN, LOG_STD_MAX)
        if self.log_std.shape != (self.mean_net.sizes[-1],):
            raise ShapeError("log_std must have one entry per action dimension")

    @property
    def action_dim(self) -> int:
        return self.mean_net.sizes[-1]

    @property
    def arrays(self) -> list[np.ndarray]:
        return self.mean_net.arrays + [self.log_std]

    def clamp(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean_net.copy(), self.log_std.copy())

    @classmethod
    def init(cls, input_dim: int, action_dim: int, rng, hidden=HIDDEN, log_std: float = -1.0):
        net = MlpParams.init((input_dim, *hidden, action_dim), rng)
        return cls(net, np.full(action_dim, log_std))

    def mean(self, x) -> np.ndarray:
        return forward(self.mean_net, x)


def _gauss_logp(mean, log_std, action):
    z = (action - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def sample_action(policy: GaussianPolicy, x, rng: np.random.Generator):
    """Draw ``mean + exp(log_std) * eps`` and return it with its exact log density."""
    mean = policy.mean(x)
    eps = rng.standard_normal(mean.shape)
    action = mean + np.exp(policy.log_std) * eps
    return action, log_prob(policy, x, action)


def log_prob(policy: GaussianPolicy, x, action) -> np.ndarray:
    action = np.asarray(action, dtype=float)
    mean = policy.mean(x)
    if action.shape != mean.shape:
        raise ShapeError(f"action shape {action.shape} != mean shape {mean.shape}")
    return _gauss_logp(mean, policy.log_std, action)


def log_prob_grad(policy: GaussianPolicy, x, action, weights=None):
    """Return ``(logp, grads)`` where grads are of ``sum_i weights_i * logp_i``."""
    x = np.asarray(x, dtype=float)
    action = np.asarray(action, dtype=float)
    mean = policy.mean(x)
    if action.shape != mean.shape:
        raise ShapeError(f"action shape {action.shape} != mean shape {mean.shape}")
    logp = _gauss_logp(mean, policy.log_std, action)
    w = np.ones_like(logp) if weights is None else np.asarray(weights, dtype=float)
    inv_var = np.exp(-2.0 * policy.log_std)
    diff = action - mean
    dmean = (w[..., None] if diff.ndim == 2 else w) * diff * inv_var
    bundle = backward(policy.mean_net, x, dmean)
    dlog_std = (w[..., None] if diff.ndim == 2 else w) * (diff * diff * inv_var - 1.0)
    bundle.log_std = dlog_std.sum(axis=0) if diff.ndim == 2 else dlog_std
    return logp, bundle


class Adam:
    """Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        """Descend along ``grads`` (gradients of a loss to minimize)."""
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
