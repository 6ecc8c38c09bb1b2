"""Small deterministic neural-network numerics on top of numpy.

Every layer caches what it needs in ``forward`` and accumulates parameter
gradients in ``backward``.  Arrays are float64 row-major batches
``(n_samples, n_features)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateInputError, NumericError, ShapeError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BNMode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    FROZEN = "frozen"  # running stats fixed, gamma/beta still learn


def as_matrix(x, cols: Optional[int] = None, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"{name} has {arr.shape[1]} columns, expected {cols}")
    return arr


class Layer:
    """Base layer.  Subclasses override forward/backward and parameters."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(param, grad) pairs; grads are updated in place."""
        return []

    def zero_grad(self) -> None:
        for _, g in self.parameters():
            g[...] = 0.0

    def set_mode(self, mode: BNMode) -> None:
        pass

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


class Affine(Layer):
    """Dense layer ``y = x @ weight + bias`` with weight stored (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: Optional[np.random.Generator] = None):
        if n_in < 1 or n_out < 1:
            raise ShapeError(f"affine dims must be >= 1, got {n_in}->{n_out}")
        self.n_in = n_in
        self.n_out = n_out
        if rng is None:
            self.weight = np.zeros((n_in, n_out))
            self.bias = np.zeros(n_out)
        else:
            bound = math.sqrt(1.0 / n_in)
            self.weight = rng.uniform(-bound, bound, size=(n_in, n_out))
            self.bias = rng.uniform(-bound, bound, size=n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.rowwise = False
        self._input: Optional[np.ndarray] = None

    def set_mode(self, mode):
        # BLAS picks different kernels for different batch shapes; in eval
        # mode every row goes through the same single-row product so outputs
        # are bitwise independent of batch composition.
        self.rowwise = BNMode(mode) is BNMode.EVAL

    def forward(self, x):
        x = as_matrix(x, self.n_in)
        self._input = x
        if self.rowwise:
            out = np.empty((x.shape[0], self.n_out))
            for i in range(x.shape[0]):
                out[i] = x[i].copy() @ self.weight
            return out + self.bias
        return x @ self.weight + self.bias

    def backward(self, grad_out):
        if self._input is None:
            raise StateError("Affine.backward called before forward")
        grad_out = as_matrix(grad_out, self.n_out, "grad_out")
        if grad_out.shape[0] != self._input.shape[0]:
            raise ShapeError("grad_out batch size does not match cached input")
        self.grad_weight += self._input.T @ grad_out
        self.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.weight.T

    def parameters(self):
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]

    def __repr__(self):
        return f"Affine({self.n_in}->{self.n_out})"


class BatchNorm(Layer):
    """Per-feature batch normalization for dense activations."""

    def __init__(self, n_features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        self.n_features = n_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(n_features)
        self.beta = np.zeros(n_features)
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self.grad_gamma = np.zeros(n_features)
        self.grad_beta = np.zeros(n_features)
        self.mode = BNMode.TRAIN
        self._cache = None

    def set_mode(self, mode):
        self.mode = BNMode(mode)

    def forward(self, x):
        x = as_matrix(x, self.n_features)
        if self.mode is BNMode.TRAIN:
            n = x.shape[0]
            if n < 2:
                raise DegenerateInputError("train-mode batch norm needs at least 2 rows")
            mean = x.mean(axis=0)
            var = ((x - mean) ** 2).mean(axis=0)
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean
            # running variance tracks the unbiased estimate, as in common frameworks
            self.running_var = (1.0 - m) * self.running_var + m * var * (n / (n - 1))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        self._cache = (x_hat, inv_std, self.mode)
        return self.gamma * x_hat + self.beta

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("BatchNorm.backward called before forward")
        x_hat, inv_std, mode = self._cache
        grad_out = as_matrix(grad_out, self.n_features, "grad_out")
        if grad_out.shape != x_hat.shape:
            raise ShapeError("grad_out shape does not match cached activations")
        self.grad_gamma += (grad_out * x_hat).sum(axis=0)
        self.grad_beta += grad_out.sum(axis=0)
        g_hat = grad_out * self.gamma
        if mode is not BNMode.TRAIN:
            return g_hat * inv_std
        n = x_hat.shape[0]
        return inv_std / n * (n * g_hat - g_hat.sum(axis=0) - x_hat * (g_hat * x_hat).sum(axis=0))

    def parameters(self):
        return [(self.gamma, self.grad_gamma), (self.beta, self.grad_beta)]

    def __repr__(self):
        return f"BatchNorm({self.n_features})"


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        x = as_matrix(x)
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out):
        if self._mask is None:
            raise StateError("ReLU.backward called before forward")
        return np.where(self._mask, grad_out, 0.0)

    def __repr__(self):
        return "ReLU()"


def relu(x) -> np.ndarray:
    return np.maximum(as_matrix(x), 0.0)


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def parameters(self):
        return [pg for layer in self.layers for pg in layer.parameters()]

    def set_mode(self, mode):
        for layer in self.layers:
            layer.set_mode(mode)

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.layers)) + ")"


def batchnorm_layers(module) -> List[BatchNorm]:
    """All BatchNorm layers reachable from ``module`` in forward order."""
    if isinstance(module, BatchNorm):
        return [module]
    if isinstance(module, Sequential):
        return [bn for layer in module for bn in batchnorm_layers(layer)]
    if hasattr(module, "modules"):
        return [bn for sub in module.modules() for bn in batchnorm_layers(sub)]
    return []


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred, target) -> Tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    count = diff.size
    if count == 0:
        return 0.0, diff
    return float((diff * diff).sum() / count), 2.0 * diff / count


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of integer ``labels`` and gradient w.r.t. logits."""
    logits = as_matrix(logits, name="logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError("labels must be a vector with one entry per row")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def kl_distillation_loss(pred_emb, target_emb, frozen_head: Affine,
                         reversed: bool = False) -> Tuple[float, np.ndarray]:
    """KL divergence between the class posteriors a frozen linear head assigns
    to target and predicted embeddings.

    Forward:  mean_i KL(p_i || q_i) with p = softmax(head(target)),
    q = softmax(head(pred)).  ``reversed=True`` computes KL(q || p).
    The head's parameters are read, never written.
    """
    pred_emb = as_matrix(pred_emb, frozen_head.n_in, "pred_emb")
    target_emb = as_matrix(target_emb, frozen_head.n_in, "target_emb")
    if pred_emb.shape != target_emb.shape:
        raise ShapeError("pred_emb and target_emb must have the same shape")
    n = pred_emb.shape[0]
    W, b = frozen_head.weight, frozen_head.bias
    logp = log_softmax(target_emb @ W + b)
    logq = log_softmax(pred_emb @ W + b)
    p, q = np.exp(logp), np.exp(logq)
    if not reversed:
        loss = (p * (logp - logq)).sum() / n
        grad_logits = (q - p) / n
    else:
        ratio = logq - logp
        per_row = (q * ratio).sum(axis=1, keepdims=True)
        loss = per_row.sum() / n
        grad_logits = q * (ratio - per_row) / n
    return float(loss), grad_logits @ W.T


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_update(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    """One Adam step, updating ``params`` in place.

    Weight decay is coupled: ``weight_decay * param`` is added to the gradient
    before the moment estimates.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to adam_update")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError("parameter/gradient/moment shape mismatch")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_epochs: int
    total_epochs: int

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")


def lr_at_epoch(sched: LrSchedule, epoch: int) -> float:
    """Linear warmup followed by a single cosine-annealing cycle."""
    if not 0 <= epoch < sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs})")
    if epoch < sched.warmup_epochs:
        return sched.base_lr * (epoch + 1) / sched.warmup_epochs
    span = sched.total_epochs - sched.warmup_epochs
    return 0.5 * sched.base_lr * (1.0 + math.cos(math.pi * (epoch - sched.warmup_epochs) / span))


# ---------------------------------------------------------------------------
# misc
# ---------------------------------------------------------------------------

def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / norm


def l2_normalize_rows(x) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise unit normalization; returns (normalized, norms)."""
    x = as_matrix(x)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    return x / norms, norms


def l2_normalize_rows_backward(y: np.ndarray, norms: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    return (grad_y - y * (grad_y * y).sum(axis=1, keepdims=True)) / norms


def finite_diff_gradient(f: Callable[[np.ndarray], float], params, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``params`` is perturbed in place and restored, so ``f`` may close over the
    same array.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.asarray(params)
    if theta.dtype != np.float64:
        raise TypeError("finite_diff_gradient needs a float64 array")
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(theta)
        flat[i] = orig - h
        f_minus = f(theta)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
