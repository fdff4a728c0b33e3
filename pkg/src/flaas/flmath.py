"""Numerical core: model head, SGD training loop, FedAvg, DP noise, metrics.

The model is a two-layer classification head over precomputed feature
vectors: Dense(hidden, ReLU) -> Dense(classes) -> softmax, trained with
plain SGD on mean cross-entropy plus separate L2 penalties for kernels and
biases. All math is float64; parameters travel as one flat vector so they
can be averaged and serialized without knowing the layer structure.

Every function here is pure: inputs are never mutated and outputs are fresh
objects, so values can be shared freely between concurrent executors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import AggregationError, DivergenceError, InvalidInput

DEFAULT_HIDDEN_DIM = 32
DEFAULT_NUM_CLASSES = 10


def weight_count(d: int, h: int, c: int) -> int:
    """Length of the flat weight vector: [W1 | b1 | W2 | b2]."""
    return d * h + h + h * c + c


@dataclass(frozen=True)
class ModelParams:
    """Flat float64 weight vector plus the shape header.

    Layout: W1 (d x h, row-major), b1 (h), W2 (h x c, row-major), b2 (c).
    """

    input_dim: int
    hidden_dim: int
    num_classes: int
    weights: np.ndarray

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.num_classes) < 1:
            raise InvalidInput("model dimensions must be >= 1")
        w = np.array(self.weights, dtype=np.float64, copy=True)
        expected = weight_count(self.input_dim, self.hidden_dim, self.num_classes)
        if w.shape != (expected,):
            raise InvalidInput(
                f"weight vector has length {w.size}, expected {expected}"
            )
        if not np.all(np.isfinite(w)):
            raise InvalidInput("weights contain NaN or Inf")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.input_dim, self.hidden_dim, self.num_classes)

    def views(self):
        """Read-only (W1, b1, W2, b2) views into the flat vector."""
        return _views(self.weights, self.input_dim, self.hidden_dim, self.num_classes)


def _views(w: np.ndarray, d: int, h: int, c: int):
    o1 = d * h
    o2 = o1 + h
    o3 = o2 + h * c
    return (
        w[:o1].reshape(d, h),
        w[o1:o2],
        w[o2:o3].reshape(h, c),
        w[o3:],
    )


@dataclass(frozen=True)
class Hyperparams:
    """SGD settings. Defaults follow the standard dense-head recipe."""

    learning_rate: float = 0.001
    kernel_l2: float = 0.0001
    bias_l2: float = 0.0001
    batch_size: int = 20
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        # learning_rate 0 is allowed: it makes train() a fixed point.
        if self.learning_rate < 0 or self.kernel_l2 < 0 or self.bias_l2 < 0:
            raise InvalidInput("rates and penalties must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidInput("batch_size and epochs must be >= 1")


@dataclass(frozen=True)
class WeightedModel:
    """Model parameters tagged with the sample count that produced them."""

    params: ModelParams
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 0:
            raise InvalidInput("sample_count must be >= 0")


@dataclass(frozen=True)
class DpConfig:
    """Gaussian mechanism: clip the update to clip_norm, add sigma noise."""

    enabled: bool = False
    clip_norm: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.enabled and self.clip_norm <= 0:
            raise InvalidInput("clip_norm must be > 0 when DP is enabled")
        if self.noise_sigma < 0:
            raise InvalidInput("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "clip_norm": self.clip_norm,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DpConfig":
        return cls(
            enabled=bool(d.get("enabled", False)),
            clip_norm=float(d.get("clip_norm", 1.0)),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class EvalMetrics:
    loss: float
    accuracy: float
    sample_count: int


def init_model(d: int, h: int, c: int, seed: int) -> ModelParams:
    """Glorot-uniform kernels, zero biases, deterministic per seed."""
    if min(d, h, c) < 1:
        raise InvalidInput("model dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    w = np.empty(weight_count(d, h, c), dtype=np.float64)
    w1, b1, w2, b2 = _views(w, d, h, c)
    limit1 = math.sqrt(6.0 / (d + h))
    limit2 = math.sqrt(6.0 / (h + c))
    w1[:] = rng.uniform(-limit1, limit1, size=(d, h))
    b1[:] = 0.0
    w2[:] = rng.uniform(-limit2, limit2, size=(h, c))
    b2[:] = 0.0
    return ModelParams(d, h, c, w)


def _stack_batch(batch, d: int, c: int):
    """Validate a sample batch and stack it into (X, y) arrays."""
    if len(batch) == 0:
        raise InvalidInput("batch must not be empty")
    feats = []
    labels = np.empty(len(batch), dtype=np.intp)
    for i, s in enumerate(batch):
        f = s.features
        if f.shape != (d,):
            raise InvalidInput(
                f"sample {i} has {f.shape[0] if f.ndim == 1 else '?'} features, expected {d}"
            )
        if not 0 <= s.label < c:
            raise InvalidInput(f"sample {i} has label {s.label}, outside [0, {c})")
        feats.append(f)
        labels[i] = s.label
    return np.stack(feats).astype(np.float64, copy=False), labels


def _ce_loss_grad(w1, b1, w2, b2, X, y):
    """Mean cross-entropy and its gradient for one batch (no penalties)."""
    n = X.shape[0]
    H = X @ w1 + b1
    Hr = np.maximum(H, 0.0)
    Z = Hr @ w2 + b2
    Zs = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Zs)
    S = E.sum(axis=1, keepdims=True)
    idx = np.arange(n)
    ce = float(np.mean(np.log(S[:, 0]) - Zs[idx, y]))
    G = E / S
    G[idx, y] -= 1.0
    G /= n
    g_w2 = Hr.T @ G
    g_b2 = G.sum(axis=0)
    dH = G @ w2.T
    dH[H <= 0.0] = 0.0
    g_w1 = X.T @ dH
    g_b1 = dH.sum(axis=0)
    return ce, g_w1, g_b1, g_w2, g_b2


def _penalty(w1, b1, w2, b2, hp: Hyperparams) -> float:
    return hp.kernel_l2 * (float(np.sum(w1 * w1)) + float(np.sum(w2 * w2))) + hp.bias_l2 * (
        float(np.sum(b1 * b1)) + float(np.sum(b2 * b2))
    )


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class probability vector for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.input_dim,):
        raise InvalidInput(
            f"feature vector has shape {x.shape}, expected ({params.input_dim},)"
        )
    return forward_batch(params, x[None, :])[0]


def forward_batch(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Row-wise softmax probabilities for a feature matrix."""
    w1, b1, w2, b2 = params.views()
    Z = np.maximum(X @ w1 + b1, 0.0) @ w2 + b2
    Zs = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Zs)
    P = E / E.sum(axis=1, keepdims=True)
    # Keep outputs strictly inside (0, 1) even when a logit gap underflows exp().
    np.clip(P, 1e-300, np.nextafter(1.0, 0.0), out=P)
    return P


def loss_and_grad(params: ModelParams, batch, hp: Hyperparams):
    """Regularized mean cross-entropy over the batch and its exact gradient.

    loss = mean CE + kernel_l2*(|W1|^2 + |W2|^2) + bias_l2*(|b1|^2 + |b2|^2)
    """
    X, y = _stack_batch(batch, params.input_dim, params.num_classes)
    w1, b1, w2, b2 = params.views()
    ce, g_w1, g_b1, g_w2, g_b2 = _ce_loss_grad(w1, b1, w2, b2, X, y)
    loss = ce + _penalty(w1, b1, w2, b2, hp)
    grad = np.empty_like(params.weights)
    gv1, gb1, gv2, gb2 = _views(grad, *params.shape)
    gv1[:] = g_w1 + 2.0 * hp.kernel_l2 * w1
    gb1[:] = g_b1 + 2.0 * hp.bias_l2 * b1
    gv2[:] = g_w2 + 2.0 * hp.kernel_l2 * w2
    gb2[:] = g_b2 + 2.0 * hp.bias_l2 * b2
    return loss, grad


def split_batches(n: int, batch_size: int) -> list[slice]:
    """Slice [0, n) into consecutive batches; the final one may be partial."""
    return [slice(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]


def train(params: ModelParams, data, hp: Hyperparams):
    """Run `epochs` shuffled SGD passes; returns (new params, final-epoch mean loss).

    Each epoch reshuffles with the generator seeded by hp.seed, slices into
    batches of hp.batch_size (partial tail batch included) and applies one
    step w <- w - lr * grad per batch. Deterministic for a fixed seed.
    """
    X, y = _stack_batch(data, params.input_dim, params.num_classes)
    n = X.shape[0]
    rng = np.random.default_rng(hp.seed)
    w = params.weights.copy()
    w1, b1, w2, b2 = _views(w, *params.shape)
    lr = hp.learning_rate
    batches = split_batches(n, hp.batch_size)
    epoch_mean = 0.0
    for epoch in range(hp.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for bi, sl in enumerate(batches):
            sel = perm[sl]
            ce, g_w1, g_b1, g_w2, g_b2 = _ce_loss_grad(w1, b1, w2, b2, X[sel], y[sel])
            loss = ce + _penalty(w1, b1, w2, b2, hp)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {bi}"
                )
            total += loss
            w1 -= lr * (g_w1 + 2.0 * hp.kernel_l2 * w1)
            b1 -= lr * (g_b1 + 2.0 * hp.bias_l2 * b1)
            w2 -= lr * (g_w2 + 2.0 * hp.kernel_l2 * w2)
            b2 -= lr * (g_b2 + 2.0 * hp.bias_l2 * b2)
        epoch_mean = total / len(batches)
    return ModelParams(*params.shape, w), epoch_mean


def fedavg(models: Sequence[WeightedModel], uniform: bool = False) -> ModelParams:
    """Sample-count-weighted average of parameter vectors.

    result[i] = sum_k n_k * w_k[i] / sum_k n_k. With uniform=True every model
    counts as one sample regardless of its sample_count.
    """
    if len(models) == 0:
        raise AggregationError("cannot aggregate an empty model list")
    shape = models[0].params.shape
    for m in models[1:]:
        if m.params.shape != shape:
            raise InvalidInput(f"model shape {m.params.shape} != {shape}")
    counts = [1 if uniform else m.sample_count for m in models]
    total = sum(counts)
    if total <= 0:
        raise AggregationError("total sample weight is zero")
    if len(models) == 1:
        return models[0].params
    acc = np.zeros_like(models[0].params.weights)
    contributing = []
    for m, cnt in zip(models, counts):
        if cnt > 0:
            acc += (cnt / total) * m.params.weights
            contributing.append(m.params.weights)
    stacked = np.stack(contributing)
    # The exact weighted mean lies in the per-coordinate hull; clipping only
    # removes float rounding that could leak a hair outside it.
    np.clip(acc, stacked.min(axis=0), stacked.max(axis=0), out=acc)
    return ModelParams(*shape, acc)


def dp_noise(update: np.ndarray, cfg: DpConfig) -> np.ndarray:
    """Clip to cfg.clip_norm in L2, then add element-wise Gaussian noise."""
    if not cfg.enabled:
        raise InvalidInput("dp_noise called with DP disabled")
    u = np.asarray(update, dtype=np.float64)
    norm = float(np.linalg.norm(u))
    scale = min(1.0, cfg.clip_norm / norm) if norm > 0 else 1.0
    out = u * scale
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(cfg.seed)
        out = out + rng.normal(0.0, cfg.noise_sigma * cfg.clip_norm, size=u.shape)
    return out


def evaluate(params: ModelParams, test, hp: Hyperparams) -> EvalMetrics:
    """Accuracy (argmax, ties to the lowest class index) and regularized loss."""
    X, y = _stack_batch(test, params.input_dim, params.num_classes)
    w1, b1, w2, b2 = params.views()
    ce, *_ = _ce_loss_grad(w1, b1, w2, b2, X, y)
    probs = forward_batch(params, X)
    pred = np.argmax(probs, axis=1)  # np.argmax picks the first (lowest) max
    acc = float(np.mean(pred == y))
    return EvalMetrics(loss=ce + _penalty(w1, b1, w2, b2, hp), accuracy=acc, sample_count=len(test))


def clone_with_weights(params: ModelParams, weights: np.ndarray) -> ModelParams:
    return replace(params, weights=weights)
