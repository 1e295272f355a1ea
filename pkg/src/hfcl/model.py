"""Dense feed-forward network with hand-written gradients.

Parameters live in one flat float64 vector. Each layer owns a contiguous
span holding its weight matrix (row-major, ``in x out``) followed by its
bias vector, so the span list doubles as the per-layer grouping used by
the quantizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, NumericError

ACTIVATIONS = ("relu", "identity")
OUTPUT_HEADS = ("softmax", "linear")
LOSS_KINDS = ("regression", "classification")


@dataclass(frozen=True)
class ModelArch:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    output_head: str = "softmax"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigurationError("layer_sizes needs at least 2 entries")
        if any(s < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")
        if self.output_head not in OUTPUT_HEADS:
            raise ConfigurationError(f"output_head must be one of {OUTPUT_HEADS}")

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def kind(self) -> str:
        return "classification" if self.output_head == "softmax" else "regression"

    def layer_spans(self) -> list[tuple[int, int]]:
        """(offset, length) of every layer's weights+bias block."""
        spans = []
        offset = 0
        for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            spans.append((offset, i * o + o))
            offset += i * o + o
        return spans

    def unpack(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views of ``(W, b)`` per layer; no copies."""
        theta = check_theta(self, theta)
        layers = []
        offset = 0
        for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = theta[offset:offset + i * o].reshape(i, o)
            offset += i * o
            b = theta[offset:offset + o]
            offset += o
            layers.append((W, b))
        return layers

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-normal weights, zero biases."""
        parts = []
        for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            parts.append(rng.normal(0.0, np.sqrt(2.0 / (i + o)), size=i * o))
            parts.append(np.zeros(o))
        return np.concatenate(parts)


def check_theta(arch: ModelArch, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.shape[0] != arch.n_params:
        raise ConfigurationError(
            f"parameter vector has shape {theta.shape}, architecture needs ({arch.n_params},)"
        )
    return theta


def _check_inputs(arch: ModelArch, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != arch.n_inputs:
        raise ConfigurationError(
            f"input batch has shape {X.shape}, architecture expects (n, {arch.n_inputs})"
        )
    if X.shape[0] < 1:
        raise ConfigurationError("empty batch")
    return X


def _check_targets(arch: ModelArch, X: np.ndarray, Y, kind: str) -> np.ndarray:
    if kind not in LOSS_KINDS:
        raise ConfigurationError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    if kind != arch.kind:
        raise ConfigurationError(
            f"{kind} loss needs output_head={'softmax' if kind == 'classification' else 'linear'}"
        )
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape != (X.shape[0], arch.n_outputs):
        raise ConfigurationError(f"targets have shape {Y.shape}, expected {(X.shape[0], arch.n_outputs)}")
    return Y


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    m = Z.max(axis=1, keepdims=True)
    return Z - m - np.log(np.exp(Z - m).sum(axis=1, keepdims=True))


def _log_one_minus_softmax(Z: np.ndarray) -> np.ndarray:
    # log(1 - p_c) = logsumexp_{j != c} z_j - logsumexp_j z_j, without cancellation
    n, C = Z.shape
    if C == 1:
        return np.full_like(Z, -np.inf)
    mask = np.eye(C, dtype=bool)
    others = np.where(mask[None, :, :], -np.inf, Z[:, None, :])  # (n, c, j)
    m = others.max(axis=2, keepdims=True)
    lse_others = (m + np.log(np.exp(others - m).sum(axis=2, keepdims=True)))[:, :, 0]
    mz = Z.max(axis=1, keepdims=True)
    lse = mz + np.log(np.exp(Z - mz).sum(axis=1, keepdims=True))
    return lse_others - lse


def _forward_cache(arch: ModelArch, theta: np.ndarray, X: np.ndarray, masks=None):
    # masks, when given, pins the relu pattern instead of recomputing it from z
    acts = [X]
    pre = []
    layers = arch.unpack(theta)
    h = X
    for idx, (W, b) in enumerate(layers):
        z = h @ W + b
        pre.append(z)
        last = idx == len(layers) - 1
        if last:
            h = z
        elif arch.activation == "relu":
            h = z * masks[idx] if masks is not None else np.maximum(z, 0.0)
        else:
            h = z
        acts.append(h)
    return layers, acts, pre


def forward(arch: ModelArch, theta, X) -> np.ndarray:
    """Network output for a batch; softmax probabilities or raw linear outputs."""
    X = _check_inputs(arch, X)
    theta = check_theta(arch, theta)
    _, _, pre = _forward_cache(arch, theta, X)
    Z = pre[-1]
    if arch.output_head == "softmax":
        return np.exp(_log_softmax(Z))
    return Z


def _raise_nonfinite(values: np.ndarray, what: str):
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        raise NumericError(f"non-finite {what} at index {tuple(int(i) for i in bad[0])}")


def loss(arch: ModelArch, theta, X, Y, kind: str | None = None) -> float:
    """Mean squared error, or the per-class binary cross-entropy summed over classes.

    Both are averaged over the ``n`` samples of the batch.
    """
    kind = kind or arch.kind
    X = _check_inputs(arch, X)
    Y = _check_targets(arch, X, Y, kind)
    theta = check_theta(arch, theta)
    _, _, pre = _forward_cache(arch, theta, X)
    Z = pre[-1]
    _raise_nonfinite(Z, "prediction")
    n = X.shape[0]
    if kind == "regression":
        return float(np.sum((Z - Y) ** 2) / n)
    logp = _log_softmax(Z)
    log1mp = _log_one_minus_softmax(Z)
    # 0 * -inf must count as 0 for exact one-hot targets
    pos = np.where(Y > 0, Y * logp, 0.0)
    neg = np.where(Y < 1, (1.0 - Y) * log1mp, 0.0)
    value = -float(np.sum(pos + neg)) / n
    return max(value, 0.0)


def _output_delta(arch: ModelArch, Z: np.ndarray, Y: np.ndarray, kind: str) -> np.ndarray:
    n = Z.shape[0]
    if kind == "regression":
        return 2.0 * (Z - Y) / n
    logp = _log_softmax(Z)
    p = np.exp(logp)
    log1mp = _log_one_minus_softmax(Z)
    # dL/dz_j = sum_c b_c (delta_cj - p_j) with b_c = -y_c + (1 - y_c) p_c / (1 - p_c).
    # Expanded so that p_c / (1 - p_c), which overflows for confident wrong
    # predictions, only appears as p_c * p_j / (1 - p_c) with p_j <= 1 - p_c.
    C = Z.shape[1]
    ratio = np.exp(np.minimum(logp[:, None, :] - log1mp[:, :, None], 0.0))  # (n, c, j)
    ratio[:, np.arange(C), np.arange(C)] = 0.0
    off = np.einsum("nc,ncj->nj", (1.0 - Y) * p, ratio)
    dZ = -Y * (1.0 - p) + (1.0 - Y) * p + p * (Y.sum(axis=1, keepdims=True) - Y) - off
    return dZ / n


def gradient(arch: ModelArch, theta, X, Y, kind: str | None = None) -> np.ndarray:
    """Analytic gradient of :func:`loss` by backpropagation."""
    kind = kind or arch.kind
    X = _check_inputs(arch, X)
    Y = _check_targets(arch, X, Y, kind)
    return _backprop(arch, check_theta(arch, theta), X, Y, kind)


def _relu_masks(arch: ModelArch, theta: np.ndarray, X: np.ndarray):
    _, _, pre = _forward_cache(arch, theta, X)
    return [z > 0 for z in pre[:-1]]


def _backprop(arch: ModelArch, theta: np.ndarray, X: np.ndarray, Y: np.ndarray, kind: str, masks=None):
    layers, acts, pre = _forward_cache(arch, theta, X, masks)
    _raise_nonfinite(pre[-1], "prediction")
    delta = _output_delta(arch, pre[-1], Y, kind)
    per_layer = []
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        per_layer.append(((acts[idx].T @ delta).ravel(), delta.sum(axis=0)))
        if idx > 0:
            delta = delta @ W.T
            if arch.activation == "relu":
                delta = delta * (masks[idx - 1] if masks is not None else pre[idx - 1] > 0)
    return np.concatenate([part for pair in reversed(per_layer) for part in pair])


def hvp(arch: ModelArch, theta, X, Y, v, kind: str | None = None) -> np.ndarray:
    """Hessian-vector product by central differences of :func:`gradient`.

    The step is ``1e-4 * (1 + |theta|) / (|v| + 1e-12)`` so the probe moves
    theta by roughly ``1e-4 * (1 + |theta|)`` regardless of the scale of v.
    Both probes reuse the relu pattern at theta: a step that large can cross
    an activation kink, and the gradient jump there is not curvature.
    """
    kind = kind or arch.kind
    X = _check_inputs(arch, X)
    Y = _check_targets(arch, X, Y, kind)
    theta = check_theta(arch, theta)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ConfigurationError(f"direction has shape {v.shape}, expected {theta.shape}")
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return np.zeros_like(theta)
    eps = 1e-4 * (1.0 + float(np.linalg.norm(theta))) / (vnorm + 1e-12)
    masks = _relu_masks(arch, theta, X) if arch.activation == "relu" else None
    g_plus = _backprop(arch, theta + eps * v, X, Y, kind, masks)
    g_minus = _backprop(arch, theta - eps * v, X, Y, kind, masks)
    return (g_plus - g_minus) / (2.0 * eps)


def _check_noise_var(noise_var: float) -> float:
    noise_var = float(noise_var)
    if not noise_var >= 0.0:
        raise ConfigurationError(f"noise_var must be >= 0, got {noise_var}")
    return noise_var


def regularized_loss(arch: ModelArch, theta, X, Y, noise_var: float, kind: str | None = None) -> float:
    """Loss plus ``noise_var * |grad|^2``, the noise-aware client objective."""
    noise_var = _check_noise_var(noise_var)
    base = loss(arch, theta, X, Y, kind)
    if noise_var == 0.0:
        return base
    g = gradient(arch, theta, X, Y, kind)
    return base + noise_var * float(g @ g)


def regularized_gradient(arch: ModelArch, theta, X, Y, noise_var: float, kind: str | None = None) -> np.ndarray:
    """Gradient of :func:`regularized_loss`: ``g + 2 * noise_var * H g``."""
    noise_var = _check_noise_var(noise_var)
    g = gradient(arch, theta, X, Y, kind)
    if noise_var == 0.0:
        return g
    return g + 2.0 * noise_var * hvp(arch, theta, X, Y, g, kind)


def one_hot(labels: Sequence[int], n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def predict_labels(arch: ModelArch, theta, X) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(forward(arch, theta, X), axis=1)
