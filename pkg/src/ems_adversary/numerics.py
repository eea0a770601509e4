"""Dense-network math: forward/backward passes, softmax cross-entropy, losses and Adam.

Everything works on float64 numpy arrays. Inputs may be a single vector
``(n_in,)`` or a batch ``(n_rows, n_in)``; outputs keep the same rank.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NETWORK_FORMAT_VERSION = 1
LOG_FLOOR = 1e-12
ACTIVATIONS = ("relu", "linear")


class ShapeError(ValueError):
    """Raised when an array does not match the network or label shape."""


class DenseNetwork:
    """Stack of affine layers, each followed by ``relu`` or ``linear``.

    Weights are stored ``out x in`` so a layer computes ``W @ x + b``.
    """

    def __init__(self, weights, biases, activations):
        if not (len(weights) == len(biases) == len(activations)) or not weights:
            raise ShapeError("weights, biases and activations must be non-empty and equal length")
        self.weights = [np.array(w, dtype=np.float64, ndmin=2) for w in weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in biases]
        self.activations = list(activations)
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"layer {k}: unknown activation {act!r}")
            if w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {k}: weight rows {w.shape[0]} != bias length {b.shape[0]}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k}: input width {w.shape[1]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")

    @classmethod
    def initialize(cls, widths, rng=None, hidden_activation="relu", output_activation="linear"):
        """Glorot-uniform weights, zero biases. ``widths`` lists every layer width."""
        rng = np.random.default_rng(rng)
        weights, biases, acts = [], [], []
        n_layers = len(widths) - 1
        for k in range(n_layers):
            fan_in, fan_out = widths[k], widths[k + 1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
            acts.append(output_activation if k == n_layers - 1 else hidden_activation)
        return cls(weights, biases, acts)

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.input_width] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]``; arrays are shared, not copied."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "DenseNetwork":
        return DenseNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activations)

    def load_params_from(self, other: "DenseNetwork") -> None:
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def equals(self, other: "DenseNetwork") -> bool:
        return self.activations == other.activations and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.params(), other.params())
        )

    def to_dict(self) -> dict:
        # json writes floats with repr(), the shortest string that round-trips exactly
        return {
            "version": NETWORK_FORMAT_VERSION,
            "widths": self.widths,
            "activations": list(self.activations),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DenseNetwork":
        if doc.get("version") != NETWORK_FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {doc.get('version')!r}")
        net = cls(doc["weights"], doc["biases"], doc["activations"])
        if net.widths != list(doc["widths"]):
            raise ShapeError(f"declared widths {doc['widths']} do not match arrays {net.widths}")
        return net

    def __repr__(self):
        return f"DenseNetwork(widths={self.widths}, activations={self.activations})"


@dataclass
class ForwardCache:
    """Per-layer inputs, pre-activations and post-activations of one forward pass."""

    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    squeeze: bool = False

    def __len__(self):
        return len(self.pre)


def _as_batch(net: DenseNetwork, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = x[None, :] if squeeze else x
    if x2.ndim != 2 or x2.shape[1] != net.input_width:
        raise ShapeError(f"expected input width {net.input_width}, got shape {x.shape}")
    return x2, squeeze


def forward(net: DenseNetwork, x) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network; returns the output and the cache needed by :func:`backward`."""
    h, squeeze = _as_batch(net, x)
    cache = ForwardCache(squeeze=squeeze)
    for w, b, act in zip(net.weights, net.biases, net.activations):
        cache.inputs.append(h)
        z = h @ w.T + b
        h = np.maximum(z, 0.0) if act == "relu" else z
        cache.pre.append(z)
        cache.post.append(h)
    return (h[0] if squeeze else h), cache


def predict(net: DenseNetwork, x) -> np.ndarray:
    return forward(net, x)[0]


def backward(net: DenseNetwork, cache: ForwardCache, grad_out) -> tuple[np.ndarray, list[np.ndarray]]:
    """Reverse-mode pass from ``dL/d(output)``.

    Returns ``(dL/d(input), [dW0, db0, dW1, db1, ...])``. Parameter gradients
    are summed over the batch rows.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for k in range(len(net.weights) - 1, -1, -1):
        if net.activations[k] == "relu":
            g = g * (cache.pre[k] > 0.0)
        grads[2 * k] = g.T @ cache.inputs[k]
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ net.weights[k]
    return (g[0] if cache.squeeze else g), grads


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(p, y) -> np.ndarray | float:
    """``-sum(y * log p)`` along the last axis, with ``p`` clamped below at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"probability shape {p.shape} != label shape {y.shape}")
    out = -(y * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def softmax_ce_output_grad(logits, y) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax(logits), y)`` with respect to the logits."""
    return softmax(logits) - np.asarray(y, dtype=np.float64)


def input_gradient(net: DenseNetwork, x, y) -> np.ndarray:
    """Exact ``d/dx cross_entropy(softmax(net(x)), y)``. Batched inputs give per-row gradients."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != net.output_width:
        raise ShapeError(f"label width {y.shape[-1]} != output width {net.output_width}")
    out, cache = forward(net, x)
    if out.shape != y.shape:
        raise ShapeError(f"label shape {y.shape} != output shape {out.shape}")
    g_in, _ = backward(net, cache, softmax_ce_output_grad(out, y))
    return g_in


def squared_td_loss(q, actions, targets) -> tuple[float, np.ndarray]:
    """Mean over rows of ``(q[a] - target)**2``; returns ``(loss, dL/dq)``."""
    q = np.atleast_2d(q)
    actions = np.asarray(actions, dtype=np.intp).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    rows = np.arange(q.shape[0])
    err = q[rows, actions] - targets
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * err / q.shape[0]
    return float(np.mean(err**2)), dq


def quantile_huber_loss(z, taus, targets, kappa: float = 1.0) -> tuple[float, np.ndarray]:
    """Quantile-regression Huber loss.

    ``z``: (batch, n_tau) predicted quantile values at ``taus`` (batch, n_tau).
    ``targets``: (batch, n_tau_prime) sampled target returns.
    Loss is summed over predicted quantiles, averaged over target samples and batch.
    Returns ``(loss, dL/dz)``.
    """
    z = np.asarray(z, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n_batch, _ = z.shape
    n_prime = targets.shape[1]
    u = targets[:, None, :] - z[:, :, None]  # (batch, n_tau, n_tau_prime)
    abs_u = np.abs(u)
    quad = abs_u <= kappa
    huber = np.where(quad, 0.5 * u**2, kappa * (abs_u - 0.5 * kappa))
    weight = np.abs(taus[:, :, None] - (u < 0.0))
    loss = float((weight * huber / kappa).sum() / (n_batch * n_prime))
    dhuber_du = np.where(quad, u, kappa * np.sign(u))
    # dz = -du; weight is piecewise constant in u
    dz = -(weight * dhuber_du / kappa).sum(axis=2) / (n_batch * n_prime)
    return loss, dz


def parameter_gradient(net: DenseNetwork, x, loss_fn) -> tuple[float, list[np.ndarray]]:
    """Gradients of a scalar loss of the network output with respect to every parameter.

    ``loss_fn(output) -> (loss, dloss/doutput)``; see :func:`squared_td_loss` and
    :func:`quantile_huber_loss` for the two heads used in training.
    """
    out, cache = forward(net, x)
    loss, g_out = loss_fn(out)
    _, grads = backward(net, cache, g_out)
    return loss, grads


class AdamState:
    """First/second moment buffers and step counter for one parameter list."""

    def __init__(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def to_dict(self) -> dict:
        return {"t": self.t, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state must have equal length")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total
