"""Differentiable building blocks with hand-written backward passes.

Every layer keeps ``params`` and matching ``grads`` dictionaries; backward
calls accumulate into ``grads`` so several forward/backward passes can be
summed before an optimizer step. Activations are cached on forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import KernelGeometry


class Layer:
    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}
        self.buffers: dict = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _cached(self, name):
        v = getattr(self, name, None)
        if v is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        return v


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Linear(Layer):
    """Row-wise affine map ``x @ W.T + b``; used both point-wise and as an FC layer."""

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels, self.out_channels = in_channels, out_channels
        self.params["W"] = he_normal(rng, (out_channels, in_channels), in_channels, dtype)
        self.params["b"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()
        self._x = None

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, g):
        x = self._cached("_x")
        if g.shape != (len(x), self.out_channels):
            raise ValueError(f"gradient shape {g.shape} does not match output {(len(x), self.out_channels)}")
        self.grads["W"] += g.T @ x
        self.grads["b"] += g.sum(axis=0, dtype=np.float64).astype(g.dtype)
        return g @ self.params["W"]


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self._cached("_mask"), g, 0).astype(g.dtype, copy=False)


class BatchNorm(Layer):
    """Per-channel batch normalization over all rows of a layer.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.training = True
        self.zero_grad()
        self._xhat = None

    def forward(self, x):
        dtype = x.dtype
        if self.training:
            mean = x.mean(axis=0, dtype=np.float64)
            var = ((x - mean) ** 2).mean(axis=0, dtype=np.float64)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(dtype)
        else:
            mean = self.buffers["running_mean"].astype(np.float64)
            var = self.buffers["running_var"].astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = ((x - mean) * inv_std).astype(dtype)
        self._xhat, self._inv_std, self._train_mode = xhat, inv_std.astype(dtype), self.training
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, g):
        xhat = self._cached("_xhat")
        gamma, inv_std = self.params["gamma"], self._inv_std
        self.grads["gamma"] += (g * xhat).sum(axis=0, dtype=np.float64).astype(g.dtype)
        self.grads["beta"] += g.sum(axis=0, dtype=np.float64).astype(g.dtype)
        gx = g * gamma
        if not self._train_mode:
            return gx * inv_std
        mean_g = gx.mean(axis=0, dtype=np.float64)
        mean_gx = (gx * xhat).mean(axis=0, dtype=np.float64)
        return ((gx - mean_g - xhat * mean_gx) * inv_std).astype(g.dtype)


@dataclass
class ConvPlan:
    """Precomputed wiring of one inter-layer convolution.

    Row ``j`` of the input layer feeds parent ``parent[j]`` of the output
    layer through bin ``bins[j]`` with weight ``weight[j] = 1 / |N(parent)|``.
    """

    parent: np.ndarray
    bins: np.ndarray
    weight: np.ndarray
    child_order: np.ndarray
    child_starts: np.ndarray
    num_bins: int

    def __post_init__(self):
        self.bin_order = np.argsort(self.bins, kind="stable")
        self.bin_starts = np.searchsorted(self.bins[self.bin_order], np.arange(self.num_bins + 1))
        self.active_bins = np.flatnonzero(np.diff(self.bin_starts))

    @property
    def num_inputs(self):
        return len(self.parent)

    @property
    def num_outputs(self):
        return len(self.child_starts) - 1

    @classmethod
    def from_neighborhoods(cls, parent, bins, num_bins, num_outputs=None):
        """Plan from per-input parent rows and bins (children grouped in input order)."""
        parent = np.asarray(parent, dtype=np.int64)
        n_out = int(parent.max()) + 1 if num_outputs is None else num_outputs
        order = np.argsort(parent, kind="stable")
        counts = np.bincount(parent, minlength=n_out)
        if np.any(counts == 0):
            raise ValueError("every output neuron needs a nonempty neighborhood")
        starts = np.concatenate([[0], np.cumsum(counts)])
        return cls(parent, np.asarray(bins, dtype=np.int64), 1.0 / counts[parent], order, starts, num_bins)


class SphericalConv(Layer):
    """Spherical convolution: ``z_i = mean_j W[bin(x_j - x_i)] a_j + b``.

    ``W`` has shape ``(num_bins, out_channels, in_channels)``; bin 0 is the
    self-convolution matrix.
    """

    def __init__(self, geometry: KernelGeometry, in_channels, out_channels, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.geometry = geometry
        self.in_channels, self.out_channels = in_channels, out_channels
        k = geometry.num_bins
        self.params["W"] = he_normal(rng, (k, out_channels, in_channels), in_channels, dtype)
        self.params["b"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()
        self._x = None

    def forward(self, x, plan: ConvPlan):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        if len(x) != plan.num_inputs:
            raise ValueError(f"plan expects {plan.num_inputs} input rows, got {len(x)}")
        W = self.params["W"]
        xs = x[plan.bin_order]
        ys = np.empty((len(x), self.out_channels), dtype=x.dtype)
        for k in plan.active_bins:
            s, e = plan.bin_starts[k], plan.bin_starts[k + 1]
            ys[s:e] = xs[s:e] @ W[k].T
        y = np.empty_like(ys)
        y[plan.bin_order] = ys
        y *= plan.weight[:, None].astype(x.dtype)
        z = np.add.reduceat(y[plan.child_order], plan.child_starts[:-1], axis=0, dtype=np.float64)
        self._x, self._plan = x, plan
        return z.astype(x.dtype) + self.params["b"]

    def backward(self, g):
        x = self._cached("_x")
        plan = self._plan
        if g.shape != (plan.num_outputs, self.out_channels):
            raise ValueError(f"gradient shape {g.shape} does not match output")
        W, dW = self.params["W"], self.grads["W"]
        self.grads["b"] += g.sum(axis=0, dtype=np.float64).astype(g.dtype)
        gc = g[plan.parent] * plan.weight[:, None].astype(g.dtype)
        gs, xs = gc[plan.bin_order], x[plan.bin_order]
        dxs = np.empty((len(x), self.in_channels), dtype=g.dtype)
        for k in plan.active_bins:
            s, e = plan.bin_starts[k], plan.bin_starts[k + 1]
            dW[k] += gs[s:e].T @ xs[s:e]
            dxs[s:e] = gs[s:e] @ W[k]
        dx = np.empty_like(dxs)
        dx[plan.bin_order] = dxs
        return dx


def maxpool_forward(x, starts=None):
    """Channel-wise max over contiguous row segments.

    ``starts`` holds segment boundaries (length B+1); default is one segment.
    Returns the pooled ``(B, C)`` matrix and the winning row of each entry.
    """
    n = len(x)
    if starts is None:
        starts = np.array([0, n])
    starts = np.asarray(starts)
    out = np.maximum.reduceat(x, starts[:-1], axis=0)
    seg = np.repeat(np.arange(len(starts) - 1), np.diff(starts))
    rows = np.broadcast_to(np.arange(n)[:, None], x.shape)
    cand = np.where(x == out[seg], rows, n)
    argmax = np.minimum.reduceat(cand, starts[:-1], axis=0)
    if np.any(argmax == n):
        raise FloatingPointError("non-finite values reached max pooling")
    return out, argmax


def maxpool_backward(g, argmax, num_rows):
    dx = np.zeros((num_rows, g.shape[1]), dtype=g.dtype)
    dx[argmax, np.arange(g.shape[1])[None, :]] = g
    return dx


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)
