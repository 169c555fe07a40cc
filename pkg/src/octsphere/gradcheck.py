"""Central finite-difference checks of every hand-written backward pass.

All checks run in float64. A probe perturbs one scalar by ``+-h`` and
compares ``(f(x+h) - f(x-h)) / 2h`` with the analytic gradient. Whole-network
checks use the fourth-order stencil on ``+-h, +-2h`` instead, since their
tiny gradients are otherwise swamped by truncation error. A probe whose
window ``[x-h, x+h]`` crosses a kink (ReLU threshold, max-pool switch) has no
meaningful central difference; such probes are redrawn and counted. Kinks are
found exactly from activation signatures when the model provides them, and
otherwise from disagreeing one-sided differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, normalize_cloud
from .kernel import make_geometry
from .layers import (
    BatchNorm,
    ConvPlan,
    Linear,
    ReLU,
    SphericalConv,
    maxpool_backward,
    maxpool_forward,
    softmax_cross_entropy,
)
from .network import Network, NetworkConfig, conv_plan
from .octree import build_octree

STEP = 1e-4
OP_TOL = 1e-5
NET_TOL = 1e-4
ABS_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    probes: int
    kinks: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.probes > 0 and self.max_rel_error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<28} max_rel_err={self.max_rel_error:.2e} "
                f"tol={self.tol:.0e} probes={self.probes} kinks={self.kinks}")


def relative_error(a, n, floor=ABS_FLOOR):
    return abs(a - n) / max(abs(a), abs(n), floor)


def probe_gradient(loss_fn, arrays, grads, rng, probes=100, h=STEP, floor=ABS_FLOOR, max_kinks=None,
                   signature=None, order=2):
    """Compare analytic ``grads`` with central differences of ``loss_fn``.

    ``order`` selects the central stencil: 2 uses ``x +- h``, 4 adds ``x +- 2h``.
    ``arrays`` are mutated in place during probing and restored afterwards.
    Returns ``(max relative error, probes used, kinks skipped)``.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    offsets = (2, 1, -1, -2) if order == 4 else (1, -1)
    sizes = np.array([a.size for a in arrays])
    bounds = np.cumsum(sizes)
    max_kinks = probes * 5 if max_kinks is None else max_kinks
    worst, done, kinks = 0.0, 0, 0
    f0 = loss_fn()
    sig0 = signature() if signature else None
    while done < probes and kinks <= max_kinks:
        flat = int(rng.integers(bounds[-1]))
        k = int(np.searchsorted(bounds, flat, side="right"))
        a = arrays[k]
        idx = np.unravel_index(flat - (bounds[k - 1] if k else 0), a.shape)
        old = a[idx]
        f, crossed = {}, False
        for step in offsets:
            a[idx] = old + step * h
            f[step] = loss_fn()
            if signature is not None:
                crossed = crossed or signature() != sig0
        a[idx] = old
        if signature is None:
            fwd, bwd = (f[1] - f0) / h, (f0 - f[-1]) / h
            crossed = abs(fwd - bwd) > 1e-2 * max(abs(fwd), abs(bwd), 1e-3) + 50 * h
        if crossed:
            kinks += 1
            continue
        if order == 4:
            numeric = (f[-2] - 8.0 * f[-1] + 8.0 * f[1] - f[2]) / (12.0 * h)
        else:
            numeric = (f[1] - f[-1]) / (2.0 * h)
        worst = max(worst, relative_error(float(grads[k][idx]), numeric, floor))
        done += 1
    return worst, done, kinks


def _away_from_zero(x, margin=0.05):
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def check_linear(rng, probes=100):
    lin = Linear(5, 4, rng, np.float64)
    lin.params["b"][:] = rng.standard_normal(4)
    x = rng.standard_normal((7, 5))
    R = rng.standard_normal((7, 4))

    def loss():
        return float((lin.forward(x) * R).sum())

    loss()
    lin.zero_grad()
    dx = lin.backward(R)
    err, n, k = probe_gradient(loss, [lin.params["W"], lin.params["b"], x], [lin.grads["W"], lin.grads["b"], dx], rng, probes)
    return CheckResult("linear", err, n, k, OP_TOL)


def check_relu(rng, probes=100):
    relu = ReLU()
    x = _away_from_zero(rng.standard_normal((9, 4)))
    R = rng.standard_normal((9, 4))

    def loss():
        return float((relu.forward(x) * R).sum())

    loss()
    dx = relu.backward(R)
    err, n, k = probe_gradient(loss, [x], [dx], rng, probes)
    return CheckResult("relu", err, n, k, OP_TOL)


def check_batchnorm(rng, probes=100, training=True):
    bn = BatchNorm(4, dtype=np.float64)
    bn.training = training
    bn.params["gamma"][:] = rng.uniform(0.5, 1.5, 4)
    bn.params["beta"][:] = rng.standard_normal(4)
    bn.buffers["running_mean"][:] = rng.standard_normal(4)
    bn.buffers["running_var"][:] = rng.uniform(0.5, 2.0, 4)
    x = rng.standard_normal((11, 4)) * 2 + 0.3
    R = rng.standard_normal((11, 4))
    frozen = {k: v.copy() for k, v in bn.buffers.items()}

    def loss():
        out = float((bn.forward(x) * R).sum())
        bn.buffers.update({k: v.copy() for k, v in frozen.items()})
        return out

    loss()
    bn.zero_grad()
    dx = bn.backward(R)
    arrays = [bn.params["gamma"], bn.params["beta"], x]
    grads = [bn.grads["gamma"], bn.grads["beta"], dx]
    err, n, k = probe_gradient(loss, arrays, grads, rng, probes)
    return CheckResult(f"batchnorm[{'train' if training else 'eval'}]", err, n, k, OP_TOL)


def random_plan(rng, points=40, depth=2, layer=1, geometry=None):
    """Convolution plan from a small random cloud (real octree neighborhoods)."""
    geometry = make_geometry(8, 2, 3, 1.0) if geometry is None else geometry
    tree = build_octree(rng.uniform(-1, 1, (points, 3)), depth)
    return conv_plan([tree], layer, geometry), geometry


def check_conv(rng, probes=100):
    plan, geom = random_plan(rng)
    conv = SphericalConv(geom, 3, 4, rng, np.float64)
    conv.params["b"][:] = rng.standard_normal(4)
    x = rng.standard_normal((plan.num_inputs, 3))
    R = rng.standard_normal((plan.num_outputs, 4))

    def loss():
        return float((conv.forward(x, plan) * R).sum())

    loss()
    conv.zero_grad()
    dx = conv.backward(R)
    used = plan.active_bins
    arrays = [conv.params["W"][used], conv.params["b"], x]
    # probe only weight slots that receive input; others have exactly zero gradient
    W_view = conv.params["W"]

    def loss_used():
        W_view[used] = arrays[0]
        return loss()

    err, n, k = probe_gradient(loss_used, arrays, [conv.grads["W"][used], conv.grads["b"], dx], rng, probes)
    W_view[used] = arrays[0]
    unused = np.setdiff1d(np.arange(geom.num_bins), used)
    if np.any(conv.grads["W"][unused] != 0):
        err = np.inf
    return CheckResult("spherical_conv", err, n, k, OP_TOL)


def check_maxpool(rng, probes=100):
    x = rng.permutation(np.arange(30 * 3, dtype=np.float64)).reshape(30, 3) * 0.1
    starts = np.array([0, 7, 19, 30])
    R = rng.standard_normal((3, 3))

    def loss():
        return float((maxpool_forward(x, starts)[0] * R).sum())

    loss()
    _, am = maxpool_forward(x, starts)
    dx = maxpool_backward(R, am, len(x))
    err, n, k = probe_gradient(loss, [x], [dx], rng, probes)
    return CheckResult("maxpool", err, n, k, OP_TOL)


def check_softmax_ce(rng, probes=100):
    z = rng.standard_normal((6, 4)) * 2
    y = rng.integers(0, 4, 6)

    def loss():
        return softmax_cross_entropy(z, y)[0]

    _, dz = softmax_cross_entropy(z, y)
    err, n, k = probe_gradient(loss, [z], [dz], rng, probes)
    return CheckResult("softmax_cross_entropy", err, n, k, OP_TOL)


def toy_batch(rng, task, clouds=4, points=48, depth=3, input_mode="xyz"):
    trees, feats, labels = [], [], []
    for c in range(clouds):
        pts = rng.standard_normal((points, 3)) * (0.5 + c)
        colors = rng.uniform(0, 1, (points, 3)) if input_mode == "xyz-rgb" else None
        cloud, _ = normalize_cloud(PointCloud(pts, colors))
        trees.append(build_octree(cloud, depth))
        feats.append(cloud.features(input_mode))
        labels.append(rng.integers(0, 2, points) if task == "segmentation" else c % 2)
    return trees, feats, labels


def check_network(rng, task="classification", probes=100, input_mode="xyz"):
    depth = 3
    cfg = NetworkConfig(task=task, num_classes=2, mlp_channels=4, octree_channels=(5, 6, 7)[:depth],
                        fc_channels=(8, 6), input_mode=input_mode)
    net = Network(cfg, rng, np.float64)
    for _, layer in net.named_layers():
        if "b" in layer.params:
            layer.params["b"][:] = rng.standard_normal(layer.params["b"].shape) * 0.1
    trees, feats, labels = toy_batch(rng, task, depth=depth, input_mode=input_mode)
    batch = net.prepare(trees)
    x = np.concatenate(feats)
    y = np.concatenate(labels) if task == "segmentation" else np.array(labels)

    def loss():
        return softmax_cross_entropy(net.forward(batch, x), y)[0]

    _, g = softmax_cross_entropy(net.forward(batch, x), y)
    net.zero_grad()
    net.backward(g)
    params = net.parameters()
    arrays = [p for _, p, _ in params]
    grads = [gr.copy() for _, _, gr in params]
    err, n, k = probe_gradient(loss, arrays, grads, rng, probes,
                                 signature=net.activation_signature, order=4)
    return CheckResult(f"network[{task},{input_mode}]", err, n, k, NET_TOL)


def run_all(seed=None, probes=100):
    """Run the complete suite; returns the list of :class:`CheckResult`."""
    rng = np.random.default_rng(seed)
    return [
        check_linear(rng, probes),
        check_relu(rng, probes),
        check_batchnorm(rng, probes, training=True),
        check_batchnorm(rng, probes, training=False),
        check_conv(rng, probes),
        check_maxpool(rng, probes),
        check_softmax_ce(rng, probes),
        check_network(rng, "classification", probes),
        check_network(rng, "segmentation", probes),
        check_network(rng, "classification", probes, input_mode="xyz-rgb"),
    ]
