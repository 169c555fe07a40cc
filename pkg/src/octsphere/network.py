"""Octree-guided classification and segmentation networks.

Pipeline per cloud: point-wise MLP (linear, batch norm, ReLU) on the raw
features, then one spherical convolution per octree layer going from the
leaves to the top. All but the last convolution are followed by batch norm
and ReLU. Several clouds are processed together by stacking their layers.

Classification concatenates the max-pooled top layer, the max-pooled
intermediate layers, the max-pooled MLP features and (optionally) the
max-pooled raw features. Segmentation gives each raw point its raw and MLP
features plus the features of its ancestor at every layer. Both end in the
same FC stack (512-256-C by default, batch norm and ReLU after the hidden
FC layers).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from .kernel import KernelGeometry, bin_index, make_geometry
from .layers import (
    BatchNorm,
    ConvPlan,
    Linear,
    ReLU,
    SphericalConv,
    maxpool_backward,
    maxpool_forward,
)
from .octree import Octree, layer_offsets, layer_radius

TASKS = ("classification", "segmentation")
INPUT_MODES = {"xyz": 3, "xyz-rgb": 6}


@dataclass
class NetworkConfig:
    task: str = "classification"
    num_classes: int = 10
    mlp_channels: int = 32
    octree_channels: tuple = (64, 64, 64, 128, 128, 128)
    kernel: tuple = (8, 2, 3)
    input_mode: str = "xyz"
    fc_channels: tuple = (512, 256)
    pool_raw: bool = True

    def __post_init__(self):
        self.octree_channels = tuple(int(c) for c in self.octree_channels)
        self.kernel = tuple(int(k) for k in self.kernel)
        self.fc_channels = tuple(int(c) for c in self.fc_channels)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {sorted(INPUT_MODES)}, got {self.input_mode!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not self.octree_channels:
            raise ValueError("at least one octree layer is required")
        if len(self.kernel) != 3:
            raise ValueError("kernel must be (n, p, q)")

    @property
    def depth(self) -> int:
        return len(self.octree_channels)

    @property
    def in_channels(self) -> int:
        return INPUT_MODES[self.input_mode]

    def feature_width(self) -> int:
        """Width of the vector fed to the first FC layer."""
        w = self.mlp_channels + sum(self.octree_channels)
        if self.task == "segmentation" or self.pool_raw:
            w += self.in_channels
        return w

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class GraphBatch:
    """Stacked octrees of a mini-batch with the convolution plans of every layer."""

    trees: list
    layer_starts: list
    plans: list
    ancestors: list = field(default_factory=list)

    @property
    def size(self):
        return len(self.trees)


def conv_plan(trees, l, geometry: KernelGeometry) -> ConvPlan:
    """Stack the layer-``l`` neighborhoods of several trees into one plan."""
    parents, bins, orders, starts = [], [], [], [np.zeros(1, dtype=np.int64)]
    in_off = out_off = 0
    for t in trees:
        g = geometry.rescaled(layer_radius(t, l))
        parents.append(t.parent[l] + out_off)
        bins.append(bin_index(g, layer_offsets(t, l)).reshape(-1))
        orders.append(t.child_order[l] + in_off)
        starts.append(t.child_starts[l][1:] + in_off)
        in_off += len(t.layers[l - 1])
        out_off += len(t.layers[l])
    parent = np.concatenate(parents)
    counts = np.concatenate([t.child_counts[l] for t in trees])
    return ConvPlan(
        parent=parent,
        bins=np.concatenate(bins),
        weight=1.0 / counts[parent],
        child_order=np.concatenate(orders),
        child_starts=np.concatenate(starts),
        num_bins=geometry.num_bins,
    )


class Network:
    def __init__(self, config: NetworkConfig, rng=None, dtype=np.float32, geometry: KernelGeometry | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(0) if rng is None else rng
        n, p, q = config.kernel
        self.geometry = make_geometry(n, p, q, 1.0) if geometry is None else geometry
        self.mlp = Linear(config.in_channels, config.mlp_channels, rng, dtype)
        self.mlp_bn = BatchNorm(config.mlp_channels, dtype=dtype)
        self.mlp_relu = ReLU()
        self.convs, self.bns, self.relus = [], [], []
        c_in = config.mlp_channels
        for l, c_out in enumerate(config.octree_channels, start=1):
            self.convs.append(SphericalConv(self.geometry, c_in, c_out, rng, dtype))
            if l < config.depth:
                self.bns.append(BatchNorm(c_out, dtype=dtype))
                self.relus.append(ReLU())
            c_in = c_out
        widths = (config.feature_width(),) + config.fc_channels + (config.num_classes,)
        self.fcs = [Linear(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.fc_bns = [BatchNorm(c, dtype=dtype) for c in config.fc_channels]
        self.fc_relus = [ReLU() for _ in self.fcs[:-1]]
        self._cache = None

    # -- parameters -----------------------------------------------------
    def named_layers(self):
        yield "mlp", self.mlp
        yield "mlp_bn", self.mlp_bn
        for l, conv in enumerate(self.convs, start=1):
            yield f"conv{l}", conv
            if l < len(self.convs):
                yield f"bn{l}", self.bns[l - 1]
        for i, fc in enumerate(self.fcs, start=1):
            yield f"fc{i}", fc
            if i < len(self.fcs):
                yield f"fc_bn{i}", self.fc_bns[i - 1]

    def parameters(self):
        """``[(name, array, grad_array)]`` in a fixed order."""
        return [
            (f"{ln}.{k}", layer.params[k], layer.grads[k])
            for ln, layer in self.named_layers()
            for k in sorted(layer.params)
        ]

    def buffers(self):
        return [
            (f"{ln}.{k}", layer, k) for ln, layer in self.named_layers() for k in sorted(layer.buffers)
        ]

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def train(self, mode=True):
        for _, layer in self.named_layers():
            if isinstance(layer, BatchNorm):
                layer.training = mode
        return self

    def eval(self):
        return self.train(False)

    # -- graph preparation --------------------------------------------------
    def prepare(self, trees) -> GraphBatch:
        L = self.config.depth
        trees = list(trees)
        for t in trees:
            if t.depth != L:
                raise ValueError(f"octree depth {t.depth} does not match network depth {L}")
        starts = [np.concatenate([[0], np.cumsum([len(t.layers[l]) for t in trees])]) for l in range(L + 1)]
        plans = [None] + [conv_plan(trees, l, self.geometry) for l in range(1, L + 1)]
        ancestors = []
        if self.config.task == "segmentation":
            ancestors = [None] + [
                np.concatenate([t.ancestors(l) + starts[l][b] for b, t in enumerate(trees)]) for l in range(1, L + 1)
            ]
        return GraphBatch(trees, starts, plans, ancestors)

    # -- forward / backward -------------------------------------------------
    def forward(self, batch: GraphBatch, features) -> np.ndarray:
        """Logits: ``(B, C)`` for classification, ``(total points, C)`` for segmentation."""
        cfg = self.config
        x0 = np.asarray(features, dtype=self.dtype)
        if x0.ndim != 2 or x0.shape[1] != cfg.in_channels:
            raise ValueError(f"features must have {cfg.in_channels} columns for input mode {cfg.input_mode!r}")
        if len(x0) != batch.layer_starts[0][-1]:
            raise ValueError("feature rows do not match the number of points in the octrees")
        L = cfg.depth
        acts = [self.mlp_relu.forward(self.mlp_bn.forward(self.mlp.forward(x0)))]
        for l in range(1, L + 1):
            z = self.convs[l - 1].forward(acts[-1], batch.plans[l])
            if l < L:
                z = self.relus[l - 1].forward(self.bns[l - 1].forward(z))
            acts.append(z)

        if cfg.task == "classification":
            pooled, argmaxes = [], []
            for l in range(L, 0, -1):
                out, am = maxpool_forward(acts[l], batch.layer_starts[l])
                pooled.append(out)
                argmaxes.append((l, am))
            out, am = maxpool_forward(acts[0], batch.layer_starts[0])
            pooled.append(out)
            argmaxes.append((0, am))
            if cfg.pool_raw:
                pooled.append(maxpool_forward(x0, batch.layer_starts[0])[0])
            h = np.concatenate(pooled, axis=1)
            routing = argmaxes
        else:
            parts = [x0, acts[0]] + [acts[l][batch.ancestors[l]] for l in range(1, L + 1)]
            h = np.concatenate(parts, axis=1)
            routing = None

        for fc, bn, relu in zip(self.fcs[:-1], self.fc_bns, self.fc_relus):
            h = relu.forward(bn.forward(fc.forward(h)))
        logits = self.fcs[-1].forward(h)
        self._cache = (batch, [len(a) for a in acts], routing)
        return logits

    def backward(self, dlogits):
        """Accumulate parameter gradients from the gradient of the logits."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        batch, sizes, routing = self._cache
        cfg, L = self.config, self.config.depth
        g = self.fcs[-1].backward(np.asarray(dlogits, dtype=self.dtype))
        for fc, bn, relu in zip(reversed(self.fcs[:-1]), reversed(self.fc_bns), reversed(self.fc_relus)):
            g = fc.backward(bn.backward(relu.backward(g)))

        widths = [cfg.octree_channels[l - 1] for l in range(L, 0, -1)] + [cfg.mlp_channels]
        dacts = [np.zeros((sizes[l], cfg.octree_channels[l - 1] if l else cfg.mlp_channels), dtype=self.dtype)
                 for l in range(L + 1)]
        if cfg.task == "classification":
            col = 0
            for (l, am), w in zip(routing, widths):
                dacts[l] += maxpool_backward(g[:, col:col + w], am, sizes[l])
                col += w
        else:
            col = cfg.in_channels
            dacts[0] += g[:, col:col + cfg.mlp_channels]
            col += cfg.mlp_channels
            for l in range(1, L + 1):
                w = cfg.octree_channels[l - 1]
                np.add.at(dacts[l], batch.ancestors[l], g[:, col:col + w])
                col += w

        for l in range(L, 0, -1):
            d = dacts[l]
            if l < L:
                d = self.bns[l - 1].backward(self.relus[l - 1].backward(d))
            dacts[l - 1] += self.convs[l - 1].backward(d)
        self.mlp.backward(self.mlp_bn.backward(self.mlp_relu.backward(dacts[0])))
        return {name: grad for name, _, grad in self.parameters()}

    def activation_signature(self) -> bytes:
        """Digest of every ReLU mask and max-pool winner of the last forward pass.

        Two inputs with equal signatures lie in the same linear piece of the
        network, which finite-difference checks use to spot kinks.
        """
        if self._cache is None:
            raise RuntimeError("no forward pass cached")
        h = hashlib.sha1()
        for relu in [self.mlp_relu, *self.relus, *self.fc_relus]:
            h.update(np.packbits(relu._mask).tobytes())
        for _, am in self._cache[2] or ():
            h.update(am.tobytes())
        return h.digest()

    # -- single-cloud conveniences -------------------------------------------
    def forward_classify(self, tree: Octree, features) -> np.ndarray:
        if self.config.task != "classification":
            raise ValueError("network is configured for segmentation")
        return self.forward(self.prepare([tree]), features)[0]

    def forward_segment(self, tree: Octree, features) -> np.ndarray:
        if self.config.task != "segmentation":
            raise ValueError("network is configured for classification")
        return self.forward(self.prepare([tree]), features)
