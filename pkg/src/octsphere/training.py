"""Augmentation, SGD with momentum, the training loop and evaluation metrics."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .geometry import PointCloud
from .layers import softmax_cross_entropy
from .octree import build_octree

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    lr_decay: float = 0.5
    lr_step: int = 20
    momentum: float = 0.9
    batch_size: int = 16
    subsample: bool = True
    keep_ratio: float = 0.9
    rotate: bool = True
    max_rotation: float = float(np.pi / 6)
    translate: bool = True
    translate_std: float = 0.02
    preserve_z_mean: bool = False
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError("keep_ratio must lie in (0, 1]")
        if self.epochs < 0 or self.lr_step < 1:
            raise ValueError("epochs must be >= 0 and lr_step >= 1")

    def learning_rate(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_step)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def rotate_z(points, angle):
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rot.T


def augment(cloud: PointCloud, config: TrainConfig, rng) -> PointCloud:
    """Random sub-sampling, rotation about the vertical axis and a global jitter shift."""
    if config.subsample and config.keep_ratio < 1.0:
        m = len(cloud)
        keep = max(1, int(round(config.keep_ratio * m)))
        cloud = cloud.subset(np.sort(rng.choice(m, keep, replace=False)))
    pts = cloud.points
    if config.rotate:
        pts = rotate_z(pts, rng.uniform(-config.max_rotation, config.max_rotation))
    if config.translate:
        pts = pts + rng.normal(0.0, config.translate_std, 3)
    return cloud.with_points(pts)


class SGD:
    """Heavy-ball momentum: ``v = mu * v + g``; ``p -= lr * v``."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocity: dict = {}

    def step(self, named_params, lr):
        for name, p, g in named_params:
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            elif v.shape != p.shape:
                raise ValueError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
            sgd_step(p, g, v, lr, self.momentum)


def sgd_step(param, grad, velocity, lr, momentum):
    """In-place momentum update of one parameter array."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError("parameter, gradient and velocity shapes differ")
    velocity *= momentum
    velocity += grad
    param -= (lr * velocity).astype(param.dtype, copy=False)


# -- metrics ---------------------------------------------------------------

def classification_scores(y_true, y_pred):
    """``(class accuracy, instance accuracy)`` in percent.

    Class accuracy is the unweighted mean recall over classes present in ``y_true``.
    """
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValueError("no predictions")
    instance = float(np.mean(y_true == y_pred)) * 100.0
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls)) * 100.0, instance


def shape_iou(pred, gt, parts) -> float:
    """Mean IoU over ``parts`` for one shape; a part absent from both scores 1."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    ious = []
    for part in parts:
        p, g = pred == part, gt == part
        union = np.count_nonzero(p | g)
        ious.append(1.0 if union == 0 else np.count_nonzero(p & g) / union)
    return float(np.mean(ious))


def mean_iou(preds, gts, parts) -> float:
    """Part-averaged IoU in percent: per shape over its parts, then over shapes.

    ``parts`` is one part list for all shapes or a list with one entry per shape.
    """
    if len(preds) != len(gts) or not preds:
        raise ValueError("need matching, nonempty prediction and ground-truth lists")
    per_shape = parts if parts and isinstance(parts[0], (list, tuple, np.ndarray)) else [parts] * len(preds)
    return float(np.mean([shape_iou(p, g, s) for p, g, s in zip(preds, gts, per_shape)])) * 100.0


# -- loop --------------------------------------------------------------------

def build_trees(clouds, depth, threads=1):
    if threads > 1 and len(clouds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda c: build_octree(c, depth), clouds))
    return [build_octree(c, depth) for c in clouds]


def _targets(dataset, idx):
    if dataset.labels is not None:
        return np.array([dataset.labels[i] for i in idx])
    return None


def run_batch(net, clouds, targets=None, threads=1):
    """Forward one batch; returns ``(logits, loss, dlogits)`` (loss terms None without targets)."""
    cfg = net.config
    trees = build_trees(clouds, cfg.depth, threads)
    feats = np.concatenate([c.features(cfg.input_mode) for c in clouds])
    logits = net.forward(net.prepare(trees), feats)
    if cfg.task == "segmentation" and targets is None and clouds[0].labels is not None:
        targets = np.concatenate([c.labels for c in clouds])
    if targets is None:
        return logits, None, None
    loss, dlogits = softmax_cross_entropy(logits, targets)
    return logits, loss, dlogits


def predict(net, dataset, batch_size=16, threads=1):
    """Predicted class per cloud, or predicted label array per cloud."""
    was_training = net.mlp_bn.training
    net.eval()
    preds, losses, weights = [], [], []
    try:
        for s in range(0, len(dataset), batch_size):
            idx = list(range(s, min(s + batch_size, len(dataset))))
            clouds = [dataset.clouds[i] for i in idx]
            logits, loss, _ = run_batch(net, clouds, _targets(dataset, idx), threads)
            if loss is not None:
                losses.append(loss)
                weights.append(len(idx))
            if net.config.task == "classification":
                preds.extend(np.argmax(logits, axis=1).tolist())
            else:
                offs = np.cumsum([0] + [len(c) for c in clouds])
                preds.extend(np.argmax(logits[a:b], axis=1) for a, b in zip(offs[:-1], offs[1:]))
    finally:
        net.train(was_training)
    loss = float(np.average(losses, weights=weights)) if losses else float("nan")
    return preds, loss


def evaluate_classification(net, dataset, batch_size=16, threads=1):
    preds, _ = predict(net, dataset, batch_size, threads)
    return classification_scores(dataset.labels, preds)


def evaluate_segmentation(net, dataset, batch_size=16, threads=1, parts=None):
    preds, _ = predict(net, dataset, batch_size, threads)
    parts = list(range(net.config.num_classes)) if parts is None else parts
    return mean_iou(preds, [c.labels for c in dataset.clouds], parts)


def evaluate(net, dataset, batch_size=16, threads=1):
    """``(loss, metric)``: instance accuracy or mIoU in percent."""
    preds, loss = predict(net, dataset, batch_size, threads)
    if net.config.task == "classification":
        return loss, classification_scores(dataset.labels, preds)[1]
    return loss, mean_iou(preds, [c.labels for c in dataset.clouds], list(range(net.config.num_classes)))


@dataclass
class TrainState:
    epoch: int = 0
    optimizer: SGD | None = None
    rng: np.random.Generator | None = None


def train(net, train_set, config: TrainConfig, test_set=None, state: TrainState | None = None,
          metrics_path=None, callback=None):
    """Train ``net`` in place on normalized clouds; returns the metric history.

    History rows are ``(epoch, split, loss, metric)`` matching the CSV output.
    """
    state = state or TrainState()
    if state.optimizer is None:
        state.optimizer = SGD(config.momentum)
    if state.rng is None:
        state.rng = np.random.default_rng(config.seed)
    rng, opt = state.rng, state.optimizer
    history = []
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "split", "loss", "metric"])
    try:
        net.train()
        for epoch in range(state.epoch, config.epochs):
            lr = config.learning_rate(epoch)
            order = rng.permutation(len(train_set))
            losses, sizes, correct, seen = [], [], 0, 0
            seg_preds, seg_gts = [], []
            for s in range(0, len(order), config.batch_size):
                idx = order[s:s + config.batch_size]
                clouds = [augment(train_set.clouds[i], config, rng) for i in idx]
                logits, loss, dlogits = run_batch(net, clouds, _targets(train_set, idx), config.threads)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"training diverged at epoch {epoch + 1} (loss {loss})")
                net.zero_grad()
                net.backward(dlogits)
                opt.step(net.parameters(), lr)
                losses.append(loss)
                sizes.append(len(idx))
                if net.config.task == "classification":
                    correct += int(np.sum(np.argmax(logits, axis=1) == _targets(train_set, idx)))
                    seen += len(idx)
                else:
                    offs = np.cumsum([0] + [len(c) for c in clouds])
                    seg_preds.extend(np.argmax(logits[a:b], axis=1) for a, b in zip(offs[:-1], offs[1:]))
                    seg_gts.extend(c.labels for c in clouds)
            train_loss = float(np.average(losses, weights=sizes))
            if net.config.task == "classification":
                train_metric = 100.0 * correct / max(seen, 1)
            else:
                train_metric = mean_iou(seg_preds, seg_gts, list(range(net.config.num_classes)))
            rows = [(epoch + 1, "train", train_loss, train_metric)]
            if test_set is not None:
                rows.append((epoch + 1, "test", *evaluate(net, test_set, config.batch_size, config.threads)))
            for row in rows:
                history.append(row)
                if writer is not None:
                    writer.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.4f}"])
                log.info("epoch %d %s loss=%.4f metric=%.2f", *row)
            if fh is not None:
                fh.flush()
            state.epoch = epoch + 1
            if callback is not None:
                callback(state, rows)
    finally:
        if fh is not None:
            fh.close()
    return history


def smoothed_losses(losses, beta=0.9):
    """Bias-corrected exponential moving average of a loss sequence.

    The first value equals the first loss; later values weight history by ``beta``.
    """
    out, m = [], 0.0
    for t, loss in enumerate(losses, start=1):
        m = beta * m + (1 - beta) * float(loss)
        out.append(m / (1 - beta ** t))
    return np.array(out)
