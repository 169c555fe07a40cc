"""
Training on synthetic shapes
============================

Spheres, cubes and tori sampled at random orientations make a small
three-class problem. A few epochs of SGD with momentum separate them, and a
checkpoint restores the trained network exactly.
"""

import tempfile
from pathlib import Path

import numpy as np

from octsphere.checkpoint import load_checkpoint, save_checkpoint
from octsphere.data import make_synthetic_dataset
from octsphere.network import Network, NetworkConfig
from octsphere.training import TrainConfig, TrainState, evaluate, train

train_set = make_synthetic_dataset(n_per_class=100, points_per_cloud=256, seed=0).normalized()
test_set = make_synthetic_dataset(n_per_class=20, points_per_cloud=256, seed=1, split="test").normalized()

net = Network(NetworkConfig(num_classes=3, mlp_channels=16, octree_channels=(32, 32, 64, 64)),
              np.random.default_rng(0))
config = TrainConfig(epochs=10)
state = TrainState()
for epoch, split, loss, metric in train(net, train_set, config, test_set, state):
    print(f"epoch {epoch} {split:<5} loss {loss:.3f} accuracy {metric:.1f}%")

# Save, reload and confirm the test metrics are identical.
with tempfile.TemporaryDirectory() as tmp:
    path = save_checkpoint(Path(tmp) / "shapes.ckpt", net, config, state)
    restored = load_checkpoint(path).net
print("before:", evaluate(net.eval(), test_set))
print("after: ", evaluate(restored, test_set))
