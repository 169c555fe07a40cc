import csv
from fractions import Fraction

import numpy as np
import pytest

from octsphere.data import make_synthetic_dataset
from octsphere.geometry import PointCloud
from octsphere.network import Network, NetworkConfig
from octsphere.training import (
    SGD,
    TrainConfig,
    TrainState,
    augment,
    classification_scores,
    evaluate,
    mean_iou,
    rotate_z,
    sgd_step,
    shape_iou,
    smoothed_losses,
    train,
)

OFF = dict(subsample=False, rotate=False, translate=False)
TINY = dict(num_classes=3, mlp_channels=4, octree_channels=(6, 8), fc_channels=(16, 8))


def tiny_data(n=4, points=64, seed=0, task="classification"):
    return make_synthetic_dataset(n_per_class=n, points_per_cloud=points, seed=seed, task=task).normalized()


class TestSGD:
    def test_plain_step(self):
        p, v = np.array([1.0, 2.0]), np.zeros(2)
        sgd_step(p, np.array([0.5, -1.0]), v, lr=1.0, momentum=0.0)
        np.testing.assert_array_equal(p, [0.5, 3.0])

    def test_two_steps_closed_form(self):
        mu, lr, g = 0.9, 0.1, np.array([1.0, -2.0])
        p, v = np.zeros(2), np.zeros(2)
        for _ in range(2):
            sgd_step(p, g, v, lr, mu)
        np.testing.assert_allclose(p, -lr * g * (2 + mu), rtol=1e-15)

    def test_zero_gradient_decays_velocity(self):
        p, v = np.array([3.0]), np.array([2.0])
        sgd_step(p, np.zeros(1), v, 0.5, 0.9)
        np.testing.assert_allclose(v, [1.8])
        np.testing.assert_allclose(p, [3.0 - 0.5 * 1.8])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step(np.zeros(2), np.zeros(3), np.zeros(2), 0.1, 0.9)
        opt = SGD(0.9)
        opt.step([("w", np.zeros(2), np.ones(2))], 0.1)
        with pytest.raises(ValueError):
            opt.step([("w", np.zeros(3), np.ones(3))], 0.1)

    def test_optimizer_keeps_velocity_per_name(self):
        opt = SGD(0.5)
        a, b = np.zeros(1), np.zeros(1)
        opt.step([("a", a, np.ones(1)), ("b", b, 2 * np.ones(1))], 1.0)
        opt.step([("a", a, np.ones(1)), ("b", b, 2 * np.ones(1))], 1.0)
        np.testing.assert_allclose([a[0], b[0]], [-2.5, -5.0])


class TestConfig:
    def test_schedule(self):
        cfg = TrainConfig()
        assert [cfg.learning_rate(e) for e in (0, 19, 20, 39, 40)] == [0.1, 0.1, 0.05, 0.05, 0.025]

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.momentum, cfg.keep_ratio, cfg.translate_std) == (16, 0.9, 0.9, 0.02)
        assert cfg.max_rotation == pytest.approx(np.pi / 6)

    @pytest.mark.parametrize("bad", [dict(batch_size=0), dict(momentum=1.0), dict(momentum=-0.1),
                                     dict(keep_ratio=0.0), dict(lr_step=0)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestAugment:
    def test_all_off_is_identity(self, rng):
        c = PointCloud(rng.standard_normal((50, 3)), labels=np.arange(50))
        out = augment(c, TrainConfig(**OFF), rng)
        np.testing.assert_array_equal(out.points, c.points)
        np.testing.assert_array_equal(out.labels, c.labels)

    def test_zero_rotation_is_identity(self, rng):
        pts = rng.standard_normal((20, 3))
        np.testing.assert_array_equal(rotate_z(pts, 0.0), pts)

    def test_rotation_is_rigid_about_z(self, rng):
        c = PointCloud(rng.standard_normal((40, 3)))
        out = augment(c, TrainConfig(subsample=False, translate=False), rng)
        d0 = np.linalg.norm(c.points[:, None] - c.points[None], axis=-1)
        d1 = np.linalg.norm(out.points[:, None] - out.points[None], axis=-1)
        np.testing.assert_allclose(d0, d1, atol=1e-12)
        np.testing.assert_array_equal(out.points[:, 2], c.points[:, 2])
        angle = np.arctan2(out.points[0, 1], out.points[0, 0]) - np.arctan2(c.points[0, 1], c.points[0, 0])
        assert abs((angle + np.pi) % (2 * np.pi) - np.pi) <= np.pi / 6 + 1e-12

    def test_translation_is_one_shift(self, rng):
        c = PointCloud(rng.standard_normal((30, 3)))
        out = augment(c, TrainConfig(subsample=False, rotate=False), rng)
        shift = out.points - c.points
        np.testing.assert_allclose(shift, np.broadcast_to(shift[0], shift.shape), atol=1e-15)

    def test_subsample_without_replacement(self, rng):
        c = PointCloud(rng.standard_normal((100, 3)), labels=np.arange(100))
        out = augment(c, TrainConfig(rotate=False, translate=False), rng)
        assert len(out) == 90
        assert len(set(out.labels.tolist())) == 90
        np.testing.assert_array_equal(out.points, c.points[out.labels])

    def test_translation_statistics(self):
        rng = np.random.default_rng(0)
        c = PointCloud(np.zeros((1, 3)))
        shifts = np.array([augment(c, TrainConfig(subsample=False, rotate=False), rng).points[0]
                           for _ in range(4000)])
        assert shifts.std() == pytest.approx(0.02, rel=0.05)
        assert abs(shifts.mean()) < 0.002


class TestMetrics:
    def test_perfect_classification(self):
        assert classification_scores([0, 1, 2, 2], [0, 1, 2, 2]) == (100.0, 100.0)

    def test_one_class_fully_wrong(self):
        cls, inst = classification_scores([0] * 9 + [1], [0] * 9 + [0])
        assert cls == 50.0 and inst == 90.0

    def test_confusion_matrix_fixture(self):
        # rows true class, columns predicted:
        #   class 0: 3 right, 1 predicted as 1
        #   class 1: 1 right, 2 predicted as 2
        #   class 2: 3 right
        y_true = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2]
        y_pred = [0, 0, 0, 1, 1, 2, 2, 2, 2, 2]
        cls, inst = classification_scores(y_true, y_pred)
        assert inst == 70.0
        assert cls == pytest.approx(float((Fraction(3, 4) + Fraction(1, 3) + 1) / 3 * 100), rel=1e-15)

    def test_perfect_segmentation(self):
        assert mean_iou([np.array([0, 1, 1])], [np.array([0, 1, 1])], [0, 1]) == 100.0

    def test_disjoint_part(self):
        assert shape_iou(np.array([1, 1]), np.array([0, 0]), [0]) == 0.0

    def test_absent_part_scores_one(self):
        assert shape_iou(np.array([0, 0]), np.array([0, 0]), [0, 1]) == 1.0

    def test_two_shapes_two_parts_fixture(self):
        # shape A: part 0 IoU 1/2, part 1 IoU 2/3; shape B: part 0 IoU 0, part 1 IoU 3/4
        preds = [np.array([0, 1, 1, 1]), np.array([1, 1, 0, 1])]
        gts = [np.array([0, 0, 1, 1]), np.array([1, 1, 1, 1])]
        expect = float((Fraction(7, 12) + Fraction(3, 8)) / 2 * 100)
        assert mean_iou(preds, gts, [0, 1]) == pytest.approx(expect, rel=1e-15)

    def test_per_shape_part_lists(self):
        preds = [np.array([0, 1]), np.array([2, 2])]
        gts = [np.array([0, 1]), np.array([2, 3])]
        # shape 2: part 2 IoU 1/2, part 3 IoU 0
        assert mean_iou(preds, gts, [[0, 1], [2, 3]]) == 62.5

    def test_empty_inputs(self):
        with pytest.raises(ValueError):
            classification_scores([], [])
        with pytest.raises(ValueError):
            mean_iou([], [], [0])


class TestSyntheticData:
    def test_deterministic(self):
        a = make_synthetic_dataset(n_per_class=3, points_per_cloud=50, seed=4)
        b = make_synthetic_dataset(n_per_class=3, points_per_cloud=50, seed=4)
        assert a.labels == b.labels
        assert all(x.points.tobytes() == y.points.tobytes() for x, y in zip(a.clouds, b.clouds))
        c = make_synthetic_dataset(n_per_class=3, points_per_cloud=50, seed=5)
        assert a.clouds[0].points.tobytes() != c.clouds[0].points.tobytes()

    def test_sizes_and_balance(self):
        ds = make_synthetic_dataset(n_per_class=5, points_per_cloud=77)
        assert len(ds) == 15 and all(len(c) == 77 for c in ds.clouds)
        assert np.bincount(ds.labels).tolist() == [5, 5, 5]

    def test_segmentation_scenes(self):
        ds = make_synthetic_dataset(n_per_class=2, points_per_cloud=100, task="segmentation")
        assert ds.task == "segmentation" and len(ds) == 6
        assert all(np.bincount(c.labels).tolist() == [34, 33, 33] for c in ds.clouds)

    def test_nearest_centroid_is_near_chance(self):
        train_set = make_synthetic_dataset(n_per_class=100, points_per_cloud=128, seed=0).normalized()
        test_set = make_synthetic_dataset(n_per_class=50, points_per_cloud=128, seed=1).normalized()
        X = np.array([c.points.ravel() for c in train_set.clouds])
        y = np.array(train_set.labels)
        centroids = np.array([X[y == k].mean(axis=0) for k in range(3)])
        T = np.array([c.points.ravel() for c in test_set.clouds])
        pred = np.argmin(((T[:, None] - centroids[None]) ** 2).sum(axis=-1), axis=1)
        acc = np.mean(pred == np.array(test_set.labels)) * 100
        assert abs(acc - 100 / 3) < 15, acc


class TestTrainLoop:
    def test_writes_metrics_csv(self, tmp_path):
        ds = tiny_data()
        net = Network(NetworkConfig(**TINY), np.random.default_rng(0))
        out = tmp_path / "m.csv"
        history = train(net, ds, TrainConfig(epochs=2, batch_size=4), ds, metrics_path=out)
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["epoch", "split", "loss", "metric"]
        assert [r[:2] for r in rows[1:]] == [["1", "train"], ["1", "test"], ["2", "train"], ["2", "test"]]
        assert len(history) == 4

    def test_deterministic_without_augmentation(self):
        ds = tiny_data()
        params = []
        for _ in range(2):
            net = Network(NetworkConfig(**TINY), np.random.default_rng(0))
            train(net, ds, TrainConfig(epochs=2, batch_size=4, **OFF))
            params.append([p.copy() for _, p, _ in net.parameters()])
        assert all(np.array_equal(a, b) for a, b in zip(*params))

    def test_deterministic_with_augmentation(self):
        ds = tiny_data()
        params = []
        for _ in range(2):
            net = Network(NetworkConfig(**TINY), np.random.default_rng(0))
            train(net, ds, TrainConfig(epochs=2, batch_size=4, seed=11))
            params.append([p.copy() for _, p, _ in net.parameters()])
        assert all(np.array_equal(a, b) for a, b in zip(*params))

    def test_threads_do_not_change_results(self):
        ds = tiny_data()
        params = []
        for threads in (1, 3):
            net = Network(NetworkConfig(**TINY), np.random.default_rng(0))
            train(net, ds, TrainConfig(epochs=1, batch_size=4, threads=threads))
            params.append([p.copy() for _, p, _ in net.parameters()])
        assert all(np.array_equal(a, b) for a, b in zip(*params))

    def test_resume_matches_uninterrupted(self):
        ds = tiny_data()
        cfg = TrainConfig(epochs=3, batch_size=4)
        full = Network(NetworkConfig(**TINY), np.random.default_rng(0))
        train(full, ds, cfg)
        part = Network(NetworkConfig(**TINY), np.random.default_rng(0))
        state = TrainState()
        train(part, ds, TrainConfig(epochs=1, batch_size=4), state=state)
        train(part, ds, cfg, state=state)
        assert state.epoch == 3
        assert all(np.array_equal(a, b) for (_, a, _), (_, b, _) in zip(full.parameters(), part.parameters()))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_reported(self):
        ds = tiny_data()
        net = Network(NetworkConfig(**TINY), np.random.default_rng(0))
        with pytest.raises(FloatingPointError):
            train(net, ds, TrainConfig(epochs=5, batch_size=4, lr=1e12))

    def test_segmentation_training(self):
        ds = tiny_data(n=2, points=90, task="segmentation")
        net = Network(NetworkConfig(task="segmentation", **TINY), np.random.default_rng(0))
        history = train(net, ds, TrainConfig(epochs=2, batch_size=3), ds)
        assert all(0.0 <= r[3] <= 100.0 for r in history)
        loss, miou = evaluate(net, ds)
        assert np.isfinite(loss) and 0.0 <= miou <= 100.0

    def test_smoothed_loss_decreases(self, desk_scale_run):
        """Smoothed epoch loss falls monotonically over the first 10 epochs."""
        losses = [r[2] for r in desk_scale_run.history if r[1] == "train"][:10]
        smooth = smoothed_losses(losses)
        assert np.all(np.diff(smooth) < 0), np.round(smooth, 4)

    def test_smoothing_definition(self):
        np.testing.assert_allclose(smoothed_losses([2.0, 2.0, 2.0]), [2.0, 2.0, 2.0])
        np.testing.assert_allclose(smoothed_losses([1.0, 0.0], beta=0.5), [1.0, 1 / 3])
