"""Command-line entry point: ``octsphere <subcommand> [flags]``.

Exit codes: 0 success, 1 failed run (gradient check failure, diverged
training), 2 usage error, 3 missing file, 4 unparsable input, 5 config or
checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, gradcheck
from .checkpoint import CheckpointError, ConfigMismatchError, load_checkpoint, save_checkpoint
from .config import ConfigError, build_configs, format_config, parse_config_text
from .data import (
    DataFormatError,
    Dataset,
    make_synthetic_dataset,
    read_manifest,
    read_point_file,
    split_blocks,
    write_dataset,
    write_label_file,
    write_point_file,
)
from .geometry import normalize_cloud
from .network import Network, NetworkConfig
from .octree import build_octree
from .training import TrainConfig, TrainState, classification_scores, mean_iou, predict, train

EXIT_FAILURE, EXIT_USAGE, EXIT_MISSING, EXIT_PARSE, EXIT_MISMATCH = 1, 2, 3, 4, 5


class MismatchError(Exception):
    pass


def _read_config(path, **overrides):
    raw = {}
    if path is not None:
        raw = parse_config_text(Path(path).read_text())
    return raw, build_configs(raw, **overrides)


# -- subcommands ---------------------------------------------------------------

def cmd_build_octree(args):
    cloud = read_point_file(args.input)
    if not args.no_normalize:
        cloud, _ = normalize_cloud(cloud)
    t0 = time.perf_counter()
    tree = build_octree(cloud, args.depth)
    t_build = (time.perf_counter() - t0) * 1e3
    for l, size in enumerate(tree.layer_sizes()):
        print(f"|Q^{l}| = {size}")
    print("root count = 1")
    if args.stats:
        widths = ((64, 64, 64, 128, 128, 128) + (128,) * args.depth)[:args.depth]
        net = Network(NetworkConfig(octree_channels=widths), np.random.default_rng(0)).eval()
        feats = cloud.features("xyz")
        t0 = time.perf_counter()
        net.forward_classify(tree, feats)
        t_fwd = (time.perf_counter() - t0) * 1e3
        print(f"octree construction: {t_build:.3f} ms")
        print(f"forward pass:        {t_fwd:.3f} ms")
        print(f"total:               {t_build + t_fwd:.3f} ms")
    else:
        print(f"octree construction: {t_build:.3f} ms")
    return 0


def cmd_train(args):
    raw, _ = _read_config(args.config)
    train_set = read_manifest(args.data, "train")
    test_set = read_manifest(args.test, "test") if args.test else None
    task = args.task
    if train_set.task != task:
        raise MismatchError(f"--task {task} but {args.data} holds {train_set.task} data")
    overrides = dict(task=task, epochs=args.epochs, seed=args.seed, threads=args.threads)
    if "num_classes" not in raw:
        sets = [train_set] + ([test_set] if test_set is not None else [])
        overrides["num_classes"] = max(2, max(d.num_classes() for d in sets))
    net_cfg, train_cfg = build_configs(raw, **overrides)
    if args.print_config:
        sys.stdout.write(format_config(net_cfg, train_cfg))
        return 0
    train_set = train_set.normalized(train_cfg.preserve_z_mean)
    if test_set is not None:
        test_set = test_set.normalized(train_cfg.preserve_z_mean)
    out = Path(args.out)
    state = TrainState()
    if args.resume:
        ck = load_checkpoint(args.resume, expect=net_cfg)
        net, state = ck.net, ck.state
    else:
        net = Network(net_cfg, np.random.default_rng(train_cfg.seed))
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.csv")

    def on_epoch(st, rows):
        for epoch, split, loss, metric in rows:
            print(f"epoch {epoch:3d} {split:<5} loss={loss:.4f} metric={metric:.2f}")

    t0 = time.perf_counter()
    train(net, train_set, train_cfg, test_set, state, metrics, on_epoch)
    save_checkpoint(out, net, train_cfg, state)
    print(f"trained {state.epoch} epochs in {time.perf_counter() - t0:.1f} s")
    print(f"checkpoint: {out}")
    print(f"metrics:    {metrics}")
    return 0


def _checked_checkpoint(args):
    """Load the checkpoint; keys set in ``--config`` must agree with its network."""
    ck = load_checkpoint(args.checkpoint)
    if args.config:
        raw, (net_cfg, _) = _read_config(args.config)
        stored = ck.net.config.to_dict()
        diff = [k for k in raw if k in stored and net_cfg.to_dict()[k] != stored[k]]
        if diff:
            raise ConfigMismatchError(f"checkpoint network config differs in: {', '.join(diff)}")
    return ck


def cmd_eval(args):
    ck = _checked_checkpoint(args)
    data = read_manifest(args.data, "test")
    if data.task != ck.net.config.task:
        raise MismatchError(f"checkpoint is for {ck.net.config.task}, {args.data} holds {data.task} data")
    data = data.normalized(ck.train_config.preserve_z_mean)
    threads = args.threads or ck.train_config.threads
    preds, loss = predict(ck.net, data, ck.train_config.batch_size, threads)
    print(f"loss = {loss:.6f}")
    if ck.net.config.task == "classification":
        cls_acc, metric = classification_scores(data.labels, preds)
        print(f"class accuracy = {cls_acc:.4f}")
        print(f"instance accuracy = {metric:.4f}")
    else:
        metric = mean_iou(preds, [c.labels for c in data.clouds], list(range(ck.net.config.num_classes)))
        print(f"mIoU = {metric:.4f}")
    if args.metrics:
        with open(args.metrics, "w") as fh:
            fh.write("epoch,split,loss,metric\n")
            fh.write(f"{ck.state.epoch},test,{loss:.6f},{metric:.4f}\n")
    return 0


def cmd_segment(args):
    ck = _checked_checkpoint(args)
    if ck.net.config.task != "segmentation":
        raise MismatchError("checkpoint is not a segmentation network")
    if args.data:
        data = read_manifest(args.data, "test")
        names = [Path(p).stem for p in data.paths]
    else:
        clouds = [read_point_file(p) for p in args.input]
        data = Dataset(clouds, None, "test", [str(p) for p in args.input])
        names = [Path(p).stem for p in args.input]
    data = data.normalized(ck.train_config.preserve_z_mean)
    preds, _ = predict(ck.net, data, ck.train_config.batch_size, args.threads or ck.train_config.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, pred in zip(names, preds):
        write_label_file(out / f"{name}.labels", pred)
    print(f"wrote {len(preds)} label files to {out}")
    if all(c.labels is not None for c in data.clouds):
        parts = list(range(ck.net.config.num_classes))
        print(f"mIoU = {mean_iou(preds, [c.labels for c in data.clouds], parts):.4f}")
    return 0


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_bench(args):
    methods = args.methods.split(",")
    rows = bench.neighborhood_benchmark(args.sizes, methods, args.depth, args.k, args.seed, args.repeats)
    if args.out:
        bench.write_benchmark_csv(args.out, rows)
    else:
        bench.write_benchmark_csv(sys.stdout, rows)
    return 0


def cmd_make_synthetic(args):
    out = Path(args.out)
    train_set = make_synthetic_dataset(n_per_class=args.train_per_class, points_per_cloud=args.points,
                                       seed=args.seed, task=args.task, split="train")
    test_set = make_synthetic_dataset(n_per_class=args.test_per_class, points_per_cloud=args.points,
                                      seed=args.seed + 1, task=args.task, split="test")
    for ds in (train_set, test_set):
        print(f"{write_dataset(out, ds)}: {len(ds)} clouds")
    return 0


def cmd_preprocess_blocks(args):
    cloud = read_point_file(args.input)
    blocks = split_blocks(cloud, args.block_size, args.min_points, align=not args.no_align)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, block in blocks:
        name = "block_" + "_".join(str(k) for k in key) + ".txt"
        write_point_file(out / name, block, with_labels=True)
        lines.append(name)
    (out / "blocks.tsv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(blocks)} blocks to {out}")
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_all(args.seed, args.probes)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAILURE if failed else 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="octsphere", description="Octree-guided spherical convolution networks.")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true", default=False)
    p.add_argument("--print-config", action="store_true", help="print the default configuration and exit")
    sub = p.add_subparsers(dest="command", metavar="subcommand")

    s = sub.add_parser("build-octree", parents=[common], help="build an octree and print layer sizes")
    s.add_argument("--input", required=True)
    s.add_argument("--depth", type=int, required=True)
    s.add_argument("--stats", action="store_true", help="also time a forward pass")
    s.add_argument("--no-normalize", action="store_true")
    s.set_defaults(func=cmd_build_octree)

    s = sub.add_parser("train", parents=[common], help="train a network")
    s.add_argument("--task", choices=("classification", "segmentation"), required=True)
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--data", required=True, help="training manifest")
    s.add_argument("--test", help="test manifest evaluated after every epoch")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--metrics", help="metrics CSV (default: next to the checkpoint)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="continue from this checkpoint")
    s.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("segment", cmd_segment, "write per-point labels")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--config", help="fail unless the checkpoint matches this config")
        if name == "eval":
            s.add_argument("--data", required=True)
            s.add_argument("--metrics", help="write a metrics CSV row")
        else:
            src = s.add_mutually_exclusive_group(required=True)
            src.add_argument("--data", help="manifest of clouds")
            src.add_argument("--input", nargs="+", help="point files")
            s.add_argument("--out-dir", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("bench-neighbors", parents=[common], help="neighborhood construction timing")
    s.add_argument("--sizes", type=_int_list, required=True, help="e.g. 1000,10000,100000")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.add_argument("--methods", default=",".join(bench.METHODS))
    s.add_argument("--depth", type=int, default=6)
    s.add_argument("--k", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--repeats", type=int, default=1)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("make-synthetic", parents=[common], help="write the synthetic shape dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--task", choices=("classification", "segmentation"), default="classification")
    s.add_argument("--train-per-class", type=int, default=167)
    s.add_argument("--test-per-class", type=int, default=34)
    s.add_argument("--points", type=int, default=512)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("preprocess-blocks", parents=[common], help="split a facade cloud into blocks")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--block-size", type=float, default=1.0)
    s.add_argument("--min-points", type=int, default=1)
    s.add_argument("--no-align", action="store_true")
    s.set_defaults(func=cmd_preprocess_blocks)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--seed", type=int)
    s.add_argument("--probes", type=int, default=100)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command is None:
        if args.print_config:
            sys.stdout.write(format_config(NetworkConfig(), TrainConfig()))
            return 0
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.threads is not None and args.threads < 1:
        print("octsphere: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING, f"missing file: {exc.filename or exc}"
    except (ConfigMismatchError, MismatchError) as exc:
        code, msg = EXIT_MISMATCH, f"mismatch: {exc}"
    except (DataFormatError, ConfigError, CheckpointError) as exc:
        code, msg = EXIT_PARSE, f"cannot parse input: {exc}"
    except FloatingPointError as exc:
        code, msg = EXIT_FAILURE, str(exc)
    except ValueError as exc:
        code, msg = EXIT_USAGE, str(exc)
    print(f"octsphere: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
