"""Command-line entry point: ``lienet {synth,extract,train,eval,gradcheck}``.

Exit status: 0 success, 1 gradient check failed, 2 configuration error,
3 data error, 4 numeric error. Errors are reported on one stderr line as
``error:<class>: <message>``.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import pipeline
from .config import resolve
from .errors import (
    ConfigError,
    DegenerateBone,
    DegenerateMatrix,
    EmptyDataset,
    GeometryMismatch,
    InvalidSpec,
    LabelOutOfRange,
    MalformedFile,
    NearPiSingularity,
    NonFiniteGradient,
    ShapeMismatch,
)
from .layers import NetworkSpec, build_network, describe_shapes, layer_specs
from .skeleton import load_skeleton_file, pair_index, write_skeleton_file
from .synth import SyntheticTaskSpec, generate
from .training import (
    OptimizerConfig,
    TrainingAborted,
    evaluate,
    finite_difference_check,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("lienet")

EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_ERROR_CLASSES = (
    ((ConfigError, InvalidSpec), "config", EXIT_CONFIG),
    ((MalformedFile, EmptyDataset, GeometryMismatch, ShapeMismatch, LabelOutOfRange,
      DegenerateBone, OSError), "data", EXIT_DATA),
    ((NonFiniteGradient, NearPiSingularity, DegenerateMatrix), "numeric", EXIT_NUMERIC),
)

CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "train_log.csv"
EVAL_NAME = "eval.csv"
LOCK_NAME = ".lienet.lock"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _fail(kind, message, code):
    print(f"error:{kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


# -- data helpers -------------------------------------------------------------

def load_dataset(path, length, class_names=None, mode="geodesic"):
    """Dataset from a feature-cache directory or a ``SKEL v1`` file."""
    path = Path(path)
    if path.is_dir():
        lie = pipeline.read_cache_dir(path)
    else:
        topology, seqs = load_skeleton_file(path)
        lie, stats = pipeline.extract(topology, seqs, length, mode=mode)
        if stats.degenerate_pairs or stats.near_pi_fallbacks:
            log.warning("%s: %d degenerate pairs, %d near-pi fallbacks",
                        path, stats.degenerate_pairs, stats.near_pi_fallbacks)
    return pipeline.to_dataset(lie, class_names)


def _network_spec(cfg, channels, frames, classes, class_names=None):
    net = cfg.section("network")
    return NetworkSpec.lienet(
        net["blocks"], channels, frames, classes,
        pool_window=net["pool_window"], threshold=net["threshold"],
        vectorize=net["vectorize"], class_names=class_names,
    )


def _check_geometry(spec, dataset):
    _, frames, channels = dataset.x.shape[:3]
    if channels != spec.channels:
        raise GeometryMismatch(f"checkpoint expects {spec.channels} channels, data has {channels}")
    if frames != spec.frames:
        raise GeometryMismatch(f"checkpoint expects {spec.frames} frames, data has {frames}")
    if spec.class_names is not None and tuple(dataset.class_names) != tuple(spec.class_names):
        raise GeometryMismatch(
            f"checkpoint classes {list(spec.class_names)}, data classes {list(dataset.class_names)}"
        )


def shape_summary(spec):
    """Describe channel, frame and width progression of ``spec``."""
    specs = layer_specs(spec)
    pools = [ls for ls in specs if ls.kind in ("SpaPooling", "TemPooling", "GroupPooling")]
    frames = [spec.frames] + [ls.out_shape[0] for ls in pools]
    channels = [spec.channels] + [ls.out_shape[1] for ls in pools if ls.kind != "TemPooling"]
    width = next(ls.out_shape[0] for ls in specs if ls.kind == "Vectorize")
    lines = describe_shapes(spec)
    lines.append("temporal: " + " -> ".join(str(f) for f in frames))
    lines.append("channels: " + " -> ".join(str(c) for c in channels))
    lines.append(f"vectorized width: {width}")
    return lines


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg, args, out):
    s = cfg.section("synth")
    spec = SyntheticTaskSpec(
        class_count=s["classes"], frames=s["frames"], sigma=s["sigma"],
        samples_per_class=s["samples_per_class"], test_per_class=s["test_per_class"],
        seed=cfg["run", "seed"], speed_range=(s["speed_min"], s["speed_max"]),
        pose_sigma=s["pose_sigma"], max_offset=s["max_offset"], max_velocity=s["max_velocity"],
    )
    _, train_seqs, test_seqs = generate(spec)
    for name, seqs in (("train", train_seqs), ("test", test_seqs)):
        write_skeleton_file(out / f"{name}.skel", spec.topology, seqs)
    print(f"synth: {len(train_seqs)} train, {len(test_seqs)} test sequences, "
          f"{spec.class_count} classes, {spec.topology.bone_count} bones -> {out}")
    return 0


def cmd_extract(cfg, args, out):
    e = cfg.section("extract")
    inputs = [p for p in e["input"].split(",") if p.strip()]
    if not inputs:
        raise ConfigError("[extract] input: no skeleton files given")
    total, degenerate, fallbacks = 0, 0, 0
    for raw in inputs:
        path = Path(raw.strip())
        topology, seqs = load_skeleton_file(path)
        lie, stats = pipeline.extract(topology, seqs, e["length"], mode=e["mode"])
        target = out / e["output"] / path.stem
        pipeline.write_cache_dir(target, lie)
        total += len(lie)
        degenerate += stats.degenerate_pairs
        fallbacks += stats.near_pi_fallbacks
        print(f"extract: {path} -> {target} ({len(lie)} sequences, T={e['length']}, "
              f"channels={len(pair_index(topology.bone_count))})")
    print(f"extract: {total} sequences, {degenerate} degenerate-bone fallbacks, "
          f"{fallbacks} near-pi fallbacks")
    return 0


def _train_shapes_only(cfg):
    net = cfg.section("network")
    if net["bones"] and net["frames"] and net["classes"]:
        channels, frames, classes = net["bones"] * (net["bones"] - 1), net["frames"], net["classes"]
    else:
        t = cfg.section("train")
        if not t["data"]:
            raise ConfigError("--shapes-only needs [network] bones/frames/classes or [train] data")
        d = load_dataset(t["data"], t["length"])
        _, frames, channels = d.x.shape[:3]
        classes = len(d.class_names)
    for line in shape_summary(_network_spec(cfg, channels, frames, classes)):
        print(line)
    return 0


def cmd_train(cfg, args, out):
    if args.shapes_only:
        return _train_shapes_only(cfg)
    t = cfg.section("train")
    if not t["data"]:
        raise ConfigError("[train] data: no training data given")
    seed = cfg["run", "seed"]
    opt = OptimizerConfig(
        learning_rate=t["learning_rate"], batch_size=t["batch_size"], epochs=t["epochs"],
        seed=seed, shuffle=t["shuffle"], lr_decay=t["lr_decay"],
    )
    if args.resume:
        network, start = load_checkpoint(args.resume)
        data = load_dataset(t["data"], t["length"], network.spec.class_names)
        _check_geometry(network.spec, data)
    else:
        data = load_dataset(t["data"], t["length"])
        _, frames, channels = data.x.shape[:3]
        spec = _network_spec(cfg, channels, frames, len(data.class_names), data.class_names)
        network, start = build_network(spec, np.random.default_rng(seed)), 0
    validation = None
    if t["validation"]:
        validation = load_dataset(t["validation"], t["length"], data.class_names)
        _check_geometry(network.spec, validation)

    log_path = out / LOG_NAME
    try:
        network, tlog = train(network, data, opt, validation=validation, start_epoch=start)
    except TrainingAborted as err:
        save_checkpoint(out / CHECKPOINT_NAME, network, start + len(err.log.records))
        _write_log(log_path, err.log, append=bool(args.resume))
        raise
    end = start + len(tlog.records)
    save_checkpoint(out / CHECKPOINT_NAME, network, end)
    _write_log(log_path, tlog, append=bool(args.resume))
    if tlog.records:
        r = tlog.records[-1]
        val = "" if r.val_acc is None else f" val_acc {r.val_acc:.4f}"
        print(f"train: epoch {r.epoch} loss {r.loss:.6f} train_acc {r.train_acc:.4f}{val} "
              f"drift {r.drift:.2e}")
    print(f"train: checkpoint at epoch {end} -> {out / CHECKPOINT_NAME}")
    return 0


def _write_log(path, tlog, append):
    if append and path.exists():
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(tlog.to_csv(header=False))
    else:
        path.write_text(tlog.to_csv(), encoding="utf-8")


def cmd_eval(cfg, args, out):
    e = cfg.section("eval")
    if not e["checkpoint"]:
        raise ConfigError("[eval] checkpoint: no checkpoint given")
    if not e["data"]:
        raise ConfigError("[eval] data: no evaluation data given")
    network, epoch = load_checkpoint(e["checkpoint"])
    spec = network.spec
    data = load_dataset(e["data"], e["length"], spec.class_names)
    _check_geometry(spec, data)
    result = evaluate(network, data)
    names = list(data.class_names)
    print(f"eval: {len(data)} samples, checkpoint epoch {epoch}")
    print(f"accuracy {result.accuracy:.6f} mean_loss {result.mean_loss:.6f}")
    width = max(len(n) for n in names + ["true"])
    print("true".ljust(width) + " " + " ".join(n.rjust(width) for n in names))
    for name, row in zip(names, result.confusion):
        print(name.ljust(width) + " " + " ".join(str(v).rjust(width) for v in row))
    (out / EVAL_NAME).write_text(result.to_csv(names), encoding="utf-8")
    return 0


def gradcheck_setup(blocks, frames, classes, seed, pool_window=4):
    """Tiny synthetic network and one training sample for the oracle."""
    task = SyntheticTaskSpec(class_count=classes, frames=frames, seed=seed,
                             samples_per_class=1, test_per_class=0)
    _, seqs, _ = generate(task)
    lie, _ = pipeline.extract(task.topology, seqs, frames, threads=1)
    data = pipeline.to_dataset(lie)
    spec = NetworkSpec.lienet(blocks, data.x.shape[2], frames, classes, pool_window=pool_window)
    network = build_network(spec, np.random.default_rng(seed), debug=True)
    return network, data.x[:1], data.y[:1]


def cmd_gradcheck(cfg, args, out):
    g = cfg.section("gradcheck")
    seed = cfg["run", "seed"]
    network, x, y = gradcheck_setup(g["blocks"], g["frames"], g["classes"], seed,
                                    cfg["network", "pool_window"])
    if args.shapes_only:
        for line in describe_shapes(network.spec):
            print(line)
        return 0
    if g["mutate"] >= 0:
        if g["mutate"] >= len(network.layers):
            raise ConfigError(f"--mutate {g['mutate']}: network has {len(network.layers)} layers")
        network.layers[g["mutate"]].mutate = True
    report = finite_difference_check(
        network, x, y, np.random.default_rng(seed), data_tol=g["data_tol"],
        rotmap_tol=g["rotmap_tol"], step=g["step"], manifold_step=g["manifold_step"],
        directions=g["directions"],
    )
    for line in report.lines():
        print(line)
    if report.passed:
        print("gradcheck: PASS")
        return 0
    k = report.suspect_layer()
    print(f"gradcheck: FAIL, suspect layer {k} ({network.layers[k].kind})")
    return EXIT_GRADCHECK


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


# -- argument parsing ---------------------------------------------------------

def _key_value(text):
    name, sep, value = text.partition("=")
    section, dot, key = name.partition(".")
    if not (sep and dot and section and key):
        raise argparse.ArgumentTypeError(f"expected section.key=value, got {text!r}")
    return section.strip(), key.strip(), value


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with per-command sections")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--out", type=Path, help="output directory (default ./out)")
    common.add_argument("--shapes-only", action="store_true",
                        help="print the layer shape progression and exit")
    common.add_argument("--set", dest="settings", action="append", type=_key_value, default=[],
                        metavar="SECTION.KEY=VALUE", help="override any config value")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="lienet", description="Lie group networks for skeleton actions.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic skeleton dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--test-per-class", type=int)

    p = sub.add_parser("extract", parents=[common], help="skeleton files to feature caches")
    p.add_argument("inputs", nargs="*", type=Path, help="SKEL v1 files")
    p.add_argument("--length", type=int, help="resampled sequence length N")
    p.add_argument("--mode", choices=("geodesic", "nearest"))

    p = sub.add_parser("train", parents=[common], help="train a network")
    p.add_argument("--data", type=Path, help="feature cache directory or SKEL v1 file")
    p.add_argument("--validation", type=Path)
    p.add_argument("--length", type=int, help="resampled length when reading SKEL files")
    p.add_argument("--blocks", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--data", type=Path)
    p.add_argument("--length", type=int, help="resampled length when reading SKEL files")
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--blocks", type=int)
    p.add_argument("--mutate", type=int, metavar="LAYER",
                   help="flip the sign of this layer's backward pass")
    return parser


def _overrides(args):
    def opt(name):
        value = getattr(args, name, None)
        return None if value is None else str(value)

    c = args.command
    pairs = [("run", "seed", opt("seed")), ("run", "out", opt("out"))]
    if c == "synth":
        for name in ("classes", "frames", "sigma", "samples_per_class", "test_per_class"):
            pairs.append(("synth", name, opt(name)))
    elif c == "extract":
        if args.inputs:
            pairs.append(("extract", "input", ",".join(str(p) for p in args.inputs)))
        pairs += [("extract", "length", opt("length")), ("extract", "mode", opt("mode"))]
    elif c == "train":
        pairs += [
            ("train", "data", opt("data")), ("train", "validation", opt("validation")),
            ("train", "length", opt("length")),
            ("network", "blocks", opt("blocks")), ("train", "epochs", opt("epochs")),
            ("train", "learning_rate", opt("lr")), ("train", "batch_size", opt("batch_size")),
        ]
    elif c == "eval":
        pairs += [("eval", "data", opt("data")), ("eval", "checkpoint", opt("checkpoint")),
                  ("eval", "length", opt("length"))]
    elif c == "gradcheck":
        pairs += [("gradcheck", "blocks", opt("blocks")), ("gradcheck", "mutate", opt("mutate"))]
    return pairs + list(args.settings)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args.config, _overrides(args))
        out = Path(cfg["run", "out"])
        out.mkdir(parents=True, exist_ok=True)
        with FileLock(str(out / LOCK_NAME), timeout=0):
            cfg.echo(out)
            return COMMANDS[args.command](cfg, args, out)
    except Timeout:
        return _fail("config", f"output directory {out} is locked by another run", EXIT_CONFIG)
    except Exception as err:  # noqa: BLE001 - mapped to an exit class below
        for classes, kind, code in _ERROR_CLASSES:
            if isinstance(err, classes):
                return _fail(kind, err, code)
        raise


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
