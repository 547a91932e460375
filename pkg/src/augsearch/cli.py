"""Command-line interface: ``augsearch {pretrain,search,apply,report,selfcheck}``.

Settings come from built-in defaults, then an optional TOML file given by
``--config`` (keys are the long flag names with ``-`` replaced by ``_``),
then explicit command-line flags.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, load_cifar10, make_synthetic, subsample, SynthSpec, NUISANCES
from .errors import AugSearchError, ConfigError
from .fileio import atomic_write_bytes, atomic_write_text
from .imgops import build_transform_table, load_table_config, standard_config, to_uint8
from .nnet import (TrainConfig, conv_arch, init_network, load_checkpoint, mean_loss, mlp_arch,
                   pretrain, save_checkpoint)
from .policy import apply_policy, load_policy, save_policy, table_hash
from .report import loss_curve_csv, read_csv, read_trace_csv, write_report
from .search import (SearchConfig, SearchError, SearchTrace, progressive_search,
                     similarity_improvement_stats)

log = logging.getLogger("augsearch")

FORMATS_HELP = """\
output files:
  net.ckpt                    binary checkpoint (magic AUGSNET\\0, little-endian)
  loss_curve.csv              epoch,loss,accuracy,batch_loss
  policy.json                 layers of hex-encoded logits plus the table config and hash
  trace.csv                   iteration,layer,cosine_similarity,g_norm,entropy,
                              top1,p1,top2,p2,top3,p3,elapsed_ms
  op_distribution.csv         layer,op,probability
  magnitude_distribution.csv  layer,op,level,magnitude,probability,within_op
  improvement.csv             depth,mean,std
"""

# flag name -> default; None means "not set"
DEFAULTS = {
    # dataset
    "cifar10": None,
    "synthetic": None,
    "nuisance_on": "val",
    "classes": 4,
    "image_size": 24,
    "image_channels": 1,
    "noise": 0.02,
    "jitter": 0.5,
    "samples_per_class": 250,
    "val_per_class": 250,
    "data_seed": 0,
    "subsample": 4000,
    "val_size": 1000,
    # network
    "arch": "auto",
    "hidden": [32],
    "conv_channels": [48, 64],
    "standardize": True,
    "epochs": 3,
    "batch_size": 32,
    "train_lr": 0.02,
    "momentum": 0.9,
    "weight_decay": 0.0,
    # search
    "lr": 0.025,
    "iters": 512,
    "layers": 8,
    "c": 1.0,
    "images_per_iter": 16,
    "n_chains": 16,
    "val_batch": 64,
    "identity_threshold": 0.5,
    "class_conditioned": False,
    "independent_samples": False,
    "uniform_policy": False,
    "improvement_images": 256,
    "memory_mb": 256,
    "table": None,
    # apply
    "n": 4,
    "count": 8,
    "skip_terminal": False,
    # common
    "seed": 0,
    "threads": None,
    "deterministic": False,
    "figures": True,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML file of defaults (keys mirror the flag names)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="BLAS thread count")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded numerics for bit-reproducible output")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_dataset(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dataset (exactly one source)")
    g.add_argument("--cifar10", type=Path, help="directory of CIFAR-10 binary batches")
    g.add_argument("--synthetic", choices=NUISANCES, help="synthetic shapes with this nuisance")
    g.add_argument("--nuisance-on", choices=("val", "both"))
    g.add_argument("--classes", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--image-channels", type=int, choices=(1, 3), help="synthetic image channels")
    g.add_argument("--noise", type=float, help="synthetic pixel noise std")
    g.add_argument("--jitter", type=float, help="synthetic shape offset in pixels")
    g.add_argument("--samples-per-class", type=int)
    g.add_argument("--val-per-class", type=int)
    g.add_argument("--data-seed", type=int)
    g.add_argument("--subsample", type=int, help="CIFAR-10 training subset size")
    g.add_argument("--val-size", type=int, help="CIFAR-10 validation subset size")


def _add_network(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("proxy network")
    g.add_argument("--arch", choices=("auto", "mlp", "conv"))
    g.add_argument("--hidden", type=int, nargs="+")
    g.add_argument("--conv-channels", type=int, nargs=2, help="filters in the two conv blocks")
    g.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--train-lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float)


def _add_search(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("policy search")
    g.add_argument("--lr", type=float, help="Adam step size for policy logits")
    g.add_argument("--iters", type=int, help="iterations per layer")
    g.add_argument("--layers", type=int, help="maximum number of layers")
    g.add_argument("--c", type=float, help="std penalty coefficient")
    g.add_argument("--images-per-iter", type=int)
    g.add_argument("--n-chains", type=int)
    g.add_argument("--val-batch", type=int)
    g.add_argument("--identity-threshold", type=float)
    g.add_argument("--class-conditioned", action=argparse.BooleanOptionalAction, default=None,
                   help="draw each validation batch from the search image's class (default off)")
    g.add_argument("--independent-samples", action="store_true", default=None,
                   help="estimate g from separate chains instead of the Jacobian's own")
    g.add_argument("--uniform-policy", action="store_true", default=None,
                   help="skip optimisation; every layer stays uniform")
    g.add_argument("--improvement-images", type=int, help="images for the similarity-improvement estimate (0 skips)")
    g.add_argument("--memory-mb", type=int)
    g.add_argument("--table", type=Path, help="TOML transform-table config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augsearch", description=__doc__.splitlines()[0],
                                     epilog=FORMATS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the proxy network", epilog=FORMATS_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    _add_dataset(p)
    _add_network(p)

    p = sub.add_parser("search", help="search a multi-layer policy", epilog=FORMATS_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    _add_dataset(p)
    _add_network(p)
    _add_search(p)
    p.add_argument("--net", type=Path, help="pretrained checkpoint (pretrains in place when omitted)")
    p.add_argument("--no-figures", dest="figures", action="store_false", default=None)

    p = sub.add_parser("apply", help="write augmented copies of dataset images as PPM/PGM")
    _add_common(p)
    _add_dataset(p)
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--n", type=int, help="augmented copies per input")
    p.add_argument("--count", type=int, help="number of input images")
    p.add_argument("--skip-terminal", action="store_true", default=None)

    p = sub.add_parser("report", help="render CSV tables and PNG figures for a search directory",
                       epilog=FORMATS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("run", type=Path, help="directory written by 'search'")
    p.add_argument("--out", type=Path, help="defaults to the run directory")
    p.add_argument("--no-figures", dest="figures", action="store_false", default=True)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("selfcheck", help="run the built-in oracle suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the TOML config and explicit flags (in increasing priority)."""
    opts = dict(DEFAULTS)
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        try:
            cfg = load_table_config(cfg_path)
        except OSError as exc:
            raise ConfigError(f"{cfg_path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{cfg_path}: not valid TOML ({exc})") from exc
        unknown = sorted(set(cfg) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{cfg_path}: unknown keys {unknown}")
        opts.update(cfg)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            opts[key] = value
    for key in ("cifar10", "table"):
        if opts[key] is not None:
            opts[key] = Path(opts[key])
    return opts


@contextlib.contextmanager
def thread_limit(opts: dict):
    threads = 1 if opts.get("deterministic") else opts.get("threads")
    if threads is None:
        yield
        return
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(threads)):
        yield


# ---------------------------------------------------------------------------
# helpers


def load_datasets(opts: dict) -> tuple[Dataset, Dataset]:
    if (opts["cifar10"] is None) == (opts["synthetic"] is None):
        raise ConfigError("give exactly one dataset source: --cifar10 PATH or --synthetic NUISANCE")
    if opts["cifar10"] is not None:
        full = load_cifar10(opts["cifar10"], "train")
        train = subsample(full, min(opts["subsample"], len(full)), opts["data_seed"])
        test = load_cifar10(opts["cifar10"], "test")
        val = subsample(test, min(opts["val_size"], len(test)), opts["data_seed"] + 1)
        return train, val
    spec = SynthSpec(
        nuisance=opts["synthetic"],
        nuisance_on=opts["nuisance_on"],
        classes=opts["classes"],
        image_size=opts["image_size"],
        channels=opts["image_channels"],
        noise=opts["noise"],
        jitter=opts["jitter"],
        samples_per_class=opts["samples_per_class"],
        val_per_class=opts["val_per_class"],
        seed=opts["data_seed"],
    )
    return make_synthetic(spec)


def make_network(opts: dict, train: Dataset):
    arch = opts["arch"]
    if arch == "auto":
        arch = "conv" if opts["cifar10"] is not None else "mlp"
    if arch == "mlp":
        spec = mlp_arch(train.image_shape, train.class_count, opts["hidden"], opts["standardize"])
    else:
        spec = conv_arch(train.image_shape, train.class_count, opts["conv_channels"], opts["standardize"])
    return init_network(spec, np.random.default_rng(opts["seed"]))


def train_network(opts: dict, train: Dataset):
    net = make_network(opts, train)
    cfg = TrainConfig(epochs=opts["epochs"], batch_size=opts["batch_size"], lr=opts["train_lr"],
                      momentum=opts["momentum"], weight_decay=opts["weight_decay"], seed=opts["seed"])
    return pretrain(net, train.images, train.labels, cfg)


def transform_table(opts: dict, image_size: int):
    cfg = load_table_config(opts["table"]) if opts["table"] is not None else standard_config(image_size)
    return build_transform_table(cfg)


def search_config(opts: dict) -> SearchConfig:
    cfg = SearchConfig(
        iterations_per_layer=opts["iters"],
        lr=opts["lr"],
        c=opts["c"],
        images_per_iter=opts["images_per_iter"],
        n_chains=opts["n_chains"],
        val_batch=opts["val_batch"],
        max_layers=opts["layers"],
        identity_threshold=opts["identity_threshold"],
        seed=opts["seed"],
        class_conditioned_val=bool(opts["class_conditioned"]),
        shared_samples=not opts["independent_samples"],
        uniform_policy=bool(opts["uniform_policy"]),
        memory_budget_mb=opts["memory_mb"],
    )
    cfg.validate()
    return cfg


def pnm_bytes(img: np.ndarray) -> bytes:
    """Binary PPM (P6) for 3-channel images, PGM (P5) for 1-channel."""
    u8 = to_uint8(img)
    c, h, w = u8.shape
    if c == 3:
        return f"P6\n{w} {h}\n255\n".encode() + u8.transpose(1, 2, 0).tobytes()
    if c == 1:
        return f"P5\n{w} {h}\n255\n".encode() + u8[0].tobytes()
    raise ConfigError(f"cannot export {c}-channel image")


def read_pnm(data: bytes) -> np.ndarray:
    """Inverse of :func:`pnm_bytes` for files it wrote; returns ``(C, H, W)`` uint8."""
    magic, dims, maxval, body = data.split(b"\n", 3)
    w, h = (int(x) for x in dims.split())
    if magic == b"P6":
        return np.frombuffer(body, np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    if magic == b"P5":
        return np.frombuffer(body, np.uint8).reshape(1, h, w)
    raise ConfigError(f"unsupported image magic {magic!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(opts: dict, out: Path) -> int:
    train, val = load_datasets(opts)
    res = train_network(opts, train)
    save_checkpoint(res.net, out / "net.ckpt")
    atomic_write_text(out / "loss_curve.csv", loss_curve_csv(res.curve))
    val_loss, val_acc = mean_loss(res.net, val.images, val.labels)
    summary = {"initial_loss": res.initial_loss, "final_loss": res.final_loss,
               "final_accuracy": res.final_accuracy, "val_loss": val_loss, "val_accuracy": val_acc,
               "parameters": res.net.D}
    atomic_write_text(out / "pretrain.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"loss {res.initial_loss:.4f} -> {res.final_loss:.4f}, train accuracy {res.final_accuracy:.3f}, "
          f"val accuracy {val_acc:.3f}")
    return 0


def cmd_search(opts: dict, out: Path, net_path: Path | None) -> int:
    train, val = load_datasets(opts)
    if net_path is not None:
        net = load_checkpoint(net_path)
    else:
        res = train_network(opts, train)
        net = res.net
        save_checkpoint(net, out / "net.ckpt")
        atomic_write_text(out / "loss_curve.csv", loss_curve_csv(res.curve))
    table = transform_table(opts, train.image_shape[-1])
    cfg = search_config(opts)

    def progress(rec):
        if rec.iteration % 64 == 0 or rec.iteration == cfg.iterations_per_layer - 1:
            log.info("layer %d it %d cos %.4f top %s", rec.layer, rec.iteration, rec.cosine_similarity,
                     rec.top3[0][0])

    try:
        stack, trace = progressive_search(net, train, val, table, cfg, on_record=progress)
    except SearchError as exc:
        # keep whatever finished before the failure
        if len(exc.stack):
            save_policy(exc.stack, out / "policy.partial.json")
        write_report(out, exc.stack, exc.trace, figures=False)
        raise
    stack.metadata.update({"table_hash": table_hash(table), "iterations": cfg.iterations_per_layer,
                           "c": cfg.c, "lr": cfg.lr})
    save_policy(stack, out / "policy.json")
    improvement = None
    if opts["improvement_images"] > 0:
        improvement = similarity_improvement_stats(
            net, stack, train, val, opts["improvement_images"], np.random.default_rng(cfg.seed + 1),
            n_chains=cfg.n_chains, val_batch=cfg.val_batch,
            class_conditioned_val=cfg.class_conditioned_val, memory_budget_mb=cfg.memory_budget_mb)
    write_report(out, stack, trace, improvement, figures=bool(opts["figures"]))
    for s in trace.layers:
        print(f"layer {s.layer}: p(identity)={s.identity_prob:.3f}" + (" (terminal)" if s.terminal else ""))
    return 0


def cmd_apply(opts: dict, out: Path, policy_path: Path) -> int:
    stack = load_policy(policy_path)
    train, _ = load_datasets(opts)
    n, count = opts["n"], opts["count"]
    if n < 0 or count < 0:
        raise ConfigError("--n and --count must be >= 0")
    if n == 0 or count == 0:
        return 0
    count = min(count, len(train))
    rng = np.random.default_rng(opts["seed"])
    ext = "ppm" if train.image_shape[0] == 3 else "pgm"
    for i in range(count):
        img = train.images[i]
        atomic_write_bytes(out / f"input_{i:04d}.{ext}", pnm_bytes(img))
        batch = apply_policy(stack, np.repeat(img[None], n, axis=0), rng, skip_terminal=bool(opts["skip_terminal"]))
        for j in range(n):
            atomic_write_bytes(out / f"aug_{i:04d}_{j:03d}.{ext}", pnm_bytes(batch[j]))
    print(f"wrote {count} inputs x {n} augmentations to {out}")
    return 0


def cmd_report(run: Path, out: Path, figures: bool) -> int:
    stack = load_policy(run / "policy.json")
    trace = None
    if (run / "trace.csv").exists():
        trace = SearchTrace(records=read_trace_csv(run / "trace.csv"))
    improvement = None
    if (run / "improvement.csv").exists():
        improvement = [(float(r["mean"]), float(r["std"])) for r in read_csv(run / "improvement.csv")]
    for path in write_report(out, stack, trace, improvement, figures=figures):
        print(path)
    return 0


def cmd_selfcheck(seed: int) -> int:
    from .selfcheck import run_selfcheck

    t0 = time.perf_counter()
    results = run_selfcheck(seed=seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{'all suites passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selfcheck":
            return cmd_selfcheck(args.seed)
        if args.command == "report":
            return cmd_report(args.run, args.out or args.run, args.figures)
        opts = resolve(args)
        out = args.out
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
        with thread_limit(opts):
            if args.command == "pretrain":
                return cmd_pretrain(opts, out)
            if args.command == "search":
                return cmd_search(opts, out, args.net)
            if args.command == "apply":
                return cmd_apply(opts, out, args.policy)
    except AugSearchError as exc:
        print(f"augsearch: error: {exc}", file=sys.stderr)
        return exc.exit_code
    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
