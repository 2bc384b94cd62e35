"""Command-line entry point: ``hpdseg {gen-data,train,eval,gradcheck,bench,ablate}``.

Every run resolves its parameters as defaults < ``--config`` file < flags,
prints the effective values before doing any work and writes them to
``<out>/config.txt``.  Exit status is 0 on success, 1 for invalid input
(bad flags, config or data) and 2 when an internal check fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck, ops
from .config import format_kv, read_kv
from .data import emit_overlay, load_dataset, make_splits, save_dataset, stack
from .errors import ConfigError, DataError, HpdError, UsageError
from .net import NetConfig, build_net, count_flops, count_params, load_checkpoint, predict, save_checkpoint
from .reference import naive_pool
from .tensor import Rng
from .train import TrainConfig, ablate, ablation_text, ablation_tsv, evaluate, format_record, train

log = logging.getLogger("hpdseg")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# -- option groups; each key doubles as a config-file key --------------------

_GEN_KEYS = {
    "seed": (int, 42, "dataset seed"),
    "n_train": (int, 300, "training samples"),
    "n_val": (int, 50, "validation samples"),
    "size": (int, 64, "image height and width"),
    "classes": (int, 4, "label classes including background"),
    "workers": (int, 1, "threads for sample generation"),
}
_NET_KEYS = {
    "depth": (int, 3, "encoder stages"),
    "base_channels": (int, 16, "channels of the first stage"),
    "classes": (int, 4, "output classes"),
    "num_hpd": (int, 0, "leading stages that use HPD instead of max pooling"),
    "downsamplers": (str, None, "comma list overriding num_hpd: maxpool,hpd,avgpool,stridedconv"),
    "fusion": (str, "sum", "HPD fusion: sum or concat"),
}
_TRAIN_KEYS = {
    "base_lr": (float, 0.01, "initial learning rate"),
    "power": (float, 0.9, "poly schedule exponent"),
    "weight_decay": (float, 1e-4, "L2 factor on conv weights"),
    "batch_size": (int, 8, "samples per step"),
    "max_iters": (int, 200, "SGD steps"),
    "seed": (int, 0, "init and shuffle seed"),
    "loss_mix": (float, 0.5, "cross-entropy weight; Dice gets the rest"),
    "eval_every": (int, 50, "validation interval in steps"),
    "dice_smooth": (float, 1.0, "soft Dice smoothing"),
}
_ALIASES = {"max_iters": ["--iters"], "base_lr": ["--lr"]}


def _add_keys(p: argparse.ArgumentParser, keys: dict) -> None:
    for key, (typ, default, text) in keys.items():
        flags = [f"--{key.replace('_', '-')}"] + _ALIASES.get(key, [])
        p.add_argument(*flags, dest=key, type=typ, default=None, help=f"{text} (default {default})")


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key = value file; flags override it")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def _resolve(args, keys: dict) -> dict:
    """Merge defaults, config file and flags for ``keys``; converts file strings by type."""
    values = {k: opt[1] for k, opt in keys.items()}
    if args.config is not None:
        for k, raw in read_kv(args.config).items():
            if k not in keys:
                raise ConfigError(f"{args.config}: unknown key {k!r}; accepted: {', '.join(keys)}")
            try:
                values[k] = keys[k][0](raw)
            except ValueError as exc:
                raise ConfigError(f"{args.config}: bad value for {k}: {raw!r}") from exc
    for k in keys:
        flag = getattr(args, k, None)
        if flag is not None:
            values[k] = flag
    return values


def _echo(values: dict, out: Path | None) -> None:
    text = format_kv({k: v for k, v in values.items() if v is not None})
    for line in text.splitlines():
        print(f"config {line}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(text, encoding="utf-8")


def _net_config(values: dict) -> NetConfig:
    ds = values.get("downsamplers")
    return NetConfig(
        depth=values["depth"],
        base_channels=values["base_channels"],
        classes=values["classes"],
        downsamplers=ds.split(",") if ds else None,
        num_hpd=None if ds else values["num_hpd"],
        fusion=values["fusion"],
    )


def _train_config(values: dict) -> TrainConfig:
    return TrainConfig(**{f.name: values[f.name] for f in dataclasses.fields(TrainConfig)})


def _load_splits(path: Path) -> dict:
    splits = load_dataset(path)
    if "train" not in splits:
        raise DataError(f"{path} has no train-* samples")
    return splits


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    values = _resolve(args, _GEN_KEYS)
    _echo(values, args.out)
    splits = make_splits(values["seed"], values["n_train"], values["n_val"], values["size"],
                         values["classes"], values["workers"])
    meta = {k: v for k, v in values.items() if k != "workers"}
    save_dataset(args.out, splits, meta)
    print(f"wrote {sum(len(s) for s in splits.values())} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    keys = {**_NET_KEYS, **_TRAIN_KEYS}
    values = _resolve(args, keys)
    net_cfg, train_cfg = _net_config(values), _train_config(values)
    _echo({"data": args.data, **values}, args.out)
    splits = _load_splits(args.data)
    with open(args.out / "metrics.log", "w", encoding="utf-8") as fh:

        def emit(rec):
            line = format_record(rec)
            print(line)
            fh.write(line + "\n")
            fh.flush()

        net, _ = train(net_cfg, train_cfg, splits["train"], splits.get("val"), on_record=emit)
    save_checkpoint(net, args.out / "checkpoint")
    print(f"checkpoint written to {args.out / 'checkpoint'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _echo({"data": args.data, "checkpoint": args.checkpoint, "split": args.split, "overlays": args.overlays}, args.out)
    net = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data).get(args.split)
    if not samples:
        raise DataError(f"{args.data} has no {args.split}-* samples")
    score, per_class = evaluate(net, samples)
    lines = [f"mdsc={score:.8g}"] + [f"dsc_{c}={v:.8g}" for c, v in enumerate(per_class, 1)]
    print(" ".join(lines))
    (args.out / "eval.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.overlays:
        chosen = samples[: args.overlays]
        images, labels = stack(chosen)
        preds = predict(net, images)
        (args.out / "overlays").mkdir(exist_ok=True)
        for s, img, pred, gt in zip(chosen, images, preds, labels):
            emit_overlay(img, pred, gt, args.out / "overlays" / f"{s.sample_id}.png")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _echo({"names": ",".join(args.only) if args.only else "all"}, args.out)
    results = gradcheck.run_suite(args.only)
    if args.only and len(results) != len(args.only):
        known = [name for name, _, _ in gradcheck.SUITE]
        raise ConfigError(f"unknown check in {args.only}; choose from {known}")
    lines = [f"{r.name:<24} max_rel_err={r.error:.3e} tol={r.tolerance:.0e} {'ok' if r.ok else 'FAIL'}" for r in results]
    print("\n".join(lines))
    if args.out is not None:
        (args.out / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK if all(r.ok for r in results) else EXIT_INTERNAL


def _throughput(fn, x, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(x)
        best = min(best, time.perf_counter() - start)
    return x.size / best


def cmd_bench(args) -> int:
    _echo({"seed": args.seed, "repeats": args.repeats, "size": args.size}, args.out)
    x = Rng(args.seed).uniform((2, 8, args.size, args.size), -1, 1)
    lines = ["kernel     impl       Melem/s"]
    for mode, fast in (("min", ops.min_pool2d), ("max", ops.max_pool2d), ("avg", ops.avg_pool2d)):
        lines.append(f"{mode:<10} {'numpy':<10} {_throughput(lambda t: fast(t, 2), x, args.repeats) / 1e6:8.2f}")
        lines.append(f"{mode:<10} {'naive':<10} {_throughput(lambda t: naive_pool(t, 2, mode), x, 1) / 1e6:8.2f}")
    shape = (1, 1, 64, 64)
    base = NetConfig(num_hpd=0)
    lines += ["", f"variant    params     FLOPs@{'x'.join(map(str, shape))}  params_ratio  flops_ratio"]
    p0, f0 = count_params(build_net(base, 0)), count_flops(base, shape)
    for k in range(base.depth + 1):
        cfg = NetConfig(num_hpd=k)
        p, f = count_params(build_net(cfg, 0)), count_flops(cfg, shape)
        lines.append(f"{'hpd=' + str(k):<10} {p:<10} {f:<17} {p / p0:<13.4f} {f / f0:.4f}")
    print("\n".join(lines))
    (args.out / "bench.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_ablate(args) -> int:
    keys = {k: v for k, v in {**_NET_KEYS, **_TRAIN_KEYS}.items() if k not in ("num_hpd", "downsamplers")}
    values = _resolve(args, keys)
    try:
        sweep = [int(v) for v in args.num_hpd.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--num-hpd expects a comma list of integers, got {args.num_hpd!r}") from exc
    net_cfg = _net_config({**values, "num_hpd": 0, "downsamplers": None})
    train_cfg = _train_config(values)
    _echo({"data": args.data, "num_hpd": sweep, **values}, args.out)
    splits = _load_splits(args.data)
    if not splits.get("val"):
        raise DataError(f"{args.data} has no val-* samples to score the sweep")
    rows = ablate(sweep, net_cfg, train_cfg, splits["train"], splits["val"],
                  on_row=lambda r: print(f"num_hpd={r.num_hpd} mdsc={r.mdsc:.8g} final_loss={r.final_loss:.8g}"))
    (args.out / "ablation.tsv").write_text(ablation_tsv(rows), encoding="utf-8")
    (args.out / "ablation.txt").write_text(ablation_text(rows), encoding="utf-8")
    print(ablation_text(rows), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hpdseg", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    _add_common(p)
    _add_keys(p, _GEN_KEYS)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a mini UNet; writes metrics.log and checkpoint/")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory from gen-data")
    _add_keys(p, {**_NET_KEYS, **_TRAIN_KEYS})
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint; optional overlay PNGs")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory from train")
    p.add_argument("--split", default="val", help="sample id prefix to score (default val)")
    p.add_argument("--overlays", type=int, default=0, help="write contour overlays for the first N samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _add_common(p, out_required=False)
    p.add_argument("--only", nargs="+", metavar="NAME", help="run only these checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="pooling throughput and params/FLOPs of maxpool vs HPD nets")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0, help="input seed (default 0)")
    p.add_argument("--repeats", type=int, default=5, help="timed repeats, best kept (default 5)")
    p.add_argument("--size", type=int, default=32, help="benchmark input height and width (default 32)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train one net per HPD count; writes ablation.tsv and ablation.txt")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory with train and val samples")
    p.add_argument("--num-hpd", default="0,1,2,3", help="comma list of HPD counts (default 0,1,2,3)")
    _add_keys(p, {k: v for k, v in {**_NET_KEYS, **_TRAIN_KEYS}.items() if k not in ("num_hpd", "downsamplers")})
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (HpdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FloatingPointError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
