"""Command-line entry point.

Subcommands: train, gradcheck, bench-params, moments. Exit codes: 0 success,
1 usage/config error, 2 missing input, 3 numerical failure. Config files are
flat ``key = value`` text with ``#`` comments; flags override file values.
All randomness derives from a single --seed.
"""

import argparse
import csv
import os
import sys

import numpy as np

from .attention import AttentionConfig, RESNET50_STAGES, count_params
from .data import DataFormatError, load_cifar10, load_mnist, make_moment_dataset
from .gradcheck import GRADCHECK_OPS, run_op_gradcheck
from .models import build, save
from .moments import check_bound, moments_of
from .train import TrainConfig, TrainingDiverged, evaluate, train, write_metrics_csv
from .models import mini_cnn_spec, mini_resnet_spec

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING_INPUT = 2
EXIT_NUMERICAL = 3

_TRAIN_KEYS = {"lr": float, "momentum": float, "weight_decay": float,
               "epochs": int, "batch_size": int, "lr_decay": float,
               "flip_prob": float, "seed": int}
_OTHER_KEYS = {"attn": str, "kernel": int, "arch": str, "dataset": str,
               "data_dir": str, "train_count": int, "eval_count": int,
               "lr_steps": str, "out": str}


def parse_config_file(path):
    """Flat key = value config with # comments; unknown keys rejected."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key in _TRAIN_KEYS:
                values[key] = _TRAIN_KEYS[key](val)
            elif key in _OTHER_KEYS:
                values[key] = _OTHER_KEYS[key](val)
            else:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    return values


def _attention_config(attn, kernel):
    if attn in ("none", "se", "eca") or attn.startswith("mca-"):
        return AttentionConfig(variant=attn, kernel_size=kernel)
    raise ValueError(f"unknown attention variant {attn!r}")


def _load_dataset(name, data_dir, train_count, eval_count, seed):
    if name == "synthetic":
        return (make_moment_dataset(train_count, seed=seed * 7 + 1),
                make_moment_dataset(eval_count, seed=seed * 7 + 2))
    if name == "cifar10":
        paths = sorted(
            os.path.join(data_dir, f) for f in os.listdir(data_dir)
            if f.startswith("data_batch") and f.endswith(".bin"))
        if not paths:
            raise FileNotFoundError(f"no CIFAR-10 batch files under {data_dir}")
        full = load_cifar10(paths)
        test_path = os.path.join(data_dir, "test_batch.bin")
        test = load_cifar10(test_path) if os.path.exists(test_path) else full
        return full.subset(train_count, seed=seed), test.subset(eval_count, seed=seed + 1)
    if name == "mnist":
        return (load_mnist(os.path.join(data_dir, "train-images-idx3-ubyte"),
                           os.path.join(data_dir, "train-labels-idx1-ubyte")).subset(train_count, seed=seed),
                load_mnist(os.path.join(data_dir, "t10k-images-idx3-ubyte"),
                           os.path.join(data_dir, "t10k-labels-idx1-ubyte")).subset(eval_count, seed=seed + 1))
    raise ValueError(f"unknown dataset {name!r}")


def cmd_train(args):
    cfgfile = parse_config_file(args.config) if args.config else {}

    def pick(key, default):
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            return flag
        return cfgfile.get(key, default)

    attn = pick("attn", "none")
    kernel = pick("kernel", None)
    if kernel is not None and kernel % 2 == 0:
        print(f"error: channel kernel size must be odd, got {kernel}", file=sys.stderr)
        return EXIT_USAGE
    attention = _attention_config(attn, kernel)
    arch = pick("arch", "mini-resnet")
    in_ch = 1 if pick("dataset", "synthetic") == "mnist" else 3
    if arch == "mini-resnet":
        spec = mini_resnet_spec(attention=attention, norm="batchnorm")
    elif arch == "mini-cnn":
        spec = mini_cnn_spec(attention=attention, norm="batchnorm")
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    spec.in_channels = in_ch

    lr_steps = pick("lr_steps", "6,8")
    tcfg = TrainConfig(
        lr=pick("lr", 0.05), momentum=pick("momentum", 0.9),
        weight_decay=pick("weight_decay", 1e-4), epochs=pick("epochs", 10),
        batch_size=pick("batch_size", 128),
        lr_steps=tuple(int(s) for s in str(lr_steps).split(",") if s),
        lr_decay=pick("lr_decay", 0.1), flip_prob=pick("flip_prob", 0.5),
        seed=pick("seed", 0))

    train_set, eval_set = _load_dataset(
        pick("dataset", "synthetic"), pick("data_dir", "data"),
        pick("train_count", 10000), pick("eval_count", 2000), tcfg.seed)

    out_dir = pick("out", "runs")
    os.makedirs(out_dir, exist_ok=True)
    model = build(spec, seed=tcfg.seed)
    records = train(model, train_set, tcfg, eval_dataset=eval_set, log=print)
    tag = f"{attn}-seed{tcfg.seed}"
    save(model, os.path.join(out_dir, f"{tag}.ckpt"))
    write_metrics_csv(os.path.join(out_dir, f"{tag}.csv"), records)
    final = evaluate(model, eval_set)
    print(f"final: top1 {final.top1:.2f} top5 {final.top5:.2f} "
          f"params {model.param_count()} (attention {model.param_count(attention_only=True)})")
    return EXIT_OK


def cmd_gradcheck(args):
    ops = list(GRADCHECK_OPS) if args.op == "all" else [args.op]
    if any(op not in GRADCHECK_OPS for op in ops):
        print(f"error: unknown op {args.op!r}; choose from {', '.join(GRADCHECK_OPS)} or all",
              file=sys.stderr)
        return EXIT_USAGE
    ok = True
    for op in ops:
        err, tol = run_op_gradcheck(op, trials=args.trials, seed=args.seed)
        status = "ok" if err <= tol else "FAIL"
        print(f"{op:12s} max rel err {err:.3e}  (tol {tol:.0e})  {status}")
        ok = ok and err <= tol
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_bench_params(args):
    if args.arch == "resnet50-spec":
        stages = RESNET50_STAGES
    elif args.arch == "mini":
        stages = tuple((n, c) for n, c, _ in mini_resnet_spec().stages)
    else:
        print(f"error: unknown arch {args.arch!r}", file=sys.stderr)
        return EXIT_USAGE
    if args.attn == "none":
        print("attention none: 0 extra parameters")
        return EXIT_OK
    cfg = _attention_config(args.attn, args.kernel)
    report = count_params(stages, cfg)
    print(f"variant {report.variant}: counted {report.counted} attention parameters")
    if cfg.variant == "se":
        print(f"  closed form (bias-free, r={cfg.reduction}): {report.formula_se}")
        delta = report.counted - report.formula_se
    elif cfg.variant == "eca":
        print(f"  closed form: {report.formula_eca}")
        delta = report.counted - report.formula_eca
    else:
        print(f"  closed-form affine term (2 per channel per block): {report.formula_affine}")
        print(f"  closed-form total incl. kernel and moment weights: {report.formula_total}")
        delta = report.counted - report.formula_total
    print(f"  delta vs closed form: {delta:+d}")
    return EXIT_OK


def cmd_moments(args):
    try:
        with open(args.input, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    if not rows:
        print("error: empty CSV", file=sys.stderr)
        return EXIT_USAGE
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        print("error: ragged CSV (rows of differing width)", file=sys.stderr)
        return EXIT_USAGE
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError as e:
        print(f"error: non-numeric CSV value: {e}", file=sys.stderr)
        return EXIT_USAGE
    for col in range(data.shape[1]):
        samples = data[:, col]
        vals = [moments_of(samples, k) for k in (1, 2, 3)]
        print(f"column {col}: M1={vals[0]:.6g} M2={vals[1]:.6g} M3={vals[2]:.6g}")
        if args.check_bound:
            lo, hi = samples.min(), samples.max()
            a, b = (0.0, 1.0) if 0.0 <= lo and hi <= 1.0 else (lo, hi if hi > lo else lo + 1.0)
            for k in (args.k,) if args.k else (1, 2, 3):
                holds, margin = check_bound(samples, k, a=a, b=b)
                word = "holds" if holds else "VIOLATED"
                print(f"  bound k={k} on [{a:g},{b:g}]: {word} (margin {margin:.6g})")
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mca",
        description="Moment channel attention: training, verification, and diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a desk-scale model and write artifacts")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--attn", choices=["none", "se", "eca", "mca-e", "mca-s", "mca-triple",
                                      "mca-mono1", "mca-mono2", "mca-mono3"])
    p.add_argument("--kernel", type=int, help="channel kernel size (odd)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dataset", choices=["synthetic", "cifar10", "mnist"])
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--op", default="all")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench-params", help="attention parameter accounting")
    p.add_argument("--arch", default="resnet50-spec", choices=["mini", "resnet50-spec"])
    p.add_argument("--attn", default="mca-e")
    p.add_argument("--kernel", type=int, default=None)
    p.set_defaults(fn=cmd_bench_params)

    p = sub.add_parser("moments", help="per-column moment diagnostics for a CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--check-bound", action="store_true", dest="check_bound")
    p.add_argument("--k", type=int, choices=[1, 2, 3])
    p.set_defaults(fn=cmd_moments)

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: missing input: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except DataFormatError as e:
        print(f"error: malformed input: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
