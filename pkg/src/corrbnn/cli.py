"""Command line entry point: train, eval, verify, and boxdata subcommands.

All outputs are plot-ready CSV files; rendering is left to external tools.
Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import net as N
from . import predict, verify
from .config import Config, ConfigError, build_network, parse_config, train_config
from .data import (
    Dataset,
    first_k_per_class,
    load_cifar10_bin,
    load_mnist_idx,
    synthetic_blobs,
    synthetic_digits,
)
from .rng import KeyedRNG

USAGE_ERROR = 2
VERIFY_FAILURE = 1


def data_dir(cfg: Config) -> Path:
    """Data directory; the CORRBNN_DATA_DIR environment variable wins over
    the config."""
    env = os.environ.get("CORRBNN_DATA_DIR")
    return Path(env if env else cfg.data.get("data_dir", "data"))


def load_datasets(cfg: Config) -> tuple[Dataset, Dataset]:
    """(train, test) pair for the config's dataset."""
    name = cfg.data.get("dataset", "blobs")
    seed = cfg.train.get("seed", 1)
    if name == "mnist":
        root = data_dir(cfg)
        train = load_mnist_idx(root / "train-images-idx3-ubyte",
                               root / "train-labels-idx1-ubyte")
        test = load_mnist_idx(root / "t10k-images-idx3-ubyte",
                              root / "t10k-labels-idx1-ubyte")
    elif name == "cifar10":
        root = data_dir(cfg)
        train = load_cifar10_bin([root / f"data_batch_{i}.bin" for i in range(1, 6)])
        test = load_cifar10_bin([root / "test_batch.bin"])
    elif name == "digits":
        train_count = cfg.data.get("train_count", 10000)
        test_count = cfg.data.get("test_count", 2000)
        both = synthetic_digits(train_count, test_count, seed)
        train = both.subset(np.arange(train_count))
        test = both.subset(np.arange(train_count, train_count + test_count))
    elif name == "blobs":
        classes = cfg.data.get("classes", 2)
        per_class = cfg.data.get("per_class", 200)
        dims = cfg.data.get("dims", 2)
        sep = cfg.data.get("separation", 6.0)
        # one generation pass so train and test share the same class centers;
        # the generator shuffles, so a head/tail split is a random split
        test_per = max(per_class // 4, 1)
        both = synthetic_blobs(classes, per_class + test_per, dims, sep, seed)
        split = classes * per_class
        train = both.subset(np.arange(split))
        test = both.subset(np.arange(split, len(both)))
    else:
        raise ConfigError(f"unknown dataset {name!r}")
    if "train_per_class" in cfg.data:
        train = first_k_per_class(train, cfg.data["train_per_class"])
    if "test_per_class" in cfg.data:
        test = first_k_per_class(test, cfg.data["test_per_class"])
    return train, test


def cmd_train(args) -> int:
    path = Path(args.config)
    try:
        cfg = parse_config(path.read_text())
    except ConfigError as exc:
        print(f"config error in {path}: {exc}", file=sys.stderr)
        return USAGE_ERROR
    run_id = cfg.train.get("run_id", path.stem)
    out_dir = Path(args.out_dir or cfg.train.get("out_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)

    tcfg = train_config(cfg)
    train_set, test_set = load_datasets(cfg)
    network = build_network(cfg)

    log_path = out_dir / f"{run_id}_train_log.csv"
    with open(log_path, "w") as log:
        log.write("iteration,lr,loss,approx_test_error\n")

        def hook(step, lr, loss, err):
            log.write(f"{step},{lr!r},{loss!r},{err!r}\n")
            if not args.quiet:
                print(f"iter {step}  lr {lr:.5g}  loss {loss:.5g}  "
                      f"test_err {err:.4f}")

        result = N.train(network, train_set, tcfg, test_set, log_hook=hook)

    ckpt_path = out_dir / f"{run_id}.ckpt"
    N.save_checkpoint(ckpt_path, network, result.final_iteration, tcfg.seed,
                      result.velocity)
    print(f"wrote {ckpt_path} and {log_path}")
    return 0


def _load_net(ckpt_path):
    entries = N.load_checkpoint(ckpt_path)
    return N.restore_network(entries)


def cmd_eval(args) -> int:
    network, _, seed, _ = _load_net(args.checkpoint)
    cfg = parse_config(network.config_text)
    _, test_set = load_datasets(cfg)
    rng = KeyedRNG(args.seed if args.seed is not None else seed)
    result = predict.evaluate(network, test_set, args.draws, args.coverage, rng)
    prefix = Path(args.out_prefix or Path(args.checkpoint).with_suffix(""))

    summary = prefix.parent / f"{prefix.name}_eval_summary.csv"
    with open(summary, "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"error_rate,{result.error_rate!r}\n")
        fh.write(f"draws,{args.draws}\n")
        fh.write(f"coverage,{args.coverage!r}\n")
        for (outcome, certainty), count in sorted(result.table.items()):
            fh.write(f"{outcome}_{certainty},{count}\n")

    reports = prefix.parent / f"{prefix.name}_reports.csv"
    predict.write_report_csv(reports, result, test_set.labels)

    layer_csv = prefix.parent / f"{prefix.name}_layer_params.csv"
    from . import corrgauss
    with open(layer_csv, "w") as fh:
        fh.write("layer,tau_w,tau_b,rho_w,rho_b\n")
        for i, layer in network.bayes_layers():
            fh.write(
                f"{i},"
                f"{corrgauss.reparam_tau(layer.weight_params.delta)!r},"
                f"{corrgauss.reparam_tau(layer.bias_params.delta)!r},"
                f"{corrgauss.reparam_rho(layer.weight_params.gamma)!r},"
                f"{corrgauss.reparam_rho(layer.bias_params.gamma)!r}\n"
            )

    print(f"error rate {result.error_rate:.4f}")
    for key, count in sorted(result.table.items()):
        print(f"  {key[0]:>7} & {key[1]:<9} : {count}")
    print(f"wrote {summary}, {reports}, {layer_csv}")
    return 0


def cmd_verify(args) -> int:
    names = list(verify.SUITES) if args.suite == "all" else [args.suite]
    rows = []
    for name in names:
        rows.extend(verify.SUITES[name](seed=args.seed))
    out = Path(args.output)
    with open(out, "w") as fh:
        fh.write("check,passed,detail\n")
        for name, ok, detail in rows:
            fh.write(f"{name},{int(ok)},{detail}\n")
    failed = [name for name, ok, _ in rows if not ok]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed; wrote {out}")
    for name in failed:
        print(f"FAILED {name}", file=sys.stderr)
    return VERIFY_FAILURE if failed else 0


def cmd_boxdata(args) -> int:
    network, _, seed, _ = _load_net(args.checkpoint)
    cfg = parse_config(network.config_text)
    _, test_set = load_datasets(cfg)
    if not 0 <= args.index < len(test_set):
        print(f"index {args.index} out of range [0, {len(test_set)})",
              file=sys.stderr)
        return USAGE_ERROR
    rng = KeyedRNG(args.seed if args.seed is not None else seed)
    x = test_set.images[args.index : args.index + 1]
    samples = predict.sample_outputs(network, x, args.draws, rng)[:, 0, :]
    out = Path(args.output or f"boxdata_{args.index}.csv")
    with open(out, "w") as fh:
        fh.write(",".join(f"class_{c}" for c in range(samples.shape[1])) + "\n")
        for row in samples:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {out} ({samples.shape[0]} draws, "
          f"true label {int(test_set.labels[args.index])})")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(
        prog="corrbnn",
        description="Bayesian neural nets with tridiagonal-covariance "
                    "posteriors: train, evaluate, verify.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="posterior-predictive evaluation")
    p.add_argument("checkpoint")
    p.add_argument("--draws", type=int, default=200)
    p.add_argument("--coverage", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-prefix", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run numerical verification suites")
    p.add_argument("suite", choices=sorted(verify.SUITES) + ["all"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="verify_report.csv")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("boxdata", help="emit raw predictive draws for one "
                                       "test example")
    p.add_argument("checkpoint")
    p.add_argument("index", type=int)
    p.add_argument("--draws", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(fn=cmd_boxdata)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (N.FormatError, N.CorruptCheckpoint) as exc:
        print(f"bad checkpoint: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
