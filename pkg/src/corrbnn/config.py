"""Line-oriented run configuration: ``key = value`` lines grouped in
sections, one ``[layer <kind>]`` section per network layer.

Unknown sections or keys are hard errors with line numbers, and any parsed
config serializes back to a form that parses to an identical structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .corrgauss import PriorSpec
from .net import Network, TrainConfig


class ConfigError(ValueError):
    pass


# allowed keys per section, with parsers
_TRAIN_KEYS = {
    "mode": str,            # bayes | freq
    "batch_size": int,
    "iterations": int,
    "base_lr": float,
    "schedule": str,        # inv | fixed
    "lr_gamma": float,
    "lr_power": float,
    "momentum": float,
    "beta": int,
    "kl_reduction": float,
    "nu": float,
    "kappa": float,
    "seed": int,
    "weight_decay": float,
    "log_every": int,
    "run_id": str,
    "out_dir": str,
}

_DATA_KEYS = {
    "dataset": str,         # mnist | cifar10 | blobs | digits
    "data_dir": str,
    "train_per_class": int,  # first-K-per-class desk-scale subsetting
    "test_per_class": int,
    "classes": int,
    "per_class": int,
    "dims": int,
    "separation": float,
    "train_count": int,
    "test_count": int,
}

_LAYER_KEYS = {
    "dense": {"out": int, "prior_std": float, "bias_prior_std": float,
              "init_tau": float},
    "conv": {"out_channels": int, "kernel": int, "stride": int, "pad": int,
             "prior_std": float, "bias_prior_std": float, "init_tau": float},
    "relu": {},
    "maxpool": {"size": int, "stride": int},
    "dropout": {"rate": float},
}


@dataclass
class Config:
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    layers: list = field(default_factory=list)  # (kind, dict) in order


def parse_config(text: str) -> Config:
    cfg = Config()
    section = None  # ("train",), ("data",), or ("layer", kind, dict)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            head = line[1:-1].strip().split()
            if head == ["train"]:
                section = ("train",)
            elif head == ["data"]:
                section = ("data",)
            elif len(head) == 2 and head[0] == "layer":
                kind = head[1]
                if kind not in _LAYER_KEYS:
                    raise ConfigError(f"line {lineno}: unknown layer kind {kind!r}")
                entry = {}
                cfg.layers.append((kind, entry))
                section = ("layer", kind, entry)
            else:
                raise ConfigError(f"line {lineno}: unknown section {line!r}")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, value = (part.strip() for part in line.split("=", 1))
        if section[0] == "train":
            schema, target = _TRAIN_KEYS, cfg.train
        elif section[0] == "data":
            schema, target = _DATA_KEYS, cfg.data
        else:
            schema, target = _LAYER_KEYS[section[1]], section[2]
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in target:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            target[key] = schema[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}")
    return cfg


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: Config) -> str:
    lines = []
    for name, entries in (("train", cfg.train), ("data", cfg.data)):
        if entries:
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {_fmt(v)}" for k, v in entries.items())
            lines.append("")
    for kind, entries in cfg.layers:
        lines.append(f"[layer {kind}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in entries.items())
        lines.append("")
    return "\n".join(lines)


def train_config(cfg: Config) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        batch_size=t.get("batch_size", 64),
        iterations=t.get("iterations", 1000),
        base_lr=t.get("base_lr", 0.01),
        schedule=t.get("schedule", "inv"),
        lr_gamma=t.get("lr_gamma", 0.0001),
        lr_power=t.get("lr_power", 0.75),
        momentum=t.get("momentum", 0.9),
        nu=t.get("nu"),
        kappa=t.get("kappa", 50.0),
        seed=t.get("seed", 1),
        beta=t.get("beta", 1),
        kl_reduction=t.get("kl_reduction", 1.0),
        weight_decay=t.get("weight_decay", 0.0),
        log_every=t.get("log_every", 50),
    )


def _input_shape(cfg: Config) -> tuple:
    name = cfg.data.get("dataset", "blobs")
    if name in ("mnist", "digits"):
        return (1, 28, 28)
    if name == "cifar10":
        return (3, 32, 32)
    if name == "blobs":
        return (1, 1, cfg.data.get("dims", 2))
    raise ConfigError(f"unknown dataset {name!r}")


def build_network(cfg: Config) -> Network:
    """Instantiate the layer stack described by the config; initialization is
    keyed by the training seed, so identical configs give identical nets."""
    from .rng import KeyedRNG

    bayes = cfg.train.get("mode", "bayes") == "bayes"
    seed = cfg.train.get("seed", 1)
    keyed = KeyedRNG(seed)
    shape = _input_shape(cfg)
    channels, height, width = shape
    flat = None  # not yet flattened
    stack = []
    for index, (kind, entry) in enumerate(cfg.layers):
        rng = keyed.generator("init", index)
        if kind == "dense":
            if flat is None:
                flat = channels * height * width
                stack.append(L.Flatten())
            fan_out = entry["out"]
            if bayes:
                std = entry.get("prior_std", 1.0)
                prior = PriorSpec(np.zeros(flat * fan_out), std)
                bias_prior = PriorSpec(np.zeros(fan_out),
                                       entry.get("bias_prior_std", std))
                stack.append(L.BayesDense(flat, fan_out, rng, prior, bias_prior,
                                          entry.get("init_tau", 0.05)))
            else:
                stack.append(L.Dense(flat, fan_out, rng))
            flat = fan_out
        elif kind == "conv":
            if flat is not None:
                raise ConfigError("conv layer after a dense layer")
            out_c = entry["out_channels"]
            ksize = entry["kernel"]
            stride = entry.get("stride", 1)
            pad = entry.get("pad", 0)
            if bayes:
                std = entry.get("prior_std", 1.0)
                k_weights = out_c * channels * ksize * ksize
                prior = PriorSpec(np.zeros(k_weights), std)
                bias_prior = PriorSpec(np.zeros(out_c),
                                       entry.get("bias_prior_std", std))
                stack.append(L.BayesConv(channels, out_c, ksize, rng, prior,
                                         bias_prior, stride, pad,
                                         entry.get("init_tau", 0.05)))
            else:
                stack.append(L.Conv(channels, out_c, ksize, rng, stride, pad))
            height = (height + 2 * pad - ksize) // stride + 1
            width = (width + 2 * pad - ksize) // stride + 1
            channels = out_c
        elif kind == "relu":
            stack.append(L.ReLU())
        elif kind == "maxpool":
            size = entry.get("size", 2)
            stride = entry.get("stride", size)
            stack.append(L.MaxPool(size, stride))
            height = (height - size) // stride + 1
            width = (width - size) // stride + 1
        elif kind == "dropout":
            stack.append(L.Dropout(entry.get("rate", 0.5)))
    if not stack:
        raise ConfigError("config defines no layers")
    return Network(stack, serialize_config(cfg))
