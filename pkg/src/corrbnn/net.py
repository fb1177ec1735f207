"""Network container, mini-batch objective, SGD-with-momentum training loop,
and binary checkpointing.

The training objective is the one-sample mini-batch estimate of the negative
evidence lower bound: mean cross-entropy at a single parameter draw plus
nu * (sum of layer KL divergences).  All randomness flows through keyed
counter-based streams, so a run is a pure function of (seed, config, data).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .corrgauss import PriorSpec
from .rng import KeyedRNG


class FormatError(ValueError):
    """Checkpoint file does not start with the expected magic bytes."""


class CorruptCheckpoint(ValueError):
    """Checkpoint file is truncated or structurally inconsistent."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    iterations: int = 1000
    base_lr: float = 0.01
    schedule: str = "inv"  # "inv" or "fixed"
    lr_gamma: float = 0.0001
    lr_power: float = 0.75
    momentum: float = 0.9
    nu: float | None = None  # defaults to 1/(beta * kl_reduction)
    kappa: float = 50.0
    seed: int = 1
    beta: int = 1  # training-set size
    kl_reduction: float = 1.0
    weight_decay: float = 0.0  # frequentist mode only
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 0 or self.beta < 1:
            raise ValueError("counts must be positive")
        if self.schedule not in ("inv", "fixed"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.nu is None:
            self.nu = 1.0 / (self.beta * self.kl_reduction)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Learning rate under the configured schedule."""
    if config.schedule == "fixed":
        return config.base_lr
    return config.base_lr * (1.0 + config.lr_gamma * iteration) ** (-config.lr_power)


class Network:
    """Ordered stack of layers ending in logits; the loss is softmax
    cross-entropy."""

    def __init__(self, layer_list: list, config_text: str = ""):
        self.layers = layer_list
        self.config_text = config_text

    @property
    def bayesian(self) -> bool:
        return any(l.bayesian for l in self.layers)

    def bayes_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if l.bayesian]

    def prepare_draw(self, rng: KeyedRNG, iteration: int, *, stabilize=True,
                     zero_noise=False):
        """Stabilize and sample every Bayesian layer for one pass."""
        for i, layer in self.bayes_layers():
            if stabilize:
                layer.stabilize(rng.generator(i, "stab", iteration))
            if zero_noise:
                layer.sample_at_mean()
            else:
                layer.sample(
                    rng.normal(layer.weight_params.m.size, i, "w", iteration),
                    rng.normal(layer.bias_params.m.size, i, "b", iteration),
                )

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dlogits: np.ndarray, nu: float, kappa: float):
        grad = dlogits
        for layer in reversed(self.layers):
            if layer.bayesian:
                grad = layer.backward(grad, nu=nu, kappa=kappa)
            else:
                grad = layer.backward(grad)
        return grad

    def kl(self) -> float:
        return sum(l.kl() for _, l in self.bayes_layers())

    # -- parameter state as a flat dict -------------------------------------

    def state_dict(self) -> dict:
        state = {}
        for i, layer in enumerate(self.layers):
            for name in layer.param_names():
                state[f"layer{i}/{name}"] = np.asarray(layer.get_param(name),
                                                       dtype=np.float64)
            if layer.bayesian:
                state[f"layer{i}/prior_w_mu"] = layer.weight_prior.mu
                state[f"layer{i}/prior_w_zeta"] = np.float64(layer.weight_prior.zeta)
                state[f"layer{i}/prior_b_mu"] = layer.bias_prior.mu
                state[f"layer{i}/prior_b_zeta"] = np.float64(layer.bias_prior.zeta)
        return state

    def load_state(self, state: dict):
        for i, layer in enumerate(self.layers):
            for name in layer.param_names():
                key = f"layer{i}/{name}"
                value = state[key]
                layer.set_param(name, value if value.ndim else float(value))
            if layer.bayesian:
                layer.weight_prior = PriorSpec(
                    state[f"layer{i}/prior_w_mu"],
                    float(state[f"layer{i}/prior_w_zeta"]),
                )
                layer.bias_prior = PriorSpec(
                    state[f"layer{i}/prior_b_mu"],
                    float(state[f"layer{i}/prior_b_zeta"]),
                )


def lvi_minibatch_loss(net: Network, xb: np.ndarray, yb: np.ndarray, nu: float,
                       kappa: float) -> tuple[float, float, float]:
    """Objective at the already-sampled parameters; fills layer gradients.

    Returns (total loss, data term, KL sum); total = data + nu * KL.
    """
    logits = net.forward(xb, train=True)
    data_term, dlogits = L.softmax_cross_entropy(logits, yb)
    kl_sum = net.kl() if net.bayesian else 0.0
    net.backward(dlogits, nu, kappa)
    return data_term + nu * kl_sum, data_term, kl_sum


def sgd_momentum_step(net: Network, velocity: dict, lr: float, momentum: float,
                      weight_decay: float = 0.0):
    """v <- momentum * v - lr * g;  p <- p + v, uniformly over all params."""
    for i, layer in enumerate(net.layers):
        for name in layer.param_names():
            g = layer.grads[name]
            if weight_decay and not layer.bayesian:
                g = g + weight_decay * layer.get_param(name)
            key = f"layer{i}/{name}"
            v = velocity.get(key, 0.0)
            v = momentum * v - lr * g
            velocity[key] = v
            layer.add_to_param(name, v)


@dataclass
class TrainResult:
    log: list = field(default_factory=list)  # rows (iteration, lr, loss, test_err)
    final_iteration: int = 0
    velocity: dict = field(default_factory=dict)


def train(net: Network, dataset, config: TrainConfig, test_set=None,
          start_iteration: int = 0, velocity: dict | None = None,
          log_hook=None) -> TrainResult:
    """Run the stabilize -> sample -> forward -> backward -> step loop.

    ``dataset``/``test_set`` are data.Dataset objects.  Monitoring uses one
    predictive draw per test example, which is cheap but rough; final
    evaluation should use predict.evaluate with many draws.
    """
    from .data import minibatches

    rng = KeyedRNG(config.seed)
    velocity = {} if velocity is None else velocity
    result = TrainResult()
    if dataset.images.shape[0] == 0:
        raise ValueError("empty dataset")

    # hand dropout layers their own keyed stream
    for i, layer in enumerate(net.layers):
        if isinstance(layer, L.Dropout):
            gen = rng.generator(i, "dropout")
            layer.rng_uniform = lambda shape, gen=gen: gen.random(shape)

    batch_iter = minibatches(dataset, config.batch_size, config.seed)
    flat_input = dataset.images.reshape(dataset.images.shape[0], -1)
    needs_flat = isinstance(net.layers[0], (L.Dense, L.BayesDense))

    for step in range(start_iteration, config.iterations):
        idx = next(batch_iter)
        xb = flat_input[idx] if needs_flat else dataset.images[idx]
        yb = dataset.labels[idx]
        if net.bayesian:
            net.prepare_draw(rng, step)
        loss, data_term, kl_sum = lvi_minibatch_loss(
            net, xb, yb, config.nu if net.bayesian else 0.0, config.kappa
        )
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss {loss} at iteration {step} "
                f"(data={data_term}, kl={kl_sum})"
            )
        lr = lr_at(step, config)
        sgd_momentum_step(net, velocity, lr, config.momentum,
                          config.weight_decay)
        if step % config.log_every == 0 or step == config.iterations - 1:
            test_err = np.nan
            if test_set is not None:
                test_err = _quick_test_error(net, test_set, rng, step)
            result.log.append((step, lr, float(loss), float(test_err)))
            if log_hook:
                log_hook(step, lr, float(loss), float(test_err))
    result.final_iteration = config.iterations
    result.velocity = velocity
    return result


def _quick_test_error(net: Network, test_set, rng: KeyedRNG, iteration: int,
                      chunk: int = 1000) -> float:
    """Approximate test error from a single predictive draw per image."""
    if net.bayesian:
        net.prepare_draw(rng, iteration, stabilize=False)
    images = test_set.images
    if isinstance(net.layers[0], (L.Dense, L.BayesDense)):
        images = images.reshape(images.shape[0], -1)
    wrong = 0
    for lo in range(0, images.shape[0], chunk):
        logits = net.forward(images[lo : lo + chunk], train=False)
        wrong += int(np.sum(logits.argmax(axis=1) != test_set.labels[lo : lo + chunk]))
    return wrong / images.shape[0]


# ---------------------------------------------------------------------------
# checkpoint format: magic "CBNN", version, named float64/int64 tensors


_MAGIC = b"CBNN"
_VERSION = 1


def _dump_entries(entries: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack("<I", len(entries)))
    for name, value in entries.items():
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        if isinstance(value, bytes):
            buf.write(b"s")
            buf.write(struct.pack("<Q", len(value)))
            buf.write(value)
        else:
            arr = np.asarray(value)
            code = b"f" if arr.dtype.kind == "f" else b"i"
            arr = arr.astype("<f8" if code == b"f" else "<i8")
            buf.write(code)
            buf.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                buf.write(struct.pack("<Q", dim))
            buf.write(arr.tobytes())
    return buf.getvalue()


def _read_exact(buf, count):
    data = buf.read(count)
    if len(data) != count:
        raise CorruptCheckpoint("truncated checkpoint")
    return data


def _load_entries(raw: bytes) -> dict:
    buf = io.BytesIO(raw)
    if buf.read(4) != _MAGIC:
        raise FormatError("not a CBNN checkpoint")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != _VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(buf, 2))
        name = _read_exact(buf, name_len).decode()
        code = _read_exact(buf, 1)
        if code == b"s":
            (size,) = struct.unpack("<Q", _read_exact(buf, 8))
            entries[name] = _read_exact(buf, size)
        elif code in (b"f", b"i"):
            (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
            shape = tuple(
                struct.unpack("<Q", _read_exact(buf, 8))[0] for _ in range(ndim)
            )
            n_items = int(np.prod(shape)) if shape else 1
            dtype = "<f8" if code == b"f" else "<i8"
            arr = np.frombuffer(_read_exact(buf, 8 * n_items), dtype=dtype)
            entries[name] = arr.reshape(shape).copy()
        else:
            raise CorruptCheckpoint(f"unknown entry code {code!r}")
    return entries


def save_checkpoint(path, net: Network, iteration: int = 0, seed: int = 0,
                    velocity: dict | None = None):
    entries = {"__config__": net.config_text.encode()}
    entries["__iteration__"] = np.int64(iteration)
    entries["__seed__"] = np.int64(seed)
    for key, value in net.state_dict().items():
        entries[key] = value
    for key, value in (velocity or {}).items():
        entries[f"velocity/{key}"] = np.asarray(value, dtype=np.float64)
    data = _dump_entries(entries)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> dict:
    """Load the raw entry dict; use restore_network to rebuild the model."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return _load_entries(raw)


def restore_network(entries: dict) -> tuple[Network, int, int, dict]:
    """Rebuild (network, iteration, seed, velocity) from checkpoint entries."""
    from .config import build_network, parse_config

    text = entries["__config__"].decode()
    cfg = parse_config(text)
    net = build_network(cfg)
    state = {
        k: v for k, v in entries.items()
        if not k.startswith(("__", "velocity/"))
    }
    net.load_state(state)
    velocity = {
        k[len("velocity/"):]: v for k, v in entries.items()
        if k.startswith("velocity/")
    }
    return net, int(entries["__iteration__"]), int(entries["__seed__"]), velocity
