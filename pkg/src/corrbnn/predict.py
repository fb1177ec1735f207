"""Posterior-predictive estimation, credible intervals, and the
certain/uncertain classification of predictions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from .net import Network
from .rng import KeyedRNG


@dataclass
class PredictiveReport:
    probs: np.ndarray        # (classes,) mean over draws
    intervals: np.ndarray    # (classes, 2) [lo, hi] at the requested coverage
    predicted_class: int
    certain: bool


def _input_view(net: Network, x: np.ndarray) -> np.ndarray:
    if isinstance(net.layers[0], (L.Dense, L.BayesDense)):
        return x.reshape(x.shape[0], -1)
    return x


def sample_outputs(net: Network, x: np.ndarray, n_draws: int, rng: KeyedRNG,
                   tag: str = "predict") -> np.ndarray:
    """(n_draws, batch, classes) softmax outputs, one parameter draw each.

    Draw i uses the keyed stream (layer, group, tag, i), so the result is
    independent of evaluation order or batching.
    """
    x = _input_view(net, x)
    out = np.empty((n_draws, x.shape[0], _class_count(net, x)))
    for i in range(n_draws):
        if net.bayesian:
            net.prepare_draw(rng, (tag, i), stabilize=False)
        out[i] = L.softmax(net.forward(x, train=False))
    return out


def _class_count(net: Network, x) -> int:
    for layer in reversed(net.layers):
        if hasattr(layer, "fan_out"):
            return layer.fan_out
        if hasattr(layer, "w") and layer.w.ndim == 2:
            return layer.w.shape[0]
        if hasattr(layer, "w_shape") and len(layer.w_shape) == 2:
            return layer.w_shape[0]
    raise ValueError("cannot infer class count from the network")


def posterior_predictive(net: Network, x: np.ndarray, n_draws: int,
                         rng: KeyedRNG) -> np.ndarray:
    """Mean softmax output over n_draws independent parameter draws."""
    if n_draws < 1:
        raise ValueError("need at least one draw")
    return sample_outputs(net, x, n_draws, rng).mean(axis=0)


def credible_intervals(samples: np.ndarray, coverage: float) -> np.ndarray:
    """Per-class empirical quantile intervals from an (N, classes) matrix.

    ``coverage`` is the interval mass (0.95 uses the 0.025 and 0.975
    quantiles); quantiles interpolate linearly between order statistics.
    """
    if samples.shape[0] < 2:
        raise ValueError("need at least two samples")
    if not 0.0 < coverage < 1.0:
        raise ValueError("coverage must lie in (0, 1)")
    half = (1.0 - coverage) / 2.0
    lo = np.quantile(samples, half, axis=0, method="linear")
    hi = np.quantile(samples, 1.0 - half, axis=0, method="linear")
    return np.stack([lo, hi], axis=-1)


def certainty_classify(intervals: np.ndarray, predicted_class: int) -> bool:
    """Certain iff the predicted class's interval is strictly above every
    other class's interval (touching endpoints count as overlap)."""
    lo_pred = intervals[predicted_class, 0]
    others = np.delete(np.arange(intervals.shape[0]), predicted_class)
    return bool(np.all(lo_pred > intervals[others, 1]))


@dataclass
class EvalResult:
    error_rate: float
    table: dict  # keys ("correct"|"wrong", "certain"|"uncertain") -> count
    reports: list


def evaluate(net: Network, test_set, n_draws: int, coverage: float,
             rng: KeyedRNG, chunk: int = 500) -> EvalResult:
    """Posterior-predictive evaluation of a whole dataset.

    For a frequentist network the draws collapse to the deterministic forward
    pass, so n_draws = 1 reduces to standard test error.
    """
    table = {(a, b): 0 for a in ("correct", "wrong")
             for b in ("certain", "uncertain")}
    reports = []
    wrong_total = 0
    count = len(test_set)
    for lo_idx in range(0, count, chunk):
        xb = test_set.images[lo_idx : lo_idx + chunk]
        yb = test_set.labels[lo_idx : lo_idx + chunk]
        samples = sample_outputs(net, xb, max(n_draws, 1), rng)
        probs = samples.mean(axis=0)
        preds = probs.argmax(axis=1)
        if n_draws >= 2:
            ivals = credible_intervals(samples.reshape(samples.shape[0], -1),
                                       coverage)
            ivals = ivals.reshape(xb.shape[0], -1, 2)
        else:
            ivals = np.stack([probs, probs], axis=-1)
        for row in range(xb.shape[0]):
            pred = int(preds[row])
            certain = certainty_classify(ivals[row], pred) if n_draws >= 2 else True
            correct = pred == int(yb[row])
            wrong_total += not correct
            table[("correct" if correct else "wrong",
                   "certain" if certain else "uncertain")] += 1
            reports.append(PredictiveReport(probs[row], ivals[row], pred, certain))
    return EvalResult(wrong_total / count, table, reports)


def write_report_csv(path, result: EvalResult, labels: np.ndarray):
    """Per-example CSV: index, true/predicted label, per-class mean and
    interval bounds, certain flag."""
    classes = result.reports[0].probs.size
    header = ["index", "true_label", "predicted_label"]
    header += [f"mean_{c}" for c in range(classes)]
    header += [f"lo_{c}" for c in range(classes)]
    header += [f"hi_{c}" for c in range(classes)]
    header.append("certain")
    lines = [",".join(header)]
    for i, rep in enumerate(result.reports):
        row = [str(i), str(int(labels[i])), str(rep.predicted_class)]
        row += [repr(float(v)) for v in rep.probs]
        row += [repr(float(v)) for v in rep.intervals[:, 0]]
        row += [repr(float(v)) for v in rep.intervals[:, 1]]
        row.append("1" if rep.certain else "0")
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")
