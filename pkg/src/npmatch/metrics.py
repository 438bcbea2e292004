"""Accuracy, binned calibration errors, class-wise tables and timing."""

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from . import kernels
from .npmodel import PredictionBatch, backbone_forward, init_params


def _probs(preds):
    if isinstance(preds, PredictionBatch):
        return preds.probs
    return np.atleast_2d(np.asarray(preds, dtype=np.float64))


def error_rate(preds, labels):
    probs = _probs(preds)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty prediction set")
    return float(np.mean(probs.argmax(axis=1) != labels))


def accuracy(preds, labels):
    return 1.0 - error_rate(preds, labels)


@dataclass
class CalibrationReport:
    bins: list  # (count, mean score, accuracy or error) per bin
    uce: float = float("nan")
    ece: float = float("nan")
    n_bins: int = 15


def bin_index(scores, n_bins):
    """Bin i covers (i/n, (i+1)/n]; a score of exactly 0 goes to bin 0."""
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.searchsorted(edges, scores, side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def _binned_gap(scores, target, n_bins):
    """sum_i |B_i|/N * |mean target(B_i) - mean score(B_i)| and the bin table.

    Sums use ``math.fsum`` (correctly rounded), so the value does not depend
    on sample order.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    n = len(scores)
    if n == 0:
        raise ValueError("empty prediction set")
    idx = bin_index(scores, n_bins)
    gaps = []
    table = []
    for b in range(n_bins):
        members = idx == b
        count = int(members.sum())
        if count == 0:
            table.append((0, 0.0, 0.0))
            continue
        mean_score = math.fsum(scores[members]) / count
        mean_target = math.fsum(target[members]) / count
        table.append((count, mean_score, mean_target))
        gaps.append(count / n * abs(mean_target - mean_score))
    return math.fsum(gaps), table


def normalized_uncertainty(probs):
    return kernels.row_entropy(probs) / np.log(probs.shape[1])


def expected_uce(preds, labels, n_bins=15):
    """Uncertainty calibration error on entropy / ln C against the error indicator."""
    probs = _probs(preds)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty prediction set")
    wrong = (probs.argmax(axis=1) != labels).astype(np.float64)
    uce, table = _binned_gap(normalized_uncertainty(probs), wrong, n_bins)
    return CalibrationReport(table, uce=uce, n_bins=n_bins)


def expected_ece(preds, labels, n_bins=15):
    probs = _probs(preds)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty prediction set")
    right = (probs.argmax(axis=1) == labels).astype(np.float64)
    ece, table = _binned_gap(probs.max(axis=1), right, n_bins)
    return CalibrationReport(table, ece=ece, n_bins=n_bins)


def classwise_uncertainty(preds, labels):
    """Rows (class, count, mean entropy in nats, accuracy) for classes present."""
    probs = _probs(preds)
    labels = np.asarray(labels)
    u = kernels.row_entropy(probs)
    correct = probs.argmax(axis=1) == labels
    rows = []
    for c in np.unique(labels):
        m = labels == c
        rows.append({"class": int(c), "count": int(m.sum()),
                     "mean_uncertainty": float(u[m].mean()),
                     "accuracy": float(correct[m].mean())})
    return rows


# --------------------------------------------------------- dropout baseline


class DropoutBaseline:
    """Backbone + dropout + linear softmax classifier.

    Uncertainty comes from T full stochastic forward passes.
    """

    def __init__(self, cfg, p=0.3, seed=0, params=None):
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.cfg = cfg
        self.p = p
        if params is None:
            params = {k: v for k, v in init_params(cfg, seed).items() if k.startswith("bb.")}
            rng = np.random.default_rng([seed, 1])
            params["head.W"] = dc.Tensor(
                rng.normal(0.0, np.sqrt(1.0 / cfg.feature_dim),
                           size=(cfg.feature_dim, cfg.n_classes)),
                requires_grad=True, name="head.W")
            params["head.b"] = dc.Tensor(np.zeros((1, cfg.n_classes)), requires_grad=True,
                                         name="head.b")
        self.params = params

    def logits(self, x, rng):
        h = backbone_forward(x, self.params, self.cfg)
        if self.p > 0.0 and rng is not None:
            keep = rng.random(h.shape) >= self.p
            h = h * (keep / (1.0 - self.p))
        return h @ self.params["head.W"] + self.params["head.b"]

    def forward(self, x, rng):
        """One stochastic pass -> class probabilities (N, C)."""
        with dc.no_grad():
            return kernels.softmax_rows(self.logits(x, rng).data)


def mc_dropout_baseline_predict(model, x, T, seed):
    """Average of T full forward passes with dropout active."""
    if T < 1:
        raise ValueError("T must be positive")
    rng = np.random.default_rng(seed)
    members = np.stack([model.forward(x, rng) for _ in range(T)])
    return PredictionBatch(members)


def np_time_predict(model, x, T, seed=0):
    """NP inference: one backbone pass, T decoder passes."""
    with dc.no_grad():
        feats = model.features(x).data
    return model.predict(feats, T=T, seed=seed)


def timing_benchmark(np_model, baseline, x, t_values=range(1, 11), repeats=20, seed=0):
    """Median wall-clock seconds per T for both models.

    Returns a dict with ``t_values``, ``np`` and ``baseline`` medians and the
    per-repeat arrays ``np_runs`` / ``baseline_runs`` of shape
    (repeats, len(t_values)).
    """
    t_values = list(t_values)
    np_runs = np.zeros((repeats, len(t_values)))
    bl_runs = np.zeros((repeats, len(t_values)))
    # one untimed warm-up of each path
    np_time_predict(np_model, x, 1, seed)
    mc_dropout_baseline_predict(baseline, x, 1, seed)
    for r in range(repeats):
        for j, T in enumerate(t_values):
            t0 = time.perf_counter()
            np_time_predict(np_model, x, T, seed)
            t1 = time.perf_counter()
            mc_dropout_baseline_predict(baseline, x, T, seed)
            t2 = time.perf_counter()
            np_runs[r, j] = t1 - t0
            bl_runs[r, j] = t2 - t1
    return {
        "t_values": t_values,
        "np": np.median(np_runs, axis=0),
        "baseline": np.median(bl_runs, axis=0),
        "np_runs": np_runs,
        "baseline_runs": bl_runs,
    }


# ----------------------------------------------------------------- output


def rows_to_csv(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def timing_rows(table):
    return [{"T": T, "np_seconds": float(a), "baseline_seconds": float(b)}
            for T, a, b in zip(table["t_values"], table["np"], table["baseline"])]


def report_json(report):
    return json.dumps(asdict(report))
