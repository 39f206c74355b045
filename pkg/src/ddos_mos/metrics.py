"""MSE / LCC / SRCC / KTAU at utterance and system level."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats

REPORT_KEYS = ("utt.mse", "utt.lcc", "utt.srcc", "utt.ktau",
               "sys.mse", "sys.lcc", "sys.srcc", "sys.ktau", "n_utt", "n_sys")
PREDICTION_HEADER = ["utterance_id", "system_id", "true_mos", "pred_mos"]


class UndefinedCorrelation(ValueError):
    pass


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise ValueError(f"need equal-length non-empty vectors, got {x.shape} and {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx < 1e-24 * max(1.0, float(np.dot(x, x))) or syy < 1e-24 * max(1.0, float(np.dot(y, y))):
        raise UndefinedCorrelation("undefined correlation: zero variance")
    r = float(np.dot(dx, dy)) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    return stats.rankdata(np.asarray(x, dtype=np.float64), method="average")


def spearman(x, y) -> float:
    x, y = _pair(x, y)
    return pearson(ranks(x), ranks(y))


def kendall_tau(x, y) -> float:
    """Tie-corrected Kendall tau-b."""
    x, y = _pair(x, y)
    if x.size < 2:
        raise ValueError("kendall_tau needs at least two pairs")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelation("undefined correlation: all values tied")
    return float(stats.kendalltau(x, y, variant="b").statistic)


def system_aggregate(preds, targets, system_ids):
    """Per-system means of predictions and targets, ordered by system id."""
    preds, targets = _pair(preds, targets)
    system_ids = np.asarray(system_ids)
    if system_ids.shape != preds.shape:
        raise ValueError("every utterance needs a system id")
    names, inverse = np.unique(system_ids, return_inverse=True)
    counts = np.bincount(inverse)
    p = np.bincount(inverse, weights=preds) / counts
    t = np.bincount(inverse, weights=targets) / counts
    return p, t, names


@dataclass(frozen=True)
class LevelMetrics:
    mse: float
    lcc: float
    srcc: float
    ktau: float
    n: int


def level_metrics(preds, targets) -> LevelMetrics:
    return LevelMetrics(mse(preds, targets), pearson(preds, targets), spearman(preds, targets),
                        kendall_tau(preds, targets), len(preds))


@dataclass(frozen=True)
class MetricsReport:
    utterance: LevelMetrics
    system: LevelMetrics

    def as_dict(self) -> dict:
        u, s = self.utterance, self.system
        return {"utt.mse": u.mse, "utt.lcc": u.lcc, "utt.srcc": u.srcc, "utt.ktau": u.ktau,
                "sys.mse": s.mse, "sys.lcc": s.lcc, "sys.srcc": s.srcc, "sys.ktau": s.ktau,
                "n_utt": u.n, "n_sys": s.n}


def metrics_from_predictions(preds, targets, system_ids) -> MetricsReport:
    sp, st, _ = system_aggregate(preds, targets, system_ids)
    return MetricsReport(level_metrics(preds, targets), level_metrics(sp, st))


def evaluate(corpus, predictor) -> MetricsReport:
    """Score ``predictor`` against stored MOS.

    ``predictor`` maps the corpus to one predicted MOS per utterance, in
    corpus order.
    """
    preds = np.asarray(predictor(corpus), dtype=np.float64)
    targets = [u.mos for u in corpus.utterances]
    return metrics_from_predictions(preds, targets, [u.system_id for u in corpus.utterances])


# ---------------------------------------------------------------- documents

def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and not np.isfinite(v):
        return str(v)
    return repr(float(v))


def write_report(path, values: dict) -> None:
    """Flat ``key=value`` document, one entry per line in insertion order."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in values.items():
            fh.write(f"{k}={v if isinstance(v, str) else format_value(v)}\n")


def read_report(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            try:
                out[key] = int(value) if key.startswith("n_") else float(value)
            except ValueError:
                out[key] = value
    return out


def write_predictions(path, corpus, preds) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for u, p in zip(corpus.utterances, preds):
            w.writerow([u.utterance_id, u.system_id, repr(float(u.mos)), repr(float(p))])


def read_predictions(path):
    """Returns (system ids, true mos, predictions)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return ([r["system_id"] for r in rows],
            np.array([float(r["true_mos"]) for r in rows]),
            np.array([float(r["pred_mos"]) for r in rows]))


def aggregate_reports(docs, how: str = "mean") -> dict:
    """Combine per-seed report documents key by key with the mean (default) or median.

    Only numeric entries shared by every document are combined.
    """
    docs = list(docs)
    if not docs:
        raise ValueError("no reports to aggregate")
    reduce = {"mean": np.mean, "median": np.median}.get(how)
    if reduce is None:
        raise ValueError(f"unknown aggregation {how!r}")
    keys = [k for k, v in docs[0].items()
            if isinstance(v, (int, float)) and all(isinstance(d.get(k), (int, float)) for d in docs)]
    return {k: float(reduce([d[k] for d in docs])) for k in keys}
