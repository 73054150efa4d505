"""Scoring rules, discrimination and calibration diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabels, LengthMismatch, NoPositives, SingleClassInput

CLASSES = (1, 2, 3)
EPS = 1e-15


def _check(probs, y):
    probs = np.asarray(probs, dtype=float)
    y = np.asarray(y).astype(int)
    if probs.ndim != 2 or probs.shape[0] != len(y):
        raise LengthMismatch(f"{probs.shape[0] if probs.ndim == 2 else '?'} prob rows vs {len(y)} labels")
    return probs, y


def _onehot(y, k=3):
    return (y[:, None] == np.arange(1, k + 1)[None, :]).astype(float)


def log_loss(probs, y) -> float:
    """Mean negative log probability of the true class (classes coded 1..K)."""
    probs, y = _check(probs, y)
    p_true = probs[np.arange(len(y)), y - 1]
    return float(-np.mean(np.log(np.clip(p_true, EPS, 1.0))))


def brier(probs, y) -> float:
    """Multiclass Brier score, summed over classes (range [0, 2])."""
    probs, y = _check(probs, y)
    return float(np.mean(np.sum((probs - _onehot(y, probs.shape[1])) ** 2, axis=1)))


def entropy_score(probs, base: float = np.e) -> float:
    """Mean Shannon entropy of the predicted distributions."""
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return float(-np.mean(np.sum(terms, axis=1)) / np.log(base))


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    mean_predicted: float
    observed_frequency: float
    count: int


def reliability_bins(probs, y, c: int, n_bins: int = 10) -> list[ReliabilityBin]:
    """Equal-width bins on the predicted probability of class ``c`` (one-vs-rest)."""
    probs, y = _check(probs, y)
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    p = probs[:, c - 1]
    hit = (y == c).astype(float)
    idx = np.minimum((p * n_bins).astype(int), n_bins - 1)
    idx = np.maximum(idx, 0)
    out = []
    for b in range(n_bins):
        mask = idx == b
        n_b = int(mask.sum())
        out.append(ReliabilityBin(
            lo=b / n_bins,
            hi=(b + 1) / n_bins,
            mean_predicted=float(p[mask].mean()) if n_b else float("nan"),
            observed_frequency=float(hit[mask].mean()) if n_b else float("nan"),
            count=n_b,
        ))
    return out


def ece_mce(probs, y, c: int, n_bins: int = 10) -> tuple[float, float]:
    bins = reliability_bins(probs, y, c, n_bins)
    n = sum(b.count for b in bins)
    gaps = [(b.count, abs(b.observed_frequency - b.mean_predicted)) for b in bins if b.count]
    ece = sum(cnt / n * gap for cnt, gap in gaps)
    mce = max(gap for _, gap in gaps)
    return float(ece), float(mce)


def roc_auc(scores, y) -> tuple[list[tuple[float, float]], float]:
    """ROC points from a threshold sweep and the Mann-Whitney AUC (midranks for ties)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(y).astype(bool)
    if len(s) != len(y):
        raise LengthMismatch("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("ROC needs both classes")
    ranks = rankdata(s)
    auc = (ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(~y_sorted)
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s) - 1]
    points = [(0.0, 0.0)] + [(float(fps[i] / n_neg), float(tps[i] / n_pos)) for i in last]
    return points, float(auc)


def aucpr(scores, y) -> float:
    """Average precision: sum of precision times recall increment over distinct thresholds."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(y).astype(bool)
    if len(s) != len(y):
        raise LengthMismatch("scores and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("AUCPR needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s) - 1]
    tps = np.cumsum(y_sorted)[last]
    predicted = last + 1
    precision = tps / predicted
    recall = tps / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def _binary_auc(scores, hit) -> float:
    return roc_auc(scores, hit)[1]


def c_statistic(probs, y, method: str = "ovr") -> float:
    """Concordance of the coupled probabilities.

    ``ovr``: unweighted mean of the one-vs-rest AUCs of classes that occur
    with both outcomes. ``hand_till``: mean pairwise AUC over class pairs.
    """
    probs, y = _check(probs, y)
    present = [c for c in range(1, probs.shape[1] + 1) if np.any(y == c)]
    if len(present) < 2:
        raise DegenerateLabels("c-statistic needs at least two classes")
    if method == "ovr":
        return float(np.mean([_binary_auc(probs[:, c - 1], y == c) for c in present]))
    if method == "hand_till":
        vals = []
        for i, a in enumerate(present):
            for b in present[i + 1:]:
                m = (y == a) | (y == b)
                a_ab = _binary_auc(probs[m, a - 1], y[m] == a)
                a_ba = _binary_auc(probs[m, b - 1], y[m] == b)
                vals.append((a_ab + a_ba) / 2)
        return float(np.mean(vals))
    raise ValueError(f"unknown c-statistic method {method!r}")


@dataclass
class EvaluationReport:
    log_loss: float
    brier: float
    entropy: float
    ece: dict[int, float] = field(default_factory=dict)
    mce: dict[int, float] = field(default_factory=dict)
    auc: dict[int, float] = field(default_factory=dict)
    aucpr: dict[int, float] = field(default_factory=dict)
    c_statistic: float = float("nan")
    reliability: dict[int, list[ReliabilityBin]] = field(default_factory=dict)
    roc: dict[int, list[tuple[float, float]]] = field(default_factory=dict)
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "log_loss": self.log_loss,
            "brier": self.brier,
            "entropy": self.entropy,
            "c_statistic": self.c_statistic,
            "ece": {str(k): v for k, v in self.ece.items()},
            "mce": {str(k): v for k, v in self.mce.items()},
            "auc": {str(k): v for k, v in self.auc.items()},
            "aucpr": {str(k): v for k, v in self.aucpr.items()},
            "reliability": {
                str(k): [vars(b) for b in bins] for k, bins in self.reliability.items()
            },
            "roc": {str(k): [list(p) for p in pts] for k, pts in self.roc.items()},
        }


def evaluate(probs, y, n_bins: int = 10, entropy_base: float = np.e,
             c_method: str = "ovr") -> EvaluationReport:
    probs, y = _check(probs, y)
    rep = EvaluationReport(
        log_loss=log_loss(probs, y),
        brier=brier(probs, y),
        entropy=entropy_score(probs, entropy_base),
        n=len(y),
    )
    for c in CLASSES:
        rep.reliability[c] = reliability_bins(probs, y, c, n_bins)
        rep.ece[c], rep.mce[c] = ece_mce(probs, y, c, n_bins)
        hit = y == c
        if hit.any() and (~hit).any():
            rep.roc[c], rep.auc[c] = roc_auc(probs[:, c - 1], hit)
            rep.aucpr[c] = aucpr(probs[:, c - 1], hit)
    try:
        rep.c_statistic = c_statistic(probs, y, c_method)
    except DegenerateLabels:
        pass
    return rep
