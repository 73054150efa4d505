"""From three pairwise binary scores to one three-class probability vector.

Chain per row: Platt scaling of each pairwise margin, probit rescaling so the
pair's precision-recall cut sits at 0.5, complement within the pair, then
coupling of the pairwise probabilities into normalised class probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .errors import DataError, SingleClassInput, WidthMismatch
from .gbm import GBMModel, predict_margin

PAIRS = ((1, 2), (1, 3), (2, 3))
PROBIT_EPS = 1e-6


@dataclass(frozen=True)
class PlattParams:
    a: float
    b: float
    converged: bool = True
    iterations: int = 0

    def __call__(self, scores) -> np.ndarray:
        return expit(self.a * np.asarray(scores, dtype=float) + self.b)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "converged": self.converged, "iterations": self.iterations}

    @classmethod
    def from_dict(cls, d) -> "PlattParams":
        return cls(float(d["a"]), float(d["b"]), bool(d["converged"]), int(d["iterations"]))


def fit_platt(scores, y, smooth_targets: bool = True, max_iter: int = 100, tol: float = 1e-10,
              a_max: float = 1e6) -> PlattParams:
    """Logistic fit of ``y`` on ``scores`` by damped Newton iterations.

    Targets are Platt's smoothed ``(N+ + 1) / (N+ + 2)`` and ``1 / (N- + 2)``.
    Stops when the gradient norm drops below ``tol * n`` or the Newton
    decrement vanishes; otherwise the best iterate is returned with
    ``converged=False``. ``|a|`` is clamped to ``a_max``. With hard targets
    on perfectly separated scores the likelihood has no finite maximiser,
    so the result is always flagged as not converged.
    """
    f = np.asarray(scores, dtype=float)
    y = np.asarray(y).astype(bool)
    if len(f) != len(y):
        raise DataError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("Platt scaling needs both classes")
    if smooth_targets:
        t = np.where(y, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    else:
        t = y.astype(float)

    def objective(a, b):
        z = a * f + b
        # sum of cross-entropies -t*log(p) - (1-t)*log(1-p), stable form
        return float(np.sum(np.logaddexp(0.0, z) - t * z))

    a, b = 0.0, math.log((n_pos + 1.0) / (n_neg + 1.0))
    fval = objective(a, b)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(a * f + b)
        d1 = p - t
        d2 = np.maximum(p * (1.0 - p), 1e-12)
        g1, g2 = float(np.dot(d1, f)), float(np.sum(d1))
        if math.hypot(g1, g2) < tol * len(f):
            converged = True
            break
        h11 = float(np.dot(d2, f * f)) + 1e-12
        h22 = float(np.sum(d2)) + 1e-12
        h21 = float(np.dot(d2, f))
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        step = 1.0
        while step >= 1e-10:
            na, nb = a + step * da, b + step * db
            nf = objective(na, nb)
            if nf < fval + 1e-4 * step * (g1 * da + g2 * db):
                break
            step /= 2.0
        else:
            # no descent left: converged when the Newton decrement is at rounding level
            converged = -(g1 * da + g2 * db) < 1e-12 * (1.0 + abs(fval))
            break
        a, b, fval = na, nb, nf
        if abs(a) > a_max:
            a = math.copysign(a_max, a)
            break
    if not smooth_targets:
        lo_pos, hi_neg = f[y].min(), f[~y].max()
        if lo_pos > hi_neg or f[y].max() < f[~y].min():
            converged = False
    return PlattParams(float(a), float(b), converged, it)


def prior_shift(platt: PlattParams, from_prior: float, to_prior: float) -> PlattParams:
    """Move the intercept so the base rate changes from ``from_prior`` to ``to_prior``."""
    lo = lambda q: math.log(q / (1.0 - q))  # noqa: E731
    return PlattParams(platt.a, platt.b + lo(to_prior) - lo(from_prior), platt.converged,
                       platt.iterations)


def select_threshold(probs, y, beta: float = 1.0) -> float:
    """F-beta optimal cut among the observed probabilities (predict positive when ``p >= cut``).

    Ties go to the larger cut; the result is clamped into ``[1e-6, 1 - 1e-6]``.
    """
    p = np.asarray(probs, dtype=float)
    y = np.asarray(y).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise SingleClassInput("threshold selection needs both classes")
    order = np.argsort(-p, kind="stable")
    ps, ys = p[order], y[order]
    last = np.r_[np.nonzero(np.diff(ps))[0], len(ps) - 1]
    tp = np.cumsum(ys)[last].astype(float)
    predicted = (last + 1).astype(float)
    b2 = beta * beta
    fscore = (1 + b2) * tp / (b2 * n_pos + predicted)
    cuts = ps[last]
    best = np.max(fscore)
    cut = float(np.max(cuts[fscore == best]))
    return float(min(max(cut, PROBIT_EPS), 1.0 - PROBIT_EPS))


def rescale(p_cal, threshold):
    """Shift in normal-quantile space so ``p_cal == threshold`` maps to 0.5."""
    p = np.clip(np.asarray(p_cal, dtype=float), PROBIT_EPS, 1.0 - PROBIT_EPS)
    t = np.clip(np.asarray(threshold, dtype=float), PROBIT_EPS, 1.0 - PROBIT_EPS)
    out = ndtr(ndtri(p) - ndtri(t))
    return float(out) if np.ndim(out) == 0 else out


def _combine(a, b):
    den = a + b - a * b
    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.where(den > 0, a * b / np.where(den > 0, den, 1.0), 0.0)
    return q


def couple(p12, p13, p23):
    """Coupled class probabilities from the pairwise ``P(first class | pair)`` values.

    For class i with pairwise probabilities a, b against the other two
    classes, ``q_i = ab / (a + b - ab)`` (0 when a = b = 0); the q are then
    normalised. Rows where every q is 0 get (1/3, 1/3, 1/3) and a True flag.
    Returns ``(probs (n, 3), degenerate (n,))``; scalars give a 1-row result.
    """
    p12, p13, p23 = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (p12, p13, p23))
    for v in (p12, p13, p23):
        if np.any((v < 0) | (v > 1)) or np.any(np.isnan(v)):
            raise DataError("pairwise probabilities must lie in [0, 1]")
    q = np.stack([
        _combine(p12, p13),
        _combine(1.0 - p12, p23),
        _combine(1.0 - p13, 1.0 - p23),
    ], axis=1)
    total = q.sum(axis=1)
    degenerate = total <= 0
    probs = np.where(degenerate[:, None], 1.0 / 3.0, q / np.where(degenerate, 1.0, total)[:, None])
    return probs, degenerate


@dataclass
class PairCalibration:
    platt: PlattParams
    threshold: float

    def to_dict(self) -> dict:
        return {"platt": self.platt.to_dict(), "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d) -> "PairCalibration":
        return cls(PlattParams.from_dict(d["platt"]), float(d["threshold"]))


def fit_pair_calibration(oof_margins, y, beta: float = 1.0) -> PairCalibration:
    """Platt parameters and the rescaling cut from out-of-fold margins."""
    platt = fit_platt(oof_margins, y)
    return PairCalibration(platt, select_threshold(platt(oof_margins), y, beta))


def pairwise_probs(models: dict, calib: dict, X) -> dict:
    """Rescaled ``P(first class | pair)`` for each pair."""
    out = {}
    for pair in PAIRS:
        model: GBMModel = models[pair]
        if np.asarray(X).shape[1] != model.feature_width:
            raise WidthMismatch(f"model {pair} expects {model.feature_width} columns")
        c: PairCalibration = calib[pair]
        out[pair] = rescale(c.platt(predict_margin(model, X)), c.threshold)
    return out


def calibrate_predict(models: dict, calib: dict, X):
    """Full chain for each row of ``X``: Platt, rescale, complement, couple."""
    pw = pairwise_probs(models, calib, X)
    return couple(pw[(1, 2)], pw[(1, 3)], pw[(2, 3)])
