"""Binary gradient boosting on the logistic loss, plus random grid search."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _trees
from .errors import (
    DataError,
    DegenerateFeatures,
    NoPositives,
    PipelineError,
    SingleClassInput,
    TooFewRowsPerClass,
    WidthMismatch,
)
from .metrics import aucpr

log = logging.getLogger(__name__)

LEAF_EPS = 1e-6
FORMAT_VERSION = 1

GRID = {
    "n_trees": (200, 500, 1000),
    "learning_rate": (0.001, 0.01, 0.1),
    "max_depth": (3, 5, 9, 12),
    "min_rows": (5, 10, 25),
    "sample_rate": (0.8, 1.0),
    "col_sample_rate": (0.2, 0.5, 1.0),
}


@dataclass(frozen=True)
class HyperParams:
    n_trees: int = 200
    learning_rate: float = 0.1
    max_depth: int = 3
    min_rows: int = 10
    sample_rate: float = 1.0
    col_sample_rate: float = 1.0

    def validate(self, grid=GRID):
        for name, allowed in grid.items():
            if getattr(self, name) not in allowed:
                raise DataError(f"{name}={getattr(self, name)} not in {allowed}")
        return self


def grid_candidates(grid=GRID) -> list[HyperParams]:
    names = list(HyperParams.__dataclass_fields__)
    return [HyperParams(**dict(zip(names, combo))) for combo in itertools.product(*(grid[k] for k in names))]


@dataclass(frozen=True)
class RegressionTree:
    """One tree read out of a fitted model (child indices relative to the tree root)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    def depth(self) -> int:
        def walk(nd):
            if self.feature[nd] < 0:
                return 0
            return 1 + max(walk(self.left[nd]), walk(self.right[nd]))
        return walk(0)

    def leaves(self) -> np.ndarray:
        return np.nonzero(self.feature < 0)[0]


@dataclass(eq=False)
class GBMModel:
    base_score: float
    learning_rate: float
    feature_width: int
    roots: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    train_loss: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    def truncated(self, n_trees: int) -> "GBMModel":
        """The model made of the first ``n_trees`` trees."""
        end = int(self.roots[n_trees]) if n_trees < self.n_trees else len(self.feature)
        return GBMModel(self.base_score, self.learning_rate, self.feature_width,
                        self.roots[:n_trees], self.feature[:end], self.threshold[:end],
                        self.left[:end], self.right[:end], self.value[:end], self.count[:end],
                        self.train_loss[:n_trees + 1])

    @property
    def trees(self) -> list[RegressionTree]:
        ends = list(self.roots[1:]) + [len(self.feature)]
        out = []
        for start, end in zip(self.roots, ends):
            sl = slice(start, end)
            rel = lambda a: np.where(a >= 0, a - start, -1)  # noqa: E731
            out.append(RegressionTree(self.feature[sl], self.threshold[sl], rel(self.left[sl]),
                                      rel(self.right[sl]), self.value[sl], self.count[sl]))
        return out

    def to_dict(self) -> dict:
        return {
            "format": "dispwarn-gbm",
            "version": FORMAT_VERSION,
            "base_score": float(self.base_score),
            "learning_rate": float(self.learning_rate),
            "feature_width": int(self.feature_width),
            "roots": self.roots.tolist(),
            "nodes": {
                "feature": self.feature.tolist(),
                "threshold": [float(v) for v in self.threshold],
                "left": self.left.tolist(),
                "right": self.right.tolist(),
                "value": [float(v) for v in self.value],
                "count": self.count.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GBMModel":
        if d.get("format") != "dispwarn-gbm" or d.get("version") != FORMAT_VERSION:
            raise DataError("unsupported model format")
        nodes = d["nodes"]
        return cls(
            base_score=float(d["base_score"]),
            learning_rate=float(d["learning_rate"]),
            feature_width=int(d["feature_width"]),
            roots=np.asarray(d["roots"], dtype=np.int64),
            feature=np.asarray(nodes["feature"], dtype=np.int64),
            threshold=np.asarray(nodes["threshold"], dtype=float),
            left=np.asarray(nodes["left"], dtype=np.int64),
            right=np.asarray(nodes["right"], dtype=np.int64),
            value=np.asarray(nodes["value"], dtype=float),
            count=np.asarray(nodes["count"], dtype=np.int64),
        )


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    entropy = list(seed) if isinstance(seed, (tuple, list)) else seed
    return np.random.default_rng(np.random.SeedSequence(entropy))


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def fit_gbm(X, y, hp: HyperParams, seed=0, pos_weight: float = 1.0, eps: float = LEAF_EPS) -> GBMModel:
    """Fit a boosted tree ensemble to binary labels.

    Each tree is fit to the logistic-loss gradients with leaf values set by
    one Newton step, ``-sum(g) / (sum(h) + eps)``. Rows are Bernoulli-sampled
    per tree at ``hp.sample_rate`` and columns per tree at
    ``hp.col_sample_rate``; both draws come from ``seed`` only.
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise WidthMismatch("X rows and y length differ")
    n, width = X.shape
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == n:
        raise SingleClassInput("both classes are required")
    if n < 2 * hp.min_rows:
        raise DataError(f"{n} rows is fewer than 2 * min_rows = {2 * hp.min_rows}")
    finite = np.where(np.isnan(X), np.nan, X)
    spread = np.nanmax(finite, axis=0) - np.nanmin(finite, axis=0) if n else np.zeros(width)
    if width == 0 or not np.any(np.nan_to_num(spread) > 0):
        raise DegenerateFeatures("every feature column is constant")

    w = np.where(y == 1, float(pos_weight), 1.0)
    prior = float(np.sum(w * y) / np.sum(w))
    base = logit(prior)
    rng = _rng(seed)
    k = max(1, int(math.floor(hp.col_sample_rate * width + 0.5)))
    # draws are made tree by tree so a shorter model is an exact prefix of a longer one
    row_u = np.zeros((hp.n_trees, n) if hp.sample_rate < 1.0 else (1, 1))
    col_sel = np.empty((hp.n_trees, min(k, width)), dtype=np.int64)
    for t in range(hp.n_trees):
        if hp.sample_rate < 1.0:
            row_u[t] = rng.random(n)
        col_sel[t] = np.arange(width) if k >= width else np.sort(rng.permutation(width)[:k])
    feat, thr, left, right, value, count, roots, losses = _trees.boost(
        X, y, w, base, hp.n_trees, float(hp.learning_rate), hp.max_depth, hp.min_rows, eps,
        row_u, float(hp.sample_rate), col_sel,
    )
    return GBMModel(base, float(hp.learning_rate), width, roots, feat, thr, left, right, value,
                    count, losses)


def predict_margin(model: GBMModel, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.feature_width:
        raise WidthMismatch(f"expected {model.feature_width} columns, got {X.shape}")
    if model.n_trees == 0:
        return np.full(X.shape[0], model.base_score)
    return _trees.forest_margin(X, model.base_score, model.learning_rate, model.roots,
                                model.feature, model.threshold, model.left, model.right, model.value)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict_prob(model: GBMModel, X) -> np.ndarray:
    return sigmoid(predict_margin(model, X))


# --- cross-validation plans -------------------------------------------------


@dataclass(frozen=True)
class WindowConfig:
    train_months: int | None = None  # None: one window spanning every month
    test_months: int = 1
    step: int = 1


@dataclass
class SplitPlan:
    """Stratified folds over the rows plus moving (train, test) month windows.

    ``windows`` holds half-open month-ordinal ranges ``((train_lo, train_hi),
    (test_lo, test_hi))``. Cross-validation units are (window, fold) pairs:
    fit on the window's training rows outside the fold, score on the fold.
    """

    folds: list[np.ndarray]
    windows: list[tuple[tuple[int, int], tuple[int, int]]]
    row_months: np.ndarray

    def units(self):
        for (lo, hi), _ in self.windows:
            in_window = (self.row_months >= lo) & (self.row_months < hi)
            for fold in self.folds:
                held = np.zeros(len(self.row_months), dtype=bool)
                held[fold] = True
                fit_idx = np.nonzero(in_window & ~held)[0]
                score_idx = np.nonzero(in_window & held)[0]
                if len(fit_idx) and len(score_idx):
                    yield fit_idx, score_idx

    def test_rows(self, w: int) -> np.ndarray:
        lo, hi = self.windows[w][1]
        return np.nonzero((self.row_months >= lo) & (self.row_months < hi))[0]

    def train_rows(self, w: int) -> np.ndarray:
        lo, hi = self.windows[w][0]
        return np.nonzero((self.row_months >= lo) & (self.row_months < hi))[0]


def stratified_folds(labels, n_folds: int, seed=0) -> list[np.ndarray]:
    labels = np.asarray(labels)
    if n_folds < 2:
        raise DataError("n_folds must be >= 2")
    if len(labels) < n_folds:
        raise TooFewRowsPerClass(f"{len(labels)} rows cannot fill {n_folds} folds")
    rng = _rng(seed)
    assign = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        # continue the round-robin where the previous class stopped so fold sizes stay even
        assign[idx] = (offset + np.arange(len(idx))) % n_folds
        offset += len(idx)
    return [np.nonzero(assign == f)[0] for f in range(n_folds)]


def month_windows(months, cfg: WindowConfig) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    months = np.asarray(months)
    lo, hi = int(months.min()), int(months.max()) + 1
    if cfg.train_months is None:
        return [((lo, hi), (hi, hi))]
    if cfg.train_months < 1 or cfg.test_months < 1 or cfg.step < 1:
        raise DataError("window lengths and step must be positive")
    out = []
    s = lo
    while s + cfg.train_months + cfg.test_months <= hi:
        tr = (s, s + cfg.train_months)
        out.append((tr, (tr[1], tr[1] + cfg.test_months)))
        s += cfg.step
    return out


def make_split_plan(months, labels, n_folds: int = 3, window_config: WindowConfig | None = None,
                    seed=0) -> SplitPlan:
    months = np.asarray(months)
    labels = np.asarray(labels)
    if len(months) != len(labels):
        raise DataError("months and labels differ in length")
    folds = stratified_folds(labels, n_folds, seed)
    windows = month_windows(months, window_config or WindowConfig())
    return SplitPlan(folds, windows, months)


# --- random grid search -----------------------------------------------------


@dataclass
class CandidateScore:
    draw: int
    grid_index: int
    params: HyperParams
    mean_aucpr: float = float("nan")
    mean_log_loss: float = float("nan")
    n_units: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        return {"draw": self.draw, "grid_index": self.grid_index, **asdict(self.params),
                "mean_aucpr": self.mean_aucpr, "mean_log_loss": self.mean_log_loss,
                "n_units": self.n_units, "error": self.error}


def _binary_log_loss(p, y) -> float:
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def _group_key(hp: HyperParams, grid=GRID) -> int:
    """Grid index of ``hp`` with n_trees ignored; candidates sharing it share fits."""
    key = 0
    for name in list(HyperParams.__dataclass_fields__)[1:]:
        key = key * len(grid[name]) + grid[name].index(getattr(hp, name))
    return key


def score_candidates(X, y, plan: SplitPlan, hps: list[HyperParams], seed, pos_weight: float = 1.0):
    """Mean held-out AUCPR and log loss over the plan's (window, fold) units.

    ``hps`` may differ only in ``n_trees``: one model with the largest tree
    count is fit per unit and its prefixes score the smaller candidates,
    which is exact because tree t only depends on trees before it.
    Returns one ``(mean_aucpr, mean_log_loss, n_units)`` tuple per entry.
    """
    n_max = max(hp.n_trees for hp in hps)
    ap = [[] for _ in hps]
    ll = [[] for _ in hps]
    for u, (fit_idx, score_idx) in enumerate(plan.units()):
        y_score = y[score_idx]
        if not np.any(y_score == 1):
            continue
        full = fit_gbm(X[fit_idx], y[fit_idx], replace(hps[0], n_trees=n_max),
                       seed=(*seed, u), pos_weight=pos_weight)
        for i, hp in enumerate(hps):
            p = predict_prob(full.truncated(hp.n_trees), X[score_idx])
            ap[i].append(aucpr(p, y_score))
            ll[i].append(_binary_log_loss(p, y_score))
    if not ap[0]:
        raise NoPositives("no cross-validation unit contained a positive row")
    return [(float(np.mean(a)), float(np.mean(b)), len(a)) for a, b in zip(ap, ll)]


def score_candidate(X, y, plan: SplitPlan, hp: HyperParams, seed, pos_weight: float = 1.0):
    return score_candidates(X, y, plan, [hp], seed, pos_weight)[0]


def random_grid_search(X, y, plan: SplitPlan, n_draws: int = 150, seed: int = 0, jobs: int = 1,
                       grid=GRID, pos_weight: float = 1.0):
    """Score ``n_draws`` distinct grid points (drawn without replacement).

    Returns the best HyperParams and the full score table in draw order. Best
    is the highest mean AUCPR, then the lowest log loss, then the earliest
    draw. A candidate whose fits fail is recorded with its error and skipped.
    Randomness is keyed on (seed, grid point with n_trees ignored), so a
    candidate scores the same in any search and at any ``jobs``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    cands = grid_candidates(grid)
    if not 1 <= n_draws <= len(cands):
        raise DataError(f"n_draws must be in 1..{len(cands)}")
    picks = _rng((seed, 0x5EA7C4)).choice(len(cands), size=n_draws, replace=False)
    table = [CandidateScore(draw, int(gi), cands[gi]) for draw, gi in enumerate(picks)]
    groups: dict[int, list[CandidateScore]] = {}
    for row in table:
        groups.setdefault(_group_key(row.params, grid), []).append(row)

    def run(item):
        key, rows = item
        try:
            scores = score_candidates(X, y, plan, [r.params for r in rows], (seed, key), pos_weight)
            for r, (a, b, k) in zip(rows, scores):
                r.mean_aucpr, r.mean_log_loss, r.n_units = a, b, k
        except PipelineError as exc:
            for r in rows:
                r.error = f"{type(exc).__name__}: {exc}"
            log.debug("grid group %s skipped: %s", key, exc)

    items = sorted(groups.items())
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run, items))
    else:
        for it in items:
            run(it)
    ok = [r for r in table if r.error is None]
    if not ok:
        raise DataError("every grid candidate failed: " + (table[0].error or ""))
    best = min(ok, key=lambda r: (-r.mean_aucpr, r.mean_log_loss, r.draw))
    return best.params, table
