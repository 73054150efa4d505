"""Horizon-specific design matrices: lags, imputation, standardisation and PCA."""

from __future__ import annotations

import csv
import fnmatch
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AllMissingColumn, DataError, InsufficientHistory, UnmappedColumn
from .panel import FlowPanel, format_float, ordinal_to_month

SLOW = "slow"
CONFLICT = "conflict_forecast"
ROLES = (SLOW, CONFLICT)
SUPPORTED_HORIZONS = (1, 3, 6)
INDICATOR_MIN_MISSING = 0.01


class RankDeficientWarning(UserWarning):
    pass


def resolve_roles(feature_names, patterns) -> dict[str, str]:
    """Map every feature column to a role using ordered ``(glob, role)`` rules.

    ``patterns`` may be a list of pairs or a dict; the first matching rule wins.
    """
    rules = list(patterns.items()) if isinstance(patterns, dict) else [tuple(p) for p in patterns]
    out = {}
    for name in feature_names:
        for pat, role in rules:
            if fnmatch.fnmatchcase(name, pat):
                if role not in ROLES:
                    raise UnmappedColumn(f"unknown role {role!r} for {name}")
                out[name] = role
                break
        else:
            raise UnmappedColumn(f"feature column {name!r} has no role")
    return out


@dataclass
class Design:
    """Supervised rows for one horizon. Row i targets ``months[i]`` in ``countries[i]``."""

    horizon: int
    columns: list[str]
    roles: list[str]
    countries: np.ndarray
    months: np.ndarray
    X: np.ndarray
    y: np.ndarray | None

    def source_month(self, j: int) -> np.ndarray:
        """Month each row's column ``j`` was read from."""
        lag = self.horizon if self.roles[j] == SLOW else 0
        return self.months - lag

    def subset(self, idx) -> "Design":
        return Design(self.horizon, self.columns, self.roles, self.countries[idx], self.months[idx],
                      self.X[idx], None if self.y is None else self.y[idx])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["country", "year", "month", "horizon"] + self.columns + ["class"])
        for i in range(len(self.months)):
            yr, mo = ordinal_to_month(int(self.months[i]))
            cells = ["" if np.isnan(v) else format_float(v) for v in self.X[i]]
            label = "" if self.y is None else int(self.y[i])
            w.writerow([self.countries[i], yr, mo, self.horizon] + cells + [label])
        return buf.getvalue()


def build_design(panel: FlowPanel, labels, horizon: int, roles: dict[str, str],
                 target_months=None) -> Design:
    """Rows for every (country, target month) whose lagged inputs exist.

    Slow columns are read at ``target - horizon``; conflict-forecast columns
    at the target month itself. ``labels`` is a (countries, months) class
    array or None. ``target_months`` optionally restricts the emitted months.
    """
    if horizon < 1:
        raise DataError("horizon must be >= 1")
    missing_roles = [c for c in panel.feature_names if c not in roles]
    if missing_roles:
        raise UnmappedColumn(f"no role for columns {missing_roles}")
    col_roles = [roles[c] for c in panel.feature_names]
    slow = np.array([r == SLOW for r in col_roles], dtype=bool)
    n_c, n_t = panel.flows.shape
    ts = np.arange(horizon, n_t)
    if target_months is not None:
        wanted = np.asarray(sorted(set(int(m) for m in target_months))) - panel.start
        ts = ts[np.isin(ts, wanted)]
    if len(ts) == 0:
        raise InsufficientHistory(f"no target month has {horizon} months of history")
    rows_c, rows_t, X = [], [], []
    for ci in range(n_c):
        lagged = panel.features[ci, ts - horizon]
        current = panel.features[ci, ts]
        X.append(np.where(slow[None, :], lagged, current))
        rows_c.extend([panel.countries[ci]] * len(ts))
        rows_t.append(ts)
    t_all = np.concatenate(rows_t)
    y = None
    if labels is not None:
        labels = np.asarray(labels)
        y = np.concatenate([labels[ci, ts] for ci in range(n_c)]).astype(np.int8)
    return Design(horizon, list(panel.feature_names), col_roles, np.array(rows_c),
                  t_all + panel.start, np.vstack(X), y)


def audit_leakage(design: Design, panel: FlowPanel) -> list[str]:
    """Reverse-lookup every cell; returns a list of violations (empty when clean)."""
    problems = []
    ci_of = {c: i for i, c in enumerate(panel.countries)}
    for j, name in enumerate(design.columns):
        src = design.source_month(j) - panel.start
        ci = np.array([ci_of[c] for c in design.countries])
        if np.any(src < 0) or np.any(src >= panel.n_months):
            problems.append(f"{name}: source month outside panel")
            continue
        expected = panel.features[ci, src, panel.feature_names.index(name)]
        got = design.X[:, j]
        bad = ~((expected == got) | (np.isnan(expected) & np.isnan(got)))
        for i in np.nonzero(bad)[0]:
            problems.append(f"{name} row {i}: {got[i]} != panel value {expected[i]}")
        # the slow lag must match the horizon, the conflict lag must be zero
        lag = design.months - design.source_month(j)
        want = design.horizon if design.roles[j] == SLOW else 0
        if np.any(lag != want):
            problems.append(f"{name}: lag {lag[0]} != {want}")
    return problems


# --- standardisation --------------------------------------------------------


@dataclass
class Standardizer:
    """Median imputation then z-scoring with training statistics (population sd)."""

    medians: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    keep: np.ndarray
    dropped: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"medians": self.medians.tolist(), "means": self.means.tolist(),
                "sds": self.sds.tolist(), "keep": self.keep.tolist(),
                "dropped": {str(k): v for k, v in self.dropped.items()}}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["medians"], float), np.asarray(d["means"], float),
                   np.asarray(d["sds"], float), np.asarray(d["keep"], dtype=np.int64),
                   {int(k): v for k, v in d["dropped"].items()})


def fit_standardizer(X_train, dedupe: bool = True) -> Standardizer:
    """Fit on training rows only.

    Constant columns are dropped; with ``dedupe`` so are columns that are
    perfectly collinear with an earlier kept column (equal up to sign after
    standardisation).
    """
    X = np.asarray(X_train, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("need a non-empty 2-d training matrix")
    all_missing = np.all(np.isnan(X), axis=0)
    if np.any(all_missing):
        raise AllMissingColumn(f"columns {np.nonzero(all_missing)[0].tolist()} are entirely missing")
    medians = np.nanmedian(X, axis=0)
    Xf = np.where(np.isnan(X), medians[None, :], X)
    means = Xf.mean(axis=0)
    sds = Xf.std(axis=0)
    dropped = {}
    keep = []
    Z = (Xf - means) / np.where(sds > 0, sds, 1.0)
    scale = np.abs(Xf).max(axis=0) + 1.0
    for j in range(X.shape[1]):
        if not sds[j] > 1e-12 * scale[j]:
            dropped[j] = "constant"
            continue
        if dedupe:
            dup = next((k for k in keep if np.max(np.abs(Z[:, j] - Z[:, k])) < 1e-9
                        or np.max(np.abs(Z[:, j] + Z[:, k])) < 1e-9), None)
            if dup is not None:
                dropped[j] = f"collinear with column {dup}"
                continue
        keep.append(j)
    return Standardizer(medians, means, sds, np.asarray(keep, dtype=np.int64), dropped)


def apply(std: Standardizer, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    Xf = np.where(np.isnan(X), std.medians[None, :], X)
    k = std.keep
    return (Xf[:, k] - std.means[k]) / std.sds[k]


# --- PCA ----------------------------------------------------------------------


@dataclass(frozen=True)
class PCAPolicy:
    kind: str = "fixed"  # "fixed" or "variance"
    k: int = 5
    target: float = 0.90

    def __post_init__(self):
        if self.kind not in ("fixed", "variance"):
            raise DataError(f"unknown PCA policy {self.kind!r}")


@dataclass
class PCAModel:
    mean: np.ndarray
    loadings: np.ndarray  # (K, p), rows orthonormal
    explained_variance_ratio: np.ndarray  # every component, not just the K kept

    @property
    def k(self) -> int:
        return self.loadings.shape[0]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "loadings": self.loadings.tolist(),
                "explained_variance_ratio": self.explained_variance_ratio.tolist()}

    @classmethod
    def from_dict(cls, d) -> "PCAModel":
        p = len(d["mean"])
        return cls(np.asarray(d["mean"], float),
                   np.asarray(d["loadings"], float).reshape(-1, p),
                   np.asarray(d["explained_variance_ratio"], float))


def fit_pca(X_std, policy: PCAPolicy | None = None) -> PCAModel:
    policy = policy or PCAPolicy()
    X = np.asarray(X_std, dtype=float)
    mean = X.mean(axis=0)
    if X.shape[1] == 0:
        return PCAModel(mean, np.zeros((0, 0)), np.zeros(0))
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    var = s ** 2
    total = var.sum()
    ratio = var / total if total > 0 else np.zeros_like(var)
    if policy.kind == "fixed":
        k = policy.k
    else:
        cum = np.cumsum(ratio)
        k = int(np.searchsorted(cum, policy.target - 1e-12) + 1)
    rank = int(np.sum(s > s[0] * max(X.shape) * np.finfo(float).eps)) if len(s) and s[0] > 0 else 0
    if k > rank:
        warnings.warn(f"only {rank} nonzero singular values; keeping {rank} of {k} components",
                      RankDeficientWarning, stacklevel=2)
        k = rank
    loadings = vt[:k].copy()
    for i in range(k):
        if loadings[i, np.argmax(np.abs(loadings[i]))] < 0:
            loadings[i] = -loadings[i]
    return PCAModel(mean, loadings, ratio)


def project(model: PCAModel, X_std) -> np.ndarray:
    return (np.asarray(X_std, dtype=float) - model.mean) @ model.loadings.T


def project_back(model: PCAModel, scores) -> np.ndarray:
    return np.asarray(scores, dtype=float) @ model.loadings + model.mean


# --- fitted preprocessing chain --------------------------------------------


@dataclass
class FeaturePipeline:
    """Indicators -> imputation -> standardisation -> PCA, fit on training rows.

    With ``bypass_conflict`` the conflict-forecast columns skip PCA and are
    appended, standardised, after the component scores.
    """

    indicator_cols: list[int]
    standardizer: Standardizer
    pca: PCAModel
    pca_inputs: np.ndarray  # positions (within standardised output) fed to PCA
    passthrough: np.ndarray  # positions appended unchanged
    output_names: list[str]

    @classmethod
    def fit(cls, X_train, columns, roles, policy: PCAPolicy | None = None,
            bypass_conflict: bool = False) -> "FeaturePipeline":
        X_train = np.asarray(X_train, dtype=float)
        miss = np.isnan(X_train).mean(axis=0)
        indicator_cols = [j for j in range(X_train.shape[1]) if miss[j] > INDICATOR_MIN_MISSING]
        aug = _augment(X_train, indicator_cols)
        aug_names = list(columns) + [f"{columns[j]}__missing" for j in indicator_cols]
        aug_roles = list(roles) + [roles[j] for j in indicator_cols]
        std = fit_standardizer(aug)
        kept_roles = [aug_roles[j] for j in std.keep]
        kept_names = [aug_names[j] for j in std.keep]
        if bypass_conflict:
            to_pca = np.array([i for i, r in enumerate(kept_roles) if r != CONFLICT], dtype=np.int64)
            passthrough = np.array([i for i, r in enumerate(kept_roles) if r == CONFLICT], dtype=np.int64)
        else:
            to_pca = np.arange(len(kept_roles), dtype=np.int64)
            passthrough = np.zeros(0, dtype=np.int64)
        Z = apply(std, aug)
        pca = fit_pca(Z[:, to_pca], policy)
        names = [f"pc{i + 1}" for i in range(pca.k)] + [kept_names[i] for i in passthrough]
        return cls(indicator_cols, std, pca, to_pca, passthrough, names)

    def transform(self, X) -> np.ndarray:
        Z = apply(self.standardizer, _augment(np.asarray(X, dtype=float), self.indicator_cols))
        return np.hstack([project(self.pca, Z[:, self.pca_inputs]), Z[:, self.passthrough]])

    def to_dict(self) -> dict:
        return {"indicator_cols": list(self.indicator_cols),
                "standardizer": self.standardizer.to_dict(), "pca": self.pca.to_dict(),
                "pca_inputs": self.pca_inputs.tolist(), "passthrough": self.passthrough.tolist(),
                "output_names": list(self.output_names)}

    @classmethod
    def from_dict(cls, d) -> "FeaturePipeline":
        return cls(list(d["indicator_cols"]), Standardizer.from_dict(d["standardizer"]),
                   PCAModel.from_dict(d["pca"]), np.asarray(d["pca_inputs"], dtype=np.int64),
                   np.asarray(d["passthrough"], dtype=np.int64), list(d["output_names"]))


def _augment(X, indicator_cols) -> np.ndarray:
    if not indicator_cols:
        return X
    return np.hstack([X, np.isnan(X[:, indicator_cols]).astype(float)])
