"""Run configuration and the synth / label / train / predict / evaluate stages.

Every stage is a pure function of its inputs, the config and the seed. The
CLI wraps them with file I/O; tests call them directly.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import PAIRS, PairCalibration, calibrate_predict, fit_pair_calibration, prior_shift
from .errors import ConfigInvalid, DataError, MissingArtifact, TooFewRowsPerClass
from .features import CONFLICT, ROLES, FeaturePipeline, PCAPolicy, build_design, resolve_roles
from .gbm import (
    GBMModel,
    HyperParams,
    WindowConfig,
    GRID,
    fit_gbm,
    make_split_plan,
    predict_margin,
    random_grid_search,
)
from .labeling import ChangepointConfig, Labels, label_panel
from .metrics import evaluate as evaluate_probs
from .metrics import log_loss
from .panel import FlowPanel, format_float, format_month, ordinal_to_month, parse_month

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "dispwarn-bundle"
BUNDLE_VERSION = 1
GRID_SIZE = math.prod(len(v) for v in GRID.values())

DEFAULT_CONFIG = {
    "paths": {
        "out_dir": ".",
        "panel": "panel.csv",
        "truth": "truth.csv",
        "script": "script.json",
        "labels": "labels.csv",
        "label_proportions": "label_proportions.json",
        "models": "bundle.json",
        "predictions": "risk.csv",
        "reports": "reports",
    },
    "schema": None,
    "seed": 0,
    "thresholds": [2000, 5000, 10000, 25000],
    "horizons": [1, 3, 6],
    "changepoint": {"penalty": None, "min_segment": 3, "window": 1, "transform": "raw"},
    "roles": [["cf_*", CONFLICT], ["*", "slow"]],
    "pca": {"kind": "fixed", "k": 5, "target": 0.9, "bypass_conflict": False},
    "search": {"n_draws": 150, "n_folds": 3, "train_window_months": None, "pos_weight": 1.0},
    "calibration": {"fbeta": 1.0, "prior_correction": "off", "prior_window_months": 12},
    "evaluation": {"holdout_months": 4, "n_bins": 10, "entropy_base": "e", "c_method": "ovr"},
    "predict": {"months": None},
    "synth": {"n_countries": 30, "n_months": 60, "n_surge": 3, "n_features": 8, "beta": 3.0,
              "noise_sd": 0.5, "missing_rate": 0.0},
}

# fields that name files; they do not change results and stay out of the hash
_UNHASHED = ("paths",)


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigInvalid(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, d: dict | None = None, base_dir=".") -> "RunConfig":
        if d is not None and not isinstance(d, dict):
            raise ConfigInvalid("config must be a JSON object")
        cfg = cls(_merge(DEFAULT_CONFIG, d or {}), Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise MissingArtifact(f"config file {path} not found") from exc
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        return cls.from_dict(d, path.parent)

    def __getitem__(self, key):
        return self.data[key]

    def with_overrides(self, **kw) -> "RunConfig":
        d = copy.deepcopy(self.data)
        for k, v in kw.items():
            if v is not None:
                d[k] = v
        return RunConfig.from_dict(d, self.base_dir)

    def validate(self):
        d = self.data
        th = d["thresholds"]
        if not th or not all(isinstance(t, (int, float)) and t > 0 for t in th):
            raise ConfigInvalid("thresholds must be positive numbers")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ConfigInvalid("thresholds must be strictly increasing")
        hz = d["horizons"]
        if not hz or not all(isinstance(h, int) and h >= 1 for h in hz) or len(set(hz)) != len(hz):
            raise ConfigInvalid("horizons must be distinct positive integers")
        if not isinstance(d["seed"], int) or not 0 <= d["seed"] < 2 ** 64:
            raise ConfigInvalid("seed must be an unsigned 64-bit integer")
        s = d["search"]
        if not isinstance(s["n_draws"], int) or not 1 <= s["n_draws"] <= GRID_SIZE:
            raise ConfigInvalid(f"search.n_draws must be in 1..{GRID_SIZE}")
        if not isinstance(s["n_folds"], int) or s["n_folds"] < 2:
            raise ConfigInvalid("search.n_folds must be >= 2")
        if s["pos_weight"] <= 0:
            raise ConfigInvalid("search.pos_weight must be positive")
        if d["pca"]["kind"] not in ("fixed", "variance") or d["pca"]["k"] < 1 \
                or not 0 < d["pca"]["target"] <= 1:
            raise ConfigInvalid("pca: kind fixed|variance, k >= 1, 0 < target <= 1")
        c = d["calibration"]
        if c["prior_correction"] not in ("on", "off") or c["fbeta"] <= 0:
            raise ConfigInvalid("calibration: prior_correction on|off, fbeta > 0")
        e = d["evaluation"]
        if e["entropy_base"] not in ("e", 2, "2") or e["c_method"] not in ("ovr", "hand_till"):
            raise ConfigInvalid("evaluation: entropy_base e|2, c_method ovr|hand_till")
        if not isinstance(e["holdout_months"], int) or e["holdout_months"] < 1 or e["n_bins"] < 1:
            raise ConfigInvalid("evaluation.holdout_months and n_bins must be >= 1")
        cp = d["changepoint"]
        if cp["transform"] not in ("raw", "log1p") or cp["min_segment"] < 1 or cp["window"] < 1:
            raise ConfigInvalid("changepoint: transform raw|log1p, min_segment and window >= 1")
        for rule in d["roles"]:
            if not (isinstance(rule, list) and len(rule) == 2 and rule[1] in ROLES):
                raise ConfigInvalid(f"role rule {rule!r} must be [pattern, one of {ROLES}]")
        if d["predict"]["months"] is not None:
            try:
                [parse_month(m) for m in d["predict"]["months"]]
            except (ValueError, TypeError) as exc:
                raise ConfigInvalid(f"predict.months: {exc}") from exc
        return self

    def path(self, name: str) -> Path:
        out_dir = self.base_dir / self.data["paths"]["out_dir"]
        return out_dir / self.data["paths"][name]

    def semantic(self) -> dict:
        return {k: v for k, v in self.data.items() if k not in _UNHASHED and k != "seed"}

    def config_hash(self) -> str:
        canon = json.dumps(self.semantic(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    # typed views ---------------------------------------------------------

    def changepoint(self) -> ChangepointConfig:
        cp = self.data["changepoint"]
        return ChangepointConfig(cp["penalty"], cp["min_segment"], cp["window"], cp["transform"])

    def pca_policy(self) -> PCAPolicy:
        p = self.data["pca"]
        return PCAPolicy(p["kind"], p["k"], p["target"])

    def entropy_base(self) -> float:
        return np.e if self.data["evaluation"]["entropy_base"] == "e" else 2.0


def versions() -> dict:
    import numba
    import scipy

    return {"dispwarn": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def meta(cfg: RunConfig, command: str) -> dict:
    return {"command": command, "config_hash": cfg.config_hash(), "seed": cfg["seed"],
            "versions": versions()}


def header_lines(cfg: RunConfig, command: str) -> list[str]:
    m = meta(cfg, command)
    vs = " ".join(f"{k}={v}" for k, v in m["versions"].items())
    return [f"command: {command}", f"config_hash: {m['config_hash']}", f"seed: {m['seed']}",
            f"versions: {vs}"]


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def derive_seed(seed: int, *parts: int) -> int:
    """Independent 63-bit seed for a sub-task; depends only on its identity."""
    ss = np.random.SeedSequence([int(seed)] + [int(p) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _csv_text(header: list[str], rows, head: list[str]) -> str:
    buf = io.StringIO()
    for line in head:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --- synth / label ----------------------------------------------------------


def run_synth(cfg: RunConfig):
    from .synth import demo_script, generate

    s = cfg["synth"]
    script = demo_script(seed=cfg["seed"], beta=s["beta"], noise_sd=s["noise_sd"],
                         n_countries=s["n_countries"], n_months=s["n_months"],
                         n_surge=s["n_surge"], n_features=s["n_features"])
    script.missing_rate = s["missing_rate"]
    panel, truth = generate(script)
    return script, panel, truth


TRUTH_HEADER = ["country", "year", "month", "threshold_yearly", "class"]


def truth_csv(panel: FlowPanel, truth, thresholds, head) -> str:
    rows = []
    for th in thresholds:
        cls = truth.classes(th)
        for ci, c in enumerate(panel.countries):
            for t in range(panel.n_months):
                y, m = ordinal_to_month(panel.start + t)
                rows.append([c, y, m, format_float(float(th)), int(cls[ci, t])])
    return _csv_text(TRUTH_HEADER, rows, head)


def run_label(cfg: RunConfig, panel: FlowPanel) -> list[Labels]:
    cp = cfg.changepoint()
    return [label_panel(panel, float(th), cp) for th in cfg["thresholds"]]


# --- train ------------------------------------------------------------------


def holdout_start(cfg: RunConfig, panel: FlowPanel) -> int:
    """First held-out target month (ordinal); training targets precede it."""
    k = cfg["evaluation"]["holdout_months"]
    if k >= panel.n_months:
        raise DataError(f"holdout of {k} months leaves no training months")
    return panel.start + panel.n_months - k


def _pair_rows(y, pair):
    i, j = pair
    mask = (y == i) | (y == j)
    return mask, (y[mask] == i).astype(float)


def train_pair(Z, y, months, pair, cfg: RunConfig, seed: int) -> dict:
    """Grid search, out-of-fold calibration and the final fit for one class pair."""
    mask, yb = _pair_rows(y, pair)
    n_pos = int(yb.sum())
    n_min = min(n_pos, len(yb) - n_pos)
    if n_min < 2:
        raise TooFewRowsPerClass(f"pair {pair} has {n_min} rows in its smaller class")
    s = cfg["search"]
    n_folds = min(s["n_folds"], n_min)
    wc = WindowConfig(train_months=s["train_window_months"])
    Zp, mp = Z[mask], months[mask]
    plan = make_split_plan(mp, yb, n_folds, wc, seed=(seed, 1))
    best, table = random_grid_search(Zp, yb, plan, s["n_draws"], seed=seed, jobs=1,
                                     pos_weight=s["pos_weight"])
    # out-of-fold margins of the chosen configuration feed Platt and the cut
    oof = np.empty(len(yb))
    for f, fold in enumerate(plan.folds):
        fit_idx = np.setdiff1d(np.arange(len(yb)), fold)
        m = fit_gbm(Zp[fit_idx], yb[fit_idx], best, seed=(seed, 2, f), pos_weight=s["pos_weight"])
        oof[fold] = predict_margin(m, Zp[fold])
    c = cfg["calibration"]
    calib = fit_pair_calibration(oof, yb, c["fbeta"])
    final = fit_gbm(Zp, yb, best, seed=(seed, 3), pos_weight=s["pos_weight"])
    recent = mp >= mp.max() - c["prior_window_months"] + 1
    return {
        "pair": list(pair),
        "params": asdict(best),
        "n_folds": n_folds,
        "n_rows": int(len(yb)),
        "train_prior": float(yb.mean()),
        "recent_prior": float(yb[recent].mean()),
        "search": [r.to_dict() for r in table],
        "calibration": calib.to_dict(),
        "model": final.to_dict(),
    }


def run_train(cfg: RunConfig, panel: FlowPanel, labels: dict[float, np.ndarray], jobs: int = 1) -> dict:
    """Fit one feature pipeline per (threshold, horizon) and three pairwise models each."""
    roles = resolve_roles(panel.feature_names, [tuple(r) for r in cfg["roles"]])
    cut = holdout_start(cfg, panel)
    seed = cfg["seed"]
    cells, tasks = [], []
    for th in cfg["thresholds"]:
        th = float(th)
        if th not in labels:
            raise DataError(f"labels file has no rows for threshold {th:g}")
        for h in cfg["horizons"]:
            design = build_design(panel, labels[th], h, roles)
            tr = design.months < cut
            if not tr.any():
                raise DataError(f"horizon {h}: no training rows before {format_month(cut)}")
            pipe = FeaturePipeline.fit(design.X[tr], design.columns, design.roles,
                                       cfg.pca_policy(), cfg["pca"]["bypass_conflict"])
            Z = pipe.transform(design.X[tr])
            y = design.y[tr]
            cell = {"threshold_yearly": th, "horizon": h,
                    "train_months": [format_month(int(design.months[tr].min())),
                                     format_month(int(design.months[tr].max()))],
                    "class_counts": {str(k): int(np.sum(y == k)) for k in (1, 2, 3)},
                    "features": pipe.to_dict(), "pairs": None}
            cells.append(cell)
            for pair in PAIRS:
                tasks.append((len(cells) - 1, Z, y, design.months[tr], pair,
                              derive_seed(seed, round(th), h, *pair)))

    def work(task):
        ci, Z, y, months, pair, s = task
        log.info("train threshold=%g horizon=%d pair=%s", cells[ci]["threshold_yearly"],
                 cells[ci]["horizon"], pair)
        return ci, train_pair(Z, y, months, pair, cfg, s)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(t) for t in tasks]
    for cell in cells:
        cell["pairs"] = []
    for ci, res in results:
        cells[ci]["pairs"].append(res)
    return {"format": BUNDLE_FORMAT, "version": BUNDLE_VERSION, "meta": meta(cfg, "train"),
            "holdout_start": format_month(cut), "feature_names": list(panel.feature_names),
            "roles": {k: roles[k] for k in panel.feature_names}, "cells": cells}


# --- bundle use -------------------------------------------------------------


@dataclass
class CellModel:
    threshold_yearly: float
    horizon: int
    pipeline: FeaturePipeline
    models: dict
    calib: dict
    priors: dict

    def predict(self, X, prior_correction: bool = False):
        calib = self.calib
        if prior_correction:
            calib = {p: PairCalibration(prior_shift(c.platt, *self.priors[p]), c.threshold)
                     for p, c in calib.items()}
        return calibrate_predict(self.models, calib, self.pipeline.transform(X))


def load_bundle(bundle: dict) -> list[CellModel]:
    if not isinstance(bundle, dict) or bundle.get("format") != BUNDLE_FORMAT:
        raise DataError("not a dispwarn model bundle")
    if bundle.get("version") != BUNDLE_VERSION:
        raise DataError(f"unsupported bundle version {bundle.get('version')}")
    out = []
    for cell in bundle["cells"]:
        models, calib, priors = {}, {}, {}
        for p in cell["pairs"]:
            key = tuple(p["pair"])
            models[key] = GBMModel.from_dict(p["model"])
            calib[key] = PairCalibration.from_dict(p["calibration"])
            priors[key] = (p["train_prior"], p["recent_prior"])
        out.append(CellModel(float(cell["threshold_yearly"]), int(cell["horizon"]),
                             FeaturePipeline.from_dict(cell["features"]), models, calib, priors))
    return out


def _check_bundle_panel(bundle: dict, panel: FlowPanel):
    if list(panel.feature_names) != bundle["feature_names"]:
        raise DataError("panel feature columns differ from the ones the bundle was trained on")


def target_months(cfg: RunConfig, panel: FlowPanel, override=None) -> list[int]:
    months = override if override is not None else cfg["predict"]["months"]
    if months is None:
        return list(range(holdout_start(cfg, panel), panel.start + panel.n_months))
    return sorted(parse_month(m) for m in months)


PREDICTION_HEADER = ["country", "year", "month", "horizon", "threshold_yearly",
                     "p_class1", "p_class2", "p_class3", "flag"]


def run_predict(cfg: RunConfig, panel: FlowPanel, bundle: dict, months: list[int]) -> list[list]:
    """Risk-index rows, one per (country, month, horizon, threshold)."""
    _check_bundle_panel(bundle, panel)
    roles = bundle["roles"]
    out = []
    correction = cfg["calibration"]["prior_correction"] == "on"
    for cell in load_bundle(bundle):
        design = build_design(panel, None, cell.horizon, roles, target_months=months)
        probs, flag = cell.predict(design.X, correction)
        for i in range(len(design.months)):
            y, m = ordinal_to_month(int(design.months[i]))
            out.append([design.countries[i], y, m, cell.horizon,
                        format_float(cell.threshold_yearly),
                        *(format_float(float(v)) for v in probs[i]), int(flag[i])])
    out.sort(key=lambda r: (r[0], r[1], r[2], r[3], float(r[4])))
    return out


# --- evaluate ---------------------------------------------------------------


METRICS_HEADER = ["threshold_yearly", "horizon", "n", "log_loss", "brier", "entropy",
                  "baseline_log_loss", "c_statistic", "auc_class1", "aucpr_class1",
                  "prevalence_class1"]
CALIBRATION_HEADER = ["threshold_yearly", "horizon", "class", "ece", "mce"]


def run_evaluate(cfg: RunConfig, panel: FlowPanel, bundle: dict,
                 labels: dict[float, np.ndarray]) -> dict:
    """Score the bundle on the held-out target months against the labels.

    Returns per-cell reports plus a pooled report over every cell; the
    constant-prior baseline predicts each cell's training class proportions.
    """
    _check_bundle_panel(bundle, panel)
    months = list(range(holdout_start(cfg, panel), panel.start + panel.n_months))
    correction = cfg["calibration"]["prior_correction"] == "on"
    ev = cfg["evaluation"]
    raw_cells = {(float(c["threshold_yearly"]), int(c["horizon"])): c for c in bundle["cells"]}
    cells, pooled_p, pooled_y, pooled_base = [], [], [], []
    for cell in load_bundle(bundle):
        th = cell.threshold_yearly
        if th not in labels:
            raise DataError(f"labels file has no rows for threshold {th:g}")
        design = build_design(panel, labels[th], cell.horizon, bundle["roles"], target_months=months)
        probs, _ = cell.predict(design.X, correction)
        y = design.y.astype(int)
        counts = raw_cells[(th, cell.horizon)]["class_counts"]
        prior = np.array([counts[str(k)] for k in (1, 2, 3)], dtype=float)
        prior /= prior.sum()
        base = np.tile(prior, (len(y), 1))
        rep = evaluate_probs(probs, y, ev["n_bins"], cfg.entropy_base(), ev["c_method"])
        cells.append({"threshold_yearly": th, "horizon": cell.horizon, "report": rep,
                      "baseline_log_loss": log_loss(base, y),
                      "prevalence_class1": float(np.mean(y == 1))})
        pooled_p.append(probs)
        pooled_y.append(y)
        pooled_base.append(base)
    P, Y, B = np.vstack(pooled_p), np.concatenate(pooled_y), np.vstack(pooled_base)
    pooled = evaluate_probs(P, Y, ev["n_bins"], cfg.entropy_base(), ev["c_method"])
    return {"months": [format_month(m) for m in months], "cells": cells,
            "pooled": {"report": pooled, "baseline_log_loss": log_loss(B, Y),
                       "prevalence": {str(k): float(np.mean(Y == k)) for k in (1, 2, 3)}}}


def evaluation_files(cfg: RunConfig, result: dict) -> dict[str, str]:
    """Render the metrics table, the ECE/MCE table and the curves JSON."""
    head = header_lines(cfg, "evaluate")
    f = lambda v: format_float(float(v))  # noqa: E731
    rows, cal_rows, curves = [], [], {"meta": meta(cfg, "evaluate"), "months": result["months"],
                                      "cells": []}
    entries = [(c["threshold_yearly"], c["horizon"], c) for c in result["cells"]]
    entries.append(("all", "all", {"report": result["pooled"]["report"],
                                   "baseline_log_loss": result["pooled"]["baseline_log_loss"],
                                   "prevalence_class1": result["pooled"]["prevalence"]["1"]}))
    for th, h, c in entries:
        rep = c["report"]
        th_s = th if th == "all" else f(th)
        rows.append([th_s, h, rep.n, f(rep.log_loss), f(rep.brier), f(rep.entropy),
                     f(c["baseline_log_loss"]), f(rep.c_statistic), f(rep.auc.get(1, float("nan"))),
                     f(rep.aucpr.get(1, float("nan"))), f(c["prevalence_class1"])])
        for k in (1, 2, 3):
            cal_rows.append([th_s, h, k, f(rep.ece[k]), f(rep.mce[k])])
        d = rep.to_dict()
        curves["cells"].append({"threshold_yearly": th, "horizon": h,
                                "reliability": d["reliability"], "roc": d["roc"]})
    return {
        "metrics.csv": _csv_text(METRICS_HEADER, rows, head),
        "calibration.csv": _csv_text(CALIBRATION_HEADER, cal_rows, head),
        "curves.json": dump_json(curves),
    }
