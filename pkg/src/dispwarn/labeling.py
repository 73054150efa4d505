"""Change-point detection and the three-class dependent variable."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, IndexOutOfRange, SeriesTooShort
from .panel import FlowPanel, ThresholdSpec, format_float, month_ordinal, monthly_threshold, ordinal_to_month


class Direction(str, enum.Enum):
    UP = "Up"
    DOWN = "Down"


class Scenario(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"
    F = "F"


class ClassLabel(enum.IntEnum):
    SUDDEN_INCREASE = 1
    SUSTAINED_HIGH = 2
    BELOW_THRESHOLD = 3


# rows: above / below; columns: Up / None / Down
_SCENARIO_GRID = {
    (True, Direction.UP): Scenario.A,
    (True, None): Scenario.B,
    (True, Direction.DOWN): Scenario.C,
    (False, Direction.UP): Scenario.D,
    (False, None): Scenario.E,
    (False, Direction.DOWN): Scenario.F,
}

_CLASS_OF = {
    Scenario.A: ClassLabel.SUDDEN_INCREASE,
    Scenario.B: ClassLabel.SUSTAINED_HIGH,
    Scenario.C: ClassLabel.SUSTAINED_HIGH,
    Scenario.D: ClassLabel.BELOW_THRESHOLD,
    Scenario.E: ClassLabel.BELOW_THRESHOLD,
    Scenario.F: ClassLabel.BELOW_THRESHOLD,
}


@dataclass(frozen=True)
class ChangePoint:
    index: int
    direction: Direction
    pre_mean: float
    post_mean: float
    pre_var: float
    post_var: float


@dataclass(frozen=True)
class ChangepointConfig:
    penalty: float | None = None  # None -> default_penalty(n)
    min_segment: int = 3
    window: int = 1
    transform: str = "raw"  # or "log1p"
    var_floor_rel: float = 1e-8

    def __post_init__(self):
        if self.transform not in ("raw", "log1p"):
            raise DataError(f"unknown series transform {self.transform!r}")
        if self.min_segment < 1 or self.window < 1:
            raise DataError("min_segment and window must be positive")


def default_penalty(n: int) -> float:
    """``8 log n`` per change point.

    The BIC-like ``4 log n`` lets chance low-variance runs of 3-5 months
    through (about 7% of Gaussian null series of length 48); ``8 log n`` keeps
    the null false-alarm rate near 0.05% while a 5-sigma mean shift still
    clears it by a factor of two.
    """
    return 8.0 * math.log(n)


def variance_floor(series: np.ndarray, rel: float = 1e-8) -> float:
    scale = float(np.max(np.abs(series))) if len(series) else 0.0
    if scale == 0.0:
        scale = 1.0
    return max(rel * scale * scale, np.finfo(float).tiny)


def segment_cost_matrix(series, var_floor: float) -> np.ndarray:
    """Twice the negative Gaussian log-likelihood (constants dropped) of every segment.

    ``cost[s, t]`` covers ``series[s:t]``; entries with ``t <= s`` are inf. The
    variance is the MLE constrained to ``>= var_floor``, which keeps the cost
    finite on flat segments and sub-additive (so pruning stays exact).
    """
    x = np.asarray(series, dtype=float)
    n = len(x)
    var = np.zeros((n + 1, n + 1))
    length = np.arange(n + 1)[None, :] - np.arange(n + 1)[:, None]
    for s in range(n):
        # shifting by the segment's first value keeps the moment sums well conditioned
        d = x[s:] - x[s]
        L = np.arange(1, n - s + 1, dtype=float)
        m = np.cumsum(d) / L
        var[s, s + 1:] = np.maximum(np.cumsum(d * d) / L - m * m, 0.0)
    length = length.astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = np.where(
            var >= var_floor,
            length * (np.log(np.maximum(var, var_floor)) + 1.0),
            length * (math.log(var_floor) + var / var_floor),
        )
    cost[length <= 0] = np.inf
    return cost


def optimal_partition(cost: np.ndarray, penalty: float, min_segment: int) -> tuple[float, list[int]]:
    """Penalised optimal partitioning with PELT pruning.

    Returns the minimal total cost (sum of segment costs plus ``penalty`` per
    change point) and the change-point indices (segment starts, ascending).
    """
    n = cost.shape[0] - 1
    F = np.full(n + 1, np.inf)
    F[0] = -penalty
    last = np.zeros(n + 1, dtype=int)
    # prune_at[s]: time at which s was pruned; still usable before prune_at + min_segment
    prune_at = np.full(n + 1, np.iinfo(np.int64).max // 2)
    candidates = [0]
    for t in range(min_segment, n + 1):
        if t - min_segment >= min_segment:
            candidates.append(t - min_segment)
        best, best_s = np.inf, -1
        for s in candidates:
            if t - s < min_segment or t >= prune_at[s] + min_segment:
                continue
            val = F[s] + cost[s, t] + penalty
            if val < best:
                best, best_s = val, s
        F[t], last[t] = best, best_s
        if best_s < 0:
            continue
        slack = 1e-9 * (1.0 + abs(best))
        keep = []
        for s in candidates:
            if t - s >= min_segment and prune_at[s] > t and F[s] + cost[s, t] > F[t] + slack:
                prune_at[s] = t
            if t < prune_at[s] + min_segment:
                keep.append(s)
        candidates = keep
    if not np.isfinite(F[n]):
        raise SeriesTooShort("no admissible segmentation")
    cps = []
    t = n
    while t > 0:
        s = last[t]
        if s > 0:
            cps.append(int(s))
        t = s
    return float(F[n]), sorted(cps)


def detect_changepoints(series, penalty: float | None = None, min_segment: int = 3,
                        var_floor_rel: float = 1e-8) -> list[ChangePoint]:
    x = np.asarray(series, dtype=float)
    if min_segment < 1:
        raise DataError("min_segment must be positive")
    if len(x) < 2 * min_segment:
        raise SeriesTooShort(f"series of length {len(x)} needs >= {2 * min_segment} points")
    if not np.all(np.isfinite(x)):
        raise DataError("series contains non-finite values")
    if penalty is None:
        penalty = default_penalty(len(x))
    if penalty < 0:
        raise DataError("penalty must be non-negative")
    cost = segment_cost_matrix(x, variance_floor(x, var_floor_rel))
    _, idx = optimal_partition(cost, penalty, min_segment)
    bounds = [0] + idx + [len(x)]
    out = []
    for k, cp in enumerate(idx):
        pre, post = x[bounds[k]:cp], x[cp:bounds[k + 2]]
        pre_mean, post_mean = float(pre.mean()), float(post.mean())
        out.append(ChangePoint(
            index=cp,
            direction=Direction.UP if post_mean > pre_mean else Direction.DOWN,
            pre_mean=pre_mean,
            post_mean=post_mean,
            pre_var=float(pre.var()),
            post_var=float(post.var()),
        ))
    return out


def _cut(threshold) -> float:
    if isinstance(threshold, ThresholdSpec):
        return threshold.monthly_threshold
    return monthly_threshold(float(threshold))


def scenario_at(series, t: int, threshold, cps, window: int = 1,
                level_cut: float | None = None) -> Scenario:
    """Table-style scenario of month ``t``.

    Flow at or above the monthly cut counts as above. A change point affects
    months ``index .. index + window - 1``. An upward change point only counts
    when its post-change mean also reaches the cut; otherwise the month is
    treated as having no change point. ``level_cut`` overrides the cut used
    for that post-mean check (the labeller passes the transformed cut).
    """
    n = len(series)
    if not 0 <= t < n:
        raise IndexOutOfRange(f"month {t} outside series of length {n}")
    cut = _cut(threshold)
    above = bool(series[t] >= cut)
    direction = None
    for cp in cps:
        if cp.index <= t < cp.index + window:
            direction = cp.direction
    if direction is Direction.UP:
        active = [cp for cp in cps if cp.index <= t < cp.index + window][-1]
        if active.post_mean < (cut if level_cut is None else level_cut):
            direction = None
    return _SCENARIO_GRID[(above, direction)]


def scenario_to_class(s: Scenario) -> ClassLabel:
    return _CLASS_OF[Scenario(s)]


@dataclass
class Labels:
    """Labels of a whole panel at one yearly threshold."""

    threshold_yearly: float
    countries: tuple[str, ...]
    start: int
    scenarios: np.ndarray  # (C, T) of scenario codes
    classes: np.ndarray  # (C, T) int8 in {1, 2, 3}
    changepoints: dict[str, list[ChangePoint]] = field(default_factory=dict)

    def proportions(self) -> dict[str, float]:
        n = self.classes.size
        return {f"class{k}": float(np.sum(self.classes == k)) / n for k in (1, 2, 3)}

    def as_dict(self) -> dict:
        from .panel import CountryMonthKey

        out = {}
        for ci, c in enumerate(self.countries):
            for t in range(self.classes.shape[1]):
                y, m = ordinal_to_month(self.start + t)
                out[CountryMonthKey(c, y, m)] = ClassLabel(int(self.classes[ci, t]))
        return out


def label_panel(panel: FlowPanel, threshold, cp_config: ChangepointConfig | None = None) -> Labels:
    cfg = cp_config or ChangepointConfig()
    spec = threshold if isinstance(threshold, ThresholdSpec) else ThresholdSpec(threshold)
    cut = spec.monthly_threshold
    level_cut = math.log1p(cut) if cfg.transform == "log1p" else cut
    n_c, n_t = panel.flows.shape
    scen = np.empty((n_c, n_t), dtype="<U1")
    cls = np.empty((n_c, n_t), dtype=np.int8)
    cps_by_country = {}
    for ci, country in enumerate(panel.countries):
        raw = panel.flows[ci]
        x = np.log1p(raw) if cfg.transform == "log1p" else raw
        if n_t >= 2 * cfg.min_segment:
            cps = detect_changepoints(x, cfg.penalty, cfg.min_segment, cfg.var_floor_rel)
        else:
            cps = []
        cps_by_country[country] = cps
        for t in range(n_t):
            s = scenario_at(raw, t, spec, cps, cfg.window, level_cut=level_cut)
            scen[ci, t] = s.value
            cls[ci, t] = scenario_to_class(s)
    return Labels(spec.yearly_threshold, panel.countries, panel.start, scen, cls, cps_by_country)


LABEL_HEADER = ["country", "year", "month", "threshold_yearly", "scenario", "class"]


def write_labels(label_sets: list[Labels], header_lines=()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LABEL_HEADER)
    for lab in label_sets:
        for ci, c in enumerate(lab.countries):
            for t in range(lab.classes.shape[1]):
                y, m = ordinal_to_month(lab.start + t)
                w.writerow([c, y, m, format_float(lab.threshold_yearly), lab.scenarios[ci, t],
                            int(lab.classes[ci, t])])
    return buf.getvalue()


def read_labels(text: str, panel: FlowPanel) -> dict[float, np.ndarray]:
    """Parse a labels file into per-threshold (C, T) class arrays aligned to ``panel``."""
    rows = csv.reader(line for line in io.StringIO(text) if not line.startswith("#") and line.strip())
    header = next(rows, None)
    if header != LABEL_HEADER:
        raise DataError(f"unexpected labels header {header}")
    out: dict[float, np.ndarray] = {}
    ci_of = {c: i for i, c in enumerate(panel.countries)}
    for row in rows:
        thr = float(row[3])
        arr = out.setdefault(thr, np.zeros(panel.flows.shape, dtype=np.int8))
        t = month_ordinal(int(row[1]), int(row[2])) - panel.start
        if row[0] not in ci_of or not 0 <= t < panel.n_months:
            raise DataError(f"label row {row[:3]} not in panel")
        arr[ci_of[row[0]], t] = int(row[5])
    for thr, arr in out.items():
        if np.any(arr == 0):
            raise DataError(f"labels for threshold {thr} do not cover the panel")
    return out
