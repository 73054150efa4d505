"""Synthetic panels with planted regimes and known class labels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidScript
from .labeling import ClassLabel
from .panel import FlowPanel, month_ordinal, monthly_threshold

TENSION_LEAD = 6


@dataclass
class Regime:
    start: int  # month offset from the panel start
    duration: int
    mean: float
    sd: float


@dataclass
class CountryScript:
    country: str
    regimes: list[Regime]


@dataclass
class ScenarioScript:
    """Everything needed to regenerate a synthetic panel bit for bit.

    Feature columns, in order:

    ``cf_risk``
        conflict forecast: ``beta`` at months where an upward regime starts.
    ``slow_level``
        ``beta * log2(1 + regime mean)``.
    ``slow_tension``
        ``beta`` when an upward regime starts within the next six months.
    ``slow_aux*``
        one shared AR(1) nuisance factor, no signal.

    Each column gets independent N(0, noise_sd) noise; the nuisance columns
    get a tenth of it.
    """

    countries: list[CountryScript]
    n_months: int
    n_features: int = 8
    beta: float = 3.0
    noise_sd: float = 0.5
    seed: int = 0
    start_year: int = 2019
    start_month: int = 1
    missing_rate: float = 0.0

    def validate(self):
        if self.n_features < 6:
            raise InvalidScript("n_features must be >= 6")
        if self.beta < 0 or self.noise_sd < 0 or not 0 <= self.missing_rate < 1:
            raise InvalidScript("beta, noise_sd must be >= 0 and missing_rate in [0, 1)")
        names = [c.country for c in self.countries]
        if not names or len(set(names)) != len(names):
            raise InvalidScript("country ids must be present and unique")
        for c in self.countries:
            pos = 0
            for r in c.regimes:
                if r.start != pos or r.duration < 1:
                    raise InvalidScript(f"{c.country}: regimes must tile the months without gaps")
                if r.mean < 0 or r.sd < 0:
                    raise InvalidScript(f"{c.country}: regime mean and sd must be >= 0")
                pos += r.duration
            if pos != self.n_months:
                raise InvalidScript(f"{c.country}: regimes cover {pos} of {self.n_months} months")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "ScenarioScript":
        d = dict(d)
        d["countries"] = [CountryScript(c["country"], [Regime(**r) for r in c["regimes"]])
                          for c in d["countries"]]
        return cls(**d)


def feature_names(n_features: int) -> list[str]:
    return ["cf_risk", "slow_level", "slow_tension"] + [
        f"slow_aux{k + 1}" for k in range(n_features - 3)
    ]


def regime_means(script: ScenarioScript) -> np.ndarray:
    out = np.empty((len(script.countries), script.n_months))
    for ci, c in enumerate(script.countries):
        for r in c.regimes:
            out[ci, r.start:r.start + r.duration] = r.mean
    return out


def onsets(script: ScenarioScript) -> np.ndarray:
    """True where a regime starts with a higher mean than the one before."""
    out = np.zeros((len(script.countries), script.n_months), dtype=bool)
    for ci, c in enumerate(script.countries):
        for prev, r in zip(c.regimes, c.regimes[1:]):
            if r.mean > prev.mean:
                out[ci, r.start] = True
    return out


@dataclass
class Truth:
    script: ScenarioScript
    _means: np.ndarray = field(repr=False, default=None)
    _onsets: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self._means = regime_means(self.script)
        self._onsets = onsets(self.script)

    def classes(self, threshold_yearly: float) -> np.ndarray:
        """Planted labels: class 1 at upward onsets whose new mean reaches the cut."""
        cut = monthly_threshold(threshold_yearly)
        above = self._means >= cut
        cls = np.full(self._means.shape, int(ClassLabel.BELOW_THRESHOLD), dtype=np.int8)
        cls[above] = int(ClassLabel.SUSTAINED_HIGH)
        cls[above & self._onsets] = int(ClassLabel.SUDDEN_INCREASE)
        return cls


def generate(script: ScenarioScript) -> tuple[FlowPanel, Truth]:
    script.validate()
    n_c, n_t, n_f = len(script.countries), script.n_months, script.n_features
    means = regime_means(script)
    up = onsets(script)
    tension = np.zeros_like(up)
    for lead in range(1, TENSION_LEAD + 1):
        tension[:, :-lead] |= up[:, lead:]
    flows = np.empty((n_c, n_t))
    feats = np.empty((n_c, n_t, n_f))
    b, s = script.beta, script.noise_sd
    for ci, c in enumerate(script.countries):
        rng = np.random.default_rng(np.random.SeedSequence([script.seed, ci]))
        for r in c.regimes:
            sl = slice(r.start, r.start + r.duration)
            flows[ci, sl] = np.maximum(rng.normal(r.mean, r.sd, r.duration), 0.0)
        factor = np.empty(n_t)
        factor[0] = rng.normal()
        for t in range(1, n_t):
            factor[t] = 0.8 * factor[t - 1] + 0.6 * rng.normal()
        feats[ci, :, 0] = b * up[ci] + s * rng.normal(size=n_t)
        feats[ci, :, 1] = b * np.log2(1.0 + means[ci]) + s * rng.normal(size=n_t)
        feats[ci, :, 2] = b * tension[ci] + s * rng.normal(size=n_t)
        for j in range(3, n_f):
            feats[ci, :, j] = (1.0 + 0.1 * j) * factor + 0.1 * s * rng.normal(size=n_t)
        if script.missing_rate > 0:
            holes = rng.random((n_t, n_f)) < script.missing_rate
            feats[ci][holes] = np.nan
    panel = FlowPanel(
        tuple(c.country for c in script.countries),
        month_ordinal(script.start_year, script.start_month),
        flows,
        feats,
        tuple(feature_names(n_f)),
    )
    return panel, Truth(script)


def _alternating(offset: int, n_months: int, low: float, high: float, lo_len: int = 7,
                 hi_len: int = 5) -> list[Regime]:
    regimes, pos, is_high = [], 0, False
    first = lo_len + offset
    while pos < n_months:
        length = first if pos == 0 else (hi_len if is_high else lo_len)
        length = min(length, n_months - pos)
        mean = high if is_high else low
        regimes.append(Regime(pos, length, mean, max(1.0, 0.1 * mean)))
        pos += length
        is_high = not is_high
    return regimes


def _flat(n_months: int, mean: float) -> list[Regime]:
    return [Regime(0, n_months, mean, max(1.0, 0.1 * mean))]


def _step(n_months: int, at: int, before: float, after: float) -> list[Regime]:
    return [Regime(0, at, before, max(1.0, 0.1 * before)),
            Regime(at, n_months - at, after, max(1.0, 0.1 * after))]


def demo_script(seed: int = 0, beta: float = 3.0, noise_sd: float = 0.5, n_countries: int = 30,
                n_months: int = 60, n_surge: int = 3, n_features: int = 8) -> ScenarioScript:
    """Default demo: surge countries alternating low/high, sustained-high and low countries.

    Regime means sit at least a factor 1.4 away from the monthly cuts of the
    2,000 / 5,000 / 10,000 / 25,000 yearly thresholds.
    """
    if n_countries < n_surge + 4:
        raise InvalidScript("need room for surge, high and low countries")
    countries = []
    surge_offsets = [1, 2, 6, 4, 0, 3]
    for k in range(n_surge):
        countries.append(_alternating(surge_offsets[k % len(surge_offsets)], n_months, 40.0, 3500.0))
    high_means = [264.0, 590.0, 1320.0, 5000.0, 9000.0, 300.0, 650.0, 1500.0, 3200.0, 12000.0]
    n_high = min(len(high_means), (n_countries - n_surge) // 3)
    for k in range(n_high):
        countries.append(_flat(n_months, high_means[k]))
    countries.append(_step(n_months, n_months // 2, 3200.0, 590.0))
    countries.append(_step(n_months, n_months // 2 - 5, 20.0, 110.0))
    low_means = [5.0, 12.0, 25.0, 40.0, 60.0, 80.0, 100.0, 8.0, 30.0, 50.0, 70.0, 90.0, 15.0, 35.0]
    k = 0
    while len(countries) < n_countries:
        countries.append(_flat(n_months, low_means[k % len(low_means)]))
        k += 1
    scripts = [CountryScript(f"C{i + 1:02d}", regimes) for i, regimes in enumerate(countries)]
    return ScenarioScript(scripts, n_months, n_features=n_features, beta=beta, noise_sd=noise_sd,
                          seed=seed).validate()
