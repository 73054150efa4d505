"""Country-month panel ingestion, validation and threshold arithmetic."""

from __future__ import annotations

import csv
import io
import os
import re
from dataclasses import dataclass, field
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    DataError,
    DuplicateKey,
    NegativeFlow,
    NonPositiveThreshold,
    RaggedFeatures,
    UnbalancedPanel,
    UnknownCountry,
)

REQUIRED = ("country", "year", "month", "flow")
DEFAULT_SCHEMA = {name: name for name in REQUIRED}
_COUNTRY_RE = re.compile(r"^[A-Z0-9]+$")


def month_ordinal(year: int, month: int) -> int:
    if not 1 <= month <= 12:
        raise DataError(f"month-of-year must be in 1..12, got {month}")
    return year * 12 + (month - 1)


def ordinal_to_month(ordinal: int) -> tuple[int, int]:
    return ordinal // 12, ordinal % 12 + 1


def parse_month(text: str) -> int:
    """Parse ``YYYY-MM`` into a month ordinal."""
    try:
        year, month = text.strip().split("-")
        return month_ordinal(int(year), int(month))
    except ValueError as exc:
        raise DataError(f"bad month {text!r}, expected YYYY-MM") from exc


def format_month(ordinal: int) -> str:
    year, month = ordinal_to_month(ordinal)
    return f"{year:04d}-{month:02d}"


class CountryMonthKey(NamedTuple):
    country: str
    year: int
    month: int

    @classmethod
    def make(cls, country: str, year: int, month: int) -> "CountryMonthKey":
        if not country or not _COUNTRY_RE.match(country):
            raise DataError(f"country id must be non-empty uppercase alphanumeric, got {country!r}")
        if not 1 <= month <= 12:
            raise DataError(f"month-of-year must be in 1..12, got {month}")
        return cls(country, int(year), int(month))

    @property
    def ordinal(self) -> int:
        return month_ordinal(self.year, self.month)


@dataclass(frozen=True)
class ThresholdSpec:
    yearly_threshold: float
    monthly_threshold: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "monthly_threshold", monthly_threshold(self.yearly_threshold))


def monthly_threshold(yearly: float) -> float:
    """Monthly equivalent of a yearly persons threshold (plain division by 12)."""
    yearly = float(yearly)
    if not yearly > 0 or not np.isfinite(yearly):
        raise NonPositiveThreshold(f"yearly threshold must be positive, got {yearly}")
    return yearly / 12.0


@dataclass(frozen=True, eq=False)
class FlowPanel:
    """Balanced country x month panel.

    ``flows`` has shape (countries, months); ``features`` has shape
    (countries, months, F) with NaN in missing cells and ``missing``
    holding the explicit flags.
    """

    countries: tuple[str, ...]
    start: int
    flows: np.ndarray
    features: np.ndarray
    feature_names: tuple[str, ...]
    missing: np.ndarray = None

    def __post_init__(self):
        flows = np.array(self.flows, dtype=float)
        n_c = len(self.countries)
        if flows.ndim != 2 or flows.shape[0] != n_c:
            raise UnbalancedPanel("flows must have shape (countries, months)")
        feats = np.array(self.features, dtype=float).reshape(n_c, flows.shape[1], len(self.feature_names))
        if np.any(np.isnan(flows)) or np.any(flows < 0):
            raise NegativeFlow("flows must be finite and non-negative")
        if len(set(self.countries)) != n_c:
            raise DuplicateKey("duplicate country ids")
        if self.missing is None:
            missing = np.isnan(feats)
        else:
            missing = np.array(self.missing, dtype=bool) | np.isnan(feats)
        feats[missing] = np.nan
        for arr in (flows, feats, missing):
            arr.setflags(write=False)
        object.__setattr__(self, "countries", tuple(self.countries))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "flows", flows)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "missing", missing)

    @property
    def n_months(self) -> int:
        return self.flows.shape[1]

    @property
    def months(self) -> range:
        return range(self.start, self.start + self.n_months)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def __len__(self) -> int:
        return self.flows.size

    def country_index(self, country: str) -> int:
        try:
            return self.countries.index(country)
        except ValueError:
            raise UnknownCountry(f"country {country!r} not in panel") from None

    def keys(self) -> list[CountryMonthKey]:
        return [
            CountryMonthKey(c, *ordinal_to_month(m)) for c in self.countries for m in self.months
        ]

    def equals(self, other: "FlowPanel") -> bool:
        return (
            self.countries == other.countries
            and self.start == other.start
            and self.feature_names == other.feature_names
            and np.array_equal(self.flows, other.flows)
            and np.array_equal(self.missing, other.missing)
            and np.array_equal(self.features, other.features, equal_nan=True)
        )


def flow_series(panel: FlowPanel, country: str) -> np.ndarray:
    return panel.flows[panel.country_index(country)]


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8"), True
    return source, False


def _data_lines(handle: Iterable[str]):
    for line in handle:
        if line.startswith("#") or not line.strip():
            continue
        yield line


def _parse_float(text: str, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"non-numeric {what}: {text!r}") from None


def load_panel(source, schema: dict | None = None, delimiter: str = ",") -> FlowPanel:
    """Read a delimited panel file (path or text stream) into a validated FlowPanel.

    ``schema`` maps the roles country/year/month/flow to column names. Lines
    starting with ``#`` are provenance headers and are skipped. Every other
    column is a feature, kept in header order; empty cells are flagged missing.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    handle, owned = _open_text(source)
    try:
        reader = csv.reader(_data_lines(handle), delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty panel file") from None
        try:
            idx = {role: header.index(schema[role]) for role in REQUIRED}
        except ValueError as exc:
            raise DataError(f"missing required column: {exc}") from None
        feat_cols = [i for i in range(len(header)) if i not in idx.values()]
        feature_names = tuple(header[i] for i in feat_cols)

        records: dict[tuple[str, int], tuple[float, list[float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise RaggedFeatures(f"row {lineno}: {len(row)} fields, header has {len(header)}")
            key = CountryMonthKey.make(
                row[idx["country"]].strip(), int(row[idx["year"]]), int(row[idx["month"]])
            )
            flow = _parse_float(row[idx["flow"]], "flow")
            if not flow >= 0 or not np.isfinite(flow):
                raise NegativeFlow(f"row {lineno}: flow {flow} for {key.country} {key.year}-{key.month}")
            feats = [np.nan if not row[i].strip() else _parse_float(row[i], header[i]) for i in feat_cols]
            k = (key.country, key.ordinal)
            if k in records:
                raise DuplicateKey(f"duplicate row for {key.country} {key.year}-{key.month:02d}")
            records[k] = (flow, feats)
    finally:
        if owned:
            handle.close()

    if not records:
        raise DataError("panel has no rows")
    countries = tuple(sorted({c for c, _ in records}))
    ords = [m for _, m in records]
    start, stop = min(ords), max(ords) + 1
    n_months = stop - start
    if len(records) != len(countries) * n_months:
        absent = next(
            (c, m) for c in countries for m in range(start, stop) if (c, m) not in records
        )
        raise UnbalancedPanel(
            f"panel not balanced: {absent[0]} has no row for {format_month(absent[1])}"
        )
    flows = np.empty((len(countries), n_months))
    features = np.empty((len(countries), n_months, len(feature_names)))
    for ci, c in enumerate(countries):
        for t in range(n_months):
            flow, feats = records[(c, start + t)]
            flows[ci, t] = flow
            features[ci, t] = feats
    return FlowPanel(countries, start, flows, features, feature_names)


def format_float(value: float) -> str:
    """Canonical numeral: shortest round-tripping repr."""
    return repr(float(value))


def write_panel(panel: FlowPanel, sink=None, header_lines: Sequence[str] = (), delimiter: str = ","):
    """Write the panel in canonical (country, month) order. Returns text if ``sink`` is None."""
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(list(REQUIRED) + list(panel.feature_names))
    for ci, country in enumerate(panel.countries):
        for t, m in enumerate(panel.months):
            year, month = ordinal_to_month(m)
            feats = ["" if panel.missing[ci, t, j] else format_float(v) for j, v in enumerate(panel.features[ci, t])]
            writer.writerow([country, year, month, format_float(panel.flows[ci, t])] + feats)
    text = buf.getvalue()
    if sink is None:
        return text
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sink.write(text)
    return text
