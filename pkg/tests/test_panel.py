import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dispwarn.errors import (
    DuplicateKey,
    NegativeFlow,
    NonPositiveThreshold,
    RaggedFeatures,
    UnbalancedPanel,
    UnknownCountry,
)
from dispwarn.panel import (
    CountryMonthKey,
    FlowPanel,
    ThresholdSpec,
    flow_series,
    format_month,
    load_panel,
    month_ordinal,
    monthly_threshold,
    ordinal_to_month,
    parse_month,
    write_panel,
)

SMALL = """country,year,month,flow,gdp,conflict
AAA,2020,1,10,1.5,0.1
AAA,2020,2,20,,0.2
AAA,2020,3,30,1.7,0.3
BBB,2020,1,0,2.0,
BBB,2020,2,5.5,2.1,0.0
BBB,2020,3,7,2.2,0.9
"""


def test_small_panel_is_balanced():
    p = load_panel(io.StringIO(SMALL))
    assert len(p) == 6
    assert p.countries == ("AAA", "BBB")
    assert p.feature_names == ("gdp", "conflict")
    assert p.missing[0, 1, 0] and p.missing[1, 0, 1]
    assert np.isnan(p.features[0, 1, 0])
    assert p.missing.sum() == 2


def test_missing_row_is_unbalanced():
    text = "\n".join(l for l in SMALL.splitlines() if not l.startswith("BBB,2020,2"))
    with pytest.raises(UnbalancedPanel):
        load_panel(io.StringIO(text))


def test_gap_in_months_is_unbalanced():
    text = "country,year,month,flow\nAAA,2020,1,1\nAAA,2020,3,1\n"
    with pytest.raises(UnbalancedPanel):
        load_panel(io.StringIO(text))


@pytest.mark.parametrize("text,err", [
    ("country,year,month,flow\nAAA,2020,1,1\nAAA,2020,1,2\n", DuplicateKey),
    ("country,year,month,flow\nAAA,2020,1,-1\n", NegativeFlow),
    ("country,year,month,flow,x\nAAA,2020,1,1\n", RaggedFeatures),
])
def test_load_errors(text, err):
    with pytest.raises(err):
        load_panel(io.StringIO(text))


def test_rows_sorted_and_header_comments_skipped():
    lines = SMALL.splitlines()
    shuffled = "# provenance\n" + "\n".join([lines[0]] + lines[1:][::-1]) + "\n"
    assert load_panel(io.StringIO(shuffled)).equals(load_panel(io.StringIO(SMALL)))


def test_schema_mapping():
    text = SMALL.replace("country,year,month,flow", "iso,yr,mo,persons")
    p = load_panel(io.StringIO(text), {"country": "iso", "year": "yr", "month": "mo", "flow": "persons"})
    assert p.equals(load_panel(io.StringIO(SMALL)))


def test_paper_panel_size():
    # 219 countries x 46 months
    rows = ["country,year,month,flow"]
    for c in range(219):
        for m in range(46):
            y, mo = ordinal_to_month(month_ordinal(2019, 1) + m)
            rows.append(f"C{c:03d},{y},{mo},{c + m}")
    p = load_panel(io.StringIO("\n".join(rows)))
    assert len(p) == 10074
    assert len(flow_series(p, "C000")) == 46


def test_monthly_threshold():
    assert monthly_threshold(2400) == 200
    assert monthly_threshold(12) == 1
    assert monthly_threshold(2000) == 2000 / 12
    assert ThresholdSpec(2000).monthly_threshold == 2000 / 12
    for bad in (0, -5):
        with pytest.raises(NonPositiveThreshold):
            monthly_threshold(bad)


@given(st.floats(1e-6, 1e9), st.floats(1e-6, 1e9))
def test_monthly_threshold_monotone(a, b):
    if a < b:
        assert monthly_threshold(a) < monthly_threshold(b)


def test_flow_series():
    p = load_panel(io.StringIO(SMALL))
    np.testing.assert_array_equal(flow_series(p, "BBB"), [0, 5.5, 7])
    with pytest.raises(UnknownCountry):
        flow_series(p, "ZZZ")
    one = load_panel(io.StringIO("country,year,month,flow\nAAA,2021,5,3\n"))
    assert len(flow_series(one, "AAA")) == 1


def test_keys_and_months():
    assert parse_month("2024-03") == month_ordinal(2024, 3)
    assert format_month(month_ordinal(2023, 12)) == "2023-12"
    assert CountryMonthKey.make("AFG", 2024, 3).ordinal == month_ordinal(2024, 3)
    for bad in (("afg", 2024, 3), ("", 2024, 3), ("AFG", 2024, 13)):
        with pytest.raises(ValueError):
            CountryMonthKey.make(*bad)


def test_panel_is_immutable():
    p = load_panel(io.StringIO(SMALL))
    with pytest.raises(ValueError):
        p.flows[0, 0] = 1.0


@st.composite
def panels(draw):
    n_c, n_t, n_f = draw(st.integers(1, 4)), draw(st.integers(1, 6)), draw(st.integers(0, 3))
    flows = draw(st.lists(st.floats(0, 1e7), min_size=n_c * n_t, max_size=n_c * n_t))
    feats = draw(st.lists(st.one_of(st.none(), st.floats(-1e6, 1e6)), min_size=n_c * n_t * n_f,
                          max_size=n_c * n_t * n_f))
    start = draw(st.integers(month_ordinal(1990, 1), month_ordinal(2030, 1)))
    return n_c, n_t, n_f, flows, feats, start


@given(panels())
def test_round_trip(args):
    n_c, n_t, n_f, flows, feats, start = args
    f = np.array([np.nan if v is None else v for v in feats], dtype=float).reshape(n_c, n_t, n_f)
    p = FlowPanel(tuple(f"C{i}" for i in range(n_c)), start, np.reshape(flows, (n_c, n_t)), f,
                  tuple(f"f{j}" for j in range(n_f)))
    text = write_panel(p, header_lines=["hash: x"])
    q = load_panel(io.StringIO(text))
    assert q.equals(p)
    assert write_panel(q, header_lines=["hash: x"]) == text
    assert sum(len(flow_series(q, c)) for c in q.countries) == len(q)
