import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dispwarn.errors import AllMissingColumn, DataError, InsufficientHistory, UnmappedColumn
from dispwarn.features import (
    CONFLICT,
    SLOW,
    FeaturePipeline,
    PCAPolicy,
    RankDeficientWarning,
    apply,
    audit_leakage,
    build_design,
    fit_pca,
    fit_standardizer,
    project,
    project_back,
    resolve_roles,
)
from dispwarn.panel import FlowPanel, format_month, month_ordinal, parse_month


def _panel(n_c=2, n_t=8, start=month_ordinal(2023, 1)):
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(n_c, n_t, 3))
    return FlowPanel(tuple(f"C{i}" for i in range(n_c)), start, rng.exponential(10, (n_c, n_t)),
                     feats, ("gdp", "food", "cf_risk"))


ROLES = {"gdp": SLOW, "food": SLOW, "cf_risk": CONFLICT}


def test_resolve_roles_first_match_wins():
    got = resolve_roles(["cf_risk", "gdp"], [("cf_*", CONFLICT), ("*", SLOW)])
    assert got == {"cf_risk": CONFLICT, "gdp": SLOW}
    with pytest.raises(UnmappedColumn):
        resolve_roles(["gdp"], [("cf_*", CONFLICT)])


def test_horizon_three_lags():
    # predicting March 2024 at horizon 3 reads slow columns from December 2023
    p = _panel(n_t=12, start=month_ordinal(2023, 4))
    d = build_design(p, None, 3, ROLES, target_months=[parse_month("2024-03")])
    assert len(d.months) == 2
    assert format_month(int(d.source_month(0)[0])) == "2023-12"
    assert format_month(int(d.source_month(2)[0])) == "2024-03"
    t = parse_month("2024-03") - p.start
    np.testing.assert_array_equal(d.X[0], [*p.features[0, t - 3, :2], p.features[0, t, 2]])


def test_horizon_one_two_months():
    d = build_design(_panel(n_t=2), None, 1, ROLES)
    assert set(d.months.tolist()) == {month_ordinal(2023, 2)}


def test_horizon_six_on_46_months():
    d = build_design(_panel(n_c=1, n_t=46), None, 6, ROLES)
    assert len(d.months) == 40


def test_design_errors():
    with pytest.raises(InsufficientHistory):
        build_design(_panel(n_t=3), None, 6, ROLES)
    with pytest.raises(UnmappedColumn):
        build_design(_panel(), None, 1, {"gdp": SLOW})


def test_labels_align_with_target_month():
    p = _panel()
    labels = np.arange(16).reshape(2, 8) % 3 + 1
    d = build_design(p, labels, 2, ROLES)
    ci = np.array([p.countries.index(c) for c in d.countries])
    np.testing.assert_array_equal(d.y, labels[ci, d.months - p.start])


@pytest.mark.parametrize("h", [1, 3, 6])
def test_audit_clean(h):
    p = _panel(n_c=3, n_t=20)
    assert audit_leakage(build_design(p, None, h, ROLES), p) == []


def test_audit_catches_shifted_column():
    p = _panel(n_t=10)
    d = build_design(p, None, 3, ROLES)
    d.X[:, 0] = p.features[[p.countries.index(c) for c in d.countries], d.months - p.start - 2, 0]
    assert audit_leakage(d, p)


def test_design_csv_header():
    d = build_design(_panel(), np.ones((2, 8), dtype=int), 1, ROLES)
    assert d.to_csv().splitlines()[0] == "country,year,month,horizon,gdp,food,cf_risk,class"


def test_standardizer_basic():
    X = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    std = fit_standardizer(X)
    Z = apply(std, X)
    assert Z.shape == (3, 1)
    assert abs(Z.mean()) < 1e-12 and abs(Z.std() - 1) < 1e-12
    assert std.dropped == {1: "constant"}


def test_standardizer_uses_train_statistics():
    rng = np.random.default_rng(1)
    train, test = rng.normal(0, 1, (50, 2)), rng.normal(3, 2, (20, 2))
    std = fit_standardizer(train)
    Z = apply(std, test)
    np.testing.assert_allclose(Z, (test - train.mean(0)) / train.std(0))
    assert not np.allclose(Z.mean(0), 0)


def test_standardizer_imputes_median_and_rejects_all_missing():
    X = np.array([[1.0, np.nan], [np.nan, np.nan], [3.0, np.nan], [10.0, np.nan]])
    with pytest.raises(AllMissingColumn):
        fit_standardizer(X)
    std = fit_standardizer(X[:, :1])
    assert std.medians[0] == 3.0


def test_collinear_column_dropped():
    rng = np.random.default_rng(2)
    a = rng.normal(size=40)
    X = np.c_[a, rng.normal(size=40), -2 * a + 1]
    std = fit_standardizer(X)
    assert std.keep.tolist() == [0, 1]
    assert "collinear" in std.dropped[2]


@given(st.integers(2, 40), st.integers(1, 6), st.integers(0, 10**6))
def test_standardized_moments(n, p, seed):
    X = np.random.default_rng(seed).normal(5, 3, (n, p))
    std = fit_standardizer(X, dedupe=False)
    Z = apply(std, X)
    assert np.all(np.abs(Z.mean(0)) < 1e-9) and np.all(np.abs(Z.std(0) - 1) < 1e-9)


def test_pca_exact_subspace():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 12))
    m = fit_pca(X, PCAPolicy("fixed", 5))
    assert np.cumsum(m.explained_variance_ratio)[4] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(m.loadings @ m.loadings.T, np.eye(5), atol=1e-10)
    s = project(m, X)
    np.testing.assert_allclose(project(m, project_back(m, s)), s, atol=1e-8)


def test_pca_isotropic_variance_policy():
    X = np.random.default_rng(4).normal(size=(100000, 10))
    m = fit_pca(X, PCAPolicy("variance", target=0.9))
    assert m.k == 9
    np.testing.assert_allclose(m.explained_variance_ratio, 0.1, atol=0.005)
    assert np.all(np.diff(m.explained_variance_ratio) <= 0)


def test_pca_five_components_hold_ninety_percent():
    rng = np.random.default_rng(5)
    # five strong directions carrying 90% of the variance, seven weak ones the rest
    spectrum = np.r_[np.full(5, 0.9 / 5), np.full(7, 0.1 / 7)]
    basis, _ = np.linalg.qr(rng.normal(size=(12, 12)))
    X = rng.normal(size=(200000, 12)) * np.sqrt(spectrum) @ basis.T
    # nudge so the cumulative share clears 0.9 robustly
    X += 0.05 * (rng.normal(size=(200000, 5)) @ basis[:, :5].T)
    assert fit_pca(X, PCAPolicy("variance", target=0.9)).k == 5
    assert fit_pca(X, PCAPolicy("fixed", 5)).k == 5


def test_pca_rank_deficient_warns():
    X = np.random.default_rng(6).normal(size=(50, 2)) @ np.ones((2, 6))
    with pytest.warns(RankDeficientWarning):
        m = fit_pca(X, PCAPolicy("fixed", 5))
    assert m.k == 1


def test_pca_sign_convention_and_determinism():
    X = np.random.default_rng(7).normal(size=(80, 6))
    a, b = fit_pca(X), fit_pca(-X)
    for row in a.loadings:
        assert row[np.argmax(np.abs(row))] > 0
    np.testing.assert_array_equal(a.loadings, fit_pca(X).loadings)
    np.testing.assert_allclose(np.abs(a.loadings), np.abs(b.loadings), atol=1e-10)


def test_duplicate_column_leaves_scores_unchanged():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(60, 4)) @ rng.normal(size=(4, 4))
    roles = [SLOW] * 4
    base = FeaturePipeline.fit(X, list("abcd"), roles, PCAPolicy("fixed", 3))
    dup = FeaturePipeline.fit(np.c_[X, X[:, 1]], list("abcde"), roles + [SLOW], PCAPolicy("fixed", 3))
    np.testing.assert_allclose(np.abs(base.transform(X)), np.abs(dup.transform(np.c_[X, X[:, 1]])),
                               atol=1e-8)


def test_pipeline_indicators_bypass_and_round_trip():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(100, 6))
    X[rng.random(100) < 0.2, 0] = np.nan
    roles = [SLOW] * 5 + [CONFLICT]
    pipe = FeaturePipeline.fit(X, list("abcdef"), roles, PCAPolicy("fixed", 3), bypass_conflict=True)
    assert pipe.indicator_cols == [0]
    assert pipe.output_names == ["pc1", "pc2", "pc3", "f"]
    Z = pipe.transform(X)
    assert Z.shape == (100, 4) and np.all(np.isfinite(Z))
    again = FeaturePipeline.from_dict(pipe.to_dict())
    np.testing.assert_array_equal(again.transform(X), Z)


def test_pipeline_all_conflict_bypass_has_no_pca_inputs():
    X = np.random.default_rng(10).normal(size=(30, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pipe = FeaturePipeline.fit(X, ["a", "b"], [CONFLICT, CONFLICT], bypass_conflict=True)
    assert pipe.transform(X).shape == (30, 2)


def test_bad_policy():
    with pytest.raises(DataError):
        PCAPolicy("elbow")
