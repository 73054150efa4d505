import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dispwarn import pipeline as pl
from dispwarn.cli import main
from dispwarn.errors import ConfigInvalid

TINY = {
    "thresholds": [2000, 10000],
    "horizons": [1, 3],
    "search": {"n_draws": 2},
    "evaluation": {"holdout_months": 3},
    "synth": {"n_countries": 12, "n_months": 36, "n_features": 6},
}


def _config(tmp_path, extra=None, name="run.json"):
    cfg = json.loads(json.dumps(TINY))
    for k, v in (extra or {}).items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = _config(d)
    for cmd in ("synth", "label", "train", "predict", "evaluate"):
        assert main([cmd, "--config", cfg]) == 0, cmd
    return d


def _header(path):
    return [l for l in path.read_text().splitlines() if l.startswith("#")]


def test_outputs_carry_provenance(run_dir):
    cfg = pl.RunConfig.from_file(run_dir / "run.json")
    h = cfg.config_hash()
    for name in ("panel.csv", "truth.csv", "labels.csv", "risk.csv", "reports/metrics.csv",
                 "reports/calibration.csv"):
        head = _header(run_dir / name)
        assert f"# config_hash: {h}" in head and "# seed: 0" in head
        assert any(l.startswith("# versions: dispwarn=") for l in head)
    for name in ("script.json", "label_proportions.json", "bundle.json", "reports/curves.json"):
        doc = json.loads((run_dir / name).read_text())
        assert doc["meta"]["config_hash"] == h and doc["meta"]["seed"] == 0


def test_risk_file_shape(run_dir):
    rows = list(csv.DictReader(l for l in (run_dir / "risk.csv").open() if not l.startswith("#")))
    assert list(rows[0]) == pl.PREDICTION_HEADER
    # 12 countries x 3 held-out months x 2 horizons x 2 thresholds
    assert len(rows) == 12 * 3 * 2 * 2
    for r in rows:
        p = [float(r[f"p_class{k}"]) for k in (1, 2, 3)]
        assert abs(sum(p) - 1) < 1e-9 and all(0 <= v <= 1 for v in p)
        assert r["flag"] in ("0", "1")


def test_labels_and_proportions(run_dir):
    text = (run_dir / "labels.csv").read_text()
    body = [l for l in text.splitlines() if not l.startswith("#")]
    assert body[0] == "country,year,month,threshold_yearly,scenario,class"
    assert len(body) - 1 == 12 * 36 * 2
    props = json.loads((run_dir / "label_proportions.json").read_text())["proportions"]
    assert set(props) == {"2000.0", "10000.0"}


def test_evaluation_tables(run_dir):
    body = [l for l in (run_dir / "reports/metrics.csv").read_text().splitlines() if not l.startswith("#")]
    assert body[0].split(",")[:6] == ["threshold_yearly", "horizon", "n", "log_loss", "brier", "entropy"]
    assert len(body) == 1 + 4 + 1
    cal = [l for l in (run_dir / "reports/calibration.csv").read_text().splitlines() if not l.startswith("#")]
    assert cal[0] == "threshold_yearly,horizon,class,ece,mce" and len(cal) == 1 + 5 * 3
    curves = json.loads((run_dir / "reports/curves.json").read_text())
    assert {"reliability", "roc"} <= set(curves["cells"][0])


def test_predict_months_override(run_dir, tmp_path):
    out = tmp_path / "copy"
    out.mkdir()
    cfg = _config(out, {"paths": {"out_dir": str(run_dir), "predictions": str(out / "risk.csv")}})
    assert main(["predict", "--config", cfg, "--months", "2021-06,2021-07"]) == 0
    rows = [l for l in (out / "risk.csv").read_text().splitlines() if not l.startswith("#")][1:]
    assert {tuple(r.split(",")[1:3]) for r in rows} == {("2021", "6"), ("2021", "7")}


def test_train_is_byte_identical_on_rerun(run_dir, tmp_path):
    first = (run_dir / "bundle.json").read_bytes()
    cfg = _config(tmp_path, {"paths": {"out_dir": str(run_dir), "models": str(tmp_path / "b.json")}})
    assert main(["train", "--config", cfg, "--jobs", "3"]) == 0
    assert (tmp_path / "b.json").read_bytes() == first


def test_exit_codes(tmp_path):
    cfg = _config(tmp_path)
    assert main(["predict", "--config", cfg]) == 3  # no bundle yet
    assert main(["label", "--config", cfg]) == 3  # no panel yet
    bad = tmp_path / "bad.json"
    bad.write_text('{"thresholds": [5000, 2000]}')
    assert main(["synth", "--config", str(bad)]) == 2
    bad.write_text("{not json")
    assert main(["synth", "--config", str(bad)]) == 2
    bad.write_text('{"no_such_key": 1}')
    assert main(["synth", "--config", str(bad)]) == 2
    assert main(["synth", "--config", str(tmp_path / "missing.json")]) == 3
    assert main(["synth", "--config", cfg, "--jobs", "0"]) == 2
    assert main(["bogus"]) == 2
    # corrupt panel -> data error
    assert main(["synth", "--config", cfg]) == 0
    (tmp_path / "panel.csv").write_text("country,year,month,flow\nAAA,2020,1,-4\n")
    assert main(["label", "--config", cfg]) == 4


def test_seed_override_changes_panel(tmp_path):
    cfg = _config(tmp_path)
    assert main(["synth", "--config", cfg, "--seed", "5"]) == 0
    a = (tmp_path / "panel.csv").read_text()
    assert "# seed: 5" in a
    assert main(["synth", "--seed", "6", "--config", cfg]) == 0
    assert (tmp_path / "panel.csv").read_text() != a


def test_stage_isolation(tmp_path):
    cfg = _config(tmp_path)
    assert main(["synth", "--config", cfg]) == 0
    assert main(["label", "--config", cfg]) == 0
    panel = (tmp_path / "panel.csv").read_bytes()
    (tmp_path / "labels.csv").unlink()
    assert main(["label", "--config", cfg]) == 0
    assert (tmp_path / "panel.csv").read_bytes() == panel


EDITS = [
    ("thresholds", [2000, 6000]),
    ("horizons", [1, 2]),
    ("changepoint", {"penalty": 10.0}),
    ("changepoint", {"min_segment": 4}),
    ("pca", {"k": 4}),
    ("pca", {"bypass_conflict": True}),
    ("search", {"n_draws": 30}),
    ("search", {"n_folds": 4}),
    ("calibration", {"fbeta": 2.0}),
    ("calibration", {"prior_correction": "on"}),
    ("evaluation", {"holdout_months": 6}),
    ("evaluation", {"entropy_base": 2}),
    ("roles", [["*", "slow"]]),
    ("synth", {"beta": 1.0}),
]


@given(st.lists(st.sampled_from(range(len(EDITS))), min_size=1, max_size=4, unique=True))
def test_config_hash_tracks_semantic_edits(picks):
    base = pl.RunConfig.from_dict({})
    d = json.loads(json.dumps(base.data))
    for i in picks:
        key, val = EDITS[i]
        d[key] = {**d[key], **val} if isinstance(val, dict) else val
    assert pl.RunConfig.from_dict(d).config_hash() != base.config_hash()


def test_config_hash_ignores_paths():
    a = pl.RunConfig.from_dict({})
    b = pl.RunConfig.from_dict({"paths": {"out_dir": "elsewhere"}})
    assert a.config_hash() == b.config_hash()


def test_config_validation():
    for bad in ({"horizons": [0]}, {"search": {"n_draws": 0}}, {"search": {"n_draws": 649}},
                {"pca": {"kind": "elbow"}}, {"roles": [["*", "fast"]]}, {"seed": -1},
                {"predict": {"months": ["2020-13"]}}):
        with pytest.raises(ConfigInvalid):
            pl.RunConfig.from_dict(bad)
    assert pl.RunConfig.from_dict({"search": {"n_draws": 648}})
