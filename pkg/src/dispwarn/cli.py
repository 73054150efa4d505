"""Command line: ``dispwarn {synth,label,train,predict,evaluate} --config run.json``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigInvalid, DataError, MissingArtifact, PipelineError
from .labeling import read_labels, write_labels
from .panel import load_panel, write_panel
from . import pipeline as pl

log = logging.getLogger("dispwarn")


def _write(path: Path, text: str):
    """Write through a temporary file so a failed stage never leaves half a file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _read(path: Path, what: str) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise MissingArtifact(f"{what} not found at {path}; run the earlier stage first") from exc


def _panel(cfg: pl.RunConfig):
    path = cfg.path("panel")
    if not path.exists():
        raise MissingArtifact(f"panel not found at {path}; run `synth` or provide one")
    return load_panel(path, cfg["schema"])


def _bundle(cfg: pl.RunConfig) -> dict:
    text = _read(cfg.path("models"), "model bundle")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"model bundle is not valid JSON: {exc}") from exc


def _labels(cfg: pl.RunConfig, panel):
    return read_labels(_read(cfg.path("labels"), "labels file"), panel)


def cmd_synth(cfg: pl.RunConfig, args) -> list[Path]:
    script, panel, truth = pl.run_synth(cfg)
    head = pl.header_lines(cfg, "synth")
    paths = [cfg.path("panel"), cfg.path("truth"), cfg.path("script")]
    _write(paths[0], write_panel(panel, header_lines=head))
    _write(paths[1], pl.truth_csv(panel, truth, cfg["thresholds"], head))
    doc = {"meta": pl.meta(cfg, "synth"), "script": json.loads(script.to_json())}
    _write(paths[2], pl.dump_json(doc))
    return paths


def cmd_label(cfg: pl.RunConfig, args) -> list[Path]:
    panel = _panel(cfg)
    sets = pl.run_label(cfg, panel)
    _write(cfg.path("labels"), write_labels(sets, pl.header_lines(cfg, "label")))
    props = {"meta": pl.meta(cfg, "label"),
             "proportions": {pl.format_float(s.threshold_yearly): s.proportions() for s in sets}}
    _write(cfg.path("label_proportions"), pl.dump_json(props))
    return [cfg.path("labels"), cfg.path("label_proportions")]


def cmd_train(cfg: pl.RunConfig, args) -> list[Path]:
    panel = _panel(cfg)
    bundle = pl.run_train(cfg, panel, _labels(cfg, panel), jobs=args.jobs)
    _write(cfg.path("models"), pl.dump_json(bundle))
    return [cfg.path("models")]


def cmd_predict(cfg: pl.RunConfig, args) -> list[Path]:
    bundle = _bundle(cfg)
    panel = _panel(cfg)
    months = args.months.split(",") if getattr(args, "months", None) else None
    try:
        targets = pl.target_months(cfg, panel, months)
    except ValueError as exc:
        raise ConfigInvalid(f"--months: {exc}") from exc
    rows = pl.run_predict(cfg, panel, bundle, targets)
    _write(cfg.path("predictions"),
           pl._csv_text(pl.PREDICTION_HEADER, rows, pl.header_lines(cfg, "predict")))
    return [cfg.path("predictions")]


def cmd_evaluate(cfg: pl.RunConfig, args) -> list[Path]:
    bundle = _bundle(cfg)
    panel = _panel(cfg)
    result = pl.run_evaluate(cfg, panel, bundle, _labels(cfg, panel))
    out = []
    for name, text in pl.evaluation_files(cfg, result).items():
        path = cfg.path("reports") / name
        _write(path, text)
        out.append(path)
    return out


COMMANDS = {"synth": cmd_synth, "label": cmd_label, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate}


def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", type=Path, help="run config (JSON)", **d)
    p.add_argument("--seed", type=int, help="override the config seed (u64)", **d)
    p.add_argument("--jobs", type=int, help="worker threads; results do not depend on it",
                   **({"default": argparse.SUPPRESS} if suppress else {"default": 1}))
    p.add_argument("-v", "--verbose", action="store_true", **d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dispwarn", description=__doc__)
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        _global_flags(sp, suppress=True)
        if name == "predict":
            sp.add_argument("--months", help="comma-separated target months YYYY-MM")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which is also the ConfigInvalid code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs is None or args.jobs < 1:
            raise ConfigInvalid("--jobs must be >= 1")
        cfg = pl.RunConfig.from_file(args.config) if args.config else pl.RunConfig.from_dict()
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        for path in COMMANDS[args.command](cfg, args):
            print(path)
    except PipelineError as exc:
        print(f"dispwarn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
