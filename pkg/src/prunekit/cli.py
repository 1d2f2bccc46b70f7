"""``prunekit`` command line: reproducible runs driven by a single JSON config."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from . import __version__
from .data import extract_features, load_feature_table, load_timeseries_dir, write_feature_table, write_timeseries_dir
from .errors import ConfigError, PrunekitError
from .evaluation import cross_validate
from .explain import METHODS, report_to_json
from .models import ModelSpec, train
from .pipeline import (
    DEFAULT_GRID,
    SyntheticSeriesSpec,
    SyntheticSpec,
    feature_sweep,
    generate_synthetic,
    generate_synthetic_series,
    interval_experiment,
    rank_features,
)
from .plotting import importance_bar_chart, interval_chart, sweep_chart

log = logging.getLogger("prunekit")

COMMANDS = ("preprocess", "train", "explain", "sweep", "intervals", "synth")
INPUT_FORMATS = ("feature_csv", "timeseries_dir", "synthetic", "synthetic_series")
DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 11))
LOCK_NAME = ".prunekit.lock"


@dataclass
class RunConfig:
    input: dict
    target: str
    model: ModelSpec
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    grid: List[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    fractions: List[float] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    k: int = 5
    seed: int = 0
    output_dir: Path = Path("out")
    repeats: int = 10
    n_permutations: int = 100
    include_dc: bool = True
    base_dir: Path = Path(".")
    digest: str = ""

    @property
    def input_format(self) -> str:
        return self.input["format"]

    def input_path(self) -> Path:
        return self.base_dir / self.input["path"]


_KNOWN_KEYS = {"input", "target", "model", "methods", "grid", "fractions", "k", "seed", "output_dir",
               "repeats", "n_permutations", "include_dc"}


def _int(obj, key, default, minimum):
    value = obj.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"{key!r} must be an integer >= {minimum}, got {value!r}")
    return value


def parse_config(raw: dict, base_dir: Path = Path("."), digest: str = "") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw).difference(_KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    source = raw.get("input")
    if not isinstance(source, dict) or "format" not in source:
        raise ConfigError("'input' must be an object with a 'format' field (exactly one input source)")
    if source["format"] not in INPUT_FORMATS:
        raise ConfigError(f"unknown input format {source['format']!r}; expected one of {list(INPUT_FORMATS)}")
    if source["format"] in ("feature_csv", "timeseries_dir") and not isinstance(source.get("path"), str):
        raise ConfigError(f"input format {source['format']!r} needs a 'path'")
    if "target" not in raw or not isinstance(raw["target"], str):
        raise ConfigError("'target' (quality name) is required")
    try:
        model = ModelSpec.from_dict(raw.get("model", {"kind": "gradient_boosting"}))
    except PrunekitError as exc:
        raise ConfigError(f"invalid model spec: {exc}") from None
    methods = raw.get("methods", list(METHODS))
    if not isinstance(methods, list) or not methods:
        raise ConfigError("'methods' must be a non-empty list")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; valid methods: {list(METHODS)}")
    grid = raw.get("grid", list(DEFAULT_GRID))
    if not isinstance(grid, list) or not grid or 100 not in grid:
        raise ConfigError("'grid' must be a list of percentages that includes 100 (baseline required)")
    fractions = raw.get("fractions", list(DEFAULT_FRACTIONS))
    if not isinstance(fractions, list) or not fractions:
        raise ConfigError("'fractions' must be a non-empty list")
    return RunConfig(
        input=dict(source),
        target=raw["target"],
        model=model,
        methods=list(methods),
        grid=list(grid),
        fractions=[float(f) for f in fractions],
        k=_int(raw, "k", 5, 2),
        seed=_int(raw, "seed", 0, 0),
        output_dir=base_dir / raw.get("output_dir", "out"),
        repeats=_int(raw, "repeats", 10, 1),
        n_permutations=_int(raw, "n_permutations", 100, 1),
        include_dc=bool(raw.get("include_dc", True)),
        base_dir=base_dir,
        digest=digest,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    digest = hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    return parse_config(raw, path.parent, digest)


# --------------------------------------------------------------------------
# inputs

def _synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    opts = {k: v for k, v in cfg.input.items() if k != "format"}
    opts.setdefault("target", cfg.target)
    try:
        return SyntheticSpec(**opts)
    except TypeError as exc:
        raise ConfigError(f"invalid synthetic input: {exc}") from None


def _series_spec(cfg: RunConfig) -> SyntheticSeriesSpec:
    opts = {k: v for k, v in cfg.input.items() if k != "format"}
    opts.setdefault("target", cfg.target)
    try:
        return SyntheticSeriesSpec(**opts)
    except TypeError as exc:
        raise ConfigError(f"invalid synthetic_series input: {exc}") from None


def load_records(cfg: RunConfig):
    if cfg.input_format == "timeseries_dir":
        return load_timeseries_dir(cfg.input_path())
    if cfg.input_format == "synthetic_series":
        return generate_synthetic_series(_series_spec(cfg))
    raise ConfigError(f"this command needs raw time series (timeseries_dir or synthetic_series), "
                      f"got input format {cfg.input_format!r}")


def load_table(cfg: RunConfig):
    fmt = cfg.input_format
    if fmt == "feature_csv":
        targets = cfg.input.get("target_columns", [cfg.target])
        table = load_feature_table(cfg.input_path(), targets)
    elif fmt == "synthetic":
        table = generate_synthetic(_synthetic_spec(cfg))
    else:
        table = extract_features(load_records(cfg), include_dc=cfg.include_dc)
    table.target(cfg.target)
    return table


# --------------------------------------------------------------------------
# artifacts

def _provenance(cfg: RunConfig) -> dict:
    return {"config_sha256": cfg.digest, "tool_version": __version__}


def _write_json(path: Path, obj: dict, cfg: RunConfig) -> Path:
    doc = {**obj, "provenance": _provenance(cfg)}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


@contextmanager
def _locked(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PrunekitError(f"output directory {out_dir} is locked by another run ({lock})") from None
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def cmd_preprocess(cfg: RunConfig) -> List[Path]:
    records = load_records(cfg)
    table = extract_features(records, include_dc=cfg.include_dc)
    path = cfg.output_dir / "features.csv"
    write_feature_table(table, path)
    return [path]


def cmd_train(cfg: RunConfig) -> List[Path]:
    table = load_table(cfg)
    report = cross_validate(cfg.model, table, cfg.target, cfg.k, cfg.seed)
    print(report.table(), file=sys.stderr)
    model = train(cfg.model, table, cfg.target)
    model_path = cfg.output_dir / "model.json"
    _write_json(model_path, model.to_dict(), cfg)
    cv_path = _write_json(cfg.output_dir / "cv_report.json",
                          {**report.to_dict(), "target": cfg.target, "model": cfg.model.to_dict()}, cfg)
    return [model_path, cv_path]


def cmd_explain(cfg: RunConfig) -> List[Path]:
    table = load_table(cfg)
    written = []
    for method in cfg.methods:
        log.info("ranking features with %s", method)
        report = rank_features(cfg.model, table, cfg.target, method, seed=cfg.seed,
                               repeats=cfg.repeats, n_permutations=cfg.n_permutations)
        stem = cfg.output_dir / f"importance_{method}"
        json_path = stem.with_suffix(".json")
        json_path.write_text(report_to_json(report, target=cfg.target, provenance=_provenance(cfg)))
        csv_path = stem.with_suffix(".csv")
        csv_path.write_text(report.to_csv())
        svg_path = stem.with_suffix(".svg")
        importance_bar_chart(report, svg_path)
        written += [json_path, csv_path, svg_path]
    return written


def cmd_sweep(cfg: RunConfig) -> List[Path]:
    table = load_table(cfg)
    results, written = [], []
    for method in cfg.methods:
        log.info("sweeping top-p%% features ranked by %s", method)
        res = feature_sweep(cfg.model, table, cfg.target, method, cfg.grid, cfg.k, cfg.seed,
                            repeats=cfg.repeats, n_permutations=cfg.n_permutations)
        results.append(res)
        json_path = _write_json(cfg.output_dir / f"sweep_{method}.json", {**res.to_dict(), "target": cfg.target}, cfg)
        csv_path = cfg.output_dir / f"sweep_{method}.csv"
        csv_path.write_text(res.to_csv())
        written += [json_path, csv_path]
    svg_path = cfg.output_dir / "sweep.svg"
    sweep_chart(results, svg_path)
    return written + [svg_path]


def cmd_intervals(cfg: RunConfig) -> List[Path]:
    records = load_records(cfg)
    res = interval_experiment(cfg.model, records, cfg.target, cfg.fractions, cfg.k, cfg.seed, cfg.include_dc)
    json_path = _write_json(cfg.output_dir / "intervals.json", {**res.to_dict(), "target": cfg.target}, cfg)
    csv_path = cfg.output_dir / "intervals.csv"
    csv_path.write_text(res.to_csv())
    svg_path = cfg.output_dir / "intervals.svg"
    interval_chart(res, svg_path)
    return [json_path, csv_path, svg_path]


def cmd_synth(cfg: RunConfig) -> List[Path]:
    if cfg.input_format == "synthetic":
        path = cfg.output_dir / "synthetic.csv"
        write_feature_table(generate_synthetic(_synthetic_spec(cfg)), path)
        return [path]
    if cfg.input_format == "synthetic_series":
        root = cfg.output_dir / "series"
        write_timeseries_dir(generate_synthetic_series(_series_spec(cfg)), root)
        return [root]
    raise ConfigError(f"synth needs a synthetic or synthetic_series input, got {cfg.input_format!r}")


HANDLERS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "explain": cmd_explain,
    "sweep": cmd_sweep,
    "intervals": cmd_intervals,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunekit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"prunekit {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--output-dir", help="override the config's output_dir")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.output_dir:
            cfg.output_dir = Path(args.output_dir)
        with _locked(cfg.output_dir):
            written = HANDLERS[args.command](cfg)
    except PrunekitError as exc:
        kind = "config" if isinstance(exc, ConfigError) else "error"
        print(json.dumps({"status": "error", "kind": kind, "command": args.command,
                          "config": str(args.config), "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    except OSError as exc:
        print(json.dumps({"status": "error", "kind": "io", "command": args.command,
                          "config": str(args.config), "message": str(exc)}), file=sys.stderr)
        return 1
    summary = {"status": "ok", "command": args.command, "output_dir": str(cfg.output_dir),
               "artifacts": [p.name for p in written], "config_sha256": cfg.digest}
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
