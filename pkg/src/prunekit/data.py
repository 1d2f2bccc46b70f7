"""Dataset ingestion and time-series featurization.

Variable-length sensor channels are reduced to fixed-length features: the
five-number summary of each channel in the time domain and of its one-sided
DFT magnitude spectrum in the frequency domain.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import numpy as np

from ._parallel import ordered_map
from .errors import DataError

STATS = ("min", "q1", "median", "q3", "max")


@dataclass(frozen=True)
class TimeSeriesRecord:
    id: str
    channels: Dict[str, np.ndarray]
    config: Dict[str, float] = field(default_factory=dict)
    targets: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        channels = {}
        for name, samples in self.channels.items():
            arr = np.asarray(samples, dtype=float)
            if arr.ndim != 1 or arr.size == 0:
                raise DataError(f"record {self.id!r}: channel {name!r} must be a non-empty 1-d sequence")
            channels[name] = arr
        object.__setattr__(self, "channels", channels)
        for name, value in self.targets.items():
            if not math.isfinite(value):
                raise DataError(f"record {self.id!r}: target {name!r} is not finite")


@dataclass(frozen=True)
class BoxPlotSummary:
    min: float
    q1: float
    median: float
    q3: float
    max: float

    def as_tuple(self):
        return (self.min, self.q1, self.median, self.q3, self.max)


@dataclass(frozen=True)
class FeatureTable:
    """Named feature matrix plus named target vectors."""

    feature_names: List[str]
    rows: np.ndarray
    targets: Dict[str, np.ndarray]

    def __post_init__(self):
        names = list(self.feature_names)
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim == 1 and len(names) == 0:
            rows = rows.reshape(-1, 0)
        if rows.ndim != 2:
            raise DataError("rows must be a 2-d matrix")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise DataError(f"duplicate feature names: {dupes}")
        if rows.shape[1] != len(names):
            raise DataError(f"rows have {rows.shape[1]} columns but {len(names)} feature names were given")
        if rows.shape[0] < 1:
            raise DataError("a feature table needs at least one sample")
        if not np.all(np.isfinite(rows)):
            raise DataError("feature matrix contains NaN or infinite cells")
        targets = {}
        for name, values in self.targets.items():
            vec = np.asarray(values, dtype=float)
            if vec.shape != (rows.shape[0],):
                raise DataError(f"target {name!r} has length {vec.size}, expected {rows.shape[0]}")
            if not np.all(np.isfinite(vec)):
                raise DataError(f"target {name!r} contains NaN or infinite values")
            targets[name] = vec
        rows.setflags(write=False)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "targets", targets)

    @property
    def n_samples(self) -> int:
        return self.rows.shape[0]

    @property
    def n_features(self) -> int:
        return self.rows.shape[1]

    def target(self, name: str) -> np.ndarray:
        try:
            return self.targets[name]
        except KeyError:
            raise DataError(f"unknown target {name!r}; available: {sorted(self.targets)}") from None

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.feature_names.index(name)]

    def project(self, features: Sequence[str]) -> "FeatureTable":
        """Keep only ``features``, preserving this table's column order."""
        wanted = set(features)
        missing = wanted.difference(self.feature_names)
        if missing:
            raise DataError(f"unknown features: {sorted(missing)}")
        keep = [i for i, name in enumerate(self.feature_names) if name in wanted]
        return FeatureTable([self.feature_names[i] for i in keep], self.rows[:, keep], self.targets)

    def take(self, indices) -> "FeatureTable":
        idx = np.asarray(indices, dtype=int)
        return FeatureTable(self.feature_names, self.rows[idx], {k: v[idx] for k, v in self.targets.items()})


def _parse_float(cell: str) -> float:
    value = float(cell)
    if not math.isfinite(value):
        raise ValueError(cell)
    return value


def load_feature_table(path, target_columns: Sequence[str]) -> FeatureTable:
    """Read a CSV with a header row; every non-target column becomes a feature."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"feature table not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        seen = set()
        for name in header:
            if name in seen:
                raise DataError(f"{path}: duplicate header column {name!r}")
            seen.add(name)
        for name in target_columns:
            if name not in seen:
                raise DataError(f"{path}: target column {name!r} not in header")
        values = []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
            parsed = []
            for name, cell in zip(header, row):
                try:
                    parsed.append(_parse_float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} at row {row_no}, column {name!r}"
                    ) from None
            values.append(parsed)
    if not values:
        raise DataError(f"{path}: no data rows")
    matrix = np.array(values, dtype=float)
    feature_idx = [i for i, name in enumerate(header) if name not in target_columns]
    return FeatureTable(
        [header[i] for i in feature_idx],
        matrix[:, feature_idx],
        {name: matrix[:, header.index(name)] for name in target_columns},
    )


def write_feature_table(table: FeatureTable, path) -> None:
    """Write features then targets (sorted) with round-trip exact float formatting."""
    target_names = sorted(table.targets)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.feature_names + target_names)
        for i in range(table.n_samples):
            cells = [repr(float(v)) for v in table.rows[i]]
            cells += [repr(float(table.targets[name][i])) for name in target_names]
            writer.writerow(cells)


def five_number_summary(xs) -> BoxPlotSummary:
    """Min, quartiles and max; quartiles use linear interpolation at (n-1)*p."""
    arr = np.asarray(xs, dtype=float).ravel()
    if arr.size == 0:
        raise DataError("five-number summary of an empty sequence")
    if not np.all(np.isfinite(arr)):
        raise DataError("five-number summary requires finite samples")
    q = np.quantile(arr, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    return BoxPlotSummary(*(float(v) for v in q))


def _bit_reverse_permutation(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(a) -> np.ndarray:
    """Iterative decimation-in-time FFT; ``len(a)`` must be a power of two."""
    a = np.asarray(a, dtype=complex)
    n = a.size
    if n == 0 or n & (n - 1):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    a = a[_bit_reverse_permutation(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(-1, size)
        even = blocks[:, :half]
        odd = blocks[:, half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=1).ravel()
        size *= 2
    return a


def _ifft_radix2(a) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    return np.conj(fft_radix2(np.conj(a))) / a.size


def dft(xs) -> np.ndarray:
    """Full complex DFT of any length.

    Powers of two go straight through the radix-2 kernel; other lengths use
    Bluestein's chirp-z identity, which still evaluates the exact length-n
    transform (no zero-padding of the signal itself).
    """
    x = np.asarray(xs, dtype=complex).ravel()
    n = x.size
    if n == 0:
        raise DataError("DFT of an empty sequence")
    if n & (n - 1) == 0:
        return fft_radix2(x)
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp phase small and accurate
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1 << (2 * n - 1).bit_length()
    a = np.zeros(m, dtype=complex)
    a[:n] = x * chirp
    b = np.zeros(m, dtype=complex)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    conv = _ifft_radix2(fft_radix2(a) * fft_radix2(b))
    return chirp * conv[:n]


def dft_magnitude(xs) -> np.ndarray:
    """One-sided magnitude spectrum |X_k|, k = 0..n//2, DC included."""
    spectrum = dft(xs)
    return np.abs(spectrum[: spectrum.size // 2 + 1])


def _schema(record: TimeSeriesRecord):
    return (sorted(record.channels), sorted(record.config), sorted(record.targets))


def feature_names_for(channels: Sequence[str], configs: Sequence[str]) -> List[str]:
    names = []
    for ch in sorted(channels):
        names += [f"{ch}_ts_{s}" for s in STATS]
        names += [f"{ch}_fq_{s}" for s in STATS]
    return names + sorted(configs)


def _record_row(record: TimeSeriesRecord, include_dc: bool) -> List[float]:
    row = []
    for ch in sorted(record.channels):
        samples = record.channels[ch]
        row += five_number_summary(samples).as_tuple()
        spectrum = dft_magnitude(samples)
        if not include_dc and spectrum.size > 1:
            spectrum = spectrum[1:]
        row += five_number_summary(spectrum).as_tuple()
    row += [float(record.config[name]) for name in sorted(record.config)]
    return row


def extract_features(records: Sequence[TimeSeriesRecord], include_dc: bool = True) -> FeatureTable:
    """Box-plot features per channel in time and frequency domain, plus config columns.

    Rows follow the input record order.
    """
    records = list(records)
    if not records:
        raise DataError("no records to featurize")
    schema = _schema(records[0])
    for rec in records[1:]:
        if _schema(rec) != schema:
            raise DataError(
                f"schema mismatch: record {rec.id!r} has channels/config/targets "
                f"{_schema(rec)}, expected {schema} (from record {records[0].id!r})"
            )
    channels, configs, target_names = schema
    rows = ordered_map(lambda rec: _record_row(rec, include_dc), records)
    targets = {name: np.array([rec.targets[name] for rec in records], dtype=float) for name in target_names}
    return FeatureTable(feature_names_for(channels, configs), np.array(rows, dtype=float), targets)


def truncate_records(records: Sequence[TimeSeriesRecord], fraction: float) -> List[TimeSeriesRecord]:
    """Keep the first ceil(fraction * len) samples of every channel."""
    if not (0.0 < fraction <= 1.0):
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    out = []
    for rec in records:
        channels = {}
        for name, samples in rec.channels.items():
            keep = max(1, math.ceil(fraction * samples.size - 1e-9))
            channels[name] = samples[:keep]
        out.append(TimeSeriesRecord(rec.id, channels, dict(rec.config), dict(rec.targets)))
    return out


def _read_channel(path: Path) -> np.ndarray:
    samples = []
    with path.open(newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            try:
                samples.append(_parse_float(row[0]))
            except ValueError:
                if line_no == 1 and not samples:
                    continue  # header line
                raise DataError(f"{path}: non-numeric sample {row[0]!r} on line {line_no}") from None
    if not samples:
        raise DataError(f"{path}: channel has no samples")
    return np.array(samples, dtype=float)


def _numeric_map(obj, what: str, where) -> Dict[str, float]:
    if not isinstance(obj, Mapping):
        raise DataError(f"{where}: {what!r} must be an object of numbers")
    out = {}
    for key, value in obj.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise DataError(f"{where}: {what}.{key} is not a number")
        out[str(key)] = float(value)
    return out


def load_timeseries_dir(root) -> List[TimeSeriesRecord]:
    """Load ``<root>/<record-id>/{<channel>.csv, meta.json}``; records sorted by id."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"time-series directory not found: {root}")
    records = []
    for rec_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        meta_path = rec_dir / "meta.json"
        if not meta_path.is_file():
            raise DataError(f"record {rec_dir.name!r}: missing meta.json")
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"record {rec_dir.name!r}: invalid meta.json ({exc})") from None
        channels = {p.stem: _read_channel(p) for p in sorted(rec_dir.glob("*.csv"))}
        if not channels:
            raise DataError(f"record {rec_dir.name!r}: no channel CSV files")
        records.append(
            TimeSeriesRecord(
                rec_dir.name,
                channels,
                _numeric_map(meta.get("config", {}), "config", meta_path),
                _numeric_map(meta.get("targets", {}), "targets", meta_path),
            )
        )
    if not records:
        raise DataError(f"{root}: no record directories")
    return records


def write_timeseries_dir(records: Sequence[TimeSeriesRecord], root) -> None:
    root = Path(root)
    for rec in records:
        rec_dir = root / rec.id
        os.makedirs(rec_dir, exist_ok=True)
        for name, samples in rec.channels.items():
            (rec_dir / f"{name}.csv").write_text("".join(f"{float(v)!r}\n" for v in samples))
        meta = {"config": dict(sorted(rec.config.items())), "targets": dict(sorted(rec.targets.items()))}
        (rec_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
