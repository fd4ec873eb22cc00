"""Battery cycle ingestion and the quasi-video sample pipeline.

Per-cycle charging series (voltage, C-rate, temperature, charge capacity)
are resampled onto ``L = H * W`` uniform time points, min-max scaled per
data type and packed into a ``(channel=3, depth=2, H, W)`` block:

* channels are V, I, T;
* depth 0 holds the channel's own series, depth 1 holds the Qc series
  (replicated across the three channels).

The flattened feature vector follows the ``(channel, depth, height, width)``
C order, so ``d_X = 6 * L``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from .labels import LabelKey
from .numcore import Rng

log = logging.getLogger(__name__)

TYPES = ("V", "I", "T", "Qc")
TYPE_COLUMNS = ("voltage_V", "current_rate_C", "temperature_degC", "charge_capacity_Ah")
DATA_HEADER = ("battery_id", "cycle_index", "time_s") + TYPE_COLUMNS
METADATA_HEADER = ("battery_id", "eol")
PHYSICAL_RANGES = {
    "V": (1.5, 4.5),
    "I": (-10.0, 10.0),
    "T": (-20.0, 80.0),
    "Qc": (0.0, 2.0),
}
PACK_LAYOUT = "c3d2hw:V,I,T|d0=self,d1=Qc"
NOMINAL_CAPACITY_AH = 1.1


@dataclass
class CycleSeries:
    battery_id: str
    cycle_index: int
    time: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    temperature: np.ndarray
    capacity: np.ndarray

    def __post_init__(self):
        for name in ("time", "voltage", "current", "temperature", "capacity"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.time.shape[0]
        if any(getattr(self, a).shape != (n,) for a in ("voltage", "current", "temperature", "capacity")):
            raise ShapeError(f"{self.battery_id} cycle {self.cycle_index}: series lengths differ")
        if n < 2:
            raise DataError(f"{self.battery_id} cycle {self.cycle_index}: need at least 2 points, got {n}")
        if self.cycle_index < 1:
            raise DataError(f"{self.battery_id}: cycle index must be positive, got {self.cycle_index}")
        if not np.all(np.isfinite(self.values())):
            raise DataError(f"{self.battery_id} cycle {self.cycle_index}: non-finite values")
        if not np.all(np.diff(self.time) > 0):
            raise DataError(f"{self.battery_id} cycle {self.cycle_index}: time is not strictly increasing")

    def values(self) -> np.ndarray:
        """All columns stacked as ``(5, n)``: time, V, I, T, Qc."""
        return np.vstack([self.time, self.voltage, self.current, self.temperature, self.capacity])


@dataclass
class BatteryRecord:
    battery_id: str
    eol: int
    cycles: list = field(default_factory=list)

    def __post_init__(self):
        if self.eol < 1:
            raise DataError(f"{self.battery_id}: EOL must be positive")
        seen = set()
        for c in self.cycles:
            if c.cycle_index > self.eol:
                raise DataError(f"{self.battery_id}: cycle {c.cycle_index} exceeds EOL {self.eol}")
            if c.cycle_index in seen:
                raise DataError(f"{self.battery_id}: duplicate cycle {c.cycle_index}")
            seen.add(c.cycle_index)
        self.cycles.sort(key=lambda c: c.cycle_index)


def _read_csv_rows(path, header, what):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty {what} file") from None
        columns = [c.strip() for c in columns]
        missing = [c for c in header if c not in columns]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        pos = [columns.index(c) for c in header]
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(columns):
                raise DataError(f"{path} row {rownum}: expected {len(columns)} fields, got {len(row)}")
            yield rownum, [row[p].strip() for p in pos]


def _parse_int(text, path, rownum, column):
    try:
        value = int(text)
    except ValueError:
        raise DataError(f"{path} row {rownum}: {column} is not an integer: {text!r}") from None
    return value


def load_csv(path, metadata_path) -> list:
    """Read per-point rows plus per-battery EOLs into ``BatteryRecord`` objects.

    Rows may appear in any order. Cycles containing non-finite values are
    dropped with a warning; duplicated time stamps within a cycle, unknown
    batteries and cycles beyond EOL are errors that name the offending row.
    """
    eols = {}
    for rownum, (bid, eol_text) in _read_csv_rows(metadata_path, METADATA_HEADER, "metadata"):
        eol = _parse_int(eol_text, metadata_path, rownum, "eol")
        if eol < 1:
            raise DataError(f"{metadata_path} row {rownum}: EOL must be positive")
        if bid in eols:
            raise DataError(f"{metadata_path} row {rownum}: duplicate battery {bid!r}")
        eols[bid] = eol

    groups = {}
    for rownum, fields_ in _read_csv_rows(path, DATA_HEADER, "data"):
        bid = fields_[0]
        if bid not in eols:
            raise DataError(f"{path} row {rownum}: battery {bid!r} not listed in metadata")
        cycle = _parse_int(fields_[1], path, rownum, "cycle_index")
        if cycle < 1:
            raise DataError(f"{path} row {rownum}: cycle_index must be positive")
        if cycle > eols[bid]:
            raise DataError(f"{path} row {rownum}: cycle {cycle} exceeds EOL {eols[bid]} of {bid!r}")
        try:
            values = [float(v) for v in fields_[2:]]
        except ValueError:
            raise DataError(f"{path} row {rownum}: non-numeric value") from None
        groups.setdefault((bid, cycle), []).append((values, rownum))

    records = []
    for bid, eol in eols.items():
        cycles = []
        for cycle in sorted(c for (b, c) in groups if b == bid):
            rows = sorted(groups[(bid, cycle)], key=lambda r: (r[0][0], r[1]))
            data = np.array([r[0] for r in rows], dtype=np.float64)
            if not np.all(np.isfinite(data)):
                log.warning("dropping %s cycle %d: non-finite values", bid, cycle)
                continue
            dup = np.nonzero(np.diff(data[:, 0]) <= 0)[0]
            if dup.size:
                raise DataError(
                    f"{path} row {rows[dup[0] + 1][1]}: time is not strictly increasing "
                    f"within {bid} cycle {cycle}"
                )
            if len(rows) < 2:
                raise DataError(f"{path} row {rows[0][1]}: {bid} cycle {cycle} has fewer than 2 points")
            cycles.append(CycleSeries(bid, cycle, *data.T))
        if not cycles:
            log.warning("battery %s has no usable cycles; skipped", bid)
            continue
        records.append(BatteryRecord(bid, eol, cycles))
    return records


def write_csv(records, path, metadata_path) -> None:
    """Inverse of :func:`load_csv`."""
    with open(metadata_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METADATA_HEADER)
        for rec in records:
            w.writerow([rec.battery_id, rec.eol])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATA_HEADER)
        for rec in records:
            for c in rec.cycles:
                for row in c.values().T:
                    w.writerow([rec.battery_id, c.cycle_index] + [repr(float(v)) for v in row])


# Synthetic generator -----------------------------------------------------

# log-EOL reference span used to place a battery between "fast-charged,
# short-lived" (0) and "gently charged, long-lived" (1)
_LIFE_SPAN = (100.0, 2500.0)
SYNTH_NOISE = {"V": 0.002, "I": 0.01, "T": 0.05}


def _life_factor(eol: float) -> float:
    lo, hi = np.log(_LIFE_SPAN[0]), np.log(_LIFE_SPAN[1])
    return float(np.clip((np.log(eol) - lo) / (hi - lo), 0.0, 1.0))


def synth_cycle(battery_id, eol, cycle_index, rng: Rng, n_points=200) -> CycleSeries:
    """One CC-CV style charge whose shape depends on EOL and ageing."""
    u = _life_factor(eol)
    s = cycle_index / eol
    q_max = NOMINAL_CAPACITY_AH * (1.0 - 0.2 * s)
    i_cc = 2.0 + 4.0 * (1.0 - u)
    t_cc = 0.8 * q_max / (i_cc * NOMINAL_CAPACITY_AH) * 3600.0
    tau_cv = 300.0 * (1.0 + s) + 400.0 * (1.0 - u)
    t_end = t_cc + 3.0 * tau_cv

    grid = np.linspace(0.0, t_end, n_points)
    jitter = (rng.uniform(n_points) - 0.5) * 0.4 * (t_end / (n_points - 1))
    jitter[[0, -1]] = 0.0
    t = grid + jitter

    cc = t < t_cc
    current = np.where(cc, i_cc, i_cc * np.exp(-(t - t_cc) / tau_cv))
    current = np.maximum(current + SYNTH_NOISE["I"] * rng.normal(n_points), 1e-3)

    v0 = 2.75 + 0.5 * u + 0.1 * s
    frac = np.clip(t / t_cc, 0.0, 1.0)
    voltage = np.where(cc, 3.6 - (3.6 - v0) * (1.0 - frac) ** 2.5, 3.6)
    voltage = voltage + SYNTH_NOISE["V"] * rng.normal(n_points)

    heat = 1.5 * i_cc * (1.0 - np.exp(-t / 400.0))
    heat = np.where(cc, heat, heat * np.exp(-(t - t_cc) / (2.0 * tau_cv)))
    temperature = 30.0 + heat + 3.0 * s + SYNTH_NOISE["T"] * rng.normal(n_points)

    dq = 0.5 * (current[1:] + current[:-1]) * np.diff(t) * NOMINAL_CAPACITY_AH / 3600.0
    capacity = np.concatenate([[0.0], np.cumsum(dq)])
    return CycleSeries(battery_id, cycle_index, t, voltage, current, temperature, capacity)


def synth_generate(rng: Rng, n_batteries: int, n_cycles: int, eol_range=(300, 1500),
                   n_points: int = 200, eols=None) -> list:
    """Deterministic synthetic stand-in for a cycling dataset.

    Each battery draws an EOL uniformly from ``eol_range`` (or takes it from
    ``eols``) and contributes cycles ``1..n_cycles``.
    """
    if n_batteries < 1 or n_cycles < 1:
        raise DataError("n_batteries and n_cycles must be >= 1")
    lo, hi = (int(v) for v in eol_range)
    if not 1 <= lo <= hi:
        raise DataError(f"invalid EOL range {eol_range}")
    if eols is None:
        eols = [lo + int(math.floor(u * (hi - lo + 1))) for u in rng.spawn("eol").uniform(n_batteries)]
    elif len(eols) != n_batteries:
        raise DataError("eols must have one entry per battery")
    records = []
    for b, eol in enumerate(eols):
        if n_cycles > eol:
            raise DataError(f"n_cycles {n_cycles} exceeds EOL {eol}")
        bid = f"b{b}"
        stream = rng.spawn("battery", b)
        cycles = [synth_cycle(bid, eol, k, stream, n_points) for k in range(1, n_cycles + 1)]
        records.append(BatteryRecord(bid, int(eol), cycles))
    return records


# Cleaning, resampling, scaling ------------------------------------------

def clean_cycle(series: CycleSeries) -> CycleSeries:
    """Clip each type to its physical range."""
    lo_hi = [PHYSICAL_RANGES[t] for t in TYPES]
    vals = [series.voltage, series.current, series.temperature, series.capacity]
    clipped = [np.clip(v, lo, hi) for v, (lo, hi) in zip(vals, lo_hi)]
    return CycleSeries(series.battery_id, series.cycle_index, series.time, *clipped)


def resample(series: CycleSeries, L: int) -> np.ndarray:
    """Linear interpolation onto ``L`` uniform times; returns ``(4, L)`` in V, I, T, Qc order."""
    if L < 2:
        raise DataError(f"resample length must be >= 2, got {L}")
    if series.time.shape[0] < 2:
        raise DataError("need at least 2 points to resample")
    grid = np.linspace(series.time[0], series.time[-1], L)
    return np.vstack([
        np.interp(grid, series.time, col)
        for col in (series.voltage, series.current, series.temperature, series.capacity)
    ])


@dataclass
class ScalerParams:
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64).reshape(len(TYPES))
        self.maxs = np.asarray(self.maxs, dtype=np.float64).reshape(len(TYPES))
        for t, lo, hi in zip(TYPES, self.mins, self.maxs):
            if not hi > lo:
                raise DataError(f"degenerate scaling range for type {t}: min={lo}, max={hi}")

    def as_dict(self) -> dict:
        return {t: (float(lo), float(hi)) for t, lo, hi in zip(TYPES, self.mins, self.maxs)}


def scale_fit(series) -> ScalerParams:
    """Per-type min/max over training series shaped ``(N, 4, L)`` (or ``(4, L)``)."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != len(TYPES) or arr.shape[0] == 0:
        raise ShapeError(f"expected (N, 4, L) training series, got {arr.shape}")
    mins = arr.min(axis=(0, 2))
    maxs = arr.max(axis=(0, 2))
    for t, lo, hi in zip(TYPES, mins, maxs):
        if not hi > lo:
            raise DataError(f"cannot fit scaler: type {t} has a degenerate range ({lo})")
    return ScalerParams(mins, maxs)


# broadcast shape for per-type parameters over (..., 4, L)
_TYPE_AXIS = (len(TYPES), 1)


def scale_apply(params: ScalerParams, series):
    """Map to [0, 1]; returns ``(scaled, n_clipped)``."""
    arr = np.asarray(series, dtype=np.float64)
    lo = params.mins.reshape(_TYPE_AXIS)
    hi = params.maxs.reshape(_TYPE_AXIS)
    scaled = (arr - lo) / (hi - lo)
    outside = (scaled < 0.0) | (scaled > 1.0)
    n_clipped = int(outside.sum())
    if n_clipped:
        scaled = np.clip(scaled, 0.0, 1.0)
    return scaled, n_clipped


def scale_invert(params: ScalerParams, scaled) -> np.ndarray:
    arr = np.asarray(scaled, dtype=np.float64)
    lo = params.mins.reshape(_TYPE_AXIS)
    hi = params.maxs.reshape(_TYPE_AXIS)
    return arr * (hi - lo) + lo


def scale_value(params: ScalerParams, type_name: str, value: float):
    """Scalar convenience: ``(scaled, clipped)`` for one value of one type."""
    i = TYPES.index(type_name)
    lo, hi = params.mins[i], params.maxs[i]
    x = (value - lo) / (hi - lo)
    return float(min(max(x, 0.0), 1.0)), not 0.0 <= x <= 1.0


# Packing -----------------------------------------------------------------

@dataclass
class QuasiVideoSample:
    features: np.ndarray  # (3, 2, H, W)
    label: LabelKey
    battery_id: str

    @property
    def flat(self) -> np.ndarray:
        return self.features.reshape(-1)


def feature_length(H: int, W: int) -> int:
    return 3 * 2 * H * W


def pack_array(series: np.ndarray, H: int, W: int) -> np.ndarray:
    """``(..., 4, L)`` per-type series to ``(..., 3, 2, H, W)`` blocks."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.shape[-2] != len(TYPES):
        raise ShapeError(f"expected 4 data types on axis -2, got {arr.shape}")
    if arr.shape[-1] != H * W:
        raise ShapeError(f"series length {arr.shape[-1]} != H*W = {H * W}")
    lead = arr.shape[:-2]
    grid = arr.reshape(lead + (len(TYPES), H, W))
    out = np.empty(lead + (3, 2, H, W))
    out[..., :, 0, :, :] = grid[..., :3, :, :]
    out[..., :, 1, :, :] = grid[..., 3:4, :, :]
    return out


def unpack_array(features: np.ndarray, H: int, W: int) -> np.ndarray:
    """Inverse of :func:`pack_array`; accepts blocks or flat vectors.

    Qc is the mean of its three depth-1 copies, which is exact when the
    copies agree and a natural consensus for model reconstructions.
    """
    arr = np.asarray(features, dtype=np.float64)
    d = feature_length(H, W)
    if arr.shape[-1] == d and (arr.ndim == 1 or arr.shape[-4:] != (3, 2, H, W)):
        arr = arr.reshape(arr.shape[:-1] + (3, 2, H, W))
    if arr.shape[-4:] != (3, 2, H, W):
        raise ShapeError(f"cannot unpack shape {arr.shape} with H={H}, W={W}")
    lead = arr.shape[:-4]
    qc = arr[..., :, 1, :, :]
    qc = np.where(np.all(qc == qc[..., :1, :, :], axis=-3, keepdims=True), qc[..., :1, :, :],
                  qc.mean(axis=-3, keepdims=True))
    out = np.concatenate([arr[..., :, 0, :, :], qc], axis=-3)
    return out.reshape(lead + (len(TYPES), H * W))


def pack(series: np.ndarray, label: LabelKey, battery_id: str, H: int, W: int) -> QuasiVideoSample:
    return QuasiVideoSample(pack_array(series, H, W), label, battery_id)


def unpack(sample, H: int, W: int) -> np.ndarray:
    features = sample.features if isinstance(sample, QuasiVideoSample) else sample
    return unpack_array(features, H, W)


# Splitting ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    n_cycles: int = 20
    pool_ratio: tuple = (94, 124)
    val_fraction: tuple = (1, 5)


def split_sizes(count: int, spec: SplitSpec):
    if count < 1:
        raise DataError("cannot split an empty sample set")
    num, den = spec.pool_ratio
    pool = count * num // den
    vnum, vden = spec.val_fraction
    n_val = pool * vnum // vden
    return pool - n_val, n_val, count - pool


def split_indices(count: int, spec: SplitSpec):
    """Deterministic ``(train, val, test)`` index arrays.

    A sample-level shuffle sends the first ``count * 94 // 124`` samples to the
    training pool and the rest to test; a second shuffle splits the pool 4:1
    into train and validation.
    """
    n_train, n_val, _ = split_sizes(count, spec)
    rng = Rng(spec.seed)
    order = rng.spawn("split", "pool").permutation(count)
    pool, test = order[: n_train + n_val], order[n_train + n_val:]
    pool = pool[rng.spawn("split", "val").permutation(pool.size)]
    return pool[:n_train], pool[n_train:], test


def split(samples, spec: SplitSpec):
    samples = list(samples)
    tr, va, te = split_indices(len(samples), spec)
    return [samples[i] for i in tr], [samples[i] for i in va], [samples[i] for i in te]


# Assembled dataset -------------------------------------------------------

@dataclass
class PackedDataset:
    """Flattened scaled features ``X`` of shape ``(N, d_X)`` plus per-sample metadata."""

    X: np.ndarray
    labels: list
    battery_ids: list
    H: int
    W: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.labels), feature_length(self.H, self.W))
        if len(self.battery_ids) != len(self.labels):
            raise ShapeError("labels and battery ids differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def d_x(self) -> int:
        return feature_length(self.H, self.W)

    def subset(self, indices) -> "PackedDataset":
        indices = list(indices)
        return PackedDataset(self.X[indices], [self.labels[i] for i in indices],
                             [self.battery_ids[i] for i in indices], self.H, self.W)

    def concat(self, other: "PackedDataset") -> "PackedDataset":
        if (self.H, self.W) != (other.H, other.W):
            raise ShapeError("cannot concatenate datasets with different layouts")
        return PackedDataset(np.vstack([self.X, other.X]), self.labels + other.labels,
                             self.battery_ids + other.battery_ids, self.H, self.W)

    def samples(self):
        blocks = self.X.reshape(len(self), 3, 2, self.H, self.W)
        return [QuasiVideoSample(b, lab, bid) for b, lab, bid in zip(blocks, self.labels, self.battery_ids)]

    def series(self) -> np.ndarray:
        """Unpacked scaled series, ``(N, 4, L)``."""
        return unpack_array(self.X, self.H, self.W)


@dataclass
class PreparedData:
    train: PackedDataset
    val: PackedDataset
    test: PackedDataset
    scaler: ScalerParams
    assignment: list  # per sample: (battery_id, LabelKey, split name)
    n_clipped: int = 0


def early_cycle_series(records, n_cycles: int, L: int):
    """Cleaned, resampled ``(N, 4, L)`` series for cycles ``1..n_cycles`` of each battery."""
    series, labels, bids = [], [], []
    for rec in records:
        for c in rec.cycles:
            if c.cycle_index > n_cycles:
                continue
            series.append(resample(clean_cycle(c), L))
            labels.append(LabelKey(rec.eol, c.cycle_index))
            bids.append(rec.battery_id)
    if not series:
        raise DataError("no cycles selected; check n_cycles against the data")
    return np.stack(series), labels, bids


def prepare(records, spec: SplitSpec, H: int = 16, W: int = 16) -> PreparedData:
    """Select early cycles, split, fit the scaler on the training pool and pack."""
    L = H * W
    raw, labels, bids = early_cycle_series(records, spec.n_cycles, L)
    tr, va, te = split_indices(len(labels), spec)
    pool = np.concatenate([tr, va])
    scaler = scale_fit(raw[pool])
    scaled, n_clipped = scale_apply(scaler, raw)
    if n_clipped:
        log.warning("%d test values fell outside the training range and were clipped", n_clipped)
    X = pack_array(scaled, H, W).reshape(len(labels), -1)
    full = PackedDataset(X, labels, bids, H, W)
    names = np.empty(len(labels), dtype=object)
    names[tr], names[va], names[te] = "train", "val", "test"
    assignment = [(b, lab, str(n)) for b, lab, n in zip(bids, labels, names)]
    return PreparedData(full.subset(tr), full.subset(va), full.subset(te), scaler, assignment, n_clipped)
