"""Ingestion, normalization, windowing, patching, masking, and view pairs.

CSV contract (UTF-8, header required):

    disease_id,region_id,timestamp,value,r0_lower,r0_upper

timestamp is an ISO-8601 date, value a nonnegative real, and the two
reproduction-number columns are optional (default range 0-20). Rows with a
missing value are dropped and counted; everything else malformed is an error
that names the offending line.
"""

from __future__ import annotations

import csv
import datetime
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_R0_RANGE = (0.0, 20.0)
CSV_HEADER = ["disease_id", "region_id", "timestamp", "value", "r0_lower", "r0_upper"]


class DataError(ValueError):
    pass


def make_timestamps(n: int, start: str = "2000-01-03", step_days: int = 7) -> list[str]:
    d0 = datetime.date.fromisoformat(start)
    return [(d0 + datetime.timedelta(days=step_days * i)).isoformat()
            for i in range(n)]


@dataclass
class TimeSeriesRecord:
    """One region/disease univariate series."""
    disease_id: str
    region_id: str
    timestamps: list[str]
    values: np.ndarray
    r0_range: tuple[float, float] = DEFAULT_R0_RANGE
    norm_state: tuple[float, float] | None = None  # (mean, std) once normalized
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.timestamps) != len(self.values):
            raise DataError("timestamps and values must have equal length")
        for a, b in zip(self.timestamps, self.timestamps[1:]):
            if a >= b:
                raise DataError(f"timestamps not strictly increasing at {b!r}")
        if self.r0_range[0] > self.r0_range[1]:
            raise DataError(f"invalid r0_range {self.r0_range}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.disease_id, self.region_id)

    def __len__(self) -> int:
        return len(self.values)


# ---------------------------------------------------------------------------
# CSV ingestion / export

def _parse_row(row: list[str], line_no: int, has_r0: bool):
    expected = 6 if has_r0 else 4
    if len(row) != expected:
        raise DataError(f"line {line_no}: expected {expected} fields, got {len(row)}")
    disease, region, ts, value = row[0], row[1], row[2], row[3]
    try:
        datetime.date.fromisoformat(ts)
    except ValueError:
        raise DataError(f"line {line_no}: bad ISO-8601 date {ts!r}") from None
    if value.strip() == "" or value.strip().lower() == "nan":
        val = None  # missing, handled by caller
    else:
        try:
            val = float(value)
        except ValueError:
            raise DataError(f"line {line_no}: bad value {value!r}") from None
        if math.isnan(val):
            val = None
        elif not math.isfinite(val) or val < 0:
            raise DataError(f"line {line_no}: value must be nonnegative and finite")
    if has_r0:
        try:
            lo, hi = float(row[4]), float(row[5])
        except ValueError:
            raise DataError(f"line {line_no}: bad r0 bounds {row[4]!r},{row[5]!r}") from None
        if lo > hi:
            raise DataError(f"line {line_no}: r0_lower > r0_upper")
    else:
        lo, hi = DEFAULT_R0_RANGE
    return disease, region, ts, val, (lo, hi)


def load_csv(path) -> list[TimeSeriesRecord]:
    """Parse the CSV contract into per-(disease, region) records.

    Rows are grouped and sorted by timestamp; missing-value rows are dropped
    (count logged and stored in record.meta["dropped_rows"]); duplicate
    timestamps within a series are rejected; empty series are skipped.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header required") from None
        header = [h.strip() for h in header]
        if header[:4] != CSV_HEADER[:4]:
            raise DataError(f"{path}: bad header {header!r}")
        has_r0 = len(header) == 6 and header[4:] == CSV_HEADER[4:]
        if not has_r0 and len(header) != 4:
            raise DataError(f"{path}: bad header {header!r}")

        groups: dict[tuple[str, str], dict] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            disease, region, ts, val, r0 = _parse_row(row, line_no, has_r0)
            g = groups.setdefault((disease, region),
                                  {"rows": [], "dropped": 0, "r0": r0})
            if val is None:
                g["dropped"] += 1
                continue
            g["rows"].append((ts, val))

    records = []
    total_dropped = 0
    for (disease, region), g in groups.items():
        rows = sorted(g["rows"])
        if not rows:
            log.warning("series (%s, %s) is empty after drops; skipped",
                        disease, region)
            continue
        for (t1, _), (t2, _) in zip(rows, rows[1:]):
            if t1 == t2:
                raise DataError(f"series ({disease}, {region}): duplicate "
                                f"timestamp {t1}")
        rec = TimeSeriesRecord(
            disease_id=disease, region_id=region,
            timestamps=[t for t, _ in rows],
            values=np.array([v for _, v in rows]),
            r0_range=g["r0"],
        )
        rec.meta["dropped_rows"] = g["dropped"]
        total_dropped += g["dropped"]
        records.append(rec)
    if total_dropped:
        log.warning("dropped %d missing-value rows from %s", total_dropped, path)
    return records


def save_csv(records: list[TimeSeriesRecord], path) -> None:
    """Write records back out under the same contract (full float precision)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for rec in records:
            lo, hi = rec.r0_range
            for ts, val in zip(rec.timestamps, rec.values):
                fh.write(f"{rec.disease_id},{rec.region_id},{ts},"
                         f"{float(val)!r},{float(lo)!r},{float(hi)!r}\n")


# ---------------------------------------------------------------------------
# normalization

def fit_norm_state(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        raise DataError("normalization needs at least 2 points")
    mean = float(values.mean())
    std = float(values.std())
    if std == 0.0:
        raise DataError("constant series cannot be z-scored")
    return mean, std


def zscore_normalize(record: TimeSeriesRecord,
                     train_frac: float = 1.0) -> TimeSeriesRecord:
    """Z-score a record, fitting mean/std on the leading train fraction only
    and applying them to the whole series."""
    n_train = max(2, int(round(train_frac * len(record))))
    mean, std = fit_norm_state(record.values[:n_train])
    rec = TimeSeriesRecord(
        disease_id=record.disease_id, region_id=record.region_id,
        timestamps=list(record.timestamps),
        values=(record.values - mean) / std,
        r0_range=record.r0_range,
        norm_state=(mean, std),
    )
    rec.meta = dict(record.meta)
    return rec


def denormalize(values: np.ndarray, norm_state: tuple[float, float]) -> np.ndarray:
    mean, std = norm_state
    return np.asarray(values) * std + mean


def split_indices(n: int, fractions: tuple[float, float, float] = (0.6, 0.1, 0.3)):
    """Chronological train/val/test boundaries."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return (0, n_train), (n_train, n_train + n_val), (n_train + n_val, n)


# ---------------------------------------------------------------------------
# windowing

@dataclass
class WindowPair:
    x: np.ndarray  # lookback, length T
    y: np.ndarray  # target, length h
    source: tuple[str, str, int]  # (disease_id, region_id, start index)


def make_windows(record: TimeSeriesRecord, T: int, h: int,
                 stride: int = 1, start: int = 0,
                 stop: int | None = None) -> list[WindowPair]:
    """Sliding (lookback, target) pairs within one series.

    count = floor((len - T - h) / stride) + 1 when the series is long enough,
    else an empty list. Windows never leave [start, stop).
    """
    values = record.values[start:stop]
    n = len(values)
    if n < T + h:
        log.warning("series (%s, %s): length %d < T+h=%d, no windows",
                    record.disease_id, record.region_id, n, T + h)
        return []
    windows = []
    for off in range(0, n - T - h + 1, stride):
        windows.append(WindowPair(
            x=values[off:off + T].copy(),
            y=values[off + T:off + T + h].copy(),
            source=(record.disease_id, record.region_id, start + off),
        ))
    return windows


# ---------------------------------------------------------------------------
# patching and masking

@dataclass
class PatchSet:
    patches: np.ndarray  # (C, patch_len)
    mask: np.ndarray     # (C,) bool, True = masked (zero-filled)

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


def patchify(x: np.ndarray, patch_len: int) -> PatchSet:
    x = np.asarray(x, dtype=float)
    if len(x) % patch_len != 0:
        raise DataError(f"length {len(x)} not divisible by patch_len {patch_len}")
    C = len(x) // patch_len
    return PatchSet(patches=x.reshape(C, patch_len).copy(),
                    mask=np.zeros(C, dtype=bool))


def unpatchify(patch_set: PatchSet) -> np.ndarray:
    return patch_set.patches.reshape(-1).copy()


def mask_patches(patch_set: PatchSet, ratio: float,
                 rng: np.random.Generator) -> PatchSet:
    """Zero-fill a fixed number of randomly chosen patches.

    Exactly round(ratio * C) patches are masked, with a floor of one so the
    reconstruction task never degenerates.
    """
    if not 0.0 < ratio < 1.0:
        raise DataError(f"mask ratio must be in (0, 1), got {ratio}")
    C = patch_set.n_patches
    n_mask = max(1, int(math.floor(ratio * C + 0.5)))
    chosen = rng.choice(C, size=n_mask, replace=False)
    mask = np.zeros(C, dtype=bool)
    mask[chosen] = True
    patches = patch_set.patches.copy()
    patches[mask] = 0.0
    return PatchSet(patches=patches, mask=mask)


# ---------------------------------------------------------------------------
# contrastive views

@dataclass
class ViewPair:
    """Two crops of the same series with their overlapping patch indices.

    omega_a/omega_b index the overlap patches inside each view; entry i of
    both arrays refers to the same absolute time span.
    """
    view_a: np.ndarray
    view_b: np.ndarray
    start_a: int
    start_b: int
    omega_a: np.ndarray
    omega_b: np.ndarray

    @property
    def n_overlap(self) -> int:
        return len(self.omega_a)


def sample_view_pair(values: np.ndarray, T: int, patch_len: int,
                     rng: np.random.Generator,
                     overlap_patches: int | None = None) -> ViewPair:
    """Draw two patch-aligned crops of length T with overlap >= T/4."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n < int(1.5 * T):
        raise DataError(f"series length {n} < 1.5*T={1.5 * T:.0f}, cannot crop views")
    C = T // patch_len
    max_start_p = (n - T) // patch_len  # starts on the patch grid
    # shift between starts is capped by the series length, so short series
    # force larger overlaps
    min_overlap = max(1, math.ceil(0.25 * C), C - max_start_p)
    if overlap_patches is None:
        overlap_patches = int(rng.integers(min_overlap, C + 1))
    if not min_overlap <= overlap_patches <= C:
        raise DataError(f"overlap_patches {overlap_patches} outside "
                        f"[{min_overlap}, {C}]")
    shift = C - overlap_patches  # patch-grid distance between the two starts
    hi = max_start_p - shift
    first = int(rng.integers(0, hi + 1))
    if rng.integers(0, 2) == 0:
        pa, pb = first, first + shift
    else:
        pa, pb = first + shift, first
    sa, sb = pa * patch_len, pb * patch_len
    abs_lo = max(pa, pb)
    omega_abs = np.arange(abs_lo, abs_lo + overlap_patches)
    return ViewPair(
        view_a=values[sa:sa + T].copy(),
        view_b=values[sb:sb + T].copy(),
        start_a=sa, start_b=sb,
        omega_a=omega_abs - pa,
        omega_b=omega_abs - pb,
    )


def make_views(record: TimeSeriesRecord, T: int, patch_len: int,
               rng: np.random.Generator) -> ViewPair | None:
    """Per-record view pair; returns None (with a log line) when the series
    is too short to crop."""
    try:
        return sample_view_pair(record.values, T, patch_len, rng)
    except DataError as exc:
        log.warning("series (%s, %s) skipped for views: %s",
                    record.disease_id, record.region_id, exc)
        return None
