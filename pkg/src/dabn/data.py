"""Accelerometer ingestion, preprocessing, windowing and domain batches.

The preprocessing chain runs per (subject, activity) recording, always in this
order: resample to 20 Hz -> equalize lengths -> causal moving average ->
min-max scaling -> sliding windows. The chain is recorded with every dataset.
"""

from __future__ import annotations

import csv
import hashlib
import math
import re
from dataclasses import InitVar, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import container
from .errors import DataError, InvariantViolation

PERIOD_20HZ_NS = 50_000_000
WINDOW_LEN = 40
WINDOW_STRIDE = 20
FILTER_WIDTH = 4
ACCEL_RANGE = (-78.0, 78.0)

DATASET_MAGIC = b"DABNDS1"
DATASET_VERSION = 1
PIPELINE_STEPS = ("resample_20hz", "equalize", "moving_average", "minmax_normalize", "make_windows")


@dataclass
class Series:
    """Time-ordered accelerometer samples of one subject performing one activity."""

    subject: str
    activity: str
    timestamps: np.ndarray  # int64 nanoseconds
    accel: np.ndarray  # (n, 3)

    def __len__(self):
        return len(self.timestamps)


@dataclass
class IngestResult:
    groups: dict  # (subject, activity) -> Series
    rows: int
    malformed: int
    malformed_lines: list = field(default_factory=list)


def _natural_key(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]


def ingest_csv(path) -> IngestResult:
    """Read ``subject,activity,timestamp_ns,x,y,z`` rows.

    A header line is skipped, a trailing ``;`` on a row is tolerated (the raw
    WISDM files end rows that way) and malformed rows are counted, not fatal.
    """
    rows: dict = {}
    total = malformed = 0
    bad_lines = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            rec = [f.strip() for f in rec]
            rec[-1] = rec[-1].rstrip(";").strip()
            if lineno == 1 and rec[0].lower() in ("subject", "user", "subject_id"):
                continue
            total += 1
            try:
                if len(rec) != 6:
                    raise ValueError
                ts = int(rec[2])
                xyz = (float(rec[3]), float(rec[4]), float(rec[5]))
                if not all(math.isfinite(v) for v in xyz):
                    raise ValueError
            except ValueError:
                malformed += 1
                if len(bad_lines) < 20:
                    bad_lines.append(lineno)
                continue
            rows.setdefault((rec[0], rec[1]), []).append((ts, xyz))
    if not rows:
        raise DataError(f"{path}: no valid rows ({malformed} malformed)")
    groups = {}
    for key in sorted(rows, key=lambda k: (_natural_key(k[0]), _natural_key(k[1]))):
        ts = np.array([r[0] for r in rows[key]], dtype=np.int64)
        accel = np.array([r[1] for r in rows[key]], dtype=np.float64)
        order = np.argsort(ts, kind="stable")
        groups[key] = Series(key[0], key[1], ts[order], accel[order])
    return IngestResult(groups, total, malformed, bad_lines)


def write_csv(groups: Mapping, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "activity", "timestamp_ns", "x", "y", "z"])
        for s in groups.values():
            for ts, (x, y, z) in zip(s.timestamps.tolist(), s.accel.tolist()):
                w.writerow([s.subject, s.activity, ts, repr(x), repr(y), repr(z)])


def resample_20hz(series: Series, period_ns: int = PERIOD_20HZ_NS) -> Series:
    """Linearly interpolate onto an exact grid starting at the first timestamp.

    Grid points past the last input timestamp are dropped.
    """
    ts = np.asarray(series.timestamps, dtype=np.int64)
    if len(ts) < 2:
        raise ValueError("resampling needs at least two samples")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    rel = (ts - ts[0]).astype(np.float64)
    n_out = int((ts[-1] - ts[0]) // period_ns) + 1
    grid = np.arange(n_out, dtype=np.int64) * period_ns
    accel = np.column_stack([np.interp(grid.astype(np.float64), rel, col) for col in series.accel.T])
    return Series(series.subject, series.activity, ts[0] + grid, accel)


def moving_average(values, width: int = FILTER_WIDTH) -> np.ndarray:
    """Causal mean of the current and previous ``width - 1`` samples.

    The first samples average over however many values exist so far.
    """
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("moving average of an empty series")
    acc = values.copy()
    for lag in range(1, width):
        acc[lag:] += values[:-lag]
    counts = np.minimum(np.arange(1, len(values) + 1), width).astype(np.float64)
    return acc / counts.reshape((-1,) + (1,) * (values.ndim - 1))


def minmax_normalize(values, lo: float = ACCEL_RANGE[0], hi: float = ACCEL_RANGE[1]) -> np.ndarray:
    """Clamp to ``[lo, hi]`` and map linearly onto ``[0, 1]``."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    return (np.clip(values, lo, hi) - lo) / (hi - lo)


def minmax_denormalize(values, lo: float = ACCEL_RANGE[0], hi: float = ACCEL_RANGE[1]) -> np.ndarray:
    if not lo < hi:
        raise ValueError("need lo < hi")
    return lo + np.asarray(values, dtype=np.float64) * (hi - lo)


@dataclass
class Window:
    subject: object
    label: object
    index: int
    data: np.ndarray  # (nu, channels)


def window_count(length: int, nu: int, stride: int) -> int:
    return (length - nu) // stride + 1


def majority_label(labels):
    """Most frequent label; ties go to the label that occurs first."""
    counts: dict = {}
    for lbl in labels:
        counts[lbl] = counts.get(lbl, 0) + 1
    best = max(counts.values())
    return next(lbl for lbl in counts if counts[lbl] == best)


def make_windows(values, labels, nu: int = WINDOW_LEN, stride: int = WINDOW_STRIDE, subject=None) -> list:
    """Sliding windows of ``nu`` samples every ``stride`` samples, majority-labelled."""
    values = np.asarray(values)
    labels = list(labels)
    if len(labels) != len(values):
        raise ValueError("one label per sample required")
    if nu < 1 or stride < 1:
        raise ValueError("nu and stride must be positive")
    if len(values) < nu:
        raise ValueError(f"series of length {len(values)} is shorter than the window ({nu})")
    out = []
    for tau in range(window_count(len(values), nu, stride)):
        start = tau * stride
        chunk = labels[start : start + nu]
        label = chunk[0] if chunk.count(chunk[0]) == nu else majority_label(chunk)
        out.append(Window(subject, label, tau, values[start : start + nu]))
    return out


@dataclass
class DomainBatch:
    """``indices`` of windows drawn from one source user.

    Pass ``subjects`` (the per-window subject array) to have purity checked.
    """

    source: object
    ordinal: int
    indices: np.ndarray
    subjects: InitVar[Optional[np.ndarray]] = None

    def __post_init__(self, subjects):
        if subjects is not None and np.any(np.asarray(subjects)[self.indices] != self.source):
            raise InvariantViolation(f"batch {self.ordinal} of source {self.source!r} holds another user's windows")


def make_domain_batches(sources: Mapping, q: int, rng: np.random.Generator, subjects=None) -> list:
    """Split every source into ``len // q`` disjoint random batches of exactly ``q``.

    Leftover windows sit out this epoch. Batches of all sources are returned
    in one shuffled order.
    """
    if q <= 1:
        raise ValueError("batch size must be > 1")
    for src, idx in sources.items():
        if q > len(idx):
            raise ValueError(f"batch size {q} exceeds the {len(idx)} windows of source {src!r}")
    batches = []
    for src, idx in sources.items():
        perm = rng.permutation(np.asarray(idx))
        for p in range(len(perm) // q):
            batches.append(DomainBatch(src, p, perm[p * q : (p + 1) * q], subjects))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


@dataclass(eq=False)
class Dataset:
    """Windows of all subjects with integer-coded labels and subjects.

    Windows of a subject are kept in recording order (activity blocks).
    """

    windows: np.ndarray  # (N, nu, channels)
    labels: np.ndarray  # (N,) codes into label_names
    subjects: np.ndarray  # (N,) codes into subject_names
    label_names: tuple
    subject_names: tuple
    nu: int = WINDOW_LEN
    stride: int = WINDOW_STRIDE
    pipeline: tuple = PIPELINE_STEPS
    series_counts: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        self.label_names = tuple(self.label_names)
        self.subject_names = tuple(self.subject_names)
        n = len(self.windows)
        if self.labels.shape != (n,) or self.subjects.shape != (n,):
            raise ValueError("labels and subjects need one entry per window")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.label_names)):
            raise ValueError("label code outside the label set")

    def __len__(self):
        return len(self.windows)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def users(self) -> list:
        return sorted(np.unique(self.subjects).tolist())

    def user_indices(self, user: int) -> np.ndarray:
        return np.flatnonzero(self.subjects == user)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.windows, self.labels, self.subjects):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.label_names, self.subject_names, self.nu, self.stride)).encode())
        return h.hexdigest()

    def save(self, path) -> None:
        meta = {
            "version": DATASET_VERSION,
            "label_names": list(self.label_names),
            "subject_names": list(self.subject_names),
            "nu": self.nu,
            "stride": self.stride,
            "pipeline": list(self.pipeline),
            "series_counts": self.series_counts,
            "extra": self.extra,
        }
        container.dump(
            path,
            DATASET_MAGIC,
            meta,
            {"windows": ("f8", self.windows), "labels": ("i8", self.labels), "subjects": ("i8", self.subjects)},
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        meta, t = container.load(path, DATASET_MAGIC)
        if meta.get("version") != DATASET_VERSION:
            raise DataError(f"{path}: unsupported dataset version {meta.get('version')}")
        return cls(
            t["windows"], t["labels"], t["subjects"], meta["label_names"], meta["subject_names"],
            meta["nu"], meta["stride"], tuple(meta["pipeline"]), meta["series_counts"], meta["extra"],
        )


def preprocess(
    groups: Mapping,
    nu: int = WINDOW_LEN,
    stride: int = WINDOW_STRIDE,
    filter_width: int = FILTER_WIDTH,
    value_range: Sequence[float] = ACCEL_RANGE,
    period_ns: int = PERIOD_20HZ_NS,
    equalize: bool = True,
    activities: Optional[Sequence[str]] = None,
    exclude_subjects: Sequence[str] = (),
) -> Dataset:
    """Turn raw per-(subject, activity) series into a windowed :class:`Dataset`.

    With ``equalize`` every resampled recording is cut to the length of the
    shortest one, which balances subjects and activities.
    """
    keep = {
        k: s for k, s in groups.items()
        if (activities is None or k[1] in activities) and k[0] not in set(exclude_subjects)
    }
    if not keep:
        raise DataError("no recordings left after filtering")
    resampled = {}
    for key, s in keep.items():
        ts, first = np.unique(s.timestamps, return_index=True)
        if len(ts) < 2:
            raise DataError(f"recording {key} has fewer than two distinct timestamps")
        resampled[key] = resample_20hz(Series(s.subject, s.activity, ts, s.accel[first]), period_ns)
    target_len = min(len(s) for s in resampled.values()) if equalize else None
    if target_len is not None and target_len < nu:
        raise DataError(f"shortest recording has {target_len} samples, fewer than the window ({nu})")

    subject_names = sorted({k[0] for k in resampled}, key=_natural_key)
    label_names = sorted({k[1] for k in resampled}, key=_natural_key) if activities is None else [
        a for a in activities if any(k[1] == a for k in resampled)
    ]
    s_code = {s: i for i, s in enumerate(subject_names)}
    l_code = {a: i for i, a in enumerate(label_names)}
    windows, labels, subjects, counts = [], [], [], []
    for key in sorted(resampled, key=lambda k: (s_code[k[0]], l_code[k[1]])):
        s = resampled[key]
        accel = s.accel[:target_len] if target_len is not None else s.accel
        if len(accel) < nu:
            raise DataError(f"recording {key} is shorter than one window")
        filtered = minmax_normalize(moving_average(accel, filter_width), *value_range)
        ws = make_windows(filtered, [l_code[key[1]]] * len(filtered), nu, stride, s_code[key[0]])
        windows.extend(w.data for w in ws)
        labels.extend(w.label for w in ws)
        subjects.extend([s_code[key[0]]] * len(ws))
        counts.append({"subject": key[0], "activity": key[1], "raw": len(accel), "windows": len(ws)})
    return Dataset(
        np.stack(windows), labels, subjects, label_names, subject_names, nu, stride, PIPELINE_STEPS, counts,
        {"filter_width": filter_width, "value_range": list(value_range), "period_ns": period_ns,
         "equalize": equalize},
    )
