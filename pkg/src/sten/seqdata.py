"""Data ingestion, normalization, windowing, sub-sequence generation and
shuffling, plus a synthetic benchmark generator for desk-scale evaluation.

Indexing is 0-based internally; CSV outputs use 1-based timestamps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import DataError

STD_FLOOR = 1e-8


@dataclass
class MultivariateSeries:
    """An N x D real matrix, one row per timestamp, with optional binary labels."""

    values: np.ndarray
    labels: np.ndarray | None = None
    dim_names: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError(f"series values must be (N, D) with N,D >= 1, got {self.values.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.values.shape[0],):
                raise DataError(
                    f"labels length {self.labels.shape} != series length {self.values.shape[0]}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass
class Window:
    """A length-L slice of a series starting at timestamp index ``start``."""

    start: int
    data: np.ndarray  # (L, D)

    @property
    def length(self) -> int:
        return self.data.shape[0]


@dataclass
class SubSeq:
    """A length-l slice of a window; ``position_label`` is its true slot in [0, m)."""

    parent_start: int
    offset: int
    length: int
    position_label: int
    data: np.ndarray  # (l, D)


@dataclass
class ShuffledCollection:
    """Sub-sequences in presented order plus the permutation mapping slot -> true position."""

    subseqs: list[SubSeq]
    permutation: np.ndarray

    @property
    def m(self) -> int:
        return len(self.subseqs)

    def one_hot_labels(self) -> np.ndarray:
        m = self.m
        y = np.zeros((m, m))
        y[np.arange(m), self.permutation] = 1.0
        return y

    def unshuffle(self) -> np.ndarray:
        """Reassemble the original window content from the shuffled sub-sequences."""
        l = self.subseqs[0].length
        offsets = [s.offset for s in self.subseqs]
        length = max(offsets) + l
        out = np.empty((length, self.subseqs[0].data.shape[1]))
        for s in self.subseqs:
            out[s.offset:s.offset + s.length] = s.data
        return out


@dataclass
class NormStats:
    """Per-dimension mean/std fitted on training data (std floored at 1e-8)."""

    mean: np.ndarray
    std: np.ndarray


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def load_csv(path, has_header: bool = True,
             label_column: str | int | None = None) -> MultivariateSeries:
    """Load a comma-separated series; optional 0/1 label column.

    With a header, the label column is located by name (``label_column`` or
    the default name "label" when present).  Without a header pass a column
    index.  Non-finite or unparsable cells fail with the offending file line.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if not rows:
        raise DataError(f"{path}: empty file")

    header = None
    data_rows = rows
    first_line = 1
    if has_header:
        header = [c.strip() for c in rows[0]]
        data_rows = rows[1:]
        first_line = 2
        if not data_rows:
            raise DataError(f"{path}: no data rows after header")

    ncols = len(rows[0])
    label_idx: int | None = None
    if isinstance(label_column, int):
        label_idx = label_column
    elif isinstance(label_column, str):
        if header is None:
            raise DataError("label column given by name but file has no header")
        if label_column not in header:
            raise DataError(f"label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
    elif header is not None and "label" in header:
        label_idx = header.index("label")
    if label_idx is not None and label_idx < 0:
        label_idx += ncols

    values = []
    labels = [] if label_idx is not None else None
    for i, row in enumerate(data_rows):
        line = first_line + i
        if len(row) != ncols:
            raise DataError(f"{path}: line {line}: expected {ncols} columns, got {len(row)}")
        vals = []
        for j, cell in enumerate(row):
            if j == label_idx:
                cell = cell.strip()
                if cell not in ("0", "1"):
                    raise DataError(f"{path}: line {line}: label must be 0 or 1, got {cell!r}")
                labels.append(int(cell))
                continue
            try:
                x = float(cell)
            except ValueError:
                raise DataError(f"{path}: line {line}: cannot parse value {cell.strip()!r}") from None
            if not math.isfinite(x):
                raise DataError(f"{path}: line {line}: non-finite value {cell.strip()!r}")
            vals.append(x)
        values.append(vals)

    dim_names = None
    if header is not None:
        dim_names = [h for j, h in enumerate(header) if j != label_idx]
    return MultivariateSeries(
        values=np.asarray(values, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64) if labels is not None else None,
        dim_names=dim_names,
    )


def save_csv(series: MultivariateSeries, path) -> None:
    """Write a series as CSV with a header; labels go to a final "label" column."""
    names = series.dim_names or [f"dim_{j}" for j in range(series.d)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + (["label"] if series.labels is not None else []))
        for i in range(series.n):
            row = [repr(float(x)) for x in series.values[i]]
            if series.labels is not None:
                row.append(str(int(series.labels[i])))
            w.writerow(row)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def zscore_fit(train: MultivariateSeries) -> NormStats:
    """Per-dimension mean and population std of the training split."""
    if train.n < 2:
        raise DataError("need at least 2 rows to fit normalization stats")
    mean = train.values.mean(axis=0)
    std = np.maximum(train.values.std(axis=0), STD_FLOOR)
    return NormStats(mean=mean.astype(np.float32), std=std.astype(np.float32))


def zscore_apply(series: MultivariateSeries, stats: NormStats) -> MultivariateSeries:
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.maximum(np.asarray(stats.std, dtype=np.float64), STD_FLOOR)
    if mean.shape[0] != series.d:
        raise DataError(f"stats have {mean.shape[0]} dims, series has {series.d}")
    return MultivariateSeries(values=(series.values - mean) / std,
                              labels=series.labels, dim_names=series.dim_names)


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------

def make_windows(series: MultivariateSeries, L: int, R: int,
                 cover_tail: bool = False) -> list[Window]:
    """Sliding windows of length L and stride R: starts 0, R, 2R, ...

    With ``cover_tail`` a final window anchored at N-L is appended when the
    regular grid leaves trailing timestamps uncovered (used for scoring so
    every timestamp is covered).
    """
    n = series.n
    if L > n:
        raise DataError(f"window length {L} exceeds series length {n}")
    if L < 1 or R < 1:
        raise DataError("window length and stride must be >= 1")
    starts = list(range(0, n - L + 1, R))
    if cover_tail and starts[-1] + L < n:
        starts.append(n - L)
    return [Window(start=s, data=series.values[s:s + L]) for s in starts]


def split_subsequences(w: Window, l: int, r: int, m: int) -> list[SubSeq]:
    """Split a window into m sub-sequences of length l at stride r (l + (m-1)r == L)."""
    if l + (m - 1) * r != w.length:
        raise DataError(
            f"sub-sequence layout mismatch: l + (m-1)*r = {l + (m - 1) * r} != L = {w.length}")
    return [
        SubSeq(parent_start=w.start, offset=i * r, length=l, position_label=i,
               data=w.data[i * r:i * r + l])
        for i in range(m)
    ]


def shuffle_with_labels(subseqs: list[SubSeq],
                        rng: np.random.Generator | int) -> ShuffledCollection:
    """Present the sub-sequences in a uniformly random order, keeping true positions."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    m = len(subseqs)
    perm = rng.permutation(m)
    return ShuffledCollection(subseqs=[subseqs[j] for j in perm],
                              permutation=np.asarray(perm))


def identity_collection(subseqs: list[SubSeq]) -> ShuffledCollection:
    """Sub-sequences in true order with identity labels (inference-time layout)."""
    return ShuffledCollection(subseqs=list(subseqs),
                              permutation=np.arange(len(subseqs)))


# ---------------------------------------------------------------------------
# Synthetic benchmark generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Sum-of-sinusoids base signal with injected anomaly segments in the test split."""

    n_train: int = 20000
    n_test: int = 10000
    dims: int = 5
    anomaly_rate: float = 0.05
    seed: int = 0
    noise_sigma: float = 0.1
    seg_len_min: int = 10
    seg_len_max: int = 50
    period_min: float = 20.0
    period_max: float = 150.0
    n_components: int = 2
    spike_scale: float = 8.0
    level_scale: float = 4.0
    freq_scale: float = 2.5
    anomaly_types: tuple[str, ...] = ("spike", "level_shift", "frequency_shift")

    KNOWN_TYPES = ("spike", "level_shift", "frequency_shift")

    def validate(self) -> None:
        if self.n_train < 2 or self.n_test < 1 or self.dims < 1:
            raise DataError("n_train >= 2, n_test >= 1 and dims >= 1 required")
        if not 0.0 <= self.anomaly_rate < 1.0:
            raise DataError("anomaly_rate must be in [0, 1)")
        if not 1 <= self.seg_len_min <= self.seg_len_max:
            raise DataError("need 1 <= seg_len_min <= seg_len_max")
        for t in self.anomaly_types:
            if t not in self.KNOWN_TYPES:
                raise DataError(f"unknown anomaly type {t!r}")
        target = round(self.anomaly_rate * self.n_test)
        if 0 < target < self.seg_len_min:
            raise DataError(
                f"anomaly rate {self.anomaly_rate} incompatible with segment length "
                f">= {self.seg_len_min} on {self.n_test} test points")


def _clean_signal(t: np.ndarray, amps, periods, phases, freq_factor: float = 1.0) -> np.ndarray:
    """Sum-of-sinusoids signal for one dimension, evaluated at global times t."""
    out = np.zeros(t.shape[0])
    for a, p, ph in zip(amps, periods, phases):
        out += a * np.sin(2.0 * np.pi * freq_factor * t / p + ph)
    return out


def _place_segments(rng: np.random.Generator, cfg: SynthConfig) -> list[tuple[int, int, str]]:
    """Non-overlapping (start, length, type) anomaly segments on the test timeline."""
    target = round(cfg.anomaly_rate * cfg.n_test)
    if target == 0:
        return []
    segments: list[tuple[int, int]] = []
    remaining = target
    types = list(cfg.anomaly_types)
    placed: list[tuple[int, int, str]] = []
    while remaining > 0:
        seg = int(rng.integers(cfg.seg_len_min, cfg.seg_len_max + 1))
        seg = min(seg, remaining) if remaining >= cfg.seg_len_min else remaining
        ok = False
        for _ in range(1000):
            start = int(rng.integers(0, cfg.n_test - seg + 1))
            # Keep a 1-point gap so adjacent segments stay distinct events.
            if all(start + seg < s0 or start > s0 + ln for s0, ln in segments):
                ok = True
                break
        if not ok:
            raise DataError("anomaly rate incompatible with segment lengths: cannot place "
                            "non-overlapping segments")
        segments.append((start, seg))
        placed.append((start, seg, types[len(placed) % len(types)]))
        remaining -= seg
    placed.sort()
    return placed


def synth_generate(cfg: SynthConfig) -> tuple[MultivariateSeries, MultivariateSeries]:
    """Generate a (train, test) pair; test labels mark the injected segments."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_total = cfg.n_train + cfg.n_test
    t_all = np.arange(n_total, dtype=np.float64)

    amps = rng.uniform(0.5, 1.0, size=(cfg.dims, cfg.n_components))
    periods = rng.uniform(cfg.period_min, cfg.period_max, size=(cfg.dims, cfg.n_components))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(cfg.dims, cfg.n_components))

    clean = np.empty((n_total, cfg.dims))
    for j in range(cfg.dims):
        clean[:, j] = _clean_signal(t_all, amps[j], periods[j], phases[j])
    values = clean + rng.normal(0.0, cfg.noise_sigma, size=clean.shape)

    test_off = cfg.n_train
    labels = np.zeros(cfg.n_test, dtype=np.int64)
    for start, seg, kind in _place_segments(rng, cfg):
        sl = slice(test_off + start, test_off + start + seg)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if kind == "spike":
            # Exact offset from the clean signal so the deviation is guaranteed.
            values[sl] = clean[sl] + sign * cfg.spike_scale * cfg.noise_sigma
        elif kind == "level_shift":
            values[sl] += sign * cfg.level_scale * cfg.noise_sigma
        else:  # frequency_shift
            seg_t = t_all[sl]
            shifted = np.empty((seg, cfg.dims))
            for j in range(cfg.dims):
                shifted[:, j] = _clean_signal(seg_t, amps[j], periods[j], phases[j],
                                              freq_factor=cfg.freq_scale)
            values[sl] = shifted + rng.normal(0.0, cfg.noise_sigma, size=shifted.shape)
        labels[start:start + seg] = 1

    train = MultivariateSeries(values=values[:cfg.n_train],
                               labels=np.zeros(cfg.n_train, dtype=np.int64))
    test = MultivariateSeries(values=values[cfg.n_train:], labels=labels)
    return train, test
