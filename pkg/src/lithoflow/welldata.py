"""Well-log ingestion, cleaning, normalization, windowing, and synthesis.

A well is a depth-indexed multichannel measurement record.  Missing samples
are held as NaN cells inside the channel matrix; :func:`missing_mask` exposes
the explicit boolean mask.  Sentinel numbers (``-999.25`` and friends) are
never stored -- they would silently corrupt z-scores downstream.

The canonical CSV layout is ``well_id,depth,<channel_1>,...,<channel_d>[,label]``
with UTF-8 text, ``.`` decimal separator and empty cells for missing values.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

LOG_EPS = 1e-6  # additive guard inside log10 for resistivity-like channels


class WellDataError(ValueError):
    """Raised for malformed well-log inputs or contract violations."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr)
    out = out.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LogCurve:
    """One logging channel: a named real-valued vector aligned to depth.

    ``transform`` is ``"linear"`` or ``"log10"``; the log transform is meant
    for resistivity-like channels spanning orders of magnitude and is applied
    by :func:`normalize`, not at construction.
    """

    name: str
    values: np.ndarray
    unit: str = ""
    transform: str = "linear"

    def __post_init__(self):
        if self.transform not in ("linear", "log10"):
            raise WellDataError(f"unknown transform {self.transform!r} for channel {self.name!r}")
        object.__setattr__(self, "values", _readonly(np.asarray(self.values, dtype=float)))
        if self.values.ndim != 1:
            raise WellDataError(f"channel {self.name!r} values must be 1-D")


@dataclass(frozen=True)
class WellLog:
    """Depth-indexed multichannel record with optional per-sample labels."""

    well_id: str
    depths: np.ndarray
    curves: tuple[LogCurve, ...]
    labels: Optional[np.ndarray] = None
    interval: float = 0.0

    def __post_init__(self):
        depths = np.asarray(self.depths, dtype=float)
        if depths.ndim != 1 or depths.size == 0:
            raise WellDataError(f"well {self.well_id!r}: depths must be a nonempty vector")
        if not np.all(np.diff(depths) > 0):
            raise WellDataError(f"well {self.well_id!r}: depths must be strictly increasing")
        object.__setattr__(self, "depths", _readonly(depths))
        if not self.curves:
            raise WellDataError(f"well {self.well_id!r}: at least one channel required")
        for c in self.curves:
            if len(c.values) != depths.size:
                raise WellDataError(
                    f"well {self.well_id!r}: channel {c.name!r} length {len(c.values)} != {depths.size}"
                )
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=int)
            if labels.shape != depths.shape:
                raise WellDataError(f"well {self.well_id!r}: labels length != depth length")
            object.__setattr__(self, "labels", _readonly(labels))
        if self.interval <= 0:
            if depths.size > 1:
                object.__setattr__(self, "interval", float(np.median(np.diff(depths))))
            else:
                raise WellDataError(f"well {self.well_id!r}: interval must be positive")

    @property
    def T(self) -> int:
        return int(self.depths.size)

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.curves)

    @cached_property
    def channels(self) -> np.ndarray:
        """T x d channel matrix (missing cells are NaN)."""
        return _readonly(np.column_stack([c.values for c in self.curves]))

    def curve(self, name: str) -> LogCurve:
        for c in self.curves:
            if c.name == name:
                return c
        raise KeyError(name)

    def with_values(self, values: np.ndarray, labels: Optional[np.ndarray] = None,
                    depths: Optional[np.ndarray] = None, well_id: Optional[str] = None) -> "WellLog":
        """Copy of this well with replaced channel values (same channel metadata)."""
        values = np.asarray(values, dtype=float)
        curves = tuple(
            LogCurve(c.name, values[:, i], c.unit, c.transform) for i, c in enumerate(self.curves)
        )
        return WellLog(
            well_id=self.well_id if well_id is None else well_id,
            depths=self.depths if depths is None else depths,
            curves=curves,
            labels=self.labels if labels is None else labels,
            interval=self.interval,
        )


def missing_mask(well: WellLog) -> np.ndarray:
    """Explicit T x d boolean mask of missing cells."""
    return np.isnan(well.channels)


@dataclass(frozen=True)
class Window:
    """A contiguous L-sample slice of a well."""

    well_id: str
    start_index: int
    values: np.ndarray
    depths: np.ndarray
    labels: Optional[np.ndarray] = None
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1:
            raise WellDataError("window values must be an L x d matrix with L >= 1")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "depths", _readonly(np.asarray(self.depths, dtype=float)))
        if self.depths.size != values.shape[0]:
            raise WellDataError("window depths length != L")
        if self.labels is not None:
            object.__setattr__(self, "labels", _readonly(np.asarray(self.labels, dtype=int)))

    @property
    def length(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_channels(self) -> int:
        return int(self.values.shape[1])

    def flat(self) -> np.ndarray:
        """Row-major flattening used by retrieval and stand-in predictors."""
        return self.values.reshape(-1)


@dataclass
class PreprocessSpec:
    """Cleaning and windowing parameters.

    ``physical_bounds`` maps channel name to an (inclusive-exclusive is not
    distinguished; strict outside) ``(lo, hi)`` validity range.  Gaps of
    missing samples spanning more than ``max_gap_m`` meters split the well.
    """

    physical_bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    max_gap_m: float = 2.0
    window_len: int = 16
    stride: int = 4
    test_stride: int = 0  # 0 -> defaults to window_len (non-overlapping)

    def __post_init__(self):
        if self.window_len <= 0:
            raise WellDataError("window_len must be positive")
        if self.stride <= 0:
            raise WellDataError("stride must be positive")
        if self.max_gap_m <= 0:
            raise WellDataError("max_gap_m must be positive")
        if self.test_stride <= 0:
            self.test_stride = self.window_len


@dataclass
class SynthSpec:
    """Markov-chain lithology generator with per-class Gaussian emissions."""

    num_classes: int
    transition: np.ndarray          # |C| x |C| row-stochastic
    emission_mean: np.ndarray       # |C| x d
    emission_std: np.ndarray        # |C| x d, > 0
    interval: float = 0.5
    seed: int = 0
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.emission_mean = np.atleast_2d(np.asarray(self.emission_mean, dtype=float))
        self.emission_std = np.atleast_2d(np.asarray(self.emission_std, dtype=float))
        C = self.num_classes
        if self.transition.shape != (C, C):
            raise WellDataError(f"transition matrix must be {C}x{C}")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=1) - 1.0) > 1e-9):
            raise WellDataError("transition rows must be nonnegative and sum to 1")
        if self.emission_mean.shape[0] != C or self.emission_std.shape != self.emission_mean.shape:
            raise WellDataError("emission_mean/emission_std must be |C| x d")
        if np.any(self.emission_std <= 0):
            raise WellDataError("emission_std must be positive")
        if self.interval <= 0:
            raise WellDataError("interval must be positive")
        if not self.channel_names:
            d = self.emission_mean.shape[1]
            self.channel_names = tuple(f"ch{i}" for i in range(d))


@dataclass
class CsvSchema:
    """Column map for the canonical CSV layout."""

    well_col: str = "well_id"
    depth_col: str = "depth"
    channel_cols: tuple[str, ...] = ()   # empty -> every remaining column
    label_col: Optional[str] = "label"
    transforms: dict[str, str] = field(default_factory=dict)
    units: dict[str, str] = field(default_factory=dict)


def _parse_cell(text: str, row: int, col: str) -> float:
    text = text.strip()
    if text == "":
        return float("nan")
    try:
        return float(text)
    except ValueError:
        raise WellDataError(f"unparseable numeric cell {text!r} at row {row}, column {col!r}") from None


def parse_csv(path, schema: Optional[CsvSchema] = None) -> list[WellLog]:
    """Parse a canonical CSV into one WellLog per distinct well id.

    Rows are sorted by depth within each well; duplicate depths inside a well
    are rejected.  The label column is optional.  Returns wells sorted by id.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise WellDataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise WellDataError(f"{path}: no rows") from None
        header = [h.strip() for h in header]
        for col in (schema.well_col, schema.depth_col):
            if col not in header:
                raise WellDataError(f"{path}: missing mandatory column {col!r}")
        channel_cols = list(schema.channel_cols)
        if not channel_cols:
            skip = {schema.well_col, schema.depth_col, schema.label_col}
            channel_cols = [h for h in header if h not in skip]
        if not channel_cols:
            raise WellDataError(f"{path}: no channel columns")
        for col in channel_cols:
            if col not in header:
                raise WellDataError(f"{path}: missing channel column {col!r}")
        idx = {h: i for i, h in enumerate(header)}
        has_label = schema.label_col is not None and schema.label_col in header

        rows_by_well: dict[str, list] = {}
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            wid = row[idx[schema.well_col]].strip()
            depth = _parse_cell(row[idx[schema.depth_col]], rownum, schema.depth_col)
            if np.isnan(depth):
                raise WellDataError(f"{path}: missing depth at row {rownum}")
            vals = [_parse_cell(row[idx[c]], rownum, c) for c in channel_cols]
            label = None
            if has_label:
                cell = row[idx[schema.label_col]].strip()
                if cell != "":
                    try:
                        label = int(cell)
                    except ValueError:
                        raise WellDataError(
                            f"{path}: unparseable label {cell!r} at row {rownum}"
                        ) from None
            rows_by_well.setdefault(wid, []).append((depth, vals, label))

    if not rows_by_well:
        raise WellDataError(f"{path}: no rows")

    wells = []
    for wid in sorted(rows_by_well):
        rows = sorted(rows_by_well[wid], key=lambda r: r[0])
        depths = np.array([r[0] for r in rows])
        if np.any(np.diff(depths) <= 0):
            raise WellDataError(f"well {wid!r}: non-monotone depth (duplicate depth values)")
        values = np.array([r[1] for r in rows])
        row_labels = [r[2] for r in rows]
        labels = None
        if has_label and all(l is not None for l in row_labels):
            labels = np.array(row_labels, dtype=int)
        curves = tuple(
            LogCurve(
                name=c,
                values=values[:, i],
                unit=schema.units.get(c, ""),
                transform=schema.transforms.get(c, "linear"),
            )
            for i, c in enumerate(channel_cols)
        )
        wells.append(WellLog(well_id=wid, depths=depths, curves=curves, labels=labels))
    return wells


def write_csv(path, wells: Sequence[WellLog]) -> None:
    """Write wells back out in the canonical CSV layout."""
    wells = list(wells)
    if not wells:
        raise WellDataError("no wells to write")
    names = wells[0].channel_names
    with_labels = all(w.labels is not None for w in wells)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["well_id", "depth"] + list(names)
        if with_labels:
            header.append("label")
        writer.writerow(header)
        for w in wells:
            if w.channel_names != names:
                raise WellDataError("wells have inconsistent channel sets")
            for t in range(w.T):
                row = [w.well_id, f"{w.depths[t]:.6f}"]
                for v in w.channels[t]:
                    row.append("" if np.isnan(v) else f"{v:.9g}")
                if with_labels:
                    row.append(str(int(w.labels[t])))
                writer.writerow(row)


# ---------------------------------------------------------------------------
# cleaning
# ---------------------------------------------------------------------------

def _gap_runs(bad: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as (start, stop) half-open index pairs."""
    runs = []
    i = 0
    n = bad.size
    while i < n:
        if bad[i]:
            j = i
            while j < n and bad[j]:
                j += 1
            runs.append((i, j))
            i = j
        else:
            i += 1
    return runs


def clean(well: WellLog, spec: PreprocessSpec) -> list[WellLog]:
    """Bound-filter, interpolate short gaps, and split at long gaps.

    Samples outside their channel's physical bounds become missing.  Missing
    runs spanning at most ``max_gap_m`` meters (run length times the sampling
    interval) are filled by linear depth-wise interpolation.  Runs spanning
    more are unobserved intervals: those rows are dropped and the well splits
    into independent segments (suffix ``#k`` when more than one survives).
    Leading and trailing missing runs cannot be interpolated and are trimmed.

    Returns the list of cleaned segments (typically one).  Raises when a
    channel is entirely missing after bound filtering.
    """
    values = np.array(well.channels)  # writable copy
    for i, c in enumerate(well.curves):
        if c.name in spec.physical_bounds:
            lo, hi = spec.physical_bounds[c.name]
            col = values[:, i]
            with np.errstate(invalid="ignore"):
                out = (col < lo) | (col > hi)
            values[out, i] = np.nan
        if np.all(np.isnan(values[:, i])):
            raise WellDataError(f"well {well.well_id!r}: channel {c.name!r} entirely missing after cleaning")

    max_gap_samples = int(np.floor(spec.max_gap_m / well.interval + 1e-9))
    depths = well.depths

    # Fill short interior gaps per channel.
    for i in range(values.shape[1]):
        col = values[:, i]
        for start, stop in _gap_runs(np.isnan(col)):
            if start == 0 or stop == col.size:
                continue  # edge run: no anchor on one side, handled by the split pass
            if stop - start <= max_gap_samples:
                col[start:stop] = np.interp(
                    depths[start:stop], [depths[start - 1], depths[stop]],
                    [col[start - 1], col[stop]],
                )

    # Remaining bad rows (long gaps, edge runs) split the well.
    bad_rows = np.any(np.isnan(values), axis=1)
    segments = []
    for start, stop in _gap_runs(~bad_rows):
        if stop - start == 0:
            continue
        segments.append((start, stop))
    if not segments:
        raise WellDataError(f"well {well.well_id!r}: nothing left after cleaning")

    out = []
    for k, (start, stop) in enumerate(segments):
        wid = well.well_id if len(segments) == 1 else f"{well.well_id}#{k}"
        seg_labels = None if well.labels is None else well.labels[start:stop]
        out.append(
            well.with_values(
                values[start:stop], labels=seg_labels, depths=depths[start:stop], well_id=wid
            )
        )
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def _transformed(curve: LogCurve) -> np.ndarray:
    if curve.transform == "log10":
        return np.log10(curve.values + LOG_EPS)
    return np.asarray(curve.values, dtype=float)


def compute_stats(wells: Sequence[WellLog]) -> dict[str, tuple[float, float]]:
    """Per-channel global (mu, sigma) over the given wells, log transform first.

    Population statistics; compute on the training split only and reuse the
    result for every split.
    """
    pools: dict[str, list[np.ndarray]] = {}
    for w in wells:
        for c in w.curves:
            pools.setdefault(c.name, []).append(_transformed(c))
    stats = {}
    for name, chunks in pools.items():
        x = np.concatenate(chunks)
        x = x[~np.isnan(x)]
        if x.size == 0:
            raise WellDataError(f"channel {name!r}: no finite samples for stats")
        stats[name] = (float(np.mean(x)), float(np.std(x)))
    return stats


def normalize(well: WellLog, stats: dict[str, tuple[float, float]]) -> WellLog:
    """Standardize every channel with training-split statistics.

    log10-flagged channels are mapped ``x' = log10(x + 1e-6)`` first.  A
    zero-sigma channel standardizes to all zeros rather than dividing by 0.
    """
    cols = []
    for c in well.curves:
        if c.name not in stats:
            raise WellDataError(f"stats missing for channel {c.name!r}")
        mu, sigma = stats[c.name]
        if not np.isfinite(mu) or not np.isfinite(sigma):
            raise WellDataError(f"non-finite stats for channel {c.name!r}")
        x = _transformed(c)
        if sigma == 0:
            cols.append(np.zeros_like(x))
        else:
            cols.append((x - mu) / sigma)
    return well.with_values(np.column_stack(cols))


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

def window(well: WellLog, L: int, S: int) -> list[Window]:
    """Slice a well into windows starting at 0, S, 2S, ... while start+L <= T.

    Yields ``floor((T-L)/S) + 1`` windows; test mode is S = L (non-overlap).
    L > T is not an error: an empty list is returned with a warning.
    """
    if L <= 0 or S <= 0:
        raise WellDataError("L and S must be positive")
    T = well.T
    if L > T:
        warnings.warn(f"well {well.well_id!r}: window length {L} exceeds T={T}; no windows")
        return []
    out = []
    for start in range(0, T - L + 1, S):
        out.append(
            Window(
                well_id=well.well_id,
                start_index=start,
                values=well.channels[start:start + L],
                depths=well.depths[start:start + L],
                labels=None if well.labels is None else well.labels[start:start + L],
                channel_names=well.channel_names,
            )
        )
    return out


def window_count(T: int, L: int, S: int) -> int:
    """Closed-form count matching :func:`window` for L <= T."""
    if L > T:
        return 0
    return (T - L) // S + 1


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def synth_wells(spec: SynthSpec, num_wells: int, T: int) -> list[WellLog]:
    """Sample labeled wells from the Markov chain + Gaussian emission model.

    Deterministic for a fixed ``spec.seed``: labels walk the transition
    matrix from a uniformly drawn initial class, channel values are per-class
    Gaussians.  Depths start at 0 with the spec's sampling interval.
    """
    rng = np.random.default_rng(spec.seed)
    C = spec.num_classes
    d = spec.emission_mean.shape[1]
    wells = []
    for i in range(num_wells):
        labels = np.empty(T, dtype=int)
        labels[0] = rng.integers(C)
        for t in range(1, T):
            labels[t] = rng.choice(C, p=spec.transition[labels[t - 1]])
        noise = rng.standard_normal((T, d))
        values = spec.emission_mean[labels] + spec.emission_std[labels] * noise
        depths = np.arange(T) * spec.interval
        curves = tuple(
            LogCurve(name=spec.channel_names[j], values=values[:, j]) for j in range(d)
        )
        wells.append(
            WellLog(
                well_id=f"synth-{i:03d}",
                depths=depths,
                curves=curves,
                labels=labels,
                interval=spec.interval,
            )
        )
    return wells


def make_synth_spec(num_classes: int, num_channels: int = 3, stay_prob: float = 0.9,
                    emission_sep: float = 1.5, emission_std: float = 0.5,
                    interval: float = 0.5, seed: int = 0) -> SynthSpec:
    """Convenience constructor: sticky-diagonal chain, spread class means.

    Class means are staggered across channels so no single channel separates
    all classes on its own.
    """
    C = num_classes
    trans = np.full((C, C), (1.0 - stay_prob) / (C - 1)) if C > 1 else np.ones((1, 1))
    if C > 1:
        np.fill_diagonal(trans, stay_prob)
    mean = np.zeros((C, num_channels))
    for c in range(C):
        for j in range(num_channels):
            mean[c, j] = emission_sep * ((c + j) % C)
    std = np.full((C, num_channels), emission_std)
    return SynthSpec(
        num_classes=C, transition=trans, emission_mean=mean, emission_std=std,
        interval=interval, seed=seed,
    )


def dataset_fingerprint(windows: Sequence[Window]) -> str:
    """Stable short hash of a window collection (values + labels + provenance)."""
    h = hashlib.sha256()
    for w in windows:
        h.update(w.well_id.encode())
        h.update(int(w.start_index).to_bytes(8, "little", signed=True))
        h.update(np.ascontiguousarray(w.values, dtype=np.float64).tobytes())
        if w.labels is not None:
            h.update(np.ascontiguousarray(w.labels, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]
