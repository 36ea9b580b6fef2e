"""Perception tools: labeled-case retrieval and trend narration.

Two front-line signal extractors feed the downstream reasoning stage:

* a retrieval index over labeled training windows, queried by blended
  similarity under several distance metrics, and
* a rule-based narrator that turns one channel of a window into a short
  structured description (monotone segments, turning points, rendered text).
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .welldata import WellDataError, Window

KNOWN_METRICS = ("euclidean", "manhattan", "cosine")


class PerceptionError(ValueError):
    """Raised for malformed indexes or invalid retrieval arguments."""


# ---------------------------------------------------------------------------
# retrieval index
# ---------------------------------------------------------------------------

@dataclass
class IndexedCase:
    """One labeled window stored for retrieval."""

    well_id: str
    start_index: int
    vector: np.ndarray        # flattened L x d values, row-major
    labels: np.ndarray        # length-L int labels


@dataclass
class RetrievalIndex:
    """Flat store of labeled windows plus the metric blend used to query it."""

    window_len: int
    num_channels: int
    channel_names: tuple[str, ...]
    metric_weights: dict[str, float]
    cases: list[IndexedCase] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cases)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.window_len},{self.num_channels}".encode())
        h.update(",".join(self.channel_names).encode())
        for m in sorted(self.metric_weights):
            h.update(f"{m}={self.metric_weights[m]:.12g}".encode())
        for c in self.cases:
            h.update(c.well_id.encode())
            h.update(int(c.start_index).to_bytes(8, "little", signed=True))
            h.update(np.ascontiguousarray(c.vector, dtype=np.float64).tobytes())
            h.update(np.ascontiguousarray(c.labels, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def build_index(windows: Sequence[Window],
                metric_weights: Optional[dict[str, float]] = None) -> RetrievalIndex:
    """Index labeled windows for later similarity lookup.

    Every window must carry labels and share one (L, d) shape.  Metric
    weights are normalized to sum to 1; default is an even blend of the
    three known metrics.
    """
    windows = list(windows)
    if not windows:
        raise PerceptionError("cannot index zero windows")
    if metric_weights is None:
        metric_weights = {m: 1.0 for m in KNOWN_METRICS}
    for m in metric_weights:
        if m not in KNOWN_METRICS:
            raise PerceptionError(f"unknown metric {m!r}; known: {KNOWN_METRICS}")
    total = sum(metric_weights.values())
    if total <= 0:
        raise PerceptionError("metric weights must have positive sum")
    metric_weights = {m: w / total for m, w in metric_weights.items() if w > 0}

    L, d = windows[0].values.shape
    names = windows[0].channel_names
    cases = []
    for w in windows:
        if w.values.shape != (L, d):
            raise PerceptionError(f"window shape {w.values.shape} != ({L}, {d})")
        if w.labels is None:
            raise PerceptionError(f"window {w.well_id}@{w.start_index} has no labels")
        cases.append(
            IndexedCase(
                well_id=w.well_id,
                start_index=int(w.start_index),
                vector=np.asarray(w.values, dtype=float).reshape(-1).copy(),
                labels=np.asarray(w.labels, dtype=int).copy(),
            )
        )
    return RetrievalIndex(
        window_len=L, num_channels=d, channel_names=tuple(names),
        metric_weights=metric_weights, cases=cases,
    )


def _metric_distance(metric: str, query: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Distance from query to every row of mat under one metric."""
    if metric == "euclidean":
        return np.sqrt(np.sum((mat - query) ** 2, axis=1))
    if metric == "manhattan":
        return np.sum(np.abs(mat - query), axis=1)
    if metric == "cosine":
        qn = np.linalg.norm(query)
        rn = np.linalg.norm(mat, axis=1)
        denom = qn * rn
        cos = np.zeros(mat.shape[0])
        ok = denom > 0
        cos[ok] = (mat[ok] @ query) / denom[ok]
        # a zero-norm vector has no direction: call it maximally dissimilar
        # unless the query itself is zero too
        if qn == 0:
            cos[rn == 0] = 1.0
        return 1.0 - cos
    raise PerceptionError(f"unknown metric {metric!r}")


@dataclass
class ScoredCase:
    """A retrieved neighbor with its blended similarity and vote weight."""

    well_id: str
    start_index: int
    labels: np.ndarray
    similarity: float
    weight: float


def retrieve(index: RetrievalIndex, query: Window, k: int,
             exclude_same_well: bool = True) -> list[ScoredCase]:
    """Top-k labeled cases by blended min-max-scaled similarity.

    Per metric, distances over the candidate pool are min-max scaled to
    [0, 1] and flipped into similarities; the blend uses the index's metric
    weights.  Vote weights are the selected cases' similarities normalized
    to sum to 1 (uniform if all similarities are zero).  Ties break on
    (well id, start index) so retrieval is order-independent.
    """
    if k <= 0:
        raise PerceptionError("k must be positive")
    if query.values.shape != (index.window_len, index.num_channels):
        raise PerceptionError(
            f"query shape {query.values.shape} != "
            f"({index.window_len}, {index.num_channels})"
        )
    pool = index.cases
    if exclude_same_well:
        pool = [c for c in pool if c.well_id != query.well_id]
    if not pool:
        return []
    if k > len(pool):
        warnings.warn(f"k={k} exceeds candidate pool of {len(pool)}; returning all")
        k = len(pool)

    qv = np.asarray(query.values, dtype=float).reshape(-1)
    mat = np.stack([c.vector for c in pool])
    combined = np.zeros(len(pool))
    for metric, w in index.metric_weights.items():
        dist = _metric_distance(metric, qv, mat)
        lo, hi = dist.min(), dist.max()
        if hi > lo:
            scaled = (dist - lo) / (hi - lo)
        else:
            scaled = np.zeros_like(dist)
        combined += w * (1.0 - scaled)

    order = sorted(
        range(len(pool)),
        key=lambda i: (-combined[i], pool[i].well_id, pool[i].start_index),
    )
    chosen = order[:k]
    sims = combined[chosen]
    total = sims.sum()
    if total > 0:
        weights = sims / total
    else:
        weights = np.full(len(chosen), 1.0 / len(chosen))
    return [
        ScoredCase(
            well_id=pool[i].well_id,
            start_index=pool[i].start_index,
            labels=pool[i].labels.copy(),
            similarity=float(combined[i]),
            weight=float(wt),
        )
        for i, wt in zip(chosen, weights)
    ]


# ---------------------------------------------------------------------------
# index persistence (versioned, line-based, text)
# ---------------------------------------------------------------------------

INDEX_MAGIC = "lithoflow-index"
INDEX_VERSION = 1


def save_index(index: RetrievalIndex, path) -> None:
    """Write the index as versioned text with a trailing content fingerprint."""
    lines = [f"{INDEX_MAGIC} v{INDEX_VERSION}"]
    lines.append(f"window_len\t{index.window_len}")
    lines.append(f"num_channels\t{index.num_channels}")
    lines.append("channels\t" + ",".join(index.channel_names))
    lines.append(
        "metrics\t" + ",".join(
            f"{m}:{index.metric_weights[m]:.12g}" for m in sorted(index.metric_weights)
        )
    )
    lines.append(f"num_cases\t{len(index.cases)}")
    for c in index.cases:
        # %.17g keeps the float64 bytes exact so the fingerprint survives
        # a save/load cycle.
        vals = ",".join(f"{v:.17g}" for v in c.vector)
        labs = ",".join(str(int(x)) for x in c.labels)
        lines.append(f"case\t{c.well_id}\t{c.start_index}\t{labs}\t{vals}")
    lines.append(f"fingerprint\t{index.fingerprint()}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_index(path) -> RetrievalIndex:
    """Read a saved index; refuses version or fingerprint mismatches."""
    text = Path(path).read_text(encoding="utf-8").rstrip("\n")
    lines = text.split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != INDEX_MAGIC:
        raise PerceptionError(f"{path}: not an index file")
    if head[1] != f"v{INDEX_VERSION}":
        raise PerceptionError(f"{path}: unsupported index version {head[1]}")
    fields = {}
    cases = []
    recorded_fp = None
    for line in lines[1:]:
        key, _, rest = line.partition("\t")
        if key == "case":
            wid, start, labs, vals = rest.split("\t")
            cases.append(
                IndexedCase(
                    well_id=wid,
                    start_index=int(start),
                    vector=np.array([float(x) for x in vals.split(",")]),
                    labels=np.array([int(x) for x in labs.split(",")]),
                )
            )
        elif key == "fingerprint":
            recorded_fp = rest
        else:
            fields[key] = rest
    weights = {}
    for item in fields["metrics"].split(","):
        m, _, w = item.partition(":")
        weights[m] = float(w)
    index = RetrievalIndex(
        window_len=int(fields["window_len"]),
        num_channels=int(fields["num_channels"]),
        channel_names=tuple(fields["channels"].split(",")),
        metric_weights=weights,
        cases=cases,
    )
    if len(cases) != int(fields["num_cases"]):
        raise PerceptionError(f"{path}: case count mismatch")
    if recorded_fp is None or index.fingerprint() != recorded_fp:
        raise PerceptionError(f"{path}: fingerprint mismatch (corrupt or edited)")
    return index


# ---------------------------------------------------------------------------
# trend narration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrendSegment:
    """Half-open sample range [start, end) with one monotone direction."""

    start: int
    end: int
    direction: str    # rising | falling | stable
    magnitude: float  # signed value change across the segment


@dataclass(frozen=True)
class TrendSummary:
    """Structured description of one channel over one window."""

    channel: str
    segments: tuple[TrendSegment, ...]
    turning_points: tuple[int, ...]  # sample indices where rising meets falling
    text: str


def _directions(values: np.ndarray, slope_tol: float) -> list[str]:
    diffs = np.diff(values)
    out = []
    for dlt in diffs:
        if dlt > slope_tol:
            out.append("rising")
        elif dlt < -slope_tol:
            out.append("falling")
        else:
            out.append("stable")
    return out


def narrate(win: Window, channel: str, slope_tol: float = 0.0) -> TrendSummary:
    """Describe one channel as monotone segments plus turning points.

    Steps (first differences) are classified rising / falling / stable
    against ``slope_tol``; maximal same-direction runs become segments that
    partition [0, L).  A turning point is the boundary sample between a
    rising segment and a falling one (either order).  The rendered text is a
    fixed template over the structured fields, so equal inputs give equal
    narration.
    """
    if slope_tol < 0:
        raise PerceptionError("slope_tol must be nonnegative")
    if channel not in win.channel_names:
        raise PerceptionError(f"no channel {channel!r} in window (has {win.channel_names})")
    col = win.values[:, win.channel_names.index(channel)]
    if np.any(np.isnan(col)):
        raise WellDataError("cannot narrate a window with missing samples")
    L = col.size

    if L == 1:
        segments = (TrendSegment(0, 1, "stable", 0.0),)
        dirs = []
    else:
        dirs = _directions(col, slope_tol)
        runs = []
        run_start = 0
        for t in range(1, len(dirs)):
            if dirs[t] != dirs[run_start]:
                runs.append((run_start, t))
                run_start = t
        runs.append((run_start, len(dirs)))
        segments = []
        for ri, (a, b) in enumerate(runs):
            end = L if ri == len(runs) - 1 else b
            anchor = min(end, L - 1)
            segments.append(
                TrendSegment(a, end, dirs[a], float(col[anchor] - col[a]))
            )
        segments = tuple(segments)

    turning = tuple(
        segments[i].end
        for i in range(len(segments) - 1)
        if {segments[i].direction, segments[i + 1].direction} == {"rising", "falling"}
    )

    parts = []
    for seg in segments:
        lo = win.depths[seg.start]
        hi = win.depths[min(seg.end, L - 1)]
        parts.append(
            f"{seg.direction} from {lo:.1f}m to {hi:.1f}m (change {seg.magnitude:+.3g})"
        )
    text = (
        f"Channel {channel} over {win.depths[0]:.1f}m-{win.depths[-1]:.1f}m: "
        + "; ".join(parts) + "."
    )
    if turning:
        tp = ", ".join(f"{win.depths[t]:.1f}m" for t in turning)
        text += f" Turning points at {tp}."
    return TrendSummary(channel=channel, segments=segments, turning_points=turning, text=text)
