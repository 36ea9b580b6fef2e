"""Cross-source conflict scanning and stratigraphic transition checks.

Three sources can propose a label at each window position: the neighbor
vote, the neural predictor, and the reasoning engine.  The conflict scanner
counts agreeing pairs and the size of the largest agreeing bloc.  The
transition model captures how often class a is followed by class b in
labeled training wells (add-lambda smoothed) and flags predicted sequences
containing transitions rarer than a plausibility threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class AnalysisError(ValueError):
    """Raised for malformed inputs to the conflict or transition tools."""


# ---------------------------------------------------------------------------
# conflict scanning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PositionConflict:
    """Agreement structure of the proposals at one position.

    ``agreement_count`` is the number of source pairs proposing the same
    label; ``agreement_level`` is the size of the largest bloc proposing one
    label.  With three sources the count lives in {0, 1, 3} and determines
    the level (3 <-> 3, 1 <-> 2, 0 <-> 1); the value 2 is unreachable.
    """

    labels: dict[str, int]
    agreement_count: int
    agreement_level: int
    majority_label: Optional[int]
    conflict: bool


@dataclass(frozen=True)
class ConflictScan:
    """Per-position conflict structure for one window."""

    positions: tuple[PositionConflict, ...]

    @property
    def agreement_counts(self) -> np.ndarray:
        return np.array([p.agreement_count for p in self.positions])

    @property
    def agreement_levels(self) -> np.ndarray:
        return np.array([p.agreement_level for p in self.positions])

    @property
    def conflict_mask(self) -> np.ndarray:
        return np.array([p.conflict for p in self.positions])


def scan_position(labels: dict[str, int]) -> PositionConflict:
    """Agreement structure of one position's proposals.

    The count is the number of unordered source pairs that agree, which is
    ``sum_c C(n_c, 2)`` over per-label multiplicities ``n_c``; the level is
    ``max_c n_c``.  The majority label is the unique label reaching the
    level when the level is at least 2 (with up to three sources a level-2
    bloc is always unique).  A position is in conflict when not all present
    sources agree.
    """
    if not labels:
        raise AnalysisError("at least one source label required")
    values = list(labels.values())
    counts: dict[int, int] = {}
    for v in values:
        counts[int(v)] = counts.get(int(v), 0) + 1
    level = max(counts.values())
    count = sum(comb(n, 2) for n in counts.values())
    majority = None
    if level >= 2:
        winners = [c for c, n in counts.items() if n == level]
        if len(winners) == 1:
            majority = winners[0]
    return PositionConflict(
        labels={k: int(v) for k, v in labels.items()},
        agreement_count=count,
        agreement_level=level,
        majority_label=majority,
        conflict=level < len(values),
    )


def scan_conflict(source_labels: dict[str, np.ndarray]) -> ConflictScan:
    """Scan every position of a window across the available sources.

    ``source_labels`` maps source name (for example ``nbr``, ``nn``,
    ``llm``) to a length-L label vector; all vectors must share L.
    """
    if not source_labels:
        raise AnalysisError("at least one source required")
    arrays = {k: np.asarray(v, dtype=int) for k, v in source_labels.items()}
    lengths = {a.size for a in arrays.values()}
    if len(lengths) != 1:
        raise AnalysisError(f"sources disagree on window length: {sorted(lengths)}")
    (L,) = lengths
    positions = tuple(
        scan_position({k: arrays[k][t] for k in arrays}) for t in range(L)
    )
    return ConflictScan(positions=positions)


# ---------------------------------------------------------------------------
# transition model
# ---------------------------------------------------------------------------

@dataclass
class TransitionModel:
    """Add-lambda smoothed first-order class transition table.

    ``probs[a, b] = (counts[a, b] + smoothing) /
    (sum_b' counts[a, b'] + smoothing * num_classes)``.  A class never seen
    as a predecessor therefore gets an exactly uniform outgoing row.
    """

    num_classes: int
    smoothing: float
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.shape != (self.num_classes, self.num_classes):
            raise AnalysisError("counts must be |C| x |C|")
        if np.any(self.counts < 0):
            raise AnalysisError("counts must be nonnegative")
        if self.smoothing <= 0:
            raise AnalysisError("smoothing must be positive")

    @property
    def probs(self) -> np.ndarray:
        denom = self.counts.sum(axis=1, keepdims=True) + self.smoothing * self.num_classes
        return (self.counts + self.smoothing) / denom

    def prob(self, a: int, b: int) -> float:
        return float(self.probs[a, b])


def fit_transition(sequences: Sequence[np.ndarray], num_classes: int,
                   smoothing: float = 1.0) -> TransitionModel:
    """Count within-sequence transitions and smooth.

    Each element of ``sequences`` is one well's label vector; consecutive
    pairs are counted inside a sequence only, so the last label of one well
    never chains into the first label of the next.
    """
    counts = np.zeros((num_classes, num_classes))
    for seq in sequences:
        seq = np.asarray(seq, dtype=int)
        if seq.size and (seq.min() < 0 or seq.max() >= num_classes):
            raise AnalysisError(f"label outside [0, {num_classes}) in sequence")
        for a, b in zip(seq[:-1], seq[1:]):
            counts[a, b] += 1
    return TransitionModel(num_classes=num_classes, smoothing=smoothing, counts=counts)


@dataclass(frozen=True)
class TransitionFlag:
    """One implausible step inside a predicted sequence."""

    position: int   # index of the arrival sample
    prev_label: int
    label: int
    prob: float


@dataclass(frozen=True)
class ValidationReport:
    flags: tuple[TransitionFlag, ...]

    @property
    def ok(self) -> bool:
        return not self.flags

    def flagged_positions(self) -> np.ndarray:
        return np.array([f.position for f in self.flags], dtype=int)


def validate_sequence(labels: np.ndarray, model: TransitionModel,
                      threshold: float = 0.05) -> ValidationReport:
    """Flag steps whose transition probability falls below ``threshold``."""
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise AnalysisError(f"label outside [0, {model.num_classes})")
    probs = model.probs
    flags = []
    for t in range(1, labels.size):
        p = probs[labels[t - 1], labels[t]]
        if p < threshold:
            flags.append(
                TransitionFlag(position=t, prev_label=int(labels[t - 1]),
                               label=int(labels[t]), prob=float(p))
            )
    return ValidationReport(flags=tuple(flags))


# ---------------------------------------------------------------------------
# persistence (plain text; probabilities derive from stored counts)
# ---------------------------------------------------------------------------

TRANSITIONS_MAGIC = "lithoflow-transitions"
TRANSITIONS_VERSION = 1


def save_transition(model: TransitionModel, path) -> None:
    lines = [f"{TRANSITIONS_MAGIC} v{TRANSITIONS_VERSION}"]
    lines.append(f"num_classes\t{model.num_classes}")
    lines.append(f"smoothing\t{model.smoothing:.12g}")
    for row in model.counts:
        lines.append(" ".join(f"{v:.12g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_transition(path) -> TransitionModel:
    lines = Path(path).read_text(encoding="utf-8").rstrip("\n").split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != TRANSITIONS_MAGIC:
        raise AnalysisError(f"{path}: not a transition model file")
    if head[1] != f"v{TRANSITIONS_VERSION}":
        raise AnalysisError(f"{path}: unsupported version {head[1]}")
    fields = {}
    rows = []
    for line in lines[1:]:
        if "\t" in line:
            k, _, v = line.partition("\t")
            fields[k] = v
        elif line.strip():
            rows.append([float(x) for x in line.split()])
    C = int(fields["num_classes"])
    if len(rows) != C or any(len(r) != C for r in rows):
        raise AnalysisError(f"{path}: counts matrix is not {C}x{C}")
    return TransitionModel(
        num_classes=C,
        smoothing=float(fields["smoothing"]),
        counts=np.array(rows),
    )
