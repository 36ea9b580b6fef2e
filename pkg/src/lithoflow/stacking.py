"""Fold management, base predictors, out-of-fold stacking, and persistence.

The neural probability source for the workflow is an ordinary supervised
predictor over windows.  To train a second-stage (master) model without
leaking labels, base predictions are generated out-of-fold: the model that
predicts a window was trained with that window's fold held out.  Every
out-of-fold record carries the producing model's fingerprint so the
no-leakage property is checkable after the fact, not just hoped for.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .welldata import Window


class StackingError(ValueError):
    """Raised for fold, training, or provenance contract violations."""


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

def kfold_split(n_items: int, k: int, seed: int) -> list[np.ndarray]:
    """Disjoint covering folds with sizes differing by at most one.

    Items are shuffled with the seed and dealt round-robin, so fold
    membership is reproducible and independent of input ordering quirks.
    """
    if k < 2:
        raise StackingError("k must be at least 2")
    if k > n_items:
        raise StackingError(f"k={k} exceeds {n_items} items")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_items)
    return [np.sort(order[i::k]) for i in range(k)]


def window_key(win: Window) -> tuple[str, int]:
    return (win.well_id, int(win.start_index))


# ---------------------------------------------------------------------------
# base predictors
# ---------------------------------------------------------------------------

def _require_labeled(windows: Sequence[Window]):
    if not windows:
        raise StackingError("cannot fit on zero windows")
    shape = windows[0].values.shape
    for w in windows:
        if w.labels is None:
            raise StackingError(f"window {w.well_id}@{w.start_index} has no labels")
        if w.values.shape != shape:
            raise StackingError("training windows disagree on shape")


def _fingerprint(kind: str, params: dict, keys: Sequence[tuple[str, int]]) -> str:
    h = hashlib.sha256()
    h.update(kind.encode())
    h.update(json.dumps(params, sort_keys=True).encode())
    for wid, start in sorted(keys):
        h.update(f"{wid}@{start};".encode())
    return h.hexdigest()[:16]


class KnnPredictor:
    """Per-position vote among the k nearest training windows.

    Distance is euclidean on row-major flattened window values.  The
    probability of class c at position t is the fraction of the k nearest
    training windows whose label at t is c.  With k=1 every training window
    is its own nearest neighbor, so in-fold predictions are trivially
    perfect; that makes leakage visible rather than subtle.
    """

    kind = "knn"

    def __init__(self, num_classes: int, k: int = 5):
        if k < 1:
            raise StackingError("k must be at least 1")
        self.num_classes = num_classes
        self.k = k
        self._vectors: Optional[np.ndarray] = None
        self._labels: Optional[np.ndarray] = None
        self.training_keys: frozenset = frozenset()

    def fit(self, windows: Sequence[Window]) -> "KnnPredictor":
        _require_labeled(windows)
        if self.k > len(windows):
            raise StackingError(f"k={self.k} exceeds {len(windows)} training windows")
        self._vectors = np.stack([w.flat() for w in windows])
        self._labels = np.stack([w.labels for w in windows])
        self.training_keys = frozenset(window_key(w) for w in windows)
        return self

    def predict_proba(self, win: Window) -> np.ndarray:
        if self._vectors is None:
            raise StackingError("predictor is not fitted")
        dist = np.sqrt(np.sum((self._vectors - win.flat()) ** 2, axis=1))
        # stable sort keeps ties deterministic under training order
        nearest = np.argsort(dist, kind="stable")[: self.k]
        L = self._labels.shape[1]
        probs = np.zeros((L, self.num_classes))
        for j in nearest:
            for t in range(L):
                probs[t, self._labels[j, t]] += 1.0
        return probs / self.k

    def params(self) -> dict:
        return {"num_classes": self.num_classes, "k": self.k}

    def fingerprint(self) -> str:
        return _fingerprint(self.kind, self.params(), sorted(self.training_keys))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class LogisticPredictor:
    """Per-position softmax regression on window features.

    Features are the flattened window values plus per-channel mean and
    standard deviation.  One weight matrix maps the (bias-augmented)
    feature vector to L x C logits, trained full-batch by gradient descent
    on the summed cross-entropy; the run is deterministic because the init
    is zeros and there is no minibatching.
    """

    kind = "logistic"

    def __init__(self, num_classes: int, l2: float = 1e-3, lr: float = 0.5,
                 epochs: int = 200):
        self.num_classes = num_classes
        self.l2 = l2
        self.lr = lr
        self.epochs = epochs
        self.weights: Optional[np.ndarray] = None  # (n_feat + 1, L * C)
        self.window_len = 0
        self.training_keys: frozenset = frozenset()

    @staticmethod
    def features(win: Window) -> np.ndarray:
        vals = win.values
        return np.concatenate([vals.reshape(-1), vals.mean(axis=0), vals.std(axis=0)])

    def fit(self, windows: Sequence[Window]) -> "LogisticPredictor":
        _require_labeled(windows)
        L = windows[0].length
        C = self.num_classes
        X = np.stack([self.features(w) for w in windows])
        X = np.column_stack([X, np.ones(len(windows))])
        Y = np.stack([w.labels for w in windows])
        n, n_feat = X.shape
        W = np.zeros((n_feat, L * C))
        onehot = np.zeros((n, L, C))
        for i in range(n):
            onehot[i, np.arange(L), Y[i]] = 1.0
        for _ in range(self.epochs):
            logits = (X @ W).reshape(n, L, C)
            probs = _softmax(logits)
            dlogits = (probs - onehot).reshape(n, L * C) / n
            grad = X.T @ dlogits
            grad[:-1] += self.l2 * W[:-1]  # bias row is not penalized
            W -= self.lr * grad
        self.weights = W
        self.window_len = L
        self.training_keys = frozenset(window_key(w) for w in windows)
        return self

    def predict_proba(self, win: Window) -> np.ndarray:
        if self.weights is None:
            raise StackingError("predictor is not fitted")
        x = np.concatenate([self.features(win), [1.0]])
        logits = (x @ self.weights).reshape(self.window_len, self.num_classes)
        return _softmax(logits)

    def params(self) -> dict:
        return {"num_classes": self.num_classes, "l2": self.l2,
                "lr": self.lr, "epochs": self.epochs}

    def fingerprint(self) -> str:
        return _fingerprint(self.kind, self.params(), sorted(self.training_keys))


PREDICTOR_KINDS = {"knn": KnnPredictor, "logistic": LogisticPredictor}


def make_predictor(kind: str, num_classes: int, **kwargs):
    if kind not in PREDICTOR_KINDS:
        raise StackingError(f"unknown predictor kind {kind!r}; known: {sorted(PREDICTOR_KINDS)}")
    return PREDICTOR_KINDS[kind](num_classes=num_classes, **kwargs)


# ---------------------------------------------------------------------------
# out-of-fold generation
# ---------------------------------------------------------------------------

@dataclass
class OofRecord:
    """One window's out-of-fold probabilities plus producing-model identity."""

    well_id: str
    start_index: int
    fold: int
    fingerprint: str
    probs: np.ndarray  # L x C


@dataclass
class OofResult:
    records: list[OofRecord]
    # fingerprint -> training keys of the model that carries it, kept so the
    # no-leakage property can be re-audited long after the models are gone
    training_keys: dict[str, frozenset] = field(default_factory=dict)

    def probs_for(self, key: tuple[str, int]) -> np.ndarray:
        for r in self.records:
            if (r.well_id, r.start_index) == key:
                return r.probs
        raise KeyError(key)


def generate_oof(windows: Sequence[Window], num_folds: int, seed: int,
                 factory) -> OofResult:
    """Out-of-fold probabilities for every window.

    ``factory()`` must return a fresh unfitted predictor.  For each fold, a
    model is fitted on the complement and applied to the fold's windows, so
    no window is ever scored by a model that saw its labels.
    """
    windows = list(windows)
    folds = kfold_split(len(windows), num_folds, seed)
    records: list[OofRecord] = [None] * len(windows)  # type: ignore[list-item]
    training_keys = {}
    for fold_id, fold in enumerate(folds):
        fold_set = set(fold.tolist())
        train = [w for i, w in enumerate(windows) if i not in fold_set]
        model = factory().fit(train)
        fp = model.fingerprint()
        training_keys[fp] = frozenset(model.training_keys)
        for i in fold:
            win = windows[i]
            if window_key(win) in model.training_keys:
                raise StackingError(
                    f"window {window_key(win)} found in its own scoring model"
                )
            records[i] = OofRecord(
                well_id=win.well_id,
                start_index=int(win.start_index),
                fold=fold_id,
                fingerprint=fp,
                probs=model.predict_proba(win),
            )
    return OofResult(records=records, training_keys=training_keys)


def verify_oof_provenance(result: OofResult) -> list[str]:
    """Audit that no record was produced by a model trained on its window.

    Returns human-readable violation strings; an empty list means the
    stacking inputs are leak-free.
    """
    violations = []
    for r in result.records:
        keys = result.training_keys.get(r.fingerprint)
        if keys is None:
            violations.append(
                f"{r.well_id}@{r.start_index}: unknown model fingerprint {r.fingerprint}"
            )
        elif (r.well_id, r.start_index) in keys:
            violations.append(
                f"{r.well_id}@{r.start_index}: scored by a model trained on it"
            )
    return violations


# ---------------------------------------------------------------------------
# master (second-stage) model
# ---------------------------------------------------------------------------

class MasterModel:
    """Position-shared softmax regression over stacked base probabilities.

    The feature vector at each position is the concatenation of every base
    predictor's class distribution there; one shared weight matrix scores
    all positions, so the master learns how much to trust each base per
    class rather than memorizing depth positions.
    """

    kind = "master"

    def __init__(self, num_classes: int, num_bases: int, l2: float = 1e-3,
                 lr: float = 0.5, epochs: int = 300):
        self.num_classes = num_classes
        self.num_bases = num_bases
        self.l2 = l2
        self.lr = lr
        self.epochs = epochs
        self.weights: Optional[np.ndarray] = None  # (num_bases*C + 1, C)
        self.training_keys: frozenset = frozenset()

    def fit(self, base_probs: Sequence[np.ndarray], labels: Sequence[np.ndarray],
            keys: Sequence[tuple[str, int]] = ()) -> "MasterModel":
        """``base_probs[b]`` is (n_windows, L, C); labels is (n_windows, L)."""
        if len(base_probs) != self.num_bases:
            raise StackingError(f"expected {self.num_bases} base prob stacks")
        stacks = [np.asarray(p, dtype=float) for p in base_probs]
        y = np.asarray(labels, dtype=int)
        n, L = y.shape
        C = self.num_classes
        X = np.concatenate(stacks, axis=2).reshape(n * L, self.num_bases * C)
        X = np.column_stack([X, np.ones(n * L)])
        t = y.reshape(-1)
        onehot = np.zeros((n * L, C))
        onehot[np.arange(n * L), t] = 1.0
        W = np.zeros((X.shape[1], C))
        for _ in range(self.epochs):
            probs = _softmax(X @ W)
            grad = X.T @ (probs - onehot) / (n * L)
            grad[:-1] += self.l2 * W[:-1]
            W -= self.lr * grad
        self.weights = W
        self.training_keys = frozenset(keys)
        return self

    def predict_proba(self, base_probs: Sequence[np.ndarray]) -> np.ndarray:
        """``base_probs[b]`` is (L, C) for one window; returns (L, C)."""
        if self.weights is None:
            raise StackingError("master model is not fitted")
        X = np.concatenate([np.asarray(p) for p in base_probs], axis=1)
        X = np.column_stack([X, np.ones(X.shape[0])])
        return _softmax(X @ self.weights)

    def params(self) -> dict:
        return {"num_classes": self.num_classes, "num_bases": self.num_bases,
                "l2": self.l2, "lr": self.lr, "epochs": self.epochs}

    def fingerprint(self) -> str:
        return _fingerprint(self.kind, self.params(), sorted(self.training_keys))


class StackedPredictor:
    """Adapter giving a master model the plain window-predictor interface.

    Applies every base predictor to the window and feeds their probability
    profiles to the master, so callers that expect ``predict_proba(window)``
    need not know stacking is involved.
    """

    kind = "stacked"

    def __init__(self, bases: Sequence, master: MasterModel):
        if len(bases) != master.num_bases:
            raise StackingError(
                f"master expects {master.num_bases} bases, got {len(bases)}"
            )
        self.bases = list(bases)
        self.master = master
        self.num_classes = master.num_classes

    def predict_proba(self, win: Window) -> np.ndarray:
        return self.master.predict_proba([b.predict_proba(win) for b in self.bases])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for b in self.bases:
            h.update(b.fingerprint().encode())
        h.update(self.master.fingerprint().encode())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# persistence: plain-text predictor files and the out-of-fold CSV
# ---------------------------------------------------------------------------

PREDICTOR_MAGIC = "lithoflow-predictor"
PREDICTOR_VERSION = 1


def _format_array(name: str, arr: np.ndarray) -> list[str]:
    arr = np.asarray(arr)
    shape = "x".join(str(s) for s in arr.shape)
    lines = [f"array\t{name}\t{shape}\t{arr.dtype.kind}"]
    flat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
    for row in flat:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return lines


def _parse_arrays(lines: list[str]) -> dict[str, np.ndarray]:
    arrays = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split("\t")
        if parts[0] != "array":
            raise StackingError(f"expected array header, got {lines[i]!r}")
        name, shape_s, kind = parts[1], parts[2], parts[3]
        shape = tuple(int(s) for s in shape_s.split("x"))
        n_rows = shape[0] if len(shape) > 1 else 1
        rows = []
        for j in range(n_rows):
            rows.append([float(x) for x in lines[i + 1 + j].split()])
        arr = np.array(rows)
        arr = arr.reshape(shape)
        if kind == "i":
            arr = arr.astype(int)
        arrays[name] = arr
        i += 1 + n_rows
    return arrays


def _simple_lines(pred) -> list[str]:
    """Body lines for one non-composite predictor."""
    lines = [f"kind\t{pred.kind}"]
    lines.append("params\t" + json.dumps(pred.params(), sort_keys=True))
    lines.append("training_keys\t" + json.dumps(
        sorted([list(k) for k in pred.training_keys])))
    if pred.kind == "knn":
        if pred._vectors is None:
            raise StackingError("cannot save an unfitted predictor")
        lines += _format_array("vectors", pred._vectors)
        lines += _format_array("labels", pred._labels)
    elif pred.kind in ("logistic", "master"):
        if pred.weights is None:
            raise StackingError("cannot save an unfitted predictor")
        lines += _format_array("weights", pred.weights)
        if pred.kind == "logistic":
            lines.append(f"window_len\t{pred.window_len}")
    else:
        raise StackingError(f"unknown predictor kind {pred.kind!r}")
    return lines


def _simple_from_lines(lines: list[str]):
    fields = {}
    array_lines = []
    i = 0
    while i < len(lines):
        if lines[i].startswith("array\t"):
            break
        k, _, v = lines[i].partition("\t")
        fields[k] = v
        i += 1
    j = i
    while j < len(lines):
        if "\t" in lines[j] and not lines[j].startswith("array\t"):
            k, _, v = lines[j].partition("\t")
            fields[k] = v
            j += 1
            continue
        array_lines.append(lines[j])
        j += 1
    arrays = _parse_arrays(array_lines) if array_lines else {}
    kind = fields["kind"]
    params = json.loads(fields["params"])
    keys = frozenset(tuple(k) for k in json.loads(fields["training_keys"]))
    if kind == "knn":
        pred = KnnPredictor(**params)
        pred._vectors = arrays["vectors"]
        pred._labels = arrays["labels"].astype(int)
    elif kind == "logistic":
        pred = LogisticPredictor(**params)
        pred.weights = arrays["weights"]
        pred.window_len = int(fields["window_len"])
    elif kind == "master":
        pred = MasterModel(**params)
        pred.weights = arrays["weights"]
    else:
        raise StackingError(f"unknown predictor kind {kind!r}")
    pred.training_keys = keys
    return pred


def save_predictor(pred, path) -> None:
    """Serialize any predictor kind, including a stacked composite.

    Composites embed each component between begin/end markers; the component
    bodies use the same layout as standalone files, so the format stays
    greppable plain text throughout.
    """
    lines = [f"{PREDICTOR_MAGIC} v{PREDICTOR_VERSION}"]
    if pred.kind == "stacked":
        lines.append("kind\tstacked")
        lines.append(f"num_bases\t{len(pred.bases)}")
        for i, base in enumerate(pred.bases):
            lines.append(f"begin\tbase-{i}")
            lines += _simple_lines(base)
            lines.append(f"end\tbase-{i}")
        lines.append("begin\tmaster")
        lines += _simple_lines(pred.master)
        lines.append("end\tmaster")
    else:
        lines += _simple_lines(pred)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_predictor(path):
    text = Path(path).read_text(encoding="utf-8").rstrip("\n")
    lines = text.split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != PREDICTOR_MAGIC:
        raise StackingError(f"{path}: not a predictor file")
    if head[1] != f"v{PREDICTOR_VERSION}":
        raise StackingError(f"{path}: unsupported version {head[1]}")
    body = lines[1:]
    if body and body[0] == "kind\tstacked":
        blocks: dict[str, list[str]] = {}
        current = None
        for line in body[1:]:
            tag, _, name = line.partition("\t")
            if tag == "begin":
                current = name
                blocks[name] = []
            elif tag == "end":
                if current != name:
                    raise StackingError(f"{path}: mismatched block {name!r}")
                current = None
            elif current is not None:
                blocks[current].append(line)
        if "master" not in blocks:
            raise StackingError(f"{path}: stacked file lacks a master block")
        master = _simple_from_lines(blocks.pop("master"))
        order = sorted(blocks, key=lambda name: int(name.split("-")[-1]))
        bases = [_simple_from_lines(blocks[name]) for name in order]
        return StackedPredictor(bases, master)
    try:
        return _simple_from_lines(body)
    except StackingError as err:
        raise StackingError(f"{path}: {err}") from None


OOF_HEADER_PREFIX = ["well_id", "start_index", "position", "fold", "fingerprint"]


def save_oof_csv(result: OofResult, path) -> None:
    """Flatten records to one row per (window, position)."""
    import csv as _csv

    if not result.records:
        raise StackingError("no records to save")
    C = result.records[0].probs.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(OOF_HEADER_PREFIX + [f"p_{c}" for c in range(C)])
        for r in result.records:
            for t in range(r.probs.shape[0]):
                writer.writerow(
                    [r.well_id, r.start_index, t, r.fold, r.fingerprint]
                    + [f"{p:.9g}" for p in r.probs[t]]
                )


def load_oof_csv(path) -> list[OofRecord]:
    import csv as _csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        if header[: len(OOF_HEADER_PREFIX)] != OOF_HEADER_PREFIX:
            raise StackingError(f"{path}: unexpected header {header}")
        C = len(header) - len(OOF_HEADER_PREFIX)
        grouped: dict[tuple, list] = {}
        meta = {}
        for row in reader:
            key = (row[0], int(row[1]))
            grouped.setdefault(key, []).append(
                (int(row[2]), [float(x) for x in row[5: 5 + C]])
            )
            meta[key] = (int(row[3]), row[4])
    records = []
    for key, rows in grouped.items():
        rows.sort()
        fold, fp = meta[key]
        records.append(
            OofRecord(
                well_id=key[0], start_index=key[1], fold=fold, fingerprint=fp,
                probs=np.array([p for _, p in rows]),
            )
        )
    return records
