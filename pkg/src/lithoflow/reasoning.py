"""Vote aggregation, probability interpretation, and the reasoning engines.

The reasoning engine answers one question per window: given the narrated
trend, the neighbor vote profile, and the neural probability profile, what
is the per-position label sequence?  Two implementations share the request
and response types: a deterministic offline stub (geometric pooling of the
numeric signals) and a remote text-completion client that renders a prompt
and parses a ``LABELS:`` line out of the reply.
"""

from __future__ import annotations

import json
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class ReasonerError(RuntimeError):
    """Base class for reasoning-engine failures."""


class ReasonerUnavailable(ReasonerError):
    """The remote engine could not be reached (after retries)."""


class ReasonerFormatError(ReasonerError):
    """The engine replied but the reply had no usable label sequence."""


# ---------------------------------------------------------------------------
# neighbor vote aggregation
# ---------------------------------------------------------------------------

def aggregate_votes(cases: Sequence, position: int, num_classes: int) -> np.ndarray:
    """Similarity-weighted label vote at one window position.

    ``p(c) = sum_j w_j * 1[label_j[position] = c]`` over retrieved cases;
    the case weights already sum to 1, so the result is a distribution.
    With no cases the vote is uninformative: uniform.
    """
    if num_classes <= 0:
        raise ValueError("num_classes must be positive")
    probs = np.zeros(num_classes)
    if not cases:
        return np.full(num_classes, 1.0 / num_classes)
    for c in cases:
        label = int(c.labels[position])
        if not 0 <= label < num_classes:
            raise ValueError(f"case label {label} outside [0, {num_classes})")
        probs[label] += c.weight
    total = probs.sum()
    if total <= 0:
        return np.full(num_classes, 1.0 / num_classes)
    return probs / total


def vote_profile(cases: Sequence, window_len: int, num_classes: int) -> np.ndarray:
    """Stack :func:`aggregate_votes` over every position: L x C."""
    return np.stack(
        [aggregate_votes(cases, t, num_classes) for t in range(window_len)]
    )


# ---------------------------------------------------------------------------
# probability interpretation
# ---------------------------------------------------------------------------

HIGH_CONFIDENCE = 0.6
MODERATE_CONFIDENCE = 0.3


@dataclass(frozen=True)
class ProbReading:
    """Qualitative reading of one class distribution."""

    top_class: int
    top_prob: float
    band: str        # high | moderate | low
    uncertain: bool  # peak below twice the uniform mass
    text: str


def interpret_probs(probs: np.ndarray, class_names: Optional[Sequence[str]] = None) -> ProbReading:
    """Summarize a class distribution in words.

    Bands: high when the peak is at least 0.6, moderate at 0.3, low below.
    The distribution counts as uncertain when the peak is under ``2/|C|``,
    i.e. less than twice what a uniform guess would score.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("probs must be a nonempty vector")
    if np.any(probs < -1e-12) or abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError("probs must be a distribution (nonnegative, sum 1)")
    top = int(np.argmax(probs))
    p = float(probs[top])
    if p >= HIGH_CONFIDENCE:
        band = "high"
    elif p >= MODERATE_CONFIDENCE:
        band = "moderate"
    else:
        band = "low"
    uncertain = p < 2.0 / probs.size
    name = class_names[top] if class_names else f"class {top}"
    text = f"{name} with {band} confidence (p={p:.2f})"
    if uncertain:
        text += ", close to uniform"
    return ProbReading(top_class=top, top_prob=p, band=band, uncertain=uncertain, text=text)


# ---------------------------------------------------------------------------
# reasoner request / response
# ---------------------------------------------------------------------------

@dataclass
class ReasonerRequest:
    """Everything a reasoning engine may consult for one window.

    ``neighbor_votes`` and ``nn_probs`` are optional L x C profiles; either
    may be absent when the corresponding upstream tool was unavailable.
    """

    well_id: str
    window_start: int
    window_len: int
    num_classes: int
    narrative: str = ""
    neighbor_votes: Optional[np.ndarray] = None
    nn_probs: Optional[np.ndarray] = None
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("neighbor_votes", "nn_probs"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                if arr.shape != (self.window_len, self.num_classes):
                    raise ValueError(
                        f"{name} shape {arr.shape} != ({self.window_len}, {self.num_classes})"
                    )
                setattr(self, name, arr)


@dataclass
class ReasonerResponse:
    """Per-position labels plus the distribution they were drawn from."""

    labels: np.ndarray   # length L; values may fall outside [0, C) for a
                         # misbehaving engine and are validated downstream
    probs: np.ndarray    # L x C
    rationale: str = ""


def render_prompt(req: ReasonerRequest) -> str:
    """Deterministic plain-text prompt for the remote engine."""
    lines = [
        f"Well {req.well_id}, window starting at sample {req.window_start}, "
        f"{req.window_len} positions, {req.num_classes} classes "
        f"(0..{req.num_classes - 1}).",
    ]
    if req.class_names:
        lines.append("Class names: " + ", ".join(req.class_names) + ".")
    if req.narrative:
        lines.append("Trend description: " + req.narrative)
    for name, arr in (("Neighbor votes", req.neighbor_votes),
                      ("Model probabilities", req.nn_probs)):
        if arr is not None:
            rows = []
            for t in range(req.window_len):
                reading = interpret_probs(arr[t], req.class_names or None)
                rows.append(f"  position {t}: {reading.text}")
            lines.append(name + " per position:\n" + "\n".join(rows))
    lines.append(
        "Reply with one line 'LABELS: a,b,c,...' giving one integer class "
        f"per position ({req.window_len} values)."
    )
    return "\n".join(lines)


def parse_labels_line(text: str, window_len: int) -> np.ndarray:
    """Extract the first ``LABELS:`` line from an engine reply."""
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.upper().startswith("LABELS:"):
            body = stripped[len("LABELS:"):]
            parts = [p.strip() for p in body.split(",") if p.strip()]
            try:
                labels = np.array([int(p) for p in parts], dtype=int)
            except ValueError:
                raise ReasonerFormatError(f"non-integer label in {stripped!r}") from None
            if labels.size != window_len:
                raise ReasonerFormatError(
                    f"expected {window_len} labels, got {labels.size}"
                )
            return labels
    raise ReasonerFormatError("reply has no LABELS: line")


def _labels_to_probs(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot rows for in-range labels, uniform rows for out-of-range ones."""
    probs = np.full((labels.size, num_classes), 1.0 / num_classes)
    for t, y in enumerate(labels):
        if 0 <= y < num_classes:
            probs[t] = 0.0
            probs[t, y] = 1.0
    return probs


# ---------------------------------------------------------------------------
# stub engine
# ---------------------------------------------------------------------------

@dataclass
class StubReasoner:
    """Deterministic offline engine: geometric pooling of numeric signals.

    Per position the available profiles are pooled as
    ``pooled(c) proportional to nbr(c)^alpha * nn(c)^(1-alpha)`` (a missing
    profile drops out, i.e. acts as uniform), then sharpened by
    ``temperature``: probabilities are raised to ``1/temperature`` and
    renormalized, with ``temperature=0`` meaning hard argmax.  When
    ``boost_class`` is set and the request carries a nonempty narrative,
    that class's pooled mass is raised by ``narrative_boost`` before
    sharpening; this models an engine that benefits from the trend text and
    exists for controlled experiments on narration value.
    """

    alpha: float = 0.5
    temperature: float = 1.0
    narrative_boost: float = 0.0
    boost_class: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if not 0.0 <= self.narrative_boost < 1.0:
            raise ValueError("narrative_boost must lie in [0, 1)")

    def _pool(self, nbr: Optional[np.ndarray], nn: Optional[np.ndarray],
              num_classes: int) -> np.ndarray:
        uniform = np.full(num_classes, 1.0 / num_classes)
        if nbr is None and nn is None:
            return uniform.copy()
        if nbr is None:
            pooled = np.asarray(nn, dtype=float) ** (1.0 - self.alpha)
        elif nn is None:
            pooled = np.asarray(nbr, dtype=float) ** self.alpha
        else:
            pooled = nbr ** self.alpha * nn ** (1.0 - self.alpha)
        total = pooled.sum()
        if total <= 0:
            return uniform.copy()
        return pooled / total

    def reason(self, req: ReasonerRequest) -> ReasonerResponse:
        C = req.num_classes
        probs = np.empty((req.window_len, C))
        for t in range(req.window_len):
            nbr = None if req.neighbor_votes is None else req.neighbor_votes[t]
            nn = None if req.nn_probs is None else req.nn_probs[t]
            p = self._pool(nbr, nn, C)
            if (self.boost_class is not None and self.narrative_boost > 0
                    and req.narrative):
                p = boost_distribution(p, self.boost_class, self.narrative_boost)
            if self.temperature == 0:
                hard = np.zeros(C)
                hard[int(np.argmax(p))] = 1.0
                p = hard
            elif self.temperature != 1.0:
                p = p ** (1.0 / self.temperature)
                p = p / p.sum()
            probs[t] = p
        labels = np.argmax(probs, axis=1)
        rationale = "pooled neighbor and model signals"
        if req.narrative:
            rationale += "; consulted trend description"
        return ReasonerResponse(labels=labels, probs=probs, rationale=rationale)


def boost_distribution(probs: np.ndarray, cls: int, boost: float) -> np.ndarray:
    """Shift mass toward one class, rescaling the rest proportionally."""
    probs = np.asarray(probs, dtype=float)
    if not 0 <= cls < probs.size:
        raise ValueError(f"class {cls} outside distribution of size {probs.size}")
    p = float(probs[cls])
    p_new = min(p + boost, 1.0)
    out = probs.copy()
    if p < 1.0:
        out *= (1.0 - p_new) / (1.0 - p)
    out[cls] = p_new
    return out / out.sum()


# ---------------------------------------------------------------------------
# remote engine
# ---------------------------------------------------------------------------

@dataclass
class RemoteReasoner:
    """Text-completion client over HTTP.

    POSTs ``{"prompt": ...}`` to the endpoint, expects a JSON object with a
    ``text`` field (or a raw text body) containing a ``LABELS:`` line.  One
    retry on transport failure, then :class:`ReasonerUnavailable`.  Replies
    that arrive but cannot be parsed raise :class:`ReasonerFormatError`
    without retrying; garbage out of a live endpoint is not a transient
    condition.
    """

    endpoint: str
    timeout: float = 30.0
    retries: int = 1
    extra_headers: dict[str, str] = field(default_factory=dict)

    def _post(self, prompt: str) -> str:
        payload = json.dumps({"prompt": prompt}).encode("utf-8")
        headers = {"Content-Type": "application/json", **self.extra_headers}
        req = urllib.request.Request(self.endpoint, data=payload, headers=headers)
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            body = resp.read().decode("utf-8")
        try:
            obj = json.loads(body)
            if isinstance(obj, dict) and "text" in obj:
                return str(obj["text"])
        except json.JSONDecodeError:
            pass
        return body

    def reason(self, req: ReasonerRequest) -> ReasonerResponse:
        prompt = render_prompt(req)
        last_err = None
        for _ in range(self.retries + 1):
            try:
                reply = self._post(prompt)
                break
            except (urllib.error.URLError, TimeoutError, OSError) as err:
                last_err = err
        else:
            raise ReasonerUnavailable(
                f"engine at {self.endpoint} unreachable: {last_err}"
            ) from last_err
        labels = parse_labels_line(reply, req.window_len)
        return ReasonerResponse(
            labels=labels,
            probs=_labels_to_probs(labels, req.num_classes),
            rationale=reply.strip(),
        )
