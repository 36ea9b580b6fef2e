"""Reward signals for workflow trajectories and narration quality.

Covers four things: the reflection reward that scores final decisions
against ground truth with an agreement-dependent penalty, the pass@k
estimator for repeated stochastic trials, a controlled experiment measuring
whether trend narration helps an engine, and a rubric that grades one trend
narration against a reference.  Rewards are attached to trajectory records
after the fact; runs never see ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import comb
from typing import Iterable, Optional, Sequence

import numpy as np

from .perception import TrendSummary
from .reasoning import boost_distribution
from .welldata import Window

# penalty factor for a wrong final label, by agreement level: a wrong call
# made against a split field (level 1) is punished at half strength, a wrong
# call made with two or three sources behind it at full strength
ETA = {1: 0.5, 2: 1.0, 3: 1.0}


class RewardError(ValueError):
    """Raised for malformed reward inputs."""


def eta(agreement_level: int, eta_map: Optional[dict] = None) -> float:
    table = ETA if eta_map is None else eta_map
    if agreement_level not in table:
        raise RewardError(f"agreement level must be 1, 2, or 3, got {agreement_level}")
    return table[agreement_level]


def reflection_reward(final_label: int, truth: int,
                      candidates: Sequence[int], agreement_level: int,
                      eta_map: Optional[dict] = None) -> float:
    """Score one reflected decision.

    When the true label was never proposed the reflector had no chance, so
    the reward is 0 regardless of the outcome.  Otherwise a correct final
    label earns +1 and a wrong one costs ``eta(level)``.
    """
    if truth not in set(int(c) for c in candidates):
        return 0.0
    if int(final_label) == int(truth):
        return 1.0
    return -eta(agreement_level, eta_map)


def sequence_reflection_reward(labels, truths, candidates_per_pos,
                               levels, eta_map: Optional[dict] = None) -> float:
    """Mean :func:`reflection_reward` over a window."""
    labels = np.asarray(labels, dtype=int)
    truths = np.asarray(truths, dtype=int)
    if not (labels.size == truths.size == len(candidates_per_pos) == len(levels)):
        raise RewardError("per-position inputs disagree on length")
    vals = [
        reflection_reward(labels[t], truths[t], candidates_per_pos[t], levels[t],
                          eta_map)
        for t in range(labels.size)
    ]
    return float(np.mean(vals))


def llm_accuracy_reward(labels, truths, num_classes: int) -> float:
    """Mean per-position correctness; out-of-range labels count as wrong."""
    labels = np.asarray(labels, dtype=int)
    truths = np.asarray(truths, dtype=int)
    if labels.shape != truths.shape:
        raise RewardError("labels and truths disagree on length")
    ok = (labels >= 0) & (labels < num_classes) & (labels == truths)
    return float(np.mean(ok))


# ---------------------------------------------------------------------------
# pass@k
# ---------------------------------------------------------------------------

def pass_at_k(n: int, c: int, k: int) -> float:
    """Probability that at least one of k draws (without replacement) from
    n trials hits one of the c successes: ``1 - C(n-c, k) / C(n, k)``.

    When fewer than k failures exist any draw must contain a success, so
    the value is exactly 1.
    """
    if n <= 0:
        raise RewardError("n must be positive")
    if not 0 <= c <= n:
        raise RewardError("c must lie in [0, n]")
    if not 1 <= k <= n:
        raise RewardError("k must lie in [1, n]")
    if n - c < k:
        return 1.0
    return 1.0 - comb(n - c, k) / comb(n, k)


# ---------------------------------------------------------------------------
# does narration help?  controlled paired trials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrendHelpfulness:
    pass_direct: float
    pass_with_trend: float
    n_trials: int
    k: int

    @property
    def delta(self) -> float:
        return self.pass_with_trend - self.pass_direct

    @property
    def helpful(self) -> bool:
        return self.delta > 0


def _count_exact_matches(probs: np.ndarray, truth: np.ndarray,
                         n_trials: int, rng: np.random.Generator) -> int:
    L, C = probs.shape
    hits = 0
    for _ in range(n_trials):
        draw = np.array([rng.choice(C, p=probs[t]) for t in range(L)])
        if np.array_equal(draw, truth):
            hits += 1
    return hits


def trend_helpfulness(truth, direct_probs, trend_probs,
                      n_trials: int = 50, k: int = 5,
                      seed: int = 0) -> TrendHelpfulness:
    """Paired stochastic trials with and without the trend narration.

    Each trial samples a full label sequence from the given per-position
    distributions; a trial succeeds only on an exact sequence match, since
    a narration that fixes some positions while breaking others has not
    helped.  The two modes draw from independently spawned random streams,
    so adding trials to one mode never perturbs the other.
    """
    truth = np.asarray(truth, dtype=int)
    direct_probs = np.asarray(direct_probs, dtype=float)
    trend_probs = np.asarray(trend_probs, dtype=float)
    if direct_probs.shape != trend_probs.shape or direct_probs.shape[0] != truth.size:
        raise RewardError("probability profiles disagree with the truth length")
    ss = np.random.SeedSequence(seed)
    direct_ss, trend_ss = ss.spawn(2)
    c_direct = _count_exact_matches(
        direct_probs, truth, n_trials, np.random.default_rng(direct_ss))
    c_trend = _count_exact_matches(
        trend_probs, truth, n_trials, np.random.default_rng(trend_ss))
    return TrendHelpfulness(
        pass_direct=pass_at_k(n_trials, c_direct, k),
        pass_with_trend=pass_at_k(n_trials, c_trend, k),
        n_trials=n_trials,
        k=k,
    )


def boost_toward_truth(probs: np.ndarray, truth, boost: float) -> np.ndarray:
    """Model a narration that nudges each position toward the true class."""
    probs = np.asarray(probs, dtype=float)
    truth = np.asarray(truth, dtype=int)
    return np.stack(
        [boost_distribution(probs[t], int(truth[t]), boost) for t in range(truth.size)]
    )


# ---------------------------------------------------------------------------
# controlled signal perturbations
# ---------------------------------------------------------------------------

def _replace_values(win: Window, values: np.ndarray) -> Window:
    return Window(
        well_id=win.well_id, start_index=win.start_index, values=values,
        depths=win.depths, labels=win.labels, channel_names=win.channel_names,
    )


def flip_about_mean(win: Window) -> Window:
    """Mirror every channel about its own mean: rising becomes falling."""
    vals = np.asarray(win.values, dtype=float)
    return _replace_values(win, 2.0 * vals.mean(axis=0) - vals)


def shift_samples(win: Window, offset: int) -> Window:
    """Slide the signal along depth, replicating the edge sample.

    Positive offsets move features deeper; the vacated rows repeat the
    first row (deepest rows repeat the last on negative offsets), so the
    window length never changes.
    """
    L = win.length
    if abs(offset) >= L:
        raise RewardError(f"offset {offset} out of range for window of {L}")
    vals = np.asarray(win.values, dtype=float)
    out = np.empty_like(vals)
    if offset >= 0:
        out[offset:] = vals[: L - offset]
        out[:offset] = vals[0]
    else:
        out[:offset] = vals[-offset:]
        out[offset:] = vals[-1]
    return _replace_values(win, out)


def move_feature(win: Window, from_index: int, to_index: int) -> Window:
    """Drag the sample at one index to another by piecewise-linear resampling.

    The depth axis is warped so position ``to_index`` reads the value that
    used to live at ``from_index`` while the endpoints stay pinned; the rest
    of the signal stretches smoothly.  Moving a turning point this way moves
    the narrated boundary without inventing new extrema.
    """
    L = win.length
    for name, idx in (("from_index", from_index), ("to_index", to_index)):
        if not 0 < idx < L - 1:
            raise RewardError(f"{name} must be interior (0 < i < {L - 1})")
    grid = np.arange(L, dtype=float)
    warped = np.interp(grid, [0.0, float(to_index), float(L - 1)],
                       [0.0, float(from_index), float(L - 1)])
    vals = np.asarray(win.values, dtype=float)
    out = np.column_stack(
        [np.interp(warped, grid, vals[:, j]) for j in range(vals.shape[1])]
    )
    return _replace_values(win, out)


# ---------------------------------------------------------------------------
# narration rubric
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RubricScore:
    accuracy: float         # candidate segments whose direction matches
    completeness: float     # reference segments recovered by the candidate
    clarity: float          # penalty for oversegmentation
    depth_alignment: float  # boundary placement agreement

    @property
    def overall(self) -> float:
        return float(np.mean([
            self.accuracy, self.completeness, self.clarity, self.depth_alignment
        ]))


def _overlap(a, b) -> int:
    return max(0, min(a.end, b.end) - max(a.start, b.start))


def _internal_boundaries(summary: TrendSummary) -> list[int]:
    return [seg.end for seg in summary.segments[:-1]]


def rubric_score(candidate: TrendSummary, reference: TrendSummary) -> RubricScore:
    """Grade a candidate narration against a reference narration.

    Accuracy: fraction of candidate segments whose direction agrees with
    the reference segment they overlap most.  Completeness: fraction of
    reference segments that some same-direction candidate segment touches.
    Clarity: 1 minus the relative excess of candidate segments over
    reference segments, floored at 0.  Depth alignment: 1 minus the mean
    distance between internal boundaries (each side matched to its nearest
    counterpart), normalized by the window length; two boundary-free
    narrations align perfectly, and a boundary-free narration against one
    with boundaries scores 0.
    """
    cand, ref = candidate.segments, reference.segments
    if not cand or not ref:
        raise RewardError("summaries must contain at least one segment")

    matched = 0
    for cs in cand:
        best = max(ref, key=lambda rs: _overlap(cs, rs))
        if _overlap(cs, best) > 0 and cs.direction == best.direction:
            matched += 1
    accuracy = matched / len(cand)

    recovered = 0
    for rs in ref:
        if any(_overlap(cs, rs) > 0 and cs.direction == rs.direction for cs in cand):
            recovered += 1
    completeness = recovered / len(ref)

    clarity = 1.0 - min(1.0, max(0, len(cand) - len(ref)) / max(1, len(ref)))

    cb = _internal_boundaries(candidate)
    rb = _internal_boundaries(reference)
    length = max(ref[-1].end, cand[-1].end)
    if not cb and not rb:
        depth_alignment = 1.0
    elif not cb or not rb:
        depth_alignment = 0.0
    else:
        offsets = [min(abs(x - y) for y in rb) for x in cb]
        offsets += [min(abs(y - x) for x in cb) for y in rb]
        depth_alignment = max(0.0, 1.0 - float(np.mean(offsets)) / length)

    return RubricScore(accuracy=accuracy, completeness=completeness,
                       clarity=clarity, depth_alignment=depth_alignment)


# ---------------------------------------------------------------------------
# attaching rewards to logged trajectories
# ---------------------------------------------------------------------------

def attach_rewards(records: Iterable[dict], truth_by_well: dict,
                   num_classes: int, eta_map: Optional[dict] = None) -> list[dict]:
    """Fill the reward slot of reasoning and reflection records.

    ``truth_by_well`` maps well id to the full true label vector.  Engine
    records are scored by mean label accuracy, reflector records by the
    mean reflection reward; everything else keeps a null reward.  Returns
    new record dicts; the inputs are not modified.
    """
    out = []
    for rec in records:
        rec = dict(rec)
        truth = truth_by_well.get(rec.get("well_id"))
        module = rec.get("module", "")
        resp = rec.get("response") or {}
        if truth is not None and "labels" in resp:
            start = int(rec["window_start"])
            labels = np.asarray(resp["labels"], dtype=int)
            truths = np.asarray(truth[start: start + labels.size], dtype=int)
            if truths.size == labels.size:
                if module == "executor.reason":
                    rec["reward"] = llm_accuracy_reward(labels, truths, num_classes)
                elif module == "reflector":
                    rec["reward"] = sequence_reflection_reward(
                        labels, truths, resp["candidates"],
                        [max(1, int(v)) for v in resp["agreement_levels"]],
                        eta_map,
                    )
        out.append(rec)
    return out


AUDIT_HEADER = ["run_id", "well_id", "window_start", "module", "reward"]


def write_rewards_audit(records: Iterable[dict], path) -> None:
    """One CSV row per rewarded record, for eyeballing reward distributions."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(AUDIT_HEADER)
        for rec in records:
            if rec.get("reward") is None:
                continue
            writer.writerow([
                rec["run_id"], rec["well_id"], rec["window_start"],
                rec["module"], f"{rec['reward']:.6f}",
            ])
