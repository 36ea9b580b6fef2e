"""Plan, execute, and reconcile the labeling tools for one window at a time.

The workflow runs in three stages per window:

* the planner picks an ordered tool sequence based on which resources
  (retrieval index, predictor, transition model) are actually available;
* the executor runs the steps, skipping gracefully when a resource turns
  out to be unusable at runtime but refusing plans that are statically
  malformed (a step scheduled before its dependency);
* the reflector reconciles the per-position label proposals from the
  neighbor vote, the predictor, and the reasoning engine into one final
  sequence, consulting the transition model when sources disagree.

Every stage can log a structured trajectory record, one JSON line per
event, which later feeds the reward computations.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analysis import TransitionModel, scan_position, validate_sequence
from .perception import RetrievalIndex, narrate, retrieve
from .reasoning import (
    ReasonerError,
    ReasonerRequest,
    StubReasoner,
    interpret_probs,
    vote_profile,
)
from .welldata import WellLog, Window, window


class WorkflowError(RuntimeError):
    """Raised for unusable configurations or malformed windows."""


class PlanError(WorkflowError):
    """Raised when a plan is statically invalid (bad ordering or dependency)."""


# tool names, in canonical execution order
RETRIEVE = "retrieve"
NARRATE = "narrate"
VOTE = "vote"
PREDICT = "predict"
REASON = "reason"
SCAN = "scan"
VALIDATE = "validate"

ALL_TOOLS = (RETRIEVE, NARRATE, VOTE, PREDICT, REASON, SCAN, VALIDATE)

# hard dependencies: a step may only run after all of its listed
# prerequisites appear earlier in the plan
STATIC_DEPS = {
    VOTE: (RETRIEVE,),
    VALIDATE: (REASON,),
}

# scan needs at least two of these scheduled before it to have anything
# to compare
LABEL_SOURCES = (VOTE, PREDICT, REASON)


@dataclass
class WorkflowConfig:
    """Knobs shared by planner, executor, and reflector."""

    num_classes: int
    retrieve_k: int = 5
    narrate_channel: Optional[str] = None  # default: first channel of the window
    slope_tol: float = 0.05
    validator_threshold: float = 0.05
    confidence_gap: float = 0.15

    def __post_init__(self):
        if self.num_classes < 2:
            raise WorkflowError("num_classes must be at least 2")
        if self.retrieve_k < 1:
            raise WorkflowError("retrieve_k must be at least 1")
        if not 0 <= self.confidence_gap <= 1:
            raise WorkflowError("confidence_gap must lie in [0, 1]")


@dataclass
class ToolBundle:
    """The resources a run has access to.  Any optional one may be None."""

    config: WorkflowConfig
    reasoner: object = field(default_factory=StubReasoner)
    index: Optional[RetrievalIndex] = None
    predictor: object = None
    transitions: Optional[TransitionModel] = None
    # ablation hook: force this exact tool sequence instead of planning
    fixed_plan: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class PlanStep:
    tool: str
    reason: str


@dataclass(frozen=True)
class Plan:
    steps: tuple[PlanStep, ...]

    def tools(self) -> tuple[str, ...]:
        return tuple(s.tool for s in self.steps)


def plan_window(bundle: ToolBundle, win: Window) -> Plan:
    """Choose the tool sequence for one window.

    Narration and reasoning always run.  Retrieval and voting run only when
    an index exists, prediction only with a predictor, conflict scanning
    only when at least two label sources are scheduled, validation only
    with a transition model.  A fixed plan bypasses the heuristics but is
    still checked for static validity.
    """
    if bundle.fixed_plan is not None:
        steps = tuple(PlanStep(t, "fixed plan") for t in bundle.fixed_plan)
        plan = Plan(steps)
        check_plan(plan)
        return plan

    steps = []
    if bundle.index is not None:
        steps.append(PlanStep(RETRIEVE, "retrieval index available"))
    steps.append(PlanStep(NARRATE, "trend description always informs reasoning"))
    if bundle.index is not None:
        steps.append(PlanStep(VOTE, "aggregate retrieved neighbor labels"))
    if bundle.predictor is not None:
        steps.append(PlanStep(PREDICT, "trained predictor available"))
    steps.append(PlanStep(REASON, "reasoning engine reconciles the signals"))
    sources = sum(1 for s in steps if s.tool in LABEL_SOURCES)
    if sources >= 2:
        steps.append(PlanStep(SCAN, f"{sources} label sources to compare"))
    if bundle.transitions is not None:
        steps.append(PlanStep(VALIDATE, "transition model available"))
    plan = Plan(tuple(steps))
    check_plan(plan)
    return plan


def check_plan(plan: Plan) -> None:
    """Static validity: known tools, no duplicates, dependencies ordered."""
    tools = plan.tools()
    if not tools:
        raise PlanError("empty plan")
    for t in tools:
        if t not in ALL_TOOLS:
            raise PlanError(f"unknown tool {t!r}")
    if len(set(tools)) != len(tools):
        raise PlanError("plan repeats a tool")
    seen = set()
    for t in tools:
        for dep in STATIC_DEPS.get(t, ()):
            if dep not in seen:
                raise PlanError(f"{t!r} scheduled without {dep!r} before it")
        if t == SCAN:
            if sum(1 for s in seen if s in LABEL_SOURCES) < 2:
                raise PlanError("scan scheduled with fewer than two label sources before it")
        seen.add(t)


# ---------------------------------------------------------------------------
# executor
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    tool: str
    skipped: bool = False
    note: str = ""
    payload: object = None


@dataclass
class ExecutionTrace:
    steps: list[StepResult]

    def result(self, tool: str) -> Optional[StepResult]:
        for s in self.steps:
            if s.tool == tool:
                return s
        return None

    def payload(self, tool: str):
        """Payload of a completed step, or None if absent or skipped."""
        s = self.result(tool)
        if s is None or s.skipped:
            return None
        return s.payload


def _llm_valid_mask(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return (labels >= 0) & (labels < num_classes)


def execute_plan(bundle: ToolBundle, win: Window, plan: Plan,
                 logger: Optional["TrajectoryLogger"] = None) -> ExecutionTrace:
    """Run the plan's steps in order.

    A step whose resource is missing or whose upstream step was skipped is
    recorded as skipped with a note; the trace always contains one entry
    per planned step.  Statically invalid plans are rejected before any
    tool runs.
    """
    check_plan(plan)
    cfg = bundle.config
    trace = ExecutionTrace(steps=[])

    for step in plan.steps:
        tool = step.tool
        result = StepResult(tool=tool)
        query: dict = {"tool": tool}
        response: dict = {}

        if tool == RETRIEVE:
            if bundle.index is None:
                result.skipped, result.note = True, "no retrieval index"
            else:
                cases = retrieve(bundle.index, win, cfg.retrieve_k)
                result.payload = cases
                query["k"] = cfg.retrieve_k
                response = {
                    "neighbors": [
                        {"well_id": c.well_id, "start_index": c.start_index,
                         "weight": round(c.weight, 6)}
                        for c in cases
                    ]
                }

        elif tool == NARRATE:
            channel = cfg.narrate_channel or win.channel_names[0]
            if channel not in win.channel_names:
                raise WorkflowError(f"narration channel {channel!r} not in window")
            summary = narrate(win, channel, cfg.slope_tol)
            result.payload = summary
            query.update({"channel": channel, "slope_tol": cfg.slope_tol})
            response = {"text": summary.text,
                        "segments": len(summary.segments),
                        "turning_points": list(summary.turning_points)}

        elif tool == VOTE:
            cases = trace.payload(RETRIEVE)
            if cases is None:
                result.skipped, result.note = True, "retrieval produced nothing"
            elif not cases:
                result.skipped, result.note = True, "no neighbors to aggregate"
            else:
                profile = vote_profile(cases, win.length, cfg.num_classes)
                result.payload = profile
                response = {"labels": np.argmax(profile, axis=1).tolist()}

        elif tool == PREDICT:
            if bundle.predictor is None:
                result.skipped, result.note = True, "no predictor"
            else:
                probs = bundle.predictor.predict_proba(win)
                readings = [interpret_probs(probs[t]) for t in range(win.length)]
                result.payload = {"probs": probs, "readings": readings}
                response = {
                    "labels": np.argmax(probs, axis=1).tolist(),
                    "bands": [r.band for r in readings],
                }

        elif tool == REASON:
            narrative = ""
            summary = trace.payload(NARRATE)
            if summary is not None:
                narrative = summary.text
            votes = trace.payload(VOTE)
            predicted = trace.payload(PREDICT)
            req = ReasonerRequest(
                well_id=win.well_id,
                window_start=int(win.start_index),
                window_len=win.length,
                num_classes=cfg.num_classes,
                narrative=narrative,
                neighbor_votes=votes,
                nn_probs=None if predicted is None else predicted["probs"],
            )
            try:
                resp = bundle.reasoner.reason(req)
            except ReasonerError as err:
                result.skipped, result.note = True, f"engine failed: {err}"
            else:
                result.payload = resp
                query["digest_of"] = "rendered prompt"
                response = {"labels": [int(x) for x in resp.labels]}

        elif tool == SCAN:
            sources = _label_sources(trace, cfg.num_classes)
            if len(sources) < 2:
                result.skipped, result.note = True, (
                    f"only {len(sources)} label source(s) produced output"
                )
            else:
                positions = []
                for t in range(win.length):
                    at_t = {
                        name: int(labels[t])
                        for name, (labels, mask) in sources.items()
                        if mask[t]
                    }
                    positions.append(scan_position(at_t))
                from .analysis import ConflictScan

                scan = ConflictScan(positions=tuple(positions))
                result.payload = scan
                response = {
                    "agreement_counts": scan.agreement_counts.tolist(),
                    "conflicts": int(scan.conflict_mask.sum()),
                }

        elif tool == VALIDATE:
            if bundle.transitions is None:
                result.skipped, result.note = True, "no transition model"
            else:
                resp = trace.payload(REASON)
                if resp is None:
                    result.skipped, result.note = True, "nothing to validate"
                elif not _llm_valid_mask(resp.labels, cfg.num_classes).all():
                    result.skipped, result.note = True, "engine labels out of range"
                else:
                    report = validate_sequence(
                        resp.labels, bundle.transitions, cfg.validator_threshold
                    )
                    result.payload = report
                    response = {"flagged": report.flagged_positions().tolist()}

        else:  # pragma: no cover - check_plan guards this
            raise PlanError(f"unknown tool {tool!r}")

        trace.steps.append(result)
        if logger is not None:
            if result.skipped:
                response = {"skipped": True, "note": result.note}
            logger.log(win.well_id, int(win.start_index), f"executor.{tool}",
                       query, response)
    return trace


def _label_sources(trace: ExecutionTrace, num_classes: int) -> dict:
    """Per-position label proposals: name -> (labels, validity mask)."""
    sources = {}
    votes = trace.payload(VOTE)
    if votes is not None:
        labels = np.argmax(votes, axis=1)
        sources["nbr"] = (labels, np.ones(labels.size, dtype=bool))
    predicted = trace.payload(PREDICT)
    if predicted is not None:
        labels = np.argmax(predicted["probs"], axis=1)
        sources["nn"] = (labels, np.ones(labels.size, dtype=bool))
    reasoned = trace.payload(REASON)
    if reasoned is not None:
        labels = np.asarray(reasoned.labels, dtype=int)
        sources["llm"] = (labels, _llm_valid_mask(labels, num_classes))
    return sources


def _prob_profiles(trace: ExecutionTrace) -> dict[str, np.ndarray]:
    profiles = {}
    votes = trace.payload(VOTE)
    if votes is not None:
        profiles["nbr"] = votes
    predicted = trace.payload(PREDICT)
    if predicted is not None:
        profiles["nn"] = predicted["probs"]
    reasoned = trace.payload(REASON)
    if reasoned is not None:
        profiles["llm"] = np.asarray(reasoned.probs, dtype=float)
    return profiles


# ---------------------------------------------------------------------------
# reflector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PositionDecision:
    label: int
    rule: str                 # consensus | majority | override | scored | fallback
    agreement_level: int      # bloc size m among present sources
    num_sources: int
    candidates: tuple[int, ...]


@dataclass
class Reflection:
    labels: np.ndarray
    decisions: tuple[PositionDecision, ...]


def reflect(bundle: ToolBundle, win: Window, trace: ExecutionTrace,
            prev_label: Optional[int] = None) -> Reflection:
    """Reconcile the proposals into the final label sequence.

    Positions are decided left to right so each decision can consult the
    previous one through the transition model.  Rules, per position:

    * all present sources agree: take the consensus;
    * a majority bloc exists: take it, unless the transition model says the
      majority label is implausible after the previous label while some
      minority proposal is plausible and the sources' pooled probabilities
      put the two within ``confidence_gap`` of each other, in which case
      take that minority proposal;
    * total disagreement: score each proposed candidate by its mean
      probability across the available profiles; ties break by transition
      plausibility, then lowest class index.

    ``prev_label`` seeds the transition context for position 0, normally
    with the last decided label of the preceding window.
    """
    cfg = bundle.config
    C = cfg.num_classes
    sources = _label_sources(trace, C)
    profiles = _prob_profiles(trace)
    L = win.length
    trans = None if bundle.transitions is None else bundle.transitions.probs

    labels = np.empty(L, dtype=int)
    decisions = []
    prev = prev_label
    for t in range(L):
        props = {
            name: int(lab[t]) for name, (lab, mask) in sources.items() if mask[t]
        }
        if not props:
            label = prev if prev is not None else 0
            decisions.append(
                PositionDecision(label=int(label), rule="fallback",
                                 agreement_level=0, num_sources=0, candidates=())
            )
            labels[t] = label
            prev = int(label)
            continue

        pc = scan_position(props)
        m = pc.agreement_level
        n = len(props)
        candidates = tuple(sorted(set(props.values())))

        if m == n:
            label, rule = candidates[0] if n == 1 else pc.majority_label, "consensus"
        elif pc.majority_label is not None:
            label, rule = pc.majority_label, "majority"
            minority = [c for c in candidates if c != pc.majority_label]
            if trans is not None and prev is not None and minority:
                plausible = [
                    c for c in minority
                    if trans[prev, c] >= cfg.validator_threshold
                ]
                if plausible and trans[prev, pc.majority_label] < cfg.validator_threshold:
                    best_minor = max(plausible, key=lambda c: (trans[prev, c], -c))
                    gap = _pooled_gap(profiles, t, pc.majority_label, best_minor)
                    if gap <= cfg.confidence_gap:
                        label, rule = best_minor, "override"
        else:
            scores = {
                c: float(np.mean([p[t, c] for p in profiles.values()]))
                for c in candidates
            }
            top = max(scores.values())
            tied = sorted(c for c, s in scores.items() if abs(s - top) < 1e-12)
            if len(tied) > 1 and trans is not None and prev is not None:
                label = max(tied, key=lambda c: (trans[prev, c], -c))
            else:
                label = tied[0]
            rule = "scored"

        labels[t] = label
        decisions.append(
            PositionDecision(label=int(label), rule=rule, agreement_level=m,
                             num_sources=n, candidates=candidates)
        )
        prev = int(label)

    return Reflection(labels=labels, decisions=tuple(decisions))


def _pooled_gap(profiles: dict[str, np.ndarray], t: int, a: int, b: int) -> float:
    """Mean probability margin of label a over label b at position t."""
    if not profiles:
        return 0.0
    margins = [p[t, a] - p[t, b] for p in profiles.values()]
    return float(np.mean(margins))


# ---------------------------------------------------------------------------
# trajectory logging
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def query_digest(query: dict) -> str:
    canon = json.dumps(_jsonable(query), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


class TrajectoryLogger:
    """Appends one JSON object per workflow event to a .jsonl file.

    Records carry ``run_id``, window provenance, the emitting module, a
    digest of the query that produced the event, the structured response,
    and a reward slot that stays null until rewards are attached offline.
    """

    def __init__(self, path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        self._fh = open(self.path, "a", encoding="utf-8")

    def log(self, well_id: str, window_start: int, module: str,
            query: dict, response: dict, reward: Optional[float] = None) -> None:
        record = {
            "run_id": self.run_id,
            "well_id": well_id,
            "window_start": int(window_start),
            "module": module,
            "query_digest": query_digest(query),
            "response": _jsonable(response),
            "reward": reward,
        }
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TrajectoryLogger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_trajectory(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


# ---------------------------------------------------------------------------
# whole-window and whole-well drivers
# ---------------------------------------------------------------------------

def run_window(bundle: ToolBundle, win: Window,
               prev_label: Optional[int] = None,
               logger: Optional[TrajectoryLogger] = None
               ) -> tuple[Reflection, ExecutionTrace]:
    """Plan, execute, and reflect for one window, logging each stage."""
    plan = plan_window(bundle, win)
    if logger is not None:
        logger.log(win.well_id, int(win.start_index), "planner",
                   {"window": f"{win.well_id}@{win.start_index}"},
                   {"steps": list(plan.tools()),
                    "reasons": [s.reason for s in plan.steps]})
    trace = execute_plan(bundle, win, plan, logger=logger)
    reflection = reflect(bundle, win, trace, prev_label=prev_label)
    if logger is not None:
        logger.log(
            win.well_id, int(win.start_index), "reflector",
            {"prev_label": prev_label},
            {
                "labels": reflection.labels.tolist(),
                "rules": [d.rule for d in reflection.decisions],
                "agreement_levels": [d.agreement_level for d in reflection.decisions],
                "candidates": [list(d.candidates) for d in reflection.decisions],
            },
        )
    return reflection, trace


@dataclass
class WellPrediction:
    well_id: str
    labels: np.ndarray          # length T
    window_starts: list[int]


def run_well(bundle: ToolBundle, well: WellLog, window_len: int,
             logger: Optional[TrajectoryLogger] = None) -> WellPrediction:
    """Label a whole well with non-overlapping windows plus a tail window.

    Windows tile the well at stride ``window_len``; when T is not a
    multiple, one extra window anchored at ``T - window_len`` covers the
    remainder, and only its previously unseen tail positions contribute to
    the output.  Each window's reflection is seeded with the last already
    decided label so transition checks work across window boundaries.
    """
    T = well.T
    if window_len > T:
        raise WorkflowError(
            f"well {well.well_id!r}: window length {window_len} exceeds T={T}"
        )
    wins = window(well, window_len, window_len)
    labels = np.full(T, -1, dtype=int)
    starts = []
    prev = None
    for w in wins:
        reflection, _ = run_window(bundle, w, prev_label=prev, logger=logger)
        labels[w.start_index: w.start_index + window_len] = reflection.labels
        prev = int(reflection.labels[-1])
        starts.append(int(w.start_index))

    covered = len(wins) * window_len
    if covered < T:
        tail_start = T - window_len
        tail = Window(
            well_id=well.well_id,
            start_index=tail_start,
            values=well.channels[tail_start:],
            depths=well.depths[tail_start:],
            labels=None if well.labels is None else well.labels[tail_start:],
            channel_names=well.channel_names,
        )
        prev = int(labels[tail_start - 1]) if tail_start > 0 else None
        reflection, _ = run_window(bundle, tail, prev_label=prev, logger=logger)
        fresh = T - covered
        labels[covered:] = reflection.labels[window_len - fresh:]
        starts.append(tail_start)

    return WellPrediction(well_id=well.well_id, labels=labels, window_starts=starts)
