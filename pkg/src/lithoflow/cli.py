"""Command line front end tying the library into a reproducible pipeline.

Commands communicate only through files in the run directory, so any
subset of the chain can be rerun and compared:

    synth / ingest  -> wells.csv, splits.txt (, stats.txt)
    preprocess      -> cleaned wells.csv, splits.txt, stats.txt
    train-predictor -> predictor.txt
    stack           -> predictor.txt (stacked), oof.csv
    index           -> index.txt, transitions.txt
    run             -> predictions.csv, trajectory.jsonl
    evaluate        -> metrics.csv
    rewards-audit   -> rewards_audit.csv
    magrpo-toy      -> learning_curves.csv

Every command writes a manifest with the config hash, the seed, and a
checksum per artifact; with the stub reasoner the whole chain is
deterministic, so rerunning a command reproduces its outputs byte for
byte.  Exit codes: 0 success, 2 configuration problem, 3 missing input
artifact, 1 anything else.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import AnalysisError, fit_transition, load_transition, save_transition
from .artifacts import (
    ArtifactError,
    MissingArtifactError,
    atomic_path,
    load_predictions,
    load_splits,
    load_stats,
    require,
    run_id,
    save_metrics,
    save_predictions,
    save_splits,
    save_stats,
    write_manifest,
)
from .config import (
    REASONER_TOKEN_ENV,
    ConfigError,
    RunConfig,
    load_config,
    set_key,
    validate_config,
)
from .magrpo import MODES, MagrpoError, train_toy, write_training_csv
from .metrics import MetricsError, fragmentation_rate, weighted_prf
from .perception import PerceptionError, build_index, load_index, save_index
from .reasoning import RemoteReasoner, StubReasoner
from .rewards import RewardError, attach_rewards, write_rewards_audit
from .stacking import (
    MasterModel,
    StackedPredictor,
    StackingError,
    generate_oof,
    load_predictor,
    make_predictor,
    save_oof_csv,
    save_predictor,
    verify_oof_provenance,
    window_key,
)
from .welldata import (
    CsvSchema,
    PreprocessSpec,
    WellDataError,
    clean,
    compute_stats,
    make_synth_spec,
    normalize,
    parse_csv,
    synth_wells,
    window,
    write_csv,
)
from .workflow import (
    ToolBundle,
    TrajectoryLogger,
    WorkflowConfig,
    WorkflowError,
    read_trajectory,
    run_well,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3

WELLS_FILE = "wells.csv"
SPLITS_FILE = "splits.txt"
STATS_FILE = "stats.txt"
PREDICTOR_FILE = "predictor.txt"
OOF_FILE = "oof.csv"
INDEX_FILE = "index.txt"
TRANSITIONS_FILE = "transitions.txt"
PREDICTIONS_FILE = "predictions.csv"
TRAJECTORY_FILE = "trajectory.jsonl"
METRICS_FILE = "metrics.csv"
AUDIT_FILE = "rewards_audit.csv"
CURVES_FILE = "learning_curves.csv"


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------

def _schema(cfg: RunConfig) -> CsvSchema:
    return CsvSchema(
        well_col=cfg.well_column,
        depth_col=cfg.depth_column,
        channel_cols=cfg.channel_columns,
        label_col=cfg.label_column,
        transforms={name: "log10" for name in cfg.log_channels},
    )


def _load_wells(cfg: RunConfig, out: Path):
    """Wells plus their split roles, as parsed (no normalization)."""
    wells_path = require(out / WELLS_FILE, "produced by `lithoflow synth` or `ingest`")
    splits_path = require(out / SPLITS_FILE, "produced by `lithoflow synth` or `ingest`")
    wells = parse_csv(wells_path, _schema(cfg))
    roles = load_splits(splits_path)
    missing = [w.well_id for w in wells if w.well_id not in roles]
    if missing:
        raise ArtifactError(f"wells without a split role: {missing}")
    return wells, roles


def _load_normalized(cfg: RunConfig, out: Path):
    """(train wells, test wells) standardized with the stored statistics."""
    wells, roles = _load_wells(cfg, out)
    stats_path = require(out / STATS_FILE,
                         "produced by `lithoflow synth` or `preprocess`")
    stats, _ = load_stats(stats_path)
    train, test = [], []
    for w in wells:
        normed = normalize(w, stats)
        (train if roles[w.well_id] == "train" else test).append(normed)
    return train, test


def _num_classes(wells, *fallbacks) -> int:
    top = -1
    for w in wells:
        if w.labels is not None and w.labels.size:
            top = max(top, int(w.labels.max()))
    if top >= 0:
        return top + 1
    for obj in fallbacks:
        c = getattr(obj, "num_classes", None)
        if c:
            return int(c)
    raise ConfigError("cannot infer the number of classes: no labels and no "
                      "fitted artifacts to read it from")


def _train_windows(cfg: RunConfig, train_wells):
    wins = []
    for w in train_wells:
        if w.labels is None:
            raise WellDataError(f"training well {w.well_id!r} has no labels")
        wins.extend(window(w, cfg.window_len, cfg.stride))
    if not wins:
        raise WellDataError("no training windows; wells shorter than the window?")
    return wins


def _predictor_factory(cfg: RunConfig, num_classes: int):
    if cfg.predictor == "knn":
        return lambda: make_predictor("knn", num_classes, k=cfg.knn_k)
    return lambda: make_predictor(
        "logistic", num_classes,
        l2=cfg.logistic_l2, lr=cfg.logistic_lr, epochs=cfg.logistic_epochs,
    )


def _make_reasoner(cfg: RunConfig):
    if cfg.reasoner == "remote":
        headers = {}
        token = os.environ.get(REASONER_TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return RemoteReasoner(cfg.reasoner_url, extra_headers=headers)
    return StubReasoner(alpha=cfg.pool_alpha)


def _window_accuracy(predictor, windows) -> float:
    hits = total = 0
    for win in windows:
        pred = np.argmax(predictor.predict_proba(win), axis=1)
        hits += int(np.sum(pred == win.labels))
        total += win.length
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# subcommand implementations: each returns a one-line summary string
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> str:
    out = Path(cfg.out_dir)
    spec = make_synth_spec(
        cfg.synth_classes, cfg.synth_channels,
        stay_prob=cfg.synth_stay_prob, emission_sep=cfg.synth_emission_sep,
        emission_std=cfg.synth_emission_std, interval=cfg.synth_interval,
        seed=cfg.seed,
    )
    wells = synth_wells(spec, cfg.synth_wells, cfg.synth_length)
    num_test = max(1, round(len(wells) * cfg.synth_test_fraction))
    num_test = min(num_test, len(wells) - 1)
    roles = {w.well_id: ("test" if i >= len(wells) - num_test else "train")
             for i, w in enumerate(wells)}
    train = [w for w in wells if roles[w.well_id] == "train"]

    with atomic_path(out / WELLS_FILE) as tmp:
        write_csv(tmp, wells)
    save_splits(roles, out / SPLITS_FILE)
    stats = compute_stats(train)
    save_stats(stats, {name: "linear" for name in stats}, out / STATS_FILE)
    write_manifest(out, "synth", cfg,
                   [out / WELLS_FILE, out / SPLITS_FILE, out / STATS_FILE])
    return (f"synth: {len(wells)} wells ({len(train)} train, {num_test} test), "
            f"{cfg.synth_classes} classes, T={cfg.synth_length} -> {out}")


def cmd_ingest(cfg: RunConfig, args) -> str:
    if not cfg.train_csv:
        raise ConfigError("ingest needs data.train_csv to point at source files")
    out = Path(cfg.out_dir)
    schema = _schema(cfg)
    wells, roles = [], {}
    for role, paths in (("train", cfg.train_csv), ("test", cfg.test_csv)):
        for path in paths:
            for w in parse_csv(path, schema):
                if w.well_id in roles:
                    raise ArtifactError(f"well {w.well_id!r} appears twice")
                wells.append(w)
                roles[w.well_id] = role
    with atomic_path(out / WELLS_FILE) as tmp:
        write_csv(tmp, wells)
    save_splits(roles, out / SPLITS_FILE)
    write_manifest(out, "ingest", cfg, [out / WELLS_FILE, out / SPLITS_FILE])
    rows = sum(w.T for w in wells)
    return f"ingest: {len(wells)} wells, {rows} samples -> {out}"


def cmd_preprocess(cfg: RunConfig, args) -> str:
    out = Path(cfg.out_dir)
    wells, roles = _load_wells(cfg, out)
    spec = PreprocessSpec(
        physical_bounds=dict(cfg.bounds),
        max_gap_m=cfg.max_gap_m,
        window_len=cfg.window_len,
        stride=cfg.stride,
        test_stride=cfg.effective_test_stride,
    )
    cleaned, new_roles = [], {}
    for w in wells:
        for piece in clean(w, spec):
            cleaned.append(piece)
            new_roles[piece.well_id] = roles[w.well_id]
    if not cleaned:
        raise WellDataError("cleaning removed every well")
    train = [w for w in cleaned if new_roles[w.well_id] == "train"]
    if not train:
        raise WellDataError("cleaning removed every training well")
    stats = compute_stats(train)
    transforms = {c.name: c.transform for c in cleaned[0].curves}

    with atomic_path(out / WELLS_FILE) as tmp:
        write_csv(tmp, cleaned)
    save_splits(new_roles, out / SPLITS_FILE)
    save_stats(stats, transforms, out / STATS_FILE)
    write_manifest(out, "preprocess", cfg,
                   [out / WELLS_FILE, out / SPLITS_FILE, out / STATS_FILE])
    n_windows = sum(
        len(window(w, cfg.window_len, cfg.stride)) for w in train
    )
    return (f"preprocess: {len(wells)} wells in, {len(cleaned)} out "
            f"({len(train)} train, {n_windows} train windows)")


def cmd_train_predictor(cfg: RunConfig, args) -> str:
    out = Path(cfg.out_dir)
    train, _ = _load_normalized(cfg, out)
    wins = _train_windows(cfg, train)
    C = _num_classes(train)
    predictor = _predictor_factory(cfg, C)().fit(wins)
    with atomic_path(out / PREDICTOR_FILE) as tmp:
        save_predictor(predictor, tmp)
    write_manifest(out, "train-predictor", cfg, [out / PREDICTOR_FILE])
    acc = _window_accuracy(predictor, wins)
    return (f"train-predictor: {cfg.predictor} on {len(wins)} windows, "
            f"{C} classes, train accuracy {acc:.3f}")


def cmd_stack(cfg: RunConfig, args) -> str:
    out = Path(cfg.out_dir)
    train, _ = _load_normalized(cfg, out)
    wins = _train_windows(cfg, train)
    C = _num_classes(train)
    factory = _predictor_factory(cfg, C)

    oof = generate_oof(wins, cfg.folds, cfg.seed, factory)
    violations = verify_oof_provenance(oof)
    if violations:
        raise StackingError(f"{len(violations)} provenance violations; first: "
                            f"{violations[0]}")
    base_probs = np.stack([oof.probs_for(window_key(w)) for w in wins])
    labels = np.stack([w.labels for w in wins])
    master = MasterModel(C, num_bases=1).fit(
        [base_probs], labels, keys=[window_key(w) for w in wins]
    )
    full_base = factory().fit(wins)
    stacked = StackedPredictor([full_base], master)

    save_oof_csv(oof, out / OOF_FILE)
    with atomic_path(out / PREDICTOR_FILE) as tmp:
        save_predictor(stacked, tmp)
    write_manifest(out, "stack", cfg, [out / OOF_FILE, out / PREDICTOR_FILE])
    oof_acc = float(np.mean(np.argmax(base_probs, axis=2) == labels))
    return (f"stack: {cfg.folds}-fold out-of-fold on {len(wins)} windows, "
            f"0 violations, base out-of-fold accuracy {oof_acc:.3f}")


def cmd_index(cfg: RunConfig, args) -> str:
    out = Path(cfg.out_dir)
    train, _ = _load_normalized(cfg, out)
    wins = _train_windows(cfg, train)
    C = _num_classes(train)
    index = build_index(wins, dict(cfg.metric_weights))
    with atomic_path(out / INDEX_FILE) as tmp:
        save_index(index, tmp)
    model = fit_transition([w.labels for w in train], C, cfg.laplace)
    with atomic_path(out / TRANSITIONS_FILE) as tmp:
        save_transition(model, tmp)
    write_manifest(out, "index", cfg, [out / INDEX_FILE, out / TRANSITIONS_FILE])
    return (f"index: {len(index)} cases, transition model over {C} classes "
            f"from {len(train)} wells")


def cmd_run(cfg: RunConfig, args) -> str:
    out = Path(cfg.out_dir)
    train, test = _load_normalized(cfg, out)
    if not test:
        raise ConfigError("no test wells in the split listing; nothing to run on")

    index = None
    if (out / INDEX_FILE).exists():
        index = load_index(out / INDEX_FILE)
    predictor = None
    if (out / PREDICTOR_FILE).exists():
        predictor = load_predictor(out / PREDICTOR_FILE)
    transitions = None
    if (out / TRANSITIONS_FILE).exists():
        transitions = load_transition(out / TRANSITIONS_FILE)

    C = _num_classes(train + test, predictor, transitions)
    wcfg = WorkflowConfig(
        num_classes=C,
        retrieve_k=cfg.retrieve_k,
        narrate_channel=cfg.narrate_channel or None,
        slope_tol=cfg.slope_tol,
        validator_threshold=cfg.validator_threshold,
        confidence_gap=cfg.confidence_gap,
    )
    bundle = ToolBundle(
        config=wcfg,
        reasoner=_make_reasoner(cfg),
        index=index,
        predictor=predictor,
        transitions=transitions,
    )
    rid = run_id("run", cfg)
    rows = []
    hits = total = 0
    with atomic_path(out / TRAJECTORY_FILE) as tmp_traj:
        with TrajectoryLogger(tmp_traj, rid) as logger:
            for well in test:
                prediction = run_well(bundle, well, cfg.window_len, logger=logger)
                truth = well.labels
                for t in range(well.T):
                    true_t = None if truth is None else int(truth[t])
                    rows.append((well.well_id, float(well.depths[t]), t,
                                 true_t, int(prediction.labels[t])))
                    if true_t is not None:
                        hits += int(true_t == prediction.labels[t])
                        total += 1
    save_predictions(rows, out / PREDICTIONS_FILE)
    write_manifest(out, "run", cfg,
                   [out / PREDICTIONS_FILE, out / TRAJECTORY_FILE])
    tools = [name for name, obj in
             (("index", index), ("predictor", predictor),
              ("transitions", transitions)) if obj is not None]
    acc = f", accuracy {hits / total:.3f}" if total else ""
    return (f"run: {rid} labeled {len(test)} wells / {len(rows)} samples "
            f"with [{', '.join(tools) or 'reasoner only'}]{acc}")


def cmd_evaluate(cfg: RunConfig, args) -> str:
    out = Path(cfg.out_dir)
    pred_path = require(out / PREDICTIONS_FILE, "produced by `lithoflow run`")
    rows = load_predictions(pred_path)
    wells, _ = _load_wells(cfg, out)
    intervals = {w.well_id: w.interval for w in wells}

    by_well: dict[str, list] = {}
    for rec in rows:
        by_well.setdefault(rec["well_id"], []).append(rec)

    scored = []
    all_true, all_pred = [], []
    frag_num = frag_den = 0.0
    for well_id in sorted(by_well):
        recs = sorted(by_well[well_id], key=lambda r: r["position"])
        pred = np.array([r["pred"] for r in recs])
        truth = [r["truth"] for r in recs]
        interval = intervals.get(well_id, 1.0)
        min_thick = cfg.min_thickness if cfg.min_thickness > 0 else 3 * interval
        frag = fragmentation_rate(pred, interval, min_thick)
        if any(t is None for t in truth):
            scored.append((well_id, 0.0, 0.0, 0.0, frag))
            continue
        truth = np.array(truth)
        C = int(max(truth.max(), pred.max())) + 1
        report = weighted_prf(truth, pred, C)
        scored.append((well_id, report.weighted_precision, report.weighted_recall,
                       report.weighted_f1, frag))
        all_true.append(truth)
        all_pred.append(pred)
        frag_num += frag
        frag_den += 1

    if all_true:
        truth = np.concatenate(all_true)
        pred = np.concatenate(all_pred)
        C = int(max(truth.max(), pred.max())) + 1
        report = weighted_prf(truth, pred, C)
        overall = ("all", report.weighted_precision, report.weighted_recall,
                   report.weighted_f1, frag_num / frag_den)
        scored.append(overall)
        summary = (f"evaluate: {len(by_well)} wells, weighted F1 "
                   f"{report.weighted_f1:.3f}, mean fragmentation "
                   f"{frag_num / frag_den:.3f}")
    else:
        summary = f"evaluate: {len(by_well)} wells, no ground truth available"
    save_metrics(scored, out / METRICS_FILE)
    write_manifest(out, "evaluate", cfg, [out / METRICS_FILE])
    return summary


def cmd_rewards_audit(cfg: RunConfig, args) -> str:
    out = Path(cfg.out_dir)
    traj_path = require(out / TRAJECTORY_FILE, "produced by `lithoflow run`")
    records = read_trajectory(traj_path)
    wells, _ = _load_wells(cfg, out)
    truth_by_well = {w.well_id: w.labels for w in wells if w.labels is not None}
    if not truth_by_well:
        raise ArtifactError("no labeled wells; nothing to score rewards against")
    C = _num_classes(wells)
    eta_map = {1: cfg.eta_1, 2: cfg.eta_2, 3: cfg.eta_3}
    rewarded = attach_rewards(records, truth_by_well, C, eta_map)
    with atomic_path(out / AUDIT_FILE) as tmp:
        write_rewards_audit(rewarded, tmp)
    scored = [r for r in rewarded if r.get("reward") is not None]
    by_module: dict[str, list] = {}
    for rec in scored:
        by_module.setdefault(rec["module"], []).append(rec["reward"])
    parts = ", ".join(
        f"{module} mean {np.mean(vals):.3f}" for module, vals in sorted(by_module.items())
    )
    write_manifest(out, "rewards-audit", cfg, [out / AUDIT_FILE])
    return f"rewards-audit: {len(scored)}/{len(records)} events scored ({parts})"


def cmd_magrpo_toy(cfg: RunConfig, args) -> str:
    out = Path(cfg.out_dir)
    modes = list(MODES) if args.mode == "both" else [args.mode or cfg.mode]
    results = []
    for mode in modes:
        for i in range(args.seeds):
            results.append(train_toy(
                mode, cfg.seed + i,
                iterations=cfg.iterations, lr=cfg.learning_rate,
                group_size=cfg.group_size, kl_weight=cfg.kl_weight,
                clip_low=cfg.clip_low, clip_high=cfg.clip_high,
            ))
    with atomic_path(out / CURVES_FILE) as tmp:
        write_training_csv(results, tmp)
    write_manifest(out, "magrpo-toy", cfg, [out / CURVES_FILE])
    parts = []
    for mode in modes:
        iters = [r.iterations_to(0.9) for r in results if r.mode == mode]
        iters = [float("inf") if v is None else v for v in iters]
        med = float(np.median(iters))
        parts.append(f"{mode} median iterations to 0.9: "
                     + ("never" if np.isinf(med) else f"{med:g}"))
    return (f"magrpo-toy: {len(results)} runs x {cfg.iterations} iterations; "
            + "; ".join(parts))


HANDLERS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "preprocess": cmd_preprocess,
    "train-predictor": cmd_train_predictor,
    "stack": cmd_stack,
    "index": cmd_index,
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "rewards-audit": cmd_rewards_audit,
    "magrpo-toy": cmd_magrpo_toy,
}


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lithoflow",
        description="Depth-aligned lithology labeling pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="run configuration file (INI)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override the run seed")
    common.add_argument("--out-dir", metavar="DIR",
                        help="override the output directory")
    common.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", dest="overrides",
                        help="override any config key (repeatable)")

    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "synth": "generate labeled synthetic wells plus split and stats files",
        "ingest": "validate external CSVs into the canonical layout",
        "preprocess": "clean wells and refresh split and stats files",
        "train-predictor": "fit the stand-in window predictor",
        "stack": "out-of-fold stacking with a master combiner",
        "index": "build the retrieval index and the transition model",
        "run": "label the test wells with the full workflow",
        "evaluate": "score predictions and write the metrics table",
        "rewards-audit": "attach process rewards to the logged trajectory",
        "magrpo-toy": "train the toy policy under both advantage modes",
    }
    for name, desc in descriptions.items():
        p = sub.add_parser(name, parents=[common], help=desc, description=desc)
        if name == "magrpo-toy":
            p.add_argument("--mode", choices=["ma", "grpo", "both"],
                           help="advantage mode (default: optimizer.mode)")
            p.add_argument("--seeds", type=int, default=1, metavar="N",
                           help="number of consecutive seeds to run")
    return parser


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config)
    for pair in args.overrides:
        if "=" not in pair:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {pair!r}")
        dotted, raw = pair.split("=", 1)
        cfg = set_key(cfg, dotted.strip(), raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    validate_config(cfg)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _build_config(args)
        if args.command == "magrpo-toy" and args.seeds < 1:
            raise ConfigError("--seeds must be at least 1")
        summary = HANDLERS[args.command](cfg, args)
    except ConfigError as err:
        print(f"lithoflow {args.command}: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as err:
        print(f"lithoflow {args.command}: {err}", file=sys.stderr)
        return EXIT_MISSING
    except (ArtifactError, WellDataError, PerceptionError, AnalysisError,
            StackingError, WorkflowError, RewardError, MetricsError,
            MagrpoError) as err:
        print(f"lithoflow {args.command}: error: {err}", file=sys.stderr)
        return EXIT_FAILURE
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
