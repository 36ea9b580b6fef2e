"""Run configuration: a sectioned key-value file with validated defaults.

One :class:`RunConfig` instance carries every knob the command line needs:
data locations, preprocessing geometry, tool parameters, reflector
thresholds, reward constants, stacking choices, and the toy optimizer
settings.  Files use INI syntax; every key has a default, so an absent
file, an empty file, and a file that only overrides one value are all
valid.  Unknown sections or keys are rejected rather than ignored, which
turns typos into immediate errors instead of silently dropped settings.

Credentials never live in the file: a remote reasoning endpoint reads its
bearer token from the ``LITHOFLOW_REASONER_TOKEN`` environment variable.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

REASONER_TOKEN_ENV = "LITHOFLOW_REASONER_TOKEN"


class ConfigError(ValueError):
    """Raised for malformed files, unknown keys, or out-of-range values."""


@dataclass
class RunConfig:
    """Every run-level setting, with the documented defaults."""

    # data
    out_dir: str = "runs"
    train_csv: tuple[str, ...] = ()
    test_csv: tuple[str, ...] = ()
    well_column: str = "well_id"
    depth_column: str = "depth"
    label_column: str = "label"
    channel_columns: tuple[str, ...] = ()

    # preprocess
    window_len: int = 16
    stride: int = 4
    test_stride: int = 0            # 0 means: use window_len
    max_gap_m: float = 2.0
    log_channels: tuple[str, ...] = ()
    bounds: dict = field(default_factory=dict)  # channel -> (lo, hi)

    # synth
    synth_wells: int = 8
    synth_length: int = 360
    synth_classes: int = 4
    synth_channels: int = 3
    synth_stay_prob: float = 0.9
    synth_emission_sep: float = 1.5
    synth_emission_std: float = 0.5
    synth_interval: float = 0.5
    synth_test_fraction: float = 0.25

    # tools
    reasoner: str = "stub"          # stub | remote
    reasoner_url: str = ""
    retrieve_k: int = 5
    metric_weights: dict = field(
        default_factory=lambda: {"euclidean": 1.0, "manhattan": 1.0, "cosine": 1.0}
    )
    narrate_channel: str = ""       # empty means: first channel
    slope_tol: float = 0.05
    laplace: float = 1.0
    validator_threshold: float = 0.05
    pool_alpha: float = 0.5

    # reflector
    confidence_gap: float = 0.15

    # rewards
    eta_1: float = 0.5
    eta_2: float = 1.0
    eta_3: float = 1.0
    pass_n: int = 50
    pass_k: int = 5
    helpful_boost: float = 0.3
    min_thickness: float = 0.0      # 0 means: 3 x sampling interval

    # stacking
    folds: int = 5
    predictor: str = "knn"          # knn | logistic
    knn_k: int = 5
    logistic_lr: float = 0.5
    logistic_epochs: int = 200
    logistic_l2: float = 1e-3

    # optimizer
    mode: str = "ma"                # ma | grpo
    group_size: int = 8
    kl_weight: float = 0.04
    clip_low: float = 0.1
    clip_high: float = 0.3
    learning_rate: float = 0.2
    iterations: int = 160

    seed: int = 0

    @property
    def effective_test_stride(self) -> int:
        return self.test_stride if self.test_stride > 0 else self.window_len


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------

def _parse_str(raw: str) -> str:
    return raw.strip()


def _parse_int(raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}") from None


def _parse_float(raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError:
        raise ConfigError(f"expected a number, got {raw!r}") from None


def _parse_list(raw: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def _parse_weights(raw: str) -> dict:
    """``metric:weight`` pairs, comma separated."""
    out = {}
    for part in _parse_list(raw):
        if ":" not in part:
            raise ConfigError(f"expected metric:weight, got {part!r}")
        name, value = part.split(":", 1)
        out[name.strip()] = _parse_float(value)
    return out


def _parse_bounds(raw: str) -> dict:
    """``channel:lo:hi`` triplets, comma separated."""
    out = {}
    for part in _parse_list(raw):
        pieces = part.split(":")
        if len(pieces) != 3:
            raise ConfigError(f"expected channel:lo:hi, got {part!r}")
        name, lo, hi = pieces
        out[name.strip()] = (_parse_float(lo), _parse_float(hi))
    return out


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(value)
    if isinstance(value, dict):
        parts = []
        for key in sorted(value):
            v = value[key]
            if isinstance(v, tuple):
                parts.append(f"{key}:{v[0]:g}:{v[1]:g}")
            else:
                parts.append(f"{key}:{v:g}")
        return ", ".join(parts)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


# section -> key -> (RunConfig attribute, parser)
SCHEMA = {
    "data": {
        "out_dir": ("out_dir", _parse_str),
        "train_csv": ("train_csv", _parse_list),
        "test_csv": ("test_csv", _parse_list),
        "well_column": ("well_column", _parse_str),
        "depth_column": ("depth_column", _parse_str),
        "label_column": ("label_column", _parse_str),
        "channel_columns": ("channel_columns", _parse_list),
    },
    "preprocess": {
        "window_len": ("window_len", _parse_int),
        "stride": ("stride", _parse_int),
        "test_stride": ("test_stride", _parse_int),
        "max_gap_m": ("max_gap_m", _parse_float),
        "log_channels": ("log_channels", _parse_list),
        "bounds": ("bounds", _parse_bounds),
    },
    "synth": {
        "wells": ("synth_wells", _parse_int),
        "length": ("synth_length", _parse_int),
        "classes": ("synth_classes", _parse_int),
        "channels": ("synth_channels", _parse_int),
        "stay_prob": ("synth_stay_prob", _parse_float),
        "emission_sep": ("synth_emission_sep", _parse_float),
        "emission_std": ("synth_emission_std", _parse_float),
        "interval": ("synth_interval", _parse_float),
        "test_fraction": ("synth_test_fraction", _parse_float),
    },
    "tools": {
        "reasoner": ("reasoner", _parse_str),
        "reasoner_url": ("reasoner_url", _parse_str),
        "retrieve_k": ("retrieve_k", _parse_int),
        "metric_weights": ("metric_weights", _parse_weights),
        "narrate_channel": ("narrate_channel", _parse_str),
        "slope_tol": ("slope_tol", _parse_float),
        "laplace": ("laplace", _parse_float),
        "validator_threshold": ("validator_threshold", _parse_float),
        "pool_alpha": ("pool_alpha", _parse_float),
    },
    "reflector": {
        "confidence_gap": ("confidence_gap", _parse_float),
    },
    "rewards": {
        "eta_1": ("eta_1", _parse_float),
        "eta_2": ("eta_2", _parse_float),
        "eta_3": ("eta_3", _parse_float),
        "pass_n": ("pass_n", _parse_int),
        "pass_k": ("pass_k", _parse_int),
        "helpful_boost": ("helpful_boost", _parse_float),
        "min_thickness": ("min_thickness", _parse_float),
    },
    "stacking": {
        "folds": ("folds", _parse_int),
        "predictor": ("predictor", _parse_str),
        "knn_k": ("knn_k", _parse_int),
        "logistic_lr": ("logistic_lr", _parse_float),
        "logistic_epochs": ("logistic_epochs", _parse_int),
        "logistic_l2": ("logistic_l2", _parse_float),
    },
    "optimizer": {
        "mode": ("mode", _parse_str),
        "group_size": ("group_size", _parse_int),
        "kl_weight": ("kl_weight", _parse_float),
        "clip_low": ("clip_low", _parse_float),
        "clip_high": ("clip_high", _parse_float),
        "learning_rate": ("learning_rate", _parse_float),
        "iterations": ("iterations", _parse_int),
    },
    "run": {
        "seed": ("seed", _parse_int),
    },
}

_ATTR_TO_KEY = {
    attr: (section, key)
    for section, keys in SCHEMA.items()
    for key, (attr, _) in keys.items()
}


def load_config(path=None) -> RunConfig:
    """Read a config file (or produce pure defaults) and validate it."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no such config file: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from err
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                attr, parse = SCHEMA[section][key]
                try:
                    setattr(cfg, attr, parse(raw))
                except ConfigError as err:
                    raise ConfigError(f"{path}: [{section}] {key}: {err}") from None
    validate_config(cfg)
    return cfg


def set_key(cfg: RunConfig, dotted: str, raw: str) -> RunConfig:
    """Apply one ``section.key=value`` override; returns a new config."""
    if "." not in dotted:
        raise ConfigError(f"override must look like section.key, got {dotted!r}")
    section, key = dotted.split(".", 1)
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    attr, parse = SCHEMA[section][key]
    return replace(cfg, **{attr: parse(raw)})


def validate_config(cfg: RunConfig) -> None:
    """Range and consistency checks; raises ConfigError on the first failure."""
    def require(cond: bool, message: str):
        if not cond:
            raise ConfigError(message)

    require(cfg.window_len >= 2, "preprocess.window_len must be at least 2")
    require(cfg.stride >= 1, "preprocess.stride must be at least 1")
    require(cfg.test_stride >= 0, "preprocess.test_stride must be non-negative")
    require(cfg.max_gap_m >= 0, "preprocess.max_gap_m must be non-negative")
    for name, (lo, hi) in cfg.bounds.items():
        require(lo < hi, f"preprocess.bounds: empty range for channel {name!r}")

    require(cfg.synth_wells >= 2, "synth.wells must be at least 2")
    require(cfg.synth_length >= cfg.window_len,
            "synth.length must be at least the window length")
    require(cfg.synth_classes >= 2, "synth.classes must be at least 2")
    require(cfg.synth_channels >= 1, "synth.channels must be at least 1")
    require(0 < cfg.synth_stay_prob < 1, "synth.stay_prob must lie in (0, 1)")
    require(cfg.synth_emission_std > 0, "synth.emission_std must be positive")
    require(cfg.synth_interval > 0, "synth.interval must be positive")
    require(0 < cfg.synth_test_fraction < 1,
            "synth.test_fraction must lie in (0, 1)")

    require(cfg.reasoner in ("stub", "remote"),
            "tools.reasoner must be 'stub' or 'remote'")
    if cfg.reasoner == "remote":
        require(bool(cfg.reasoner_url), "tools.reasoner_url required for remote")
    require(cfg.retrieve_k >= 1, "tools.retrieve_k must be at least 1")
    require(all(w >= 0 for w in cfg.metric_weights.values()),
            "tools.metric_weights must be non-negative")
    require(sum(cfg.metric_weights.values()) > 0,
            "tools.metric_weights must have positive sum")
    require(0 <= cfg.slope_tol, "tools.slope_tol must be non-negative")
    require(cfg.laplace > 0, "tools.laplace must be positive")
    require(0 <= cfg.validator_threshold <= 1,
            "tools.validator_threshold must lie in [0, 1]")
    require(0 <= cfg.pool_alpha <= 1, "tools.pool_alpha must lie in [0, 1]")
    require(0 <= cfg.confidence_gap <= 1,
            "reflector.confidence_gap must lie in [0, 1]")

    for name in ("eta_1", "eta_2", "eta_3"):
        require(getattr(cfg, name) >= 0, f"rewards.{name} must be non-negative")
    require(cfg.pass_n >= 1, "rewards.pass_n must be at least 1")
    require(1 <= cfg.pass_k <= cfg.pass_n,
            "rewards.pass_k must lie in [1, pass_n]")
    require(0 <= cfg.helpful_boost < 1, "rewards.helpful_boost must lie in [0, 1)")
    require(cfg.min_thickness >= 0, "rewards.min_thickness must be non-negative")

    require(cfg.folds >= 2, "stacking.folds must be at least 2")
    require(cfg.predictor in ("knn", "logistic"),
            "stacking.predictor must be 'knn' or 'logistic'")
    require(cfg.knn_k >= 1, "stacking.knn_k must be at least 1")
    require(cfg.logistic_lr > 0, "stacking.logistic_lr must be positive")
    require(cfg.logistic_epochs >= 1, "stacking.logistic_epochs must be at least 1")
    require(cfg.logistic_l2 >= 0, "stacking.logistic_l2 must be non-negative")

    require(cfg.mode in ("ma", "grpo"), "optimizer.mode must be 'ma' or 'grpo'")
    require(cfg.group_size >= 2, "optimizer.group_size must be at least 2")
    require(cfg.kl_weight >= 0, "optimizer.kl_weight must be non-negative")
    require(0 < cfg.clip_low < 1, "optimizer.clip_low must lie in (0, 1)")
    require(0 < cfg.clip_high < 1, "optimizer.clip_high must lie in (0, 1)")
    require(cfg.learning_rate > 0, "optimizer.learning_rate must be positive")
    require(cfg.iterations >= 1, "optimizer.iterations must be at least 1")

    for path in cfg.train_csv + cfg.test_csv:
        require(Path(path).exists(), f"data file does not exist: {path}")


def canonical_dump(cfg: RunConfig) -> str:
    """Deterministic full text form: every key, sorted, one per line.

    This string is what run manifests hash, so it must not depend on dict
    ordering or on which keys the source file happened to spell out.
    """
    lines = []
    for section in sorted(SCHEMA):
        for key in sorted(SCHEMA[section]):
            attr, _ = SCHEMA[section][key]
            lines.append(f"{section}.{key} = {_fmt(getattr(cfg, attr))}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path) -> None:
    """Write an INI file that round-trips through load_config."""
    parser = configparser.ConfigParser(interpolation=None)
    for section in sorted(SCHEMA):
        parser.add_section(section)
        for key in sorted(SCHEMA[section]):
            attr, _ = SCHEMA[section][key]
            parser.set(section, key, _fmt(getattr(cfg, attr)))
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
