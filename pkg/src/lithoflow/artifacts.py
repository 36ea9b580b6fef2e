"""Run artifacts: atomic file writes, manifests, and small shared formats.

Every file a command emits goes through :func:`atomic_path`, so readers
never observe half-written artifacts.  Manifests carry the run id, the
config hash, the seed, the full canonical config text, and a checksum per
artifact; nothing in them depends on wall-clock time, which is what makes
"run it twice, compare bytes" a meaningful determinism check.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import os
import tempfile
from pathlib import Path

from .config import RunConfig, canonical_dump

STATS_FORMAT = "lithoflow-stats v1"
SPLITS_FORMAT = "lithoflow-splits v1"

PREDICTIONS_HEADER = ["well_id", "depth", "position", "truth", "pred"]
METRICS_HEADER = ["dataset", "precision", "recall", "f1", "fragmentation"]


class ArtifactError(ValueError):
    """Raised for malformed artifact files."""


class MissingArtifactError(FileNotFoundError):
    """Raised when a command needs an artifact another command has not produced."""


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temp path in the target directory; rename over on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def require(path, hint: str) -> Path:
    """Return the path if it exists, else explain which command produces it."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path} ({hint})")
    return path


# ---------------------------------------------------------------------------
# run identity and manifests
# ---------------------------------------------------------------------------

def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_dump(cfg).encode("utf-8")).hexdigest()


def run_id(command: str, cfg: RunConfig) -> str:
    return f"{command}-{config_hash(cfg)[:8]}-{cfg.seed}"


def write_manifest(out_dir, command: str, cfg: RunConfig, artifacts) -> Path:
    """Record what a command produced, pinned to config hash and seed."""
    out_dir = Path(out_dir)
    lines = [
        f"run_id: {run_id(command, cfg)}",
        f"command: {command}",
        f"seed: {cfg.seed}",
        f"config_hash: {config_hash(cfg)}",
        "artifacts:",
    ]
    for path in artifacts:
        path = Path(path)
        lines.append(f"  {path.name} sha256={file_sha256(path)}")
    lines.append("config:")
    for cfg_line in canonical_dump(cfg).splitlines():
        lines.append(f"  {cfg_line}")
    path = out_dir / f"manifest-{command}.txt"
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict:
    """Parse the header fields and artifact checksums back out."""
    info: dict = {"artifacts": {}}
    section = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line == "artifacts:":
            section = "artifacts"
            continue
        if line == "config:":
            section = "config"
            info["config"] = []
            continue
        if section == "artifacts" and line.startswith("  "):
            name, _, digest = line.strip().partition(" sha256=")
            info["artifacts"][name] = digest
        elif section == "config" and line.startswith("  "):
            info["config"].append(line[2:])
        elif ":" in line:
            key, _, value = line.partition(":")
            info[key.strip()] = value.strip()
    return info


# ---------------------------------------------------------------------------
# channel statistics
# ---------------------------------------------------------------------------

def save_stats(stats: dict, transforms: dict, path) -> None:
    """Per-channel standardization constants plus the transform that made them."""
    lines = [STATS_FORMAT]
    for name in sorted(stats):
        mu, sigma = stats[name]
        transform = transforms.get(name, "linear")
        lines.append(f"channel\t{name}\t{transform}\t{mu:.17g}\t{sigma:.17g}")
    with atomic_path(path) as tmp:
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_stats(path) -> tuple[dict, dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != STATS_FORMAT:
        raise ArtifactError(f"{path}: not a {STATS_FORMAT} file")
    stats, transforms = {}, {}
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5 or parts[0] != "channel":
            raise ArtifactError(f"{path}: malformed stats line {line!r}")
        _, name, transform, mu, sigma = parts
        stats[name] = (float(mu), float(sigma))
        transforms[name] = transform
    return stats, transforms


# ---------------------------------------------------------------------------
# train/test split listing
# ---------------------------------------------------------------------------

def save_splits(roles: dict, path) -> None:
    """``well_id -> role`` mapping, one line per well, sorted for stability."""
    lines = [SPLITS_FORMAT]
    for well_id in sorted(roles):
        role = roles[well_id]
        if role not in ("train", "test"):
            raise ArtifactError(f"bad role {role!r} for well {well_id!r}")
        lines.append(f"{role}\t{well_id}")
    with atomic_path(path) as tmp:
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_splits(path) -> dict:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != SPLITS_FORMAT:
        raise ArtifactError(f"{path}: not a {SPLITS_FORMAT} file")
    roles = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[0] not in ("train", "test"):
            raise ArtifactError(f"{path}: malformed split line {line!r}")
        roles[parts[1]] = parts[0]
    return roles


# ---------------------------------------------------------------------------
# predictions and metrics tables
# ---------------------------------------------------------------------------

def save_predictions(rows, path) -> None:
    """Rows of (well_id, depth, position, truth-or-None, pred)."""
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(PREDICTIONS_HEADER)
            for well_id, depth, position, truth, pred in rows:
                writer.writerow([
                    well_id, f"{depth:.6f}", int(position),
                    "" if truth is None else int(truth), int(pred),
                ])


def load_predictions(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PREDICTIONS_HEADER:
            raise ArtifactError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append({
                "well_id": rec["well_id"],
                "depth": float(rec["depth"]),
                "position": int(rec["position"]),
                "truth": None if rec["truth"] == "" else int(rec["truth"]),
                "pred": int(rec["pred"]),
            })
    return rows


def save_metrics(rows, path) -> None:
    """Rows of (dataset, precision, recall, f1, fragmentation)."""
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for dataset, precision, recall, f1, frag in rows:
                writer.writerow([
                    dataset, f"{precision:.6f}", f"{recall:.6f}",
                    f"{f1:.6f}", f"{frag:.6f}",
                ])


def load_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ArtifactError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            {
                "dataset": rec["dataset"],
                "precision": float(rec["precision"]),
                "recall": float(rec["recall"]),
                "f1": float(rec["f1"]),
                "fragmentation": float(rec["fragmentation"]),
            }
            for rec in reader
        ]
