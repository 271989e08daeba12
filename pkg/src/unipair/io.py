"""Embedding CSV files, curve CSVs, JSON configs and run manifests."""

import csv
import json
from pathlib import Path

import numpy as np

from unipair import __version__
from unipair.core import EmbeddingBatch, normalize_rows
from unipair.errors import ConfigError, CountMismatch, DimMismatch, FormatError
from unipair.synthlab import ExperimentRecord, SynthConfig, TrainConfig

CURVES_HEADER = [
    "epoch",
    "loss",
    "r1_i2t",
    "r5_i2t",
    "r10_i2t",
    "r1_t2i",
    "r5_t2i",
    "r10_t2i",
    "rsum",
    "mean_pos_sim",
    "mean_hardneg_sim",
    "gap",
]


def fmt(value) -> str:
    """Locale-free text for a CSV cell; floats get 17 significant digits."""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def save_embeddings(path: Path, m) -> None:
    """Write rows as `# dim=<D>` followed by one comma-separated row per line."""
    m = np.asarray(m, dtype=np.float64)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# dim={m.shape[1]}\n")
        for row in m:
            f.write(",".join(fmt(x) for x in row) + "\n")


def read_embedding_file(path: Path) -> np.ndarray:
    """
    Parse one embedding CSV without normalizing it.

    Raises:
        FormatError: naming the line of a bad header, value or row length
    """
    rows = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if not header.startswith("# dim="):
            raise FormatError(path, 1, f"expected '# dim=<D>' header, got {header!r}")
        try:
            dim = int(header[len("# dim=") :])
        except ValueError:
            raise FormatError(path, 1, f"bad dimension in header {header!r}") from None
        if dim < 2:
            raise FormatError(path, 1, f"dimension must be >= 2, got {dim}")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != dim:
                raise FormatError(path, lineno, f"expected {dim} values, got {len(cells)}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError as e:
                raise FormatError(path, lineno, str(e)) from None
    if not rows:
        return np.zeros((0, dim))
    return np.array(rows, dtype=np.float64)


def load_embeddings(path_v: Path, path_t: Path) -> tuple[EmbeddingBatch, EmbeddingBatch]:
    """
    Load a visual and a text embedding file, paired by row index.

    Rows are normalized on load.

    Raises:
        FormatError: if either file is malformed
        DimMismatch: if the files declare different dimensions
        CountMismatch: if the files hold different numbers of rows
    """
    v = read_embedding_file(path_v)
    t = read_embedding_file(path_t)
    if v.shape[1] != t.shape[1]:
        raise DimMismatch(path_v, v.shape[1], path_t, t.shape[1])
    if v.shape[0] != t.shape[0]:
        raise CountMismatch(path_v, v.shape[0], path_t, t.shape[0])
    if v.shape[0] == 0:
        raise FormatError(path_v, 2, "no embedding rows")
    return normalize_rows(v), normalize_rows(t)


def write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    """Write a CSV with a fixed header; floats use `fmt`."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(x) for x in row])


def curve_row(record: ExperimentRecord) -> list:
    m = record.metrics
    g = record.gaps
    return [
        record.epoch,
        record.loss,
        m.r1_i2t,
        m.r5_i2t,
        m.r10_i2t,
        m.r1_t2i,
        m.r5_t2i,
        m.r10_t2i,
        m.rsum,
        g.mean_pos,
        g.mean_hardneg,
        g.gap,
    ]


def write_curves(path: Path, records: list[ExperimentRecord]) -> None:
    """One `curves.csv` row per snapshot."""
    write_rows(path, CURVES_HEADER, [curve_row(r) for r in records])


COMMAND_SECTIONS = ("sweep", "compare")


def _read_config(path: Path) -> dict:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(path, e.lineno, e.msg) from None
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    if "command" in data and "config" in data:
        data = data["config"]
    unknown = set(data) - {"synth", "train", *COMMAND_SECTIONS}
    if unknown:
        raise ConfigError("config", f"unknown keys {sorted(unknown)} in {path}")
    return data


def load_config(path: Path) -> tuple[SynthConfig, TrainConfig]:
    """
    Read a JSON run config with optional `synth` and `train` sections.

    A run manifest is accepted too; its `config` entry is used.

    Raises:
        ConfigError: on unknown keys or invalid values, naming the field
    """
    data = _read_config(path)
    try:
        synth = SynthConfig.from_dict(data.get("synth", {}))
        train = TrainConfig.from_dict(data.get("train", {}))
    except TypeError as e:
        raise ConfigError("config", f"{path}: {e}") from None
    return synth, train


def load_command_args(path: Path, command: str) -> dict:
    """
    The `sweep` or `compare` section of a config, or {} when it has none.

    These sections hold the arguments a manifest was written with, so
    `unipair sweep --config manifest.json` repeats the same sweep.
    """
    section = _read_config(path).get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(command, f"{path}: must be a JSON object")
    allowed = {"sweep": {"axis", "values"}, "compare": {"losses", "fraction"}}[command]
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(command, f"unknown keys {sorted(unknown)} in {path}")
    return section


def resolved_config(synth: SynthConfig, train: TrainConfig) -> dict:
    return {"synth": synth.to_dict(), "train": train.to_dict()}


def write_manifest(path: Path, command: str, config: dict, seed: int, outputs: list[Path]) -> None:
    """Record everything needed to rerun a command next to its outputs."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "outputs": [str(p) for p in outputs],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
