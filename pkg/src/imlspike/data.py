"""Synthetic sequence-classification data, CSV feature files and batching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    LabelRangeError,
    MissingFileError,
    NonNumericError,
    PreconditionError,
    RaggedRowError,
)
from .numeric import Rng


@dataclass
class Utterance:
    features: np.ndarray  # [L, C_in]
    label: int
    id: str

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class Batch:
    features: np.ndarray  # [B, L_max, C_in], zero beyond valid_lengths
    valid_lengths: np.ndarray
    labels: np.ndarray
    ids: list[str]

    def __len__(self):
        return len(self.labels)


def gen_synthetic(num_per_class: int, seed: int, num_classes: int = 4, C_in: int = 16,
                  min_len: int = 24, max_len: int = 40, noise: float = 0.1) -> list[Utterance]:
    """Class ``k``: ``sin(2*pi*(k+1)*t/L + c*pi/C_in)`` plus Gaussian noise.

    Lengths are uniform in ``[min_len, max_len]``.
    """
    rng = Rng(seed)
    out = []
    c = np.arange(C_in)[None, :]
    for k in range(num_classes):
        f = 1 + k
        for i in range(num_per_class):
            L = int(rng.integers(min_len, max_len))
            t = np.arange(L)[:, None]
            x = np.sin(2 * math.pi * f * t / L + c * math.pi / C_in) + noise * rng.normal((L, C_in))
            out.append(Utterance(x, k, f"c{k}_{i:05d}"))
    return out


def write_features_csv(features, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(features):
            w.writerow([f"{v:.9g}" for v in row])


def read_features_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError("feature file not found", path)
    rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise RaggedRowError(f"row {lineno} has {len(row)} columns, expected {width}", path, lineno)
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise NonNumericError(f"non-numeric cell in row {lineno}", path, lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise NonNumericError(f"non-finite value in row {lineno}", path, lineno)
            rows.append(values)
    if not rows:
        raise PreconditionError(f"{path}: feature file is empty")
    return np.array(rows, dtype=np.float64)


def load_manifest(path, num_classes: int | None = None) -> list[Utterance]:
    """Parse ``<feature_csv_path>,<label>`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError("manifest not found", path)
    utts = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fpath, sep, label_text = line.rpartition(",")
        if not sep:
            raise NonNumericError("expected '<path>,<label>'", path, lineno)
        try:
            label = int(label_text.strip())
        except ValueError:
            raise NonNumericError(f"label {label_text.strip()!r} is not an integer", path, lineno) from None
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise LabelRangeError(f"label {label} outside [0, {num_classes})", path, lineno)
        fpath = Path(fpath.strip())
        if not fpath.is_absolute():
            fpath = path.parent / fpath
        if not fpath.is_file():
            raise MissingFileError(f"feature file {fpath} not found", path, lineno)
        utts.append(Utterance(read_features_csv(fpath), label, fpath.stem))
    return utts


def write_manifest(utterances, directory) -> Path:
    """Write each utterance as CSV plus a ``manifest.txt`` listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utterances:
        name = f"{u.id}.csv"
        write_features_csv(u.features, directory / name)
        lines.append(f"{name},{u.label}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def pad_batch(utterances) -> Batch:
    utterances = list(utterances)
    if not utterances:
        raise PreconditionError("cannot batch an empty list")
    L_max = max(u.length for u in utterances)
    C = utterances[0].features.shape[1]
    feats = np.zeros((len(utterances), L_max, C))
    for i, u in enumerate(utterances):
        feats[i, :u.length] = u.features
    return Batch(feats, np.array([u.length for u in utterances]),
                 np.array([u.label for u in utterances]), [u.id for u in utterances])


def make_batches(utterances, batch_size: int, shuffle_seed: int | None = None) -> list[Batch]:
    utterances = list(utterances)
    if not utterances:
        raise PreconditionError("no utterances to batch")
    if batch_size < 1:
        raise PreconditionError("batch_size must be >= 1")
    order = np.arange(len(utterances))
    if shuffle_seed is not None:
        order = Rng(shuffle_seed).permutation(len(utterances))
    return [pad_batch([utterances[j] for j in order[i:i + batch_size]])
            for i in range(0, len(order), batch_size)]
