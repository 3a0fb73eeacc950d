"""Label co-occurrence counting and the conditional-probability correlation matrix."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset

RAW = "raw_conditional"
ROW_STOCHASTIC = "row_stochastic"
_MODE_ALIASES = {"raw": RAW, RAW: RAW, "row-stochastic": ROW_STOCHASTIC, ROW_STOCHASTIC: ROW_STOCHASTIC}


def canonical_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ValueError(f"unknown correlation matrix mode {mode!r}") from None


@dataclass(frozen=True)
class CooccurrenceCounts:
    """``M[i, j]`` cases carrying both labels; ``M[i, i]`` cases carrying label ``i``."""

    M: np.ndarray
    n_cases: int

    def __eq__(self, other):
        if not isinstance(other, CooccurrenceCounts):
            return NotImplemented
        return self.n_cases == other.n_cases and np.array_equal(self.M, other.M)

    __hash__ = None


@dataclass(frozen=True)
class CorrelationMatrix:
    CM: np.ndarray
    mode: str
    source_counts: CooccurrenceCounts


def count_cooccurrence(dataset: Dataset) -> CooccurrenceCounts:
    """Count label pairs over the train and val cases of ``dataset``.

    Test cases are ignored, so passing a full dataset is safe.
    """
    pool = dataset.select("train", "val")
    if len(pool) == 0:
        raise ValueError("cannot count co-occurrences over an empty train+val set")
    y = pool.label_matrix().astype(np.int64)
    M = y.T @ y
    return CooccurrenceCounts(M, len(pool))


def build_conditional_matrix(counts: CooccurrenceCounts) -> CorrelationMatrix:
    """``CM[i, j] = p(L_j | L_i) = M_ij / M_i``; rows of never-seen labels are zero."""
    M = counts.M.astype(np.float64)
    occ = np.diag(M).copy()
    CM = np.zeros_like(M)
    seen = occ > 0
    CM[seen] = M[seen] / occ[seen, None]
    return CorrelationMatrix(CM, RAW, counts)


def normalize_matrix(cm: CorrelationMatrix, mode: str) -> CorrelationMatrix:
    mode = canonical_mode(mode)
    if cm.mode != RAW:
        raise ValueError(f"expected a {RAW} matrix, got {cm.mode}")
    if mode == RAW:
        return cm
    sums = cm.CM.sum(axis=1)
    out = np.zeros_like(cm.CM)
    nz = sums > 0
    out[nz] = cm.CM[nz] / sums[nz, None]
    return CorrelationMatrix(out, ROW_STOCHASTIC, cm.source_counts)


def correlation_from_dataset(dataset: Dataset, mode: str = RAW) -> CorrelationMatrix:
    return normalize_matrix(build_conditional_matrix(count_cooccurrence(dataset)), mode)


def save_cm_csv(cm: np.ndarray, class_keys, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + list(class_keys))
        for key, row in zip(class_keys, cm):
            writer.writerow([key] + [repr(float(v)) for v in row])
    return path


def load_cm_csv(path) -> tuple[np.ndarray, list[str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    keys = rows[0][1:]
    if [r[0] for r in rows[1:]] != keys:
        raise ValueError("row labels do not match the header")
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    if values.shape != (len(keys), len(keys)):
        raise ValueError(f"expected a square {len(keys)}x{len(keys)} matrix, got {values.shape}")
    return values, keys
