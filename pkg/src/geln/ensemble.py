"""Convex combination of prediction sets and the validation grid search over weights."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import LabelSchema
from .metrics import auc_columns


@dataclass(frozen=True)
class PredictionSet:
    """Per-case per-category probability blocks from one source."""

    probs: np.ndarray
    case_ids: tuple[str, ...]
    source: str

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "case_ids", tuple(self.case_ids))
        if probs.ndim != 2 or probs.shape[0] != len(self.case_ids):
            raise ValueError(f"expected ({len(self.case_ids)}, C) probabilities, got {probs.shape}")

    def check(self, schema: LabelSchema, tol: float = 1e-9) -> None:
        if self.probs.shape[1] != schema.n_classes:
            raise ValueError(f"{self.source}: width {self.probs.shape[1]} != {schema.n_classes}")
        if np.any(self.probs < -tol) or np.any(self.probs > 1 + tol):
            raise ValueError(f"{self.source}: probabilities outside [0, 1]")
        for block in schema.blocks:
            if not np.allclose(self.probs[:, block].sum(axis=1), 1.0, atol=tol, rtol=0):
                raise ValueError(f"{self.source}: a category block does not sum to 1")


@dataclass(frozen=True)
class EnsembleWeights:
    sources: tuple[str, ...]
    weights: tuple[float, ...]
    step: float | None
    objective: float | None

    def to_dict(self) -> dict:
        return {
            "sources": list(self.sources),
            "weights": [round(w, 12) for w in self.weights],
            "step": self.step,
            "objective": None if self.objective is None else round(self.objective, 6),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EnsembleWeights":
        return cls(tuple(doc["sources"]), tuple(doc["weights"]), doc["step"], doc["objective"])


def uniform_weights(sources: Sequence[str], objective: float | None = None) -> EnsembleWeights:
    k = len(sources)
    return EnsembleWeights(tuple(sources), tuple([1.0 / k] * k), None, objective)


def simplex_grid(k: int, step: float) -> list[tuple[float, ...]]:
    """Every point of the k-simplex whose coordinates are multiples of ``step``."""
    n = round(1.0 / step)
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"grid step must divide 1 evenly, got {step}")
    points = []
    for cut in itertools.combinations(range(n + k - 1), k - 1):
        parts = np.diff((-1,) + cut + (n + k - 1,)) - 1
        points.append(tuple(int(p) / n for p in parts))
    return points


def _check_aligned(predictions: Sequence[PredictionSet]) -> None:
    if not predictions:
        raise ValueError("need at least one prediction set")
    ref = predictions[0]
    for p in predictions[1:]:
        if p.case_ids != ref.case_ids or p.probs.shape != ref.probs.shape:
            raise ValueError(f"prediction sets {ref.source} and {p.source} cover different cases")


def _mix(weights, arrays) -> np.ndarray:
    out = weights[0] * arrays[0]
    for w, a in zip(weights[1:], arrays[1:]):
        out = out + w * a
    return out


def combine(predictions: Sequence[PredictionSet], weights, source: str = "combined") -> PredictionSet:
    _check_aligned(predictions)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(predictions),):
        raise ValueError(f"need {len(predictions)} weights, got {weights.shape}")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    return PredictionSet(_mix(weights, [p.probs for p in predictions]), predictions[0].case_ids, source)


class EmptyValidationError(ValueError):
    pass


def search_weights(predictions: Sequence[PredictionSet], val_labels: np.ndarray,
                   step: float = 0.05) -> EnsembleWeights:
    """Exhaustive simplex grid search maximising validation mean one-vs-rest AUC.

    The uniform point is always evaluated and wins every tie it is part of;
    other ties go to the larger weight on the first source, then the next, and
    so on. Raises :class:`EmptyValidationError` when there is nothing to
    validate on, in which case callers fall back to uniform weights.
    """
    _check_aligned(predictions)
    k = len(predictions)
    val_labels = np.asarray(val_labels)
    if val_labels.shape[0] == 0:
        raise EmptyValidationError("empty validation set")
    if val_labels.shape != predictions[0].probs.shape:
        raise ValueError(f"labels {val_labels.shape} do not match predictions {predictions[0].probs.shape}")
    arrays = [p.probs for p in predictions]
    uniform = tuple([1.0 / k] * k)
    grid = simplex_grid(k, step)
    if uniform not in grid:
        grid.append(uniform)
    scores = [float(auc_columns(_mix(w, arrays), val_labels).mean()) for w in grid]
    best_value = max(scores)
    best = [w for w, s in zip(grid, scores) if s == best_value]
    chosen = uniform if uniform in best else max(best)
    return EnsembleWeights(
        tuple(p.source for p in predictions), chosen, step, scores[grid.index(chosen)]
    )
