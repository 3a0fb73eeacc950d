"""Multi-category multi-label data model, manifests and the synthetic generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MODALITIES = ("clinical", "dermoscopy")
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Validation failure in a manifest, naming the case and field involved."""

    def __init__(self, message: str, case_id: str | None = None, field_path: str | None = None):
        self.case_id = case_id
        self.field_path = field_path
        where = []
        if case_id is not None:
            where.append(f"case {case_id!r}")
        if field_path is not None:
            where.append(f"field {field_path}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True)
class LabelSchema:
    """Ordered categories, each with an ordered list of mutually exclusive classes.

    Every (category, class) pair gets a global index in declaration order, so
    category ``i`` occupies the contiguous block ``blocks[i]`` of the
    ``n_classes``-wide label space.
    """

    categories: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        cats = tuple((str(name), tuple(str(c) for c in classes)) for name, classes in self.categories)
        object.__setattr__(self, "categories", cats)
        if not cats:
            raise ValueError("schema needs at least one category")
        names = [name for name, _ in cats]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate category names in {names}")
        for name, classes in cats:
            if len(classes) < 2:
                raise ValueError(f"category {name!r} needs at least 2 classes")
            if len(set(classes)) != len(classes):
                raise ValueError(f"duplicate class names in category {name!r}")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, Sequence[str]]]) -> "LabelSchema":
        return cls(tuple((name, tuple(classes)) for name, classes in pairs))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.categories)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(classes) for _, classes in self.categories)

    @property
    def n_classes(self) -> int:
        return sum(self.sizes)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    @property
    def blocks(self) -> tuple[slice, ...]:
        return tuple(slice(o, o + k) for o, k in zip(self.offsets, self.sizes))

    @property
    def class_keys(self) -> tuple[str, ...]:
        """Global class labels formatted ``category/class``."""
        return tuple(f"{name}/{c}" for name, classes in self.categories for c in classes)

    def category_of(self, index: int) -> int:
        for i, block in enumerate(self.blocks):
            if block.start <= index < block.stop:
                return i
        raise IndexError(index)

    def index(self, category: str, cls: str) -> int:
        for (name, classes), offset in zip(self.categories, self.offsets):
            if name == category:
                return offset + classes.index(cls)
        raise KeyError(category)

    def to_json(self) -> list[dict]:
        return [{"name": name, "classes": list(classes)} for name, classes in self.categories]

    @classmethod
    def from_json(cls, doc: Sequence[Mapping]) -> "LabelSchema":
        return cls.from_pairs([(entry["name"], entry["classes"]) for entry in doc])


# Seven-point checklist categories in the order of the dataset's class table.
SPC_SCHEMA = LabelSchema.from_pairs([
    ("Diag", ["BCC", "NEV", "MEL", "MISC", "SK"]),
    ("PN", ["ABS", "TYP", "ATP"]),
    ("BWV", ["ABS", "PRS"]),
    ("RS", ["ABS", "PRS"]),
    ("VS", ["ABS", "REG", "IR"]),
    ("PIG", ["ABS", "REG", "IR"]),
    ("STR", ["ABS", "REG", "IR"]),
    ("DaG", ["ABS", "REG", "IR"]),
])


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Case:
    id: str
    split: str
    features: Mapping[str, np.ndarray]
    labels: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(self, "features", {m: _frozen(v) for m, v in self.features.items()})
        object.__setattr__(self, "labels", dict(self.labels))

    def __eq__(self, other):
        if not isinstance(other, Case):
            return NotImplemented
        return (
            self.id == other.id
            and self.split == other.split
            and self.labels == other.labels
            and self.features.keys() == other.features.keys()
            and all(np.array_equal(self.features[m], other.features[m]) for m in self.features)
        )

    __hash__ = None

    def validate(self, schema: LabelSchema, feature_dims: Mapping[str, int]) -> None:
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}", self.id, "split")
        for name, classes in schema.categories:
            if name not in self.labels:
                raise ManifestError("missing category label", self.id, f"labels.{name}")
            if self.labels[name] not in classes:
                raise ManifestError(f"unknown class name {self.labels[name]!r}", self.id, f"labels.{name}")
        extra = set(self.labels) - set(schema.names)
        if extra:
            raise ManifestError(f"unknown category {sorted(extra)[0]!r}", self.id, "labels")
        for modality, dim in feature_dims.items():
            if modality not in self.features:
                raise ManifestError("missing modality", self.id, f"features.{modality}")
            vec = self.features[modality]
            if vec.ndim != 1 or vec.shape[0] != dim:
                raise ManifestError(
                    f"dimension mismatch: expected {dim}, got {vec.shape[0] if vec.ndim == 1 else vec.shape}",
                    self.id,
                    f"features.{modality}",
                )
            if not np.all(np.isfinite(vec)):
                raise ManifestError("non-finite feature value", self.id, f"features.{modality}")


@dataclass(frozen=True)
class Dataset:
    schema: LabelSchema
    cases: tuple[Case, ...]
    feature_dims: Mapping[str, int] = field(default_factory=lambda: {"clinical": 64, "dermoscopy": 64})

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple(self.cases))
        object.__setattr__(self, "feature_dims", {m: int(self.feature_dims[m]) for m in MODALITIES})
        for m, dim in self.feature_dims.items():
            if dim < 1:
                raise ManifestError(f"feature dimension must be positive, got {dim}", None, f"feature_dims.{m}")
        seen = set()
        for case in self.cases:
            if case.id in seen:
                raise ManifestError("duplicate case id", case.id, "id")
            seen.add(case.id)
            case.validate(self.schema, self.feature_dims)

    def __len__(self) -> int:
        return len(self.cases)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cases]

    def features(self, modality: str) -> np.ndarray:
        """Stacked ``(n_cases, dim)`` feature matrix for one modality."""
        if not self.cases:
            return np.zeros((0, self.feature_dims[modality]))
        return np.stack([c.features[modality] for c in self.cases])

    def label_matrix(self) -> np.ndarray:
        """Binary ``(n_cases, C)`` matrix of flattened labels."""
        if not self.cases:
            return np.zeros((0, self.schema.n_classes))
        return np.stack([flatten_labels(c, self.schema) for c in self.cases])

    def with_cases(self, cases: Sequence[Case]) -> "Dataset":
        return Dataset(self.schema, tuple(cases), self.feature_dims)

    def select(self, *splits: str) -> "Dataset":
        return self.with_cases([c for c in self.cases if c.split in splits])


def flatten_labels(case: Case, schema: LabelSchema) -> np.ndarray:
    """One-hot per category block, concatenated to a length-C vector."""
    y = np.zeros(schema.n_classes)
    for (name, classes), offset in zip(schema.categories, schema.offsets):
        y[offset + classes.index(case.labels[name])] = 1.0
    return y


def split(dataset: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    return tuple(dataset.select(s) for s in SPLITS)


# -- manifest I/O --------------------------------------------------------------

def manifest_to_dict(dataset: Dataset) -> dict:
    return {
        "schema": dataset.schema.to_json(),
        "feature_dims": dict(dataset.feature_dims),
        "cases": [
            {
                "id": c.id,
                "split": c.split,
                "features": {m: c.features[m].tolist() for m in MODALITIES},
                "labels": {name: c.labels[name] for name in dataset.schema.names},
            }
            for c in dataset.cases
        ],
    }


def save_manifest(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest_to_dict(dataset)), encoding="utf-8")
    return path


def _require(doc: Mapping, key: str, kind, case_id=None, prefix=""):
    if not isinstance(doc, Mapping) or key not in doc:
        raise ManifestError("missing field", case_id, prefix + key)
    value = doc[key]
    if not isinstance(value, kind):
        raise ManifestError(f"malformed field, expected {getattr(kind, '__name__', kind)}", case_id, prefix + key)
    return value


def manifest_from_dict(doc) -> Dataset:
    if not isinstance(doc, Mapping):
        raise ManifestError("malformed document: top level must be an object")
    schema_doc = _require(doc, "schema", list)
    try:
        schema = LabelSchema.from_json(schema_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed schema: {exc}", None, "schema") from exc
    dims_doc = _require(doc, "feature_dims", dict)
    dims = {}
    for m in MODALITIES:
        dim = _require(dims_doc, m, int, None, "feature_dims.")
        if isinstance(dim, bool) or dim < 1:
            raise ManifestError("feature dimension must be a positive integer", None, f"feature_dims.{m}")
        dims[m] = dim
    cases = []
    seen = set()
    for i, entry in enumerate(_require(doc, "cases", list)):
        if not isinstance(entry, Mapping):
            raise ManifestError("malformed case entry", None, f"cases[{i}]")
        case_id = _require(entry, "id", str, None, f"cases[{i}].")
        if case_id in seen:
            raise ManifestError("duplicate case id", case_id, "id")
        seen.add(case_id)
        split_tag = _require(entry, "split", str, case_id)
        feats = _require(entry, "features", dict, case_id)
        labels = _require(entry, "labels", dict, case_id)
        vectors = {}
        for m in MODALITIES:
            raw = _require(feats, m, list, case_id, "features.")
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
                raise ManifestError("non-numeric feature value", case_id, f"features.{m}")
            vectors[m] = raw
        case = Case(case_id, split_tag, vectors, labels)
        case.validate(schema, dims)
        cases.append(case)
    return Dataset(schema, tuple(cases), dims)


def load_manifest(path) -> Dataset:
    """Read and validate a JSON manifest.

    Raises ``FileNotFoundError`` for a missing file and :class:`ManifestError`
    for any malformed or inconsistent content.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed document: {exc}") from exc
    return manifest_from_dict(doc)


# -- synthetic data ------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    schema: LabelSchema = SPC_SCHEMA
    n_train: int = 600
    n_val: int = 200
    n_test: int = 200
    feature_dims: Mapping[str, int] = field(default_factory=lambda: {"clinical": 64, "dermoscopy": 64})
    correlation_strength: float = 0.8
    noise_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.correlation_strength <= 1.0:
            raise ValueError("correlation_strength must lie in [0, 1]")
        if self.noise_scale < 0 or not math.isfinite(self.noise_scale):
            raise ValueError("noise_scale must be a nonnegative real")
        if self.n_train < 1 or self.n_val < 0 or self.n_test < 0:
            raise ValueError("need n_train >= 1 and n_val, n_test >= 0")


# Signal amplitude of a category in a modality it sees clearly / poorly.
_STRONG, _WEAK = 1.0, 0.25


def _visibility(n_categories: int) -> dict[str, np.ndarray]:
    # clinical sees categories with i % 3 in {0, 1}, dermoscopy those with i % 3 in {1, 2}
    idx = np.arange(n_categories) % 3
    return {
        "clinical": np.where(idx != 2, _STRONG, _WEAK),
        "dermoscopy": np.where(idx != 0, _STRONG, _WEAK),
    }


def synth_generate(config: SynthConfig) -> Dataset:
    """Draw a dataset with planted cross-category label dependence.

    The first category acts as a shared latent state. Each other category
    copies a fixed function of it (``anchor_class mod K_j``) with probability
    ``correlation_strength`` and is otherwise drawn from its own marginal, so
    0 gives independent categories and 1 makes every category a deterministic
    function of the anchor. Feature vectors sum class-conditional mean
    patterns scaled by per-modality visibility, plus Gaussian noise.
    """
    schema = config.schema
    rng = np.random.default_rng(config.seed)
    sizes = schema.sizes
    marginals = [rng.dirichlet(np.full(k, 5.0)) for k in sizes]
    dims = {m: int(config.feature_dims[m]) for m in MODALITIES}
    patterns = {
        m: [rng.normal(0.0, 1.0 / math.sqrt(dims[m]) * 3.0, size=(k, dims[m])) for k in sizes]
        for m in MODALITIES
    }
    visibility = _visibility(len(sizes))

    n_total = config.n_train + config.n_val + config.n_test
    tags = ["train"] * config.n_train + ["val"] * config.n_val + ["test"] * config.n_test
    anchor = rng.choice(sizes[0], size=n_total, p=marginals[0])
    labels = np.empty((n_total, len(sizes)), dtype=np.int64)
    labels[:, 0] = anchor
    for j in range(1, len(sizes)):
        tied = rng.random(n_total) < config.correlation_strength
        free = rng.choice(sizes[j], size=n_total, p=marginals[j])
        labels[:, j] = np.where(tied, anchor % sizes[j], free)

    cases = []
    width = len(str(max(n_total - 1, 1)))
    for n in range(n_total):
        feats = {}
        for m in MODALITIES:
            x = np.zeros(dims[m])
            for j in range(len(sizes)):
                x += visibility[m][j] * patterns[m][j][labels[n, j]]
            x += config.noise_scale * rng.normal(size=dims[m])
            feats[m] = x
        lab = {name: classes[labels[n, j]] for j, (name, classes) in enumerate(schema.categories)}
        cases.append(Case(f"{tags[n]}-{n:0{width}d}", tags[n], feats, lab))
    return Dataset(schema, tuple(cases), dims)
