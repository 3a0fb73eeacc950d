"""Three-step training: fusion model, graph model, then validation weight search."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .cooccur import RAW, CorrelationMatrix, canonical_mode, correlation_from_dataset
from .dataset import Dataset, split
from .ensemble import EmptyValidationError, EnsembleWeights, PredictionSet, combine, search_weights, uniform_weights
from .metrics import MetricsReport, build_report, mean_auc
from .models import (
    BRANCHES,
    FUSION_SOURCES,
    GRAPH_SOURCES,
    FusionModel,
    GraphModel,
    ModelConfig,
    fusion_loss,
    graph_loss,
)
from .nn import AdamState, BatchNorm1d, CosineSchedule, Module, adam_step

log = logging.getLogger(__name__)

VARIANTS = ("freeze", "unfreeze")
PRESETS = {
    "desk": dict(epochs=60, batch_size=32, base_lr=3e-4, swa_last_epochs=10),
    "paper": dict(epochs=250, batch_size=32, base_lr=3e-5, swa_last_epochs=50),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    base_lr: float = 3e-4
    min_lr: float = 0.0
    swa_last_epochs: int = 10
    variant: str = "unfreeze"
    seed: int = 0
    cm_mode: str = RAW
    grid_step: float = 0.05
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        object.__setattr__(self, "cm_mode", canonical_mode(self.cm_mode))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 1 <= self.swa_last_epochs <= self.epochs:
            raise ValueError("swa_last_epochs must lie in [1, epochs]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalization)")

    @classmethod
    def preset(cls, name: str = "desk", **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc["model"] = ModelConfig(**doc.get("model", {}))
        return cls(**doc)


@dataclass(frozen=True)
class Arrays:
    xc: np.ndarray
    xd: np.ndarray
    y: np.ndarray
    ids: tuple[str, ...]

    @classmethod
    def of(cls, dataset: Dataset) -> "Arrays":
        return cls(dataset.features("clinical"), dataset.features("dermoscopy"),
                   dataset.label_matrix(), tuple(dataset.ids))

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> "Arrays":
        return Arrays(self.xc[idx], self.xd[idx], self.y[idx], tuple(self.ids[i] for i in idx))


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded permutation of ``range(n)`` cut into batches; a trailing singleton joins the previous batch."""
    if n < 2:
        raise ValueError(f"need at least 2 training cases, got {n}")
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _seeded(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


class ModuleDict(Module):
    def __init__(self, **modules: Module):
        super().__init__()
        self._children = modules

    def children(self):
        return dict(self._children)


# -- weight averaging ----------------------------------------------------------

class SWAState:
    """Running sum of parameter snapshots; the average is taken at finalize time."""

    def __init__(self):
        self.count = 0
        self.sums: dict[str, np.ndarray] = {}

    def update(self, model: Module) -> None:
        for name, p in model.named_parameters().items():
            if name in self.sums:
                self.sums[name] += p
            else:
                self.sums[name] = p.copy()
        self.count += 1

    def mean(self) -> dict[str, np.ndarray]:
        if self.count == 0:
            raise ValueError("no snapshots collected")
        return {k: v / self.count for k, v in self.sums.items()}


def recompute_bn(model: Module, forward_pass: Callable[[], None]) -> None:
    """Reset batch-norm statistics and re-estimate them with a cumulative average."""
    bns = [m for _, m in model.modules() if isinstance(m, BatchNorm1d)]
    if not bns:
        return
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None
    model.train()
    try:
        forward_pass()
    finally:
        for bn, m in zip(bns, saved):
            bn.momentum = m


def swa_finalize(state: SWAState, model: Module, forward_pass: Callable[[], None] | None = None) -> Module:
    """Load the snapshot mean into ``model`` and re-estimate its batch-norm statistics.

    ``forward_pass`` runs training-mode forwards over the training data without
    updating weights.
    """
    params = model.named_parameters()
    for name, value in state.mean().items():
        params[name][...] = value
    if forward_pass is not None:
        recompute_bn(model, forward_pass)
    model.eval()
    return model


# -- stages --------------------------------------------------------------------

def _epoch_record(epoch: int, lr: float, key: str, losses: list[float], t0: float) -> dict:
    return {"epoch": epoch, "lr": lr, key: float(np.mean(losses)), "wall_time_ms": round((time.perf_counter() - t0) * 1e3, 3)}


def fusion_predict(model: FusionModel, data: Arrays) -> dict[str, np.ndarray]:
    model.eval()
    return model.forward(data.xc, data.xd)["probs"]


def fusion_eval_loss(model: FusionModel, data: Arrays) -> float:
    model.eval()
    out = model.forward(data.xc, data.xd)
    return fusion_loss(out["logits"], data.y, model.schema)[0]


def train_fusion_stage(train: Dataset, config: TrainConfig):
    """Step one: minimise the summed three-stream loss of the fusion model.

    Returns ``(model, log)``; ``log`` holds one record per epoch plus the
    training-set loss before and after.
    """
    data = Arrays.of(train)
    if len(data) < 2:
        raise ValueError("fusion stage needs at least 2 training cases")
    model = FusionModel(train.schema, train.feature_dims, config.model, _seeded(config.seed, 1))
    shuffle = _seeded(config.seed, 2)
    schedule = CosineSchedule(config.base_lr, config.epochs, config.min_lr)
    opt = AdamState(lr=config.base_lr)
    swa = SWAState()
    params = model.named_parameters()
    grads = model.named_grads()
    records = []
    initial = fusion_eval_loss(model, data)
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        lr = schedule(epoch)
        model.train()
        losses = []
        for idx in epoch_batches(len(data), config.batch_size, shuffle):
            b = data.take(idx)
            model.zero_grad()
            loss, _ = model.loss_and_backward(b.xc, b.xd, b.y)
            adam_step(params, grads, opt, lr)
            losses.append(loss)
        records.append(_epoch_record(epoch, lr, "L_F", losses, t0))
        if epoch >= config.epochs - config.swa_last_epochs:
            swa.update(model)

    def bn_pass():
        for idx in epoch_batches(len(data), config.batch_size, _seeded(config.seed, 6)):
            model.forward(data.xc[idx], data.xd[idx])

    swa_finalize(swa, model, bn_pass)
    return model, {"epochs": records, "initial_loss": initial, "final_loss": fusion_eval_loss(model, data)}


def graph_predict(graph: GraphModel, encoder: FusionModel, data: Arrays) -> dict[str, np.ndarray]:
    graph.eval()
    encoder.eval()
    feats, _ = encoder.encode(data.xc, data.xd)
    return graph.forward(feats)["probs"]


def graph_eval_loss(graph: GraphModel, encoder: FusionModel, data: Arrays) -> float:
    graph.eval()
    encoder.eval()
    feats, _ = encoder.encode(data.xc, data.xd)
    return graph_loss(graph.forward(feats)["logits"], data.y, graph.schema)[0]


def train_graph_stage(train: Dataset, cm: CorrelationMatrix | np.ndarray, fusion: FusionModel | None,
                      config: TrainConfig, embedding: np.ndarray | None = None):
    """Step two: minimise the summed three-stream graph loss.

    ``freeze`` reads image features from the stage-one encoders and never
    touches them. ``unfreeze`` trains a freshly initialised fusion model's
    encoders jointly with the graph model; the stage-one model is left alone.
    Returns ``(graph_model, feature_encoder, log)``.
    """
    data = Arrays.of(train)
    if len(data) < 2:
        raise ValueError("graph stage needs at least 2 training cases")
    CM = cm.CM if isinstance(cm, CorrelationMatrix) else np.asarray(cm)
    graph = GraphModel(train.schema, CM, config.model, _seeded(config.seed, 3), embedding)
    if config.variant == "freeze":
        if fusion is None:
            raise ValueError("freeze variant needs the stage-one fusion model")
        encoder = fusion
        encoder.eval()
        frozen_feats, _ = encoder.encode(data.xc, data.xd)
        trainable: Module = graph
    else:
        encoder = FusionModel(train.schema, train.feature_dims, config.model, _seeded(config.seed, 5))
        frozen_feats = None
        trainable = ModuleDict(graph=graph, enc_clinical=encoder.enc_clinical,
                               enc_dermoscopy=encoder.enc_dermoscopy)

    shuffle = _seeded(config.seed, 4)
    schedule = CosineSchedule(config.base_lr, config.epochs, config.min_lr)
    opt = AdamState(lr=config.base_lr)
    swa = SWAState()
    params = trainable.named_parameters()
    grads = trainable.named_grads()
    records = []
    initial = graph_eval_loss(graph, encoder, data)
    t0 = time.perf_counter()

    def features(idx):
        if frozen_feats is not None:
            return {b: frozen_feats[b][idx] for b in BRANCHES}, None
        return encoder.encode(data.xc[idx], data.xd[idx])

    for epoch in range(config.epochs):
        lr = schedule(epoch)
        trainable.train()
        losses = []
        for idx in epoch_batches(len(data), config.batch_size, shuffle):
            trainable.zero_grad()
            feats, enc_cache = features(idx)
            out = graph.forward(feats)
            loss, _, dlogits = graph_loss(out["logits"], data.y[idx], graph.schema)
            dfeats = graph.backward(dlogits, out["cache"])
            if enc_cache is not None:
                encoder.encode_backward(dfeats, enc_cache)
            adam_step(params, grads, opt, lr)
            losses.append(loss)
        records.append(_epoch_record(epoch, lr, "L_G", losses, t0))
        if epoch >= config.epochs - config.swa_last_epochs:
            swa.update(trainable)

    def bn_pass():
        for idx in epoch_batches(len(data), config.batch_size, _seeded(config.seed, 7)):
            graph.forward(features(idx)[0])

    swa_finalize(swa, trainable, bn_pass)
    encoder.eval()
    return graph, encoder, {
        "epochs": records,
        "initial_loss": initial,
        "final_loss": graph_eval_loss(graph, encoder, data),
    }


# -- evaluation ----------------------------------------------------------------

@dataclass
class PipelineResult:
    fusion: FusionModel
    graph: GraphModel
    graph_encoder: FusionModel
    cm: CorrelationMatrix | None
    weights: dict[str, EnsembleWeights]
    reports: dict[str, MetricsReport]
    logs: dict[str, dict]
    param_counts: dict[str, int]
    config: TrainConfig


def _prediction_sets(probs: dict[str, np.ndarray], sources, ids) -> list[PredictionSet]:
    return [PredictionSet(probs[b], ids, s) for b, s in zip(BRANCHES, sources)]


def _search_or_uniform(sets: list[PredictionSet], labels: np.ndarray | None, step: float) -> EnsembleWeights:
    if labels is None:
        return uniform_weights([p.source for p in sets])
    try:
        return search_weights(sets, labels, step)
    except EmptyValidationError:
        return uniform_weights([p.source for p in sets])


def param_counts(fusion: FusionModel, graph: GraphModel, encoder: FusionModel, variant: str) -> dict[str, int]:
    """Trainable parameter counts; ``fusion_share`` counts every fusion model the variant keeps."""
    n_fusion = fusion.n_params()
    share = n_fusion if variant == "freeze" else n_fusion + encoder.n_params()
    return {"fusion": n_fusion, "fusion_share": share, "graph": graph.n_params(), "total": share + graph.n_params()}


def evaluate(fusion: FusionModel, graph: GraphModel, encoder: FusionModel, dataset: Dataset,
             grid_step: float = 0.05) -> tuple[dict[str, EnsembleWeights], dict[str, MetricsReport]]:
    """Step three: search weights on val (uniform when val is empty), report on test."""
    _, val, test = split(dataset)
    val_data = Arrays.of(val) if len(val) else None
    weights = {}
    if val_data is not None:
        f_sets = _prediction_sets(fusion_predict(fusion, val_data), FUSION_SOURCES, val_data.ids)
        g_sets = _prediction_sets(graph_predict(graph, encoder, val_data), GRAPH_SOURCES, val_data.ids)
        weights["fusion"] = _search_or_uniform(f_sets, val_data.y, grid_step)
        weights["graph"] = _search_or_uniform(g_sets, val_data.y, grid_step)
        pf = combine(f_sets, weights["fusion"].weights, "P_F")
        pg = combine(g_sets, weights["graph"].weights, "P_G")
        weights["total"] = _search_or_uniform([pf, pg], val_data.y, grid_step)
    else:
        weights["fusion"] = uniform_weights(FUSION_SOURCES)
        weights["graph"] = uniform_weights(GRAPH_SOURCES)
        weights["total"] = uniform_weights(("P_F", "P_G"))
    fusion.set_branch_weights(weights["fusion"].weights)
    graph.set_branch_weights(weights["graph"].weights)

    reports = {}
    if len(test) == 0:
        log.warning("no test cases; skipping reports")
        return weights, reports
    test_data = Arrays.of(test)
    f_probs = fusion_predict(fusion, test_data)
    g_probs = graph_predict(graph, encoder, test_data)
    f_sets = _prediction_sets(f_probs, FUSION_SOURCES, test_data.ids)
    g_sets = _prediction_sets(g_probs, GRAPH_SOURCES, test_data.ids)
    pf = combine(f_sets, weights["fusion"].weights, "P_F")
    pg = combine(g_sets, weights["graph"].weights, "P_G")
    total = combine([pf, pg], weights["total"].weights, "P_total")
    mean_avg = combine(
        [combine(f_sets, [1 / 3] * 3), combine(g_sets, [1 / 3] * 3)], [0.5, 0.5], "P_total_mean"
    )
    schema = dataset.schema
    reports["fusion"] = build_report(pf.probs, test_data.y, schema, weights["fusion"].to_dict())
    reports["graph"] = build_report(pg.probs, test_data.y, schema, weights["graph"].to_dict())
    reports["geln"] = build_report(total.probs, test_data.y, schema, weights["total"].to_dict())
    reports["geln"].extra = {
        "branch_weights": {"fusion": weights["fusion"].to_dict(), "graph": weights["graph"].to_dict()},
        "mean_average_overall_auc": round(mean_auc(mean_avg.probs, test_data.y), 6),
    }
    return weights, reports


def train_models(dataset: Dataset, config: TrainConfig, embedding: np.ndarray | None = None):
    """Steps one and two. Returns ``(fusion, graph, encoder, cm, logs)``."""
    train, _, _ = split(dataset)
    if len(train) == 0:
        raise ValueError("dataset has no train cases")
    cm = correlation_from_dataset(dataset, config.cm_mode)
    fusion, fusion_log = train_fusion_stage(train, config)
    before = {k: v.copy() for k, v in fusion.state_dict().items()}
    graph, encoder, graph_log = train_graph_stage(train, cm, fusion, config, embedding)
    after = fusion.state_dict()
    if any(not np.array_equal(before[k], after[k]) for k in before):
        raise RuntimeError("stage-one fusion parameters changed during graph training")
    return fusion, graph, encoder, cm, {"fusion": fusion_log, "graph": graph_log}


def run_pipeline(dataset: Dataset, config: TrainConfig, embedding: np.ndarray | None = None) -> PipelineResult:
    fusion, graph, encoder, cm, logs = train_models(dataset, config, embedding)
    weights, reports = evaluate(fusion, graph, encoder, dataset, config.grid_step)
    return PipelineResult(
        fusion=fusion, graph=graph, graph_encoder=encoder, cm=cm, weights=weights, reports=reports,
        logs=logs, param_counts=param_counts(fusion, graph, encoder, config.variant), config=config,
    )


def run_repeats(dataset: Dataset, config: TrainConfig, repeats: int, embedding: np.ndarray | None = None) -> dict:
    """Train ``repeats`` times with seeds ``seed, seed+1, ...`` and aggregate test mean AUCs."""
    rows = {"fusion": [], "graph": [], "geln": [], "geln_mean_average": []}
    per_seed = []
    for r in range(repeats):
        result = run_pipeline(dataset, replace(config, seed=config.seed + r), embedding)
        aucs = {k: result.reports[k].overall_mean_auc for k in ("fusion", "graph", "geln")}
        aucs["geln_mean_average"] = result.reports["geln"].extra["mean_average_overall_auc"]
        for k, v in aucs.items():
            rows[k].append(v)
        per_seed.append({"seed": config.seed + r, **{k: round(v, 6) for k, v in aucs.items()}})
    table = {
        k: {"mean": round(float(np.mean(v)), 6), "std": round(float(np.std(v)), 6)} for k, v in rows.items()
    }
    return {"variant": config.variant, "repeats": repeats, "table": table, "per_seed": per_seed}


def write_jsonl(records, path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path
