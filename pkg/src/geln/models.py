"""Fusion model and correlation-matrix graph model.

The fusion model encodes each modality, fuses by summation and predicts
per-category distributions from each of the three feature streams. The graph
model runs one two-layer GCN per stream over the label graph, scores image
features against the resulting label representations, and classifies those
scores with a trunk shared across streams followed by per-category heads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .dataset import LabelSchema
from .nn import (
    BatchNorm1d,
    Linear,
    Module,
    Sequential,
    Swish,
    block_softmax,
    category_softmax_ce,
    glorot_uniform,
    leaky_relu_backward,
    leaky_relu_forward,
)

BRANCHES = ("clinical", "dermoscopy", "fused")
FUSION_SOURCES = ("P_FC", "P_FD", "P_FF")
GRAPH_SOURCES = ("P_GC", "P_GD", "P_GF")
UNIFORM3 = np.full(3, 1.0 / 3.0)


@dataclass(frozen=True)
class ModelConfig:
    encoder_hidden: int = 128
    feature_dim: int = 64
    embed_dim: int = 32
    gcn_hidden: int = 64
    trunk_hidden: int = 64
    leaky_slope: float = 0.2
    train_embedding: bool = False


def _check_simplex(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"branch weights must be 3 nonnegative values summing to 1, got {w}")
    return w


def weighted_average(probs: Mapping[str, np.ndarray], weights) -> np.ndarray:
    return sum(w * probs[b] for w, b in zip(weights, BRANCHES))


class Encoder(Sequential):
    """Stand-in feature extractor: input -> H -> D with Swish after each layer."""

    def __init__(self, n_in: int, hidden: int, out: int, rng: np.random.Generator):
        super().__init__(Linear(n_in, hidden, rng), Swish(), Linear(hidden, out, rng), Swish())


class CategoryHeads(Module):
    """One linear classifier per category, outputs concatenated to width C."""

    def __init__(self, n_in: int, schema: LabelSchema, rng: np.random.Generator):
        super().__init__()
        self.schema = schema
        self.heads = [Linear(n_in, k, rng) for k in schema.sizes]

    def children(self):
        return {name: head for name, head in zip(self.schema.names, self.heads)}

    def forward(self, h):
        outs, caches = zip(*(head.forward(h) for head in self.heads))
        return np.concatenate(outs, axis=1), caches

    def backward(self, dlogits, caches):
        dh = 0.0
        for head, block, c in zip(self.heads, self.schema.blocks, caches):
            dh = dh + head.backward(dlogits[:, block], c)
        return dh


# -- fusion model --------------------------------------------------------------

class FusionModel(Module):
    def __init__(self, schema: LabelSchema, feature_dims: Mapping[str, int], config: ModelConfig,
                 rng: np.random.Generator):
        super().__init__()
        self.schema, self.config = schema, config
        self.feature_dims = dict(feature_dims)
        H, D, C = config.encoder_hidden, config.feature_dim, schema.n_classes
        self.enc_clinical = Encoder(feature_dims["clinical"], H, D, rng)
        self.enc_dermoscopy = Encoder(feature_dims["dermoscopy"], H, D, rng)
        self.heads = {b: Linear(D, C, rng) for b in BRANCHES}
        self.branch_weights = UNIFORM3.copy()

    def children(self):
        return {
            "enc_clinical": self.enc_clinical,
            "enc_dermoscopy": self.enc_dermoscopy,
            **{f"fcn_f_{b}": head for b, head in self.heads.items()},
        }

    def set_branch_weights(self, w) -> None:
        self.branch_weights = _check_simplex(w)

    def encode(self, xc: np.ndarray, xd: np.ndarray):
        """Per-stream image features ``{clinical, dermoscopy, fused}`` and a cache."""
        fc, cc = self.enc_clinical.forward(xc)
        fd, cd = self.enc_dermoscopy.forward(xd)
        return {"clinical": fc, "dermoscopy": fd, "fused": fc + fd}, (cc, cd)

    def encode_backward(self, dfeats: Mapping[str, np.ndarray], cache) -> None:
        cc, cd = cache
        dfused = dfeats.get("fused", 0.0)
        self.enc_clinical.backward(dfeats.get("clinical", 0.0) + dfused, cc)
        self.enc_dermoscopy.backward(dfeats.get("dermoscopy", 0.0) + dfused, cd)

    def forward(self, xc: np.ndarray, xd: np.ndarray) -> dict:
        feats, enc_cache = self.encode(xc, xd)
        logits, head_caches = {}, {}
        for b in BRANCHES:
            logits[b], head_caches[b] = self.heads[b].forward(feats[b])
        probs = {b: block_softmax(logits[b], self.schema) for b in BRANCHES}
        return {
            "features": feats,
            "logits": logits,
            "probs": probs,
            "P_F": weighted_average(probs, self.branch_weights),
            "cache": (enc_cache, head_caches),
        }

    def backward(self, dlogits: Mapping[str, np.ndarray], cache) -> None:
        enc_cache, head_caches = cache
        dfeats = {b: self.heads[b].backward(dlogits[b], head_caches[b]) for b in BRANCHES}
        self.encode_backward(dfeats, enc_cache)

    def loss_and_backward(self, xc, xd, targets) -> tuple[float, dict[str, float]]:
        out = self.forward(xc, xd)
        total, parts, grads = fusion_loss(out["logits"], targets, self.schema)
        self.backward(grads, out["cache"])
        return total, parts

    def encoder_param_count(self) -> int:
        return self.enc_clinical.n_params() + self.enc_dermoscopy.n_params()


def branch_losses(logits: Mapping[str, np.ndarray], targets: np.ndarray, schema: LabelSchema):
    """Sum of the per-stream category cross-entropies, plus the parts and logit gradients."""
    parts, grads = {}, {}
    for b in BRANCHES:
        parts[b], _, grads[b] = category_softmax_ce(logits[b], targets, schema)
    return parts["clinical"] + parts["dermoscopy"] + parts["fused"], parts, grads


fusion_loss = branch_losses
graph_loss = branch_losses


# -- graph model ---------------------------------------------------------------

class GCN(Module):
    """Two stacked graph convolutions ``f(CM @ F @ W)``; leaky ReLU then identity."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, slope: float = 0.2):
        super().__init__()
        self.slope = slope
        self.W1 = self.add_param("W1", glorot_uniform(rng, d_in, d_hidden))
        self.W2 = self.add_param("W2", glorot_uniform(rng, d_hidden, d_out))


def gcn_forward(LF: np.ndarray, CM: np.ndarray, gcn: GCN):
    """``Z = CM @ f(CM @ LF @ W1) @ W2``; returns ``(Z, cache)``.

    The cache exposes the two pre-activations as ``cache["A1"]`` and ``cache["A2"]``.
    """
    C = CM.shape[0]
    if CM.shape != (C, C) or LF.shape[0] != C or LF.shape[1] != gcn.W1.shape[0]:
        raise ValueError(f"shape mismatch: CM {CM.shape}, LF {LF.shape}, W1 {gcn.W1.shape}")
    P1 = CM @ LF
    A1 = P1 @ gcn.W1
    H1, act_cache = leaky_relu_forward(A1, gcn.slope)
    P2 = CM @ H1
    A2 = P2 @ gcn.W2
    return A2, {"CM": CM, "P1": P1, "A1": A1, "H1": H1, "P2": P2, "A2": A2, "act": act_cache}


def gcn_backward(dZ: np.ndarray, cache, gcn: GCN) -> np.ndarray:
    """Accumulate W1/W2 gradients and return the gradient with respect to LF."""
    CM = cache["CM"]
    gcn.grads["W2"] += cache["P2"].T @ dZ
    dH1 = CM.T @ (dZ @ gcn.W2.T)
    dA1 = leaky_relu_backward(dH1, cache["act"])
    gcn.grads["W1"] += cache["P1"].T @ dA1
    return CM.T @ (dA1 @ gcn.W1.T)


class LabelEmbedding(Module):
    def __init__(self, n_classes: int, dim: int, rng: np.random.Generator, trainable: bool = False,
                 values: np.ndarray | None = None):
        super().__init__()
        if values is None:
            values = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_classes, dim))
        values = np.array(values, dtype=np.float64)
        if values.shape != (n_classes, dim):
            raise ValueError(f"label embedding must be ({n_classes}, {dim}), got {values.shape}")
        self.trainable = trainable
        if trainable:
            self.add_param("LF", values)
        else:
            self.buffers["LF"] = values

    @property
    def LF(self) -> np.ndarray:
        return self.params["LF"] if self.trainable else self.buffers["LF"]


def make_trunk(n_in: int, hidden: int, rng: np.random.Generator, streams=BRANCHES) -> Sequential:
    """Shared classifier trunk; batch-norm running statistics are tracked per stream."""
    return Sequential(
        Linear(n_in, hidden, rng), BatchNorm1d(hidden, streams=streams), Swish(),
        Linear(hidden, hidden, rng), BatchNorm1d(hidden, streams=streams), Swish(),
    )


class GraphModel(Module):
    def __init__(self, schema: LabelSchema, CM: np.ndarray, config: ModelConfig, rng: np.random.Generator,
                 embedding: np.ndarray | None = None):
        super().__init__()
        C = schema.n_classes
        CM = np.array(CM, dtype=np.float64)
        if CM.shape != (C, C):
            raise ValueError(f"correlation matrix must be ({C}, {C}), got {CM.shape}")
        self.schema, self.config = schema, config
        self.buffers["CM"] = CM
        self.embedding = LabelEmbedding(C, config.embed_dim, rng, config.train_embedding, embedding)
        self.gcns = {
            b: GCN(config.embed_dim, config.gcn_hidden, config.feature_dim, rng, config.leaky_slope)
            for b in BRANCHES
        }
        self.trunk = make_trunk(C, config.trunk_hidden, rng)
        self.heads = {b: CategoryHeads(config.trunk_hidden, schema, rng) for b in BRANCHES}
        self.branch_weights = UNIFORM3.copy()

    @property
    def CM(self) -> np.ndarray:
        return self.buffers["CM"]

    def children(self):
        return {
            "embedding": self.embedding,
            **{f"gcn_{b}": g for b, g in self.gcns.items()},
            "fcn_g_shared": self.trunk,
            **{f"fc_{b}": h for b, h in self.heads.items()},
        }

    def set_branch_weights(self, w) -> None:
        self.branch_weights = _check_simplex(w)

    def head_forward(self, Z: np.ndarray, x: np.ndarray, branch: str):
        """Score features against label representations, then classify the scores."""
        if x.ndim != 2 or x.shape[1] != Z.shape[1]:
            raise ValueError(f"feature width {x.shape} does not match label representations {Z.shape}")
        s = x @ Z.T
        h, trunk_cache = self.trunk.forward(s, branch)
        logits, head_cache = self.heads[branch].forward(h)
        return logits, (s, x, Z, trunk_cache, head_cache)

    def head_backward(self, dlogits: np.ndarray, cache, branch: str):
        s, x, Z, trunk_cache, head_cache = cache
        dh = self.heads[branch].backward(dlogits, head_cache)
        ds = self.trunk.backward(dh, trunk_cache)
        return ds @ Z, ds.T @ x

    def forward(self, feats: Mapping[str, np.ndarray]) -> dict:
        logits, caches = {}, {}
        for b in BRANCHES:
            Z, gcache = gcn_forward(self.embedding.LF, self.CM, self.gcns[b])
            logits[b], hcache = self.head_forward(Z, feats[b], b)
            caches[b] = (gcache, hcache)
        probs = {b: block_softmax(logits[b], self.schema) for b in BRANCHES}
        return {
            "logits": logits,
            "probs": probs,
            "P_G": weighted_average(probs, self.branch_weights),
            "cache": caches,
        }

    def backward(self, dlogits: Mapping[str, np.ndarray], caches) -> dict[str, np.ndarray]:
        """Backpropagate all three streams; returns gradients for the image features."""
        dfeats = {}
        for b in BRANCHES:
            gcache, hcache = caches[b]
            dfeats[b], dZ = self.head_backward(dlogits[b], hcache, b)
            dLF = gcn_backward(dZ, gcache, self.gcns[b])
            if self.embedding.trainable:
                self.embedding.grads["LF"] += dLF
        return dfeats


def graph_head_forward(Z: np.ndarray, image_feature: np.ndarray, model: GraphModel, branch: str) -> np.ndarray:
    """Per-category probabilities for one stream (no cache kept)."""
    logits, _ = model.head_forward(Z, image_feature, branch)
    return block_softmax(logits, model.schema)


def save_embedding_csv(values: np.ndarray, class_keys, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [f"e{j}" for j in range(values.shape[1])])
        for key, row in zip(class_keys, values):
            writer.writerow([key] + [repr(float(v)) for v in row])


def load_embedding_csv(path, class_keys) -> np.ndarray:
    """Read a ``C x d`` label embedding whose rows are keyed by ``category/class``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = {r[0]: r[1:] for r in rows[1:]}
    missing = [k for k in class_keys if k not in body]
    if missing:
        raise ValueError(f"label embedding lacks rows for {missing[:3]}")
    if len(body) != len(class_keys):
        raise ValueError(f"label embedding has {len(body)} rows, expected {len(class_keys)}")
    return np.array([[float(v) for v in body[k]] for k in class_keys], dtype=np.float64)
