"""Brute-force reference computations, deliberately independent of the package code paths."""

import itertools

import numpy as np


def auc_pairs(scores, labels) -> float:
    """All (positive, negative) pairs; 1 for a correct order, 0.5 for a tie."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    if not pos or not neg:
        return 0.0
    credit = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                credit += 1.0
            elif p == n:
                credit += 0.5
    return credit / (len(pos) * len(neg))


def conditional_matrix(label_sets, n_classes):
    """Count by enumerating cases and class pairs, then divide row-wise."""
    occ = [0] * n_classes
    co = [[0] * n_classes for _ in range(n_classes)]
    for labels in label_sets:
        for i in labels:
            occ[i] += 1
            for j in labels:
                co[i][j] += 1
    cm = np.zeros((n_classes, n_classes))
    for i in range(n_classes):
        for j in range(n_classes):
            cm[i, j] = co[i][j] / occ[i] if occ[i] else 0.0
    return cm, occ, co


def grid_points(k, step):
    n = int(round(1 / step))
    pts = [c for c in itertools.product(range(n + 1), repeat=k) if sum(c) == n]
    return [tuple(x / n for x in p) for p in pts]


def mean_auc_pairs(probs, labels):
    return float(np.mean([auc_pairs(probs[:, c], labels[:, c]) for c in range(probs.shape[1])]))


def grid_search(arrays, labels, step):
    """Re-evaluate every grid point (plus the uniform point) and return ``{weights: objective}``."""
    k = len(arrays)
    pts = grid_points(k, step)
    uniform = tuple([1.0 / k] * k)
    if uniform not in pts:
        pts.append(uniform)
    out = {}
    for w in pts:
        mix = w[0] * arrays[0]
        for wi, a in zip(w[1:], arrays[1:]):
            mix = mix + wi * a
        out[w] = mean_auc_pairs(mix, labels)
    return out
