"""AUROC scoring and the one-class experiment protocols."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import Standardizer, TabularDataset, preprocess_images
from .embedding import EmbeddingSpec
from .mpo import MpoModel, MpoShape, score
from .training import TrainConfig, substream, train

log = logging.getLogger(__name__)

RESULT_FIELDS = ["dataset", "inlier_class", "seed", "auroc", "n_train", "n_test", "epochs", "wall_seconds"]


class UndefinedMetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Probability that a random normal sample outscores a random anomaly, ties counted half.

    ``labels`` are 1 for normal and 0 for anomalous (or booleans marking the
    normal samples). Computed from midranks.
    """
    scores = np.asarray(scores, dtype=np.float64)
    normal = np.asarray(labels).astype(bool)
    if scores.shape != normal.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(normal.sum())
    n_neg = normal.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one normal and one anomalous sample")
    ranks = rankdata(scores, method="average")
    u = ranks[normal].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels) -> np.ndarray:
    """ROC curve as rows ``(fpr, tpr)``; normal samples are the positive class."""
    scores = np.asarray(scores, dtype=np.float64)
    normal = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], normal[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / max(y.sum(), 1)]
    fpr = np.r_[0.0, fps / max((~y).sum(), 1)]
    return np.column_stack([fpr, tpr])


def write_roc(path, scores, labels) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["fpr", "tpr"])
        for fpr, tpr in roc_points(scores, labels):
            w.writerow([repr(float(fpr)), repr(float(tpr))])


@dataclass
class RunResult:
    dataset: str
    inlier_class: str
    seed: int
    auroc: float
    n_train: int
    n_test: int
    epochs: int
    wall_seconds: float
    scores: np.ndarray = field(repr=False, default=None)
    labels: np.ndarray = field(repr=False, default=None)
    model: Optional[MpoModel] = field(repr=False, default=None)
    history: object = field(repr=False, default=None)
    standardizer: Optional[Standardizer] = field(repr=False, default=None)

    def row(self) -> list:
        return [self.dataset, self.inlier_class, self.seed, f"{self.auroc:.6f}", self.n_train,
                self.n_test, self.epochs, f"{self.wall_seconds:.2f}"]


def run_one_class_image(train_images, train_labels, test_images, test_labels, inlier_class: int,
                        shape: MpoShape, spec: EmbeddingSpec, cfg: TrainConfig,
                        dataset: str = "images", progress=None) -> RunResult:
    """Train on every training image of ``inlier_class`` and score the full test set."""
    t0 = time.time()
    train_labels = np.asarray(train_labels)
    inliers = np.asarray(train_images)[train_labels == inlier_class]
    if len(inliers) == 0:
        raise ValueError(f"no training images of class {inlier_class}")
    X_train = preprocess_images(inliers)
    X_test = preprocess_images(test_images)
    model, history = train(X_train, shape, spec, cfg, progress=progress)
    scores = score(model, X_test)
    normal = np.asarray(test_labels) == inlier_class
    return RunResult(dataset, str(inlier_class), cfg.seed, auroc(scores, normal), len(X_train),
                     len(X_test), cfg.epochs, time.time() - t0, scores, normal, model, history)


def split_normals(n_normal: int, seed: int):
    """Seeded half split of normal indices; an odd extra sample goes to the test half."""
    if n_normal < 2:
        raise ValueError(f"need at least 2 normal samples, got {n_normal}")
    perm = substream(seed, "split").permutation(n_normal)
    half = n_normal // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def run_odds(dataset: TabularDataset, shape: MpoShape, spec: EmbeddingSpec, cfg: TrainConfig,
             seed: Optional[int] = None, progress=None) -> RunResult:
    """Train on half of the normal rows; score the other half plus every anomaly."""
    seed = cfg.seed if seed is None else seed
    cfg = replace(cfg, seed=seed)
    t0 = time.time()
    normals, anomalies = dataset.normals, dataset.anomalies
    train_idx, test_idx = split_normals(len(normals), seed)
    scaler = Standardizer.fit(normals[train_idx])
    X_train = scaler.apply(normals[train_idx])
    X_test = scaler.apply(np.vstack([normals[test_idx], anomalies]))
    normal = np.r_[np.ones(len(test_idx), dtype=bool), np.zeros(len(anomalies), dtype=bool)]
    model, history = train(X_train, shape, spec, cfg, progress=progress)
    scores = score(model, X_test)
    return RunResult(dataset.name, "", seed, auroc(scores, normal), len(X_train), len(X_test),
                     cfg.epochs, time.time() - t0, scores, normal, model, history, scaler)


def summarize(aurocs: Sequence[float]) -> tuple:
    """Mean and standard error of the mean (0 for a single trial)."""
    a = np.asarray(aurocs, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no successful trials")
    se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return float(a.mean()), se


def write_results(path, results: Sequence[RunResult]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_FIELDS)
        for r in results:
            w.writerow(r.row())
