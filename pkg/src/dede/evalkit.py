"""Detection metrics, downstream linear-probe evaluation, k-means baseline and PCA."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .nets import VictimEncoder
from .optim import Optimizer
from .rng import Rng
from .tensor import Graph, Tensor


class UndefinedAUC(ValueError):
    pass


class EmptySplitError(ValueError):
    pass


# ----------------------------------------------------------- detection metrics


@dataclass
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else float("nan")


def confusion(scores, labels, tau: float) -> Confusion:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    flagged = scores > tau
    return Confusion(
        tp=int(np.sum(flagged & labels)),
        fp=int(np.sum(flagged & ~labels)),
        tn=int(np.sum(~flagged & ~labels)),
        fn=int(np.sum(~flagged & labels)),
    )


def tpr_fpr_at_threshold(scores, labels, tau: float) -> tuple[float, float]:
    """Percent rates with the strict ``score > tau`` rule."""
    c = confusion(scores, labels, tau)
    return 100.0 * c.tpr, 100.0 * c.fpr


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) sweeping every distinct score plus +/-inf sentinels.

    A sample is predicted positive at threshold ``t`` when ``score >= t``; the
    first point (+inf) is (0, 0) and the last (-inf) is (1, 1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / n_pos, 1.0]
    fpr = np.r_[0.0, fps / n_neg, 1.0]
    thresholds = np.r_[np.inf, s[distinct], -np.inf]
    return fpr, tpr, thresholds


def roc_auc(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class DetectionReport:
    scores: np.ndarray
    labels: np.ndarray
    tau: float
    counts: Confusion
    tpr: float
    fpr: float
    auc: float
    roc: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)

    @property
    def decisions(self) -> np.ndarray:
        return self.scores > self.tau


def detection_report(scores, labels, tau: float) -> DetectionReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    c = confusion(scores, labels, tau)
    fpr, tpr, _ = roc_curve(scores, labels)
    return DetectionReport(scores, labels, tau, c, 100.0 * c.tpr, 100.0 * c.fpr,
                           roc_auc(scores, labels), (fpr, tpr))


# -------------------------------------------------------------- linear probe


@dataclass
class ProbeConfig:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 1e-2


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        return embeddings @ self.weight + self.bias

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        return self.logits(embeddings).argmax(axis=1)


def fit_probe(embeddings: np.ndarray, labels: np.ndarray, classes: int, cfg: ProbeConfig, rng: Rng) -> LinearProbe:
    n = len(embeddings)
    if n == 0:
        raise EmptySplitError("linear probe: no training samples left")
    d = embeddings.shape[1]
    w = Tensor(np.zeros((d, classes), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(classes, dtype=np.float32), requires_grad=True)
    opt = Optimizer([w, b], lr=cfg.lr)
    x = embeddings.astype(np.float32)
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        order = rng.child(f"epoch{epoch}").permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            with Graph() as g:
                loss = T.cross_entropy_with_logits(T.add(T.matmul(Tensor(x[idx]), w), b), labels[idx])
            g.backward(loss)
            opt.step()
            opt.zero_grad()
    return LinearProbe(w.data.copy(), b.data.copy())


def train_linear_probe(encoder: VictimEncoder, images: np.ndarray, labels: np.ndarray, classes: int,
                       cfg: ProbeConfig, rng: Rng, keep: np.ndarray | None = None) -> LinearProbe:
    """Linear softmax classifier on frozen embeddings; ``keep`` drops detector-flagged rows."""
    if keep is not None:
        images, labels = images[keep], labels[keep]
    if len(images) == 0:
        raise EmptySplitError("linear probe: training split is empty after filtering")
    return fit_probe(encoder.embed(images), np.asarray(labels), classes, cfg, rng)


# ---------------------------------------------------------- downstream eval

Detector = Callable[[np.ndarray], np.ndarray]


@dataclass
class DownstreamReport:
    ca: float
    asr: float
    filtered_train: int
    filtered_test: int
    n_clean: int
    n_triggered: int
    probe: LinearProbe = field(repr=False, default=None)


def evaluate_downstream(encoder: VictimEncoder, probe: LinearProbe, clean_images: np.ndarray,
                        clean_labels: np.ndarray, triggered_images: np.ndarray, triggered_labels: np.ndarray,
                        target: int, detector: Detector | None = None, filtered_train: int = 0) -> DownstreamReport:
    """Clean accuracy and attack success rate (percent) with optional detector filtering.

    Flagged clean samples leave CA's denominator; flagged triggered samples are
    defense successes. Triggered samples whose true class is ``target`` are
    not counted for ASR.
    """
    clean_labels = np.asarray(clean_labels)
    triggered_labels = np.asarray(triggered_labels)
    sel = triggered_labels != target
    triggered_images = triggered_images[sel]
    if detector is None:
        flag_clean = np.zeros(len(clean_images), dtype=bool)
        flag_trig = np.zeros(len(triggered_images), dtype=bool)
    else:
        flag_clean = np.asarray(detector(clean_images), dtype=bool)
        flag_trig = np.asarray(detector(triggered_images), dtype=bool)
    if len(triggered_images) == 0:
        raise EmptySplitError("ASR denominator is empty: no non-target triggered samples")
    kept = ~flag_clean
    if not kept.any():
        raise EmptySplitError("CA denominator is empty: detector flagged every clean test sample")
    pred_clean = probe.predict(encoder.embed(clean_images[kept]))
    ca = 100.0 * float(np.mean(pred_clean == clean_labels[kept]))
    pred_trig = probe.predict(encoder.embed(triggered_images))
    success = (pred_trig == target) & ~flag_trig
    asr = 100.0 * float(success.sum()) / len(triggered_images)
    return DownstreamReport(ca, asr, filtered_train, int(flag_clean.sum() + flag_trig.sum()),
                            len(clean_images), len(triggered_images), probe)


# ------------------------------------------------------------ k-means baseline


def kmeans(x: np.ndarray, k: int, rng: Rng, max_iter: int = 100, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; returns (centroids, assignment)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(0, n))
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            u = rng.uniform01() * total
            pick = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            pick = min(pick, n - 1)
        else:
            pick = int(rng.integers(0, n))
        centroids[j] = x[pick]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        new = centroids.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift < tol:
            break
    dist = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return centroids, dist.argmin(axis=1)


def kmeans_outlier_baseline(embeddings: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    """Per-sample outlier score: Euclidean distance to the nearest k-means centroid."""
    if k < 2:
        raise ValueError("k-means baseline needs k >= 2")
    centroids, _ = kmeans(embeddings, k, rng)
    x = np.asarray(embeddings, dtype=np.float64)
    dist = np.sqrt(((x[:, None, :] - centroids[None]) ** 2).sum(axis=2))
    return dist.min(axis=1)


# ---------------------------------------------------------------------- PCA


def pca_project(x: np.ndarray, components: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Project centered data on its top principal axes; also returns explained-variance ratios.

    Rank-deficient data yields fewer columns than requested.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) <= components:
        raise ValueError(f"need more than {components} samples")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2
    total = var.sum()
    if total == 0:
        return np.zeros((len(x), 0)), np.zeros(0)
    rank = int(np.sum(var > total * 1e-12))
    m = min(components, rank)
    return xc @ vt[:m].T, var[:m] / total
