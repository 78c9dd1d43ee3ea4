"""Unsupervised pseudo-labels: conv-base features → k-means → labels, with
the cluster count chosen by a cross-validated grid search."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, DataError, InputError
from .graph import ModelGraph

DEFAULT_GRID = (2, 4, 8, 16)


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise InputError(f"feature rows must be 2-D, got shape {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise InputError("feature matrix contains non-finite values")
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(len(self.rows))]
        if len(self.sample_ids) != len(self.rows):
            raise InputError(f"{len(self.sample_ids)} sample ids for {len(self.rows)} rows")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return len(self.rows)


def _rows(x) -> np.ndarray:
    return x.rows if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def extract_features(base: ModelGraph | Checkpoint, images: np.ndarray, sample_ids: Sequence[str] = (),
                     batch_size: int = 256) -> FeatureMatrix:
    """Eval-mode forward through the convolutional base (any head is ignored);
    the last base feature map is flattened row-major per sample."""
    graph = base.to_graph() if isinstance(base, Checkpoint) else base
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or tuple(images.shape[1:]) != tuple(graph.spec.input_shape):
        raise DataError(f"images of shape {images.shape} do not match base input {tuple(graph.spec.input_shape)}")
    out = []
    for i in range(0, len(images), batch_size):
        fmap = graph.forward(images[i:i + batch_size], until=graph.base_output_name).data
        out.append(fmap.reshape(len(fmap), -1))
    rows = np.concatenate(out, axis=0) if out else np.zeros((0, 0))
    return FeatureMatrix(rows, list(sample_ids))


# -- k-means ------------------------------------------------------------------------


@dataclass
class ClusteringModel:
    k: int
    centroids: np.ndarray
    inertia: float
    iterations_run: int
    seed: int
    labels: np.ndarray
    inertia_history: list[float] = field(default_factory=list)


def nearest_centroid(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels (ties → lowest index) and exact squared distances to them."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if x.shape[1] != c.shape[1]:
        raise InputError(f"feature dim {x.shape[1]} != centroid dim {c.shape[1]}")
    if x.shape[1] <= 32:
        d2 = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    else:
        d2 = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    labels = np.argmin(d2, axis=1)
    exact = ((x - c[labels]) ** 2).sum(axis=1)
    return labels, exact


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return x[chosen].copy()


def _repair_empty(x, centroids, labels, sqdist, k) -> bool:
    """Move each empty cluster's centroid onto the point farthest from its
    own centroid (taken from clusters with >1 member)."""
    counts = np.bincount(labels, minlength=k)
    empty = np.nonzero(counts == 0)[0]
    if not len(empty):
        return False
    dist = sqdist.copy()
    for j in empty:
        movable = counts[labels] > 1
        cand = np.where(movable, dist, -1.0)
        p = int(np.argmax(cand))
        centroids[j] = x[p]
        counts[labels[p]] -= 1
        counts[j] += 1
        labels[p] = j
        dist[p] = -1.0
    return True


def _lloyd(x, centroids, max_iter, tol_abs):
    k = len(centroids)
    labels, sq = nearest_centroid(x, centroids)
    history = [float(sq.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        new = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        _repair_empty(x, new, labels.copy(), sq, k)
        new_labels, sq = nearest_centroid(x, new)
        history.append(float(sq.sum()))
        shift = float(((new - centroids) ** 2).sum())
        centroids = new
        done = shift <= tol_abs or np.array_equal(new_labels, labels)
        labels = new_labels
        if done:
            break
    # leave no empty cluster in the returned assignment
    for _ in range(k):
        if not _repair_empty(x, centroids, labels, sq, k):
            break
        labels, sq = nearest_centroid(x, centroids)
        history.append(float(sq.sum()))
    return centroids, labels, float(sq.sum()), history, it


def kmeans_fit(x, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-4, n_init: int = 10) -> ClusteringModel:
    """k-means++ seeding and Lloyd iterations, best of ``n_init`` restarts.

    Iteration stops when the assignment is stable or the summed squared
    centroid shift drops below ``tol`` times the mean per-feature variance.
    Restarts are ranked by (inertia, restart index).
    """
    x = _rows(x)
    n = len(x)
    if k < 2:
        raise InputError(f"k must be >= 2, got {k}")
    if k > n:
        raise InputError(f"k={k} exceeds the number of rows ({n})")
    tol_abs = tol * float(np.mean(np.var(x, axis=0))) if n > 1 else 0.0
    best = None
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(n_init)):
        rng = np.random.Generator(np.random.PCG64(child))
        c0 = kmeans_plusplus(x, k, rng)
        cents, labels, inertia, hist, iters = _lloyd(x, c0, max_iter, tol_abs)
        if best is None or inertia < best.inertia:
            best = ClusteringModel(k, cents, inertia, iters, seed, labels, hist)
    return best


def inertia_of(x, centroids) -> float:
    return float(nearest_centroid(_rows(x), centroids)[1].sum())


# -- model selection -------------------------------------------------------------------


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] <= 32:
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(2)
    else:
        d2 = (a * a).sum(1)[:, None] - 2.0 * a @ b.T + (b * b).sum(1)[None, :]
    return np.sqrt(np.maximum(d2, 0.0))


def heldout_silhouette(x: np.ndarray, centroids: np.ndarray) -> float:
    """Mean silhouette coefficient of the held-out rows, labelled by their
    nearest training-fit centroid. Singleton clusters score 0 and a single
    occupied cluster scores 0, as in the usual convention."""
    labels, _ = nearest_centroid(x, centroids)
    present = np.unique(labels)
    if len(present) < 2:
        return 0.0
    d = _pairwise_dist(x, x)
    onehot = (labels[:, None] == present[None, :]).astype(np.float64)
    sums = d @ onehot
    counts = onehot.sum(0)
    own = np.searchsorted(present, labels)
    rows = np.arange(len(x))
    own_count = counts[own] - 1
    a = np.where(own_count > 0, sums[rows, own] / np.maximum(own_count, 1), 0.0)
    mean_other = sums / counts[None, :]
    mean_other[rows, own] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_count > 0) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def centroid_silhouette(x: np.ndarray, centroids: np.ndarray) -> float:
    """Simplified silhouette: (b - a) / max(a, b) with a, b the distances to
    the nearest and second-nearest centroid."""
    part = np.sort(_pairwise_dist(x, centroids), axis=1)
    a, b = part[:, 0], part[:, 1]
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


SCORERS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "heldout_silhouette": heldout_silhouette,
    "centroid_silhouette": centroid_silhouette,
}


def select_k(x, grid: Sequence[int] = DEFAULT_GRID, folds: int = 10, seed: int = 0,
             score: str = "heldout_silhouette", n_init: int = 10) -> dict:
    """Grid search over k with k-fold cross-validation.

    Each fold fits k-means on the other folds and scores the held-out rows
    against the fitted centroids. The highest mean score wins; ties go to
    the smaller k.
    """
    x = _rows(x)
    grid = sorted(set(int(k) for k in grid))
    if not grid:
        raise ConfigError("select_k: empty k grid")
    if folds < 2:
        raise ConfigError(f"select_k: folds must be >= 2, got {folds}")
    if folds > len(x):
        raise ConfigError(f"select_k: {folds} folds for {len(x)} rows")
    if score not in SCORERS:
        raise ConfigError(f"select_k: unknown score {score!r} (known: {', '.join(SCORERS)})")
    scorer = SCORERS[score]
    rng = np.random.Generator(np.random.PCG64(seed))
    parts = np.array_split(rng.permutation(len(x)), folds)
    smallest_train = min(len(x) - len(p) for p in parts)
    if max(grid) > smallest_train:
        raise ConfigError(f"select_k: k={max(grid)} exceeds the smallest training fold ({smallest_train} rows)")
    per_k: dict[int, list[float]] = {}
    for k in grid:
        scores = []
        for f, held in enumerate(parts):
            train = np.setdiff1d(np.arange(len(x)), held)
            model = kmeans_fit(x[train], k, seed=int(np.random.SeedSequence([seed, k, f]).generate_state(1)[0]),
                               n_init=n_init)
            scores.append(scorer(x[held], model.centroids))
        per_k[k] = scores
    means = {k: float(np.mean(v)) for k, v in per_k.items()}
    k_best = max(grid, key=lambda k: (means[k], -k))
    return {"k_best": k_best, "scores": means, "fold_scores": per_k, "score": score,
            "folds": folds, "seed": seed, "grid": grid}


# -- labels ------------------------------------------------------------------------------


@dataclass
class SoftLabelSet:
    labels: np.ndarray
    k: int
    provenance: dict = field(default_factory=dict)


def assign_soft_labels(model: ClusteringModel, x, provenance: dict | None = None) -> SoftLabelSet:
    labels, _ = nearest_centroid(_rows(x), model.centroids)
    return SoftLabelSet(labels.astype(np.int64), model.k, dict(provenance or {}))


def adjusted_rand_index(a: Sequence[int], b: Sequence[int]) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise InputError("label vectors differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(v):
        v = np.asarray(v, dtype=np.float64)
        return float((v * (v - 1) / 2).sum())

    index = comb2(table)
    row, col = comb2(table.sum(1)), comb2(table.sum(0))
    total = len(a) * (len(a) - 1) / 2
    expected = row * col / total if total else 0.0
    max_index = (row + col) / 2
    if max_index == expected:
        return 1.0
    return (index - expected) / (max_index - expected)


def create_soft_labels(base: ModelGraph | Checkpoint, images: np.ndarray, grid: Sequence[int] = DEFAULT_GRID,
                       folds: int = 10, seed: int = 0, sample_ids: Sequence[str] = (),
                       extractor_id: str = "") -> tuple[SoftLabelSet, ClusteringModel, dict]:
    """Features → k selection → final k-means on all rows → labels."""
    feats = extract_features(base, images, sample_ids)
    report = select_k(feats, grid, folds, seed)
    model = kmeans_fit(feats, report["k_best"], seed=seed)
    provenance = {"extractor": extractor_id, "clustering_seed": seed, "k": report["k_best"],
                  "selection": {"score": report["score"], "scores": {str(k): v for k, v in report["scores"].items()},
                                "folds": folds, "grid": list(report["grid"])}}
    labels = assign_soft_labels(model, feats, provenance)
    return labels, model, report
