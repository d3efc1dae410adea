"""Frozen-representation evaluation: k-NN, linear probe, retrieval, robustness.

Every protocol ranks or compares embeddings by cosine similarity so results
stay internally consistent across k-NN classification and retrieval.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_X_y, check_array, check_is_fitted

from .errors import (
    DegenerateClassError,
    DimensionError,
    EmptyRelevanceError,
    InsufficientExamplesError,
)


@dataclass
class EmbeddingSet:
    """Embedding vectors with labels and stable string ids."""

    vectors: np.ndarray
    labels: np.ndarray
    ids: list

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise DimensionError(f"vectors must be 2-D, got {self.vectors.shape}")
        if len(self.labels) != len(self.vectors) or len(self.ids) != len(self.vectors):
            raise DimensionError("vectors, labels and ids must agree on length")
        if not np.isfinite(self.vectors).all():
            raise ValueError("embedding vectors contain non-finite entries")

    def __len__(self) -> int:
        return len(self.vectors)

    def subset(self, indices) -> "EmbeddingSet":
        indices = np.asarray(indices)
        return EmbeddingSet(
            self.vectors[indices],
            self.labels[indices],
            [self.ids[i] for i in indices],
        )


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


class CosineKNN(BaseEstimator, ClassifierMixin):
    """k-nearest-neighbor classifier over cosine similarity.

    Plain majority vote among the k most similar training points; vote ties
    fall to the class with the smaller summed cosine distance, then to the
    lower class id. Neighbor ties at the cut go to the lower train index.
    """

    def __init__(self, k: int = 20):
        self.k = k

    def fit(self, X, y):
        if len(np.asarray(X)) == 0:
            raise InsufficientExamplesError("k-NN needs a non-empty training set")
        X, y = check_X_y(X, y)
        if self.k > len(X):
            raise InsufficientExamplesError(
                f"k={self.k} exceeds the {len(X)} training points"
            )
        self.train_unit_ = _unit_rows(np.asarray(X, dtype=np.float64))
        self.train_labels_ = np.asarray(y, dtype=np.int64)
        self.classes_ = np.unique(self.train_labels_)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "train_unit_")
        X = check_array(X, dtype=np.float64)
        sims = _unit_rows(X) @ self.train_unit_.T
        order = np.argsort(-sims, axis=1, kind="stable")[:, : self.k]
        n_classes = int(self.train_labels_.max()) + 1
        out = np.empty(len(X), dtype=np.int64)
        for row in range(len(X)):
            neigh = order[row]
            votes = np.bincount(self.train_labels_[neigh], minlength=n_classes)
            best = votes.max()
            tied = np.flatnonzero(votes == best)
            if len(tied) == 1:
                out[row] = tied[0]
                continue
            dist_sums = np.array(
                [
                    (1.0 - sims[row, neigh[self.train_labels_[neigh] == c]]).sum()
                    for c in tied
                ]
            )
            out[row] = tied[np.lexsort((tied, dist_sums))[0]]
        return out


def knn_classify(train: EmbeddingSet, query: EmbeddingSet, k: int) -> np.ndarray:
    return CosineKNN(k=k).fit(train.vectors, train.labels).predict(query.vectors)


def knn_accuracy(train: EmbeddingSet, query: EmbeddingSet, k: int) -> float:
    predictions = knn_classify(train, query, k)
    return float((predictions == query.labels).mean())


class LinearProbe(BaseEstimator, ClassifierMixin):
    """Multinomial logistic regression on frozen embeddings.

    Full-batch gradient descent on softmax cross-entropy from a zero init;
    inputs are standardized by the training mean and deviation. The zero
    init makes an untrained probe predict the uniform distribution.
    """

    def __init__(self, epochs: int = 100, lr: float = 0.1, n_classes: int | None = None,
                 seed: int = 0):
        self.epochs = epochs
        self.lr = lr
        self.n_classes = n_classes
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n_classes = self.n_classes or int(y.max()) + 1
        present = np.bincount(y, minlength=n_classes)
        if (present == 0).any():
            missing = int(np.flatnonzero(present == 0)[0])
            raise DegenerateClassError(f"class {missing} has no training examples")
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        xs = (X - self.mean_) / self.scale_
        m = len(xs)
        onehot = np.zeros((m, n_classes))
        onehot[np.arange(m), y] = 1.0
        w = np.zeros((n_classes, xs.shape[1]))
        b = np.zeros(n_classes)
        history = []
        for _ in range(self.epochs):
            logits = xs @ w.T + b
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            probs = e / e.sum(axis=1, keepdims=True)
            history.append(float(-np.log(probs[np.arange(m), y] + 1e-300).mean()))
            dlogits = (probs - onehot) / m
            w -= self.lr * dlogits.T @ xs
            b -= self.lr * dlogits.sum(axis=0)
        self.coef_ = w
        self.intercept_ = b
        self.loss_history_ = history
        self.classes_ = np.arange(n_classes)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        logits = (X - self.mean_) / self.scale_ @ self.coef_.T + self.intercept_
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def linear_probe(train: EmbeddingSet, n_classes: int, epochs: int = 100,
                 lr: float = 0.1, seed: int = 0) -> LinearProbe:
    probe = LinearProbe(epochs=epochs, lr=lr, n_classes=n_classes, seed=seed)
    return probe.fit(train.vectors, train.labels)


def few_shot_indices(labels, n_per_class: int, seed: int) -> np.ndarray:
    """Seed-deterministic indices of exactly n examples per class."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    picks = []
    for cls in np.unique(labels):
        pool = np.flatnonzero(labels == cls)
        if len(pool) < n_per_class:
            raise InsufficientExamplesError(
                f"class {cls} has {len(pool)} examples, wanted {n_per_class}"
            )
        picks.append(rng.choice(pool, size=n_per_class, replace=False))
    return np.sort(np.concatenate(picks))


def few_shot_subset(embeddings: EmbeddingSet, n_per_class: int, seed: int) -> EmbeddingSet:
    return embeddings.subset(few_shot_indices(embeddings.labels, n_per_class, seed))


def average_precision(relevant_in_rank_order: np.ndarray) -> float:
    """AP of one ranking given a boolean relevance vector in rank order."""
    relevant = np.asarray(relevant_in_rank_order, dtype=bool)
    total = int(relevant.sum())
    if total == 0:
        raise EmptyRelevanceError("query has no relevant items in the gallery")
    hits = np.cumsum(relevant)
    precision_at_hits = hits[relevant] / (np.flatnonzero(relevant) + 1)
    return float(precision_at_hits.sum() / total)


def retrieval_map(queries: EmbeddingSet, gallery: EmbeddingSet, relevance) -> float:
    """Mean average precision with cosine-ranked galleries.

    ``relevance`` holds one set of relevant gallery ids per query.
    """
    if len(relevance) != len(queries):
        raise DimensionError("need one relevance set per query")
    gallery_pos = {gid: i for i, gid in enumerate(gallery.ids)}
    sims = _unit_rows(queries.vectors) @ _unit_rows(gallery.vectors).T
    aps = []
    for qi in range(len(queries)):
        rel_idx = [gallery_pos[g] for g in relevance[qi] if g in gallery_pos]
        if not rel_idx:
            raise EmptyRelevanceError(f"query {queries.ids[qi]!r} has no relevant items")
        rel_mask = np.zeros(len(gallery), dtype=bool)
        rel_mask[rel_idx] = True
        order = np.lexsort((np.arange(len(gallery)), -sims[qi]))
        aps.append(average_precision(rel_mask[order]))
    return float(np.mean(aps))


def masked_foreground_mse(
    params,
    images,
    fg_fractions,
    mask_ratio: float = 0.75,
    fg_threshold: float = 0.5,
    seed: int = 0,
) -> float:
    """Reconstruction MSE over masked foreground patches of held-out images.

    Foreground patches are those whose ground-truth pixel fraction reaches
    ``fg_threshold``. Masks are drawn deterministically from ``seed`` per
    image, so competing checkpoints are scored on identical masks.
    """
    from .model import forward
    from .patching import normalize_targets, patchify, sample_random_mask

    images = np.asarray(images)
    total = 0.0
    count = 0
    for i in range(len(images)):
        grid = patchify(images[i], params.config.patch_size)
        mask = sample_random_mask(grid.n_patches, mask_ratio, seed + i)
        prediction, _ = forward(params, grid, mask)
        target = normalize_targets(grid).patches
        per_patch = ((prediction.astype(np.float64) - target) ** 2).mean(axis=1)
        selected = (mask.gamma == 1) & (
            np.asarray(fg_fractions[i]).reshape(-1) >= fg_threshold
        )
        total += per_patch[selected].sum()
        count += int(selected.sum())
    if count == 0:
        raise EmptyRelevanceError("no masked foreground patches to score")
    return total / count


def robustness_suite(
    embedder,
    index,
    probe_epochs: int = 100,
    probe_lr: float = 0.1,
    variants=("OF", "MS", "MR", "MN"),
) -> dict:
    """Probe on clean train embeddings, score each background-variant val split.

    ``embedder`` maps an (M, H, W, 3) image stack to an (M, d) matrix;
    ``index`` is a loaded dataset index whose directory holds the variant
    images. Returns {variant: top-1 accuracy}.
    """
    from .data import load_split, load_variant_split

    train_images, train_labels, _ = load_split(index, "train")
    n_classes = int(max(r.label for r in index.records)) + 1
    probe = LinearProbe(epochs=probe_epochs, lr=probe_lr, n_classes=n_classes)
    probe.fit(np.asarray(embedder(train_images)), train_labels)
    scores = {}
    for mode in variants:
        images, labels, _ = load_variant_split(index, mode)
        predictions = probe.predict(np.asarray(embedder(images)))
        scores[mode] = float((predictions == labels).mean())
    return scores
