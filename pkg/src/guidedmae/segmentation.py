"""Normalized-cuts segmentation of the patch-affinity graph.

Patches become graph nodes whose edges carry thresholded cosine similarity
between per-patch feature vectors. The graph is bipartitioned by the
Fiedler vector of the generalized problem (D - W) x = lambda D x, solved
densely via the symmetric reduction and a cyclic Jacobi eigensolver. The
side holding the largest-magnitude Fiedler entry is called foreground,
which yields a hard binary attention map in the patch grid.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .attention import RAW, AttentionMap
from .errors import (
    DegenerateMapWarning,
    DimensionError,
    DisconnectedGraphError,
    EigenSolverError,
    ZeroVectorError,
)

AFFINITY_THRESHOLD = 0.2
AFFINITY_FLOOR = 1e-5


@dataclass
class PatchFeatures:
    """Per-patch descriptor vectors aligned with a patch grid."""

    features: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got {self.features.shape}")
        if self.features.shape[0] != self.grid_h * self.grid_w:
            raise DimensionError(
                f"{self.features.shape[0]} feature rows do not match a "
                f"{self.grid_h}x{self.grid_w} grid"
            )


@dataclass
class AffinityGraph:
    """Symmetric patch-affinity matrix with unit diagonal."""

    weights: np.ndarray
    degree: np.ndarray
    threshold: float
    floor_weight: float

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]


def build_affinity(
    features: PatchFeatures | np.ndarray,
    threshold: float = AFFINITY_THRESHOLD,
    floor_weight: float = AFFINITY_FLOOR,
) -> AffinityGraph:
    """Threshold pairwise cosine similarity into edge weights.

    Pairs at least as similar as ``threshold`` get weight 1, everything else
    the small ``floor_weight`` that keeps the graph connected.
    """
    f = features.features if isinstance(features, PatchFeatures) else np.asarray(features, dtype=np.float64)
    if not -1.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (-1, 1), got {threshold}")
    if not 0.0 < floor_weight < 1.0:
        raise ValueError(f"floor weight must be in (0, 1), got {floor_weight}")
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVectorError("cosine similarity undefined for zero feature vectors")
    unit = f / norms[:, None]
    cos = unit @ unit.T
    cos = (cos + cos.T) / 2.0  # force exact symmetry before thresholding
    weights = np.where(cos >= threshold, 1.0, floor_weight)
    np.fill_diagonal(weights, 1.0)
    degree = weights.sum(axis=1)
    return AffinityGraph(weights, degree, threshold, floor_weight)


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigendecomposition of a dense symmetric matrix by cyclic Jacobi sweeps.

    Rotations run in a fixed (p, q) order until the off-diagonal Frobenius
    norm drops to ``tol``. Returns eigenvalues ascending and eigenvectors as
    matching columns. Raises ``EigenSolverError`` past ``max_sweeps``.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    n = a.shape[0]
    a = (a + a.T) / 2.0
    v = np.eye(n)
    if n == 1:
        return a.reshape(1), v
    # leaving elements below this untouched still drives the norm under tol
    skip = tol / (n * n)
    converged = False
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                app, aqq = a[p, p], a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0
                v_p, v_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * v_p - s * v_q
                v[:, q] = s * v_p + c * v_q
    if not converged:
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off > tol:
            raise EigenSolverError(
                f"Jacobi sweeps did not reach off-diagonal norm {tol} "
                f"in {max_sweeps} sweeps (at {off:.3e})"
            )
    eigvals = np.diag(a).copy()
    order = np.argsort(eigvals, kind="stable")
    return eigvals[order], v[:, order]


def ncut_bipartition(graph: AffinityGraph):
    """Spectral bipartition of an affinity graph.

    Solves (D - W) x = lambda D x through the symmetric reduction
    D^{-1/2} (D - W) D^{-1/2}, takes the eigenvector of the second-smallest
    eigenvalue (the Fiedler vector), and thresholds it at its mean. The sign
    is canonicalized so the largest-magnitude entry is positive; the side
    containing that entry is labeled 1 (foreground).

    Returns ``(partition, fiedler)`` where partition is a uint8 vector.
    """
    w = graph.weights
    d = graph.degree
    if np.any(d <= 0.0):
        raise DisconnectedGraphError("every node needs positive degree")
    d_isqrt = 1.0 / np.sqrt(d)
    lap = np.diag(d) - w
    sym = d_isqrt[:, None] * lap * d_isqrt[None, :]
    sym = (sym + sym.T) / 2.0
    eigvals, eigvecs = jacobi_eigh(sym)
    fiedler = d_isqrt * eigvecs[:, 1]
    peak = int(np.argmax(np.abs(fiedler)))
    if fiedler[peak] < 0.0:
        fiedler = -fiedler
    partition = (fiedler >= fiedler.mean()).astype(np.uint8)
    return partition, fiedler


def ncut_value(weights: np.ndarray, partition: np.ndarray) -> float:
    """Normalized-cut criterion cut/assoc(A) + cut/assoc(B) of a split."""
    side = np.asarray(partition).astype(bool)
    if side.all() or not side.any():
        return float("inf")
    cut = weights[side][:, ~side].sum()
    assoc_a = weights[side].sum()
    assoc_b = weights[~side].sum()
    return float(cut / assoc_a + cut / assoc_b)


def second_eigenvalue(graph: AffinityGraph) -> float:
    """Second-smallest eigenvalue of the normalized Laplacian."""
    d_isqrt = 1.0 / np.sqrt(graph.degree)
    lap = np.diag(graph.degree) - graph.weights
    sym = d_isqrt[:, None] * lap * d_isqrt[None, :]
    eigvals, _ = jacobi_eigh((sym + sym.T) / 2.0)
    return float(eigvals[1])


def tokencut_map(
    features: PatchFeatures,
    threshold: float = AFFINITY_THRESHOLD,
    floor_weight: float = AFFINITY_FLOOR,
) -> AttentionMap:
    """Hard foreground/background map from patch features via normalized cuts.

    If every pair clears the similarity threshold the graph is uniform and no
    meaningful cut exists; the map is then all zeros with a degenerate-map
    warning, which downstream scaling turns into uniform unit weights.
    """
    graph = build_affinity(features, threshold, floor_weight)
    if np.all(graph.weights == 1.0):
        warnings.warn(
            "uniform affinity graph admits no cut; emitting an all-zero map",
            DegenerateMapWarning,
            stacklevel=2,
        )
        values = np.zeros((features.grid_h, features.grid_w))
        return AttentionMap(values, state=RAW, source="tokencut")
    partition, _ = ncut_bipartition(graph)
    values = partition.astype(np.float64).reshape(features.grid_h, features.grid_w)
    return AttentionMap(values, state=RAW, source="tokencut")
