"""Patch-aligned attention maps and their processing pipeline.

A map moves through three states. ``raw`` is whatever the producing method
emits (object-discovery output, pooled heatmap, ground-truth fraction ...).
``normalized`` is min-max rescaled so the most object-like patch sits at 1
and the most background-like at 0. ``scaled`` is the exponential sharpening
``exp(value / tau)`` that turns the map into loss weights: background zeros
become neutral weights of exactly 1, object patches are amplified up to
``exp(1 / tau)``, and a smaller temperature ``tau`` means stronger guidance.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMapWarning, DimensionError, StateError

RAW = "raw"
NORMALIZED = "normalized"
SCALED = "scaled"
_STATES = (RAW, NORMALIZED, SCALED)

MAP_SOURCES = ("tokencut", "pooled", "ingested", "oracle", "inverted", "model")


@dataclass
class AttentionMap:
    """Grid-aligned scalar field with an explicit processing state."""

    values: np.ndarray
    state: str = RAW
    tau: float | None = None
    source: str = "ingested"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"map values must be 2-D, got shape {self.values.shape}")
        if self.state not in _STATES:
            raise StateError(f"unknown map state {self.state!r}")

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    @property
    def flat(self) -> np.ndarray:
        """Row-major view aligned with patch index order."""
        return self.values.reshape(-1)


def _require_state(map_: AttentionMap, state: str, op: str) -> None:
    if map_.state != state:
        raise StateError(f"{op} requires a {state} map, got state {map_.state!r}")


def normalize_map(raw: AttentionMap) -> AttentionMap:
    """Min-max rescale a raw map to [0, 1].

    A constant map has no foreground signal; it normalizes to all zeros
    (uniform weight 1 after scaling) and emits ``DegenerateMapWarning``.
    """
    _require_state(raw, RAW, "normalize_map")
    vmin = raw.values.min()
    vmax = raw.values.max()
    if vmax == vmin:
        warnings.warn(
            "constant raw map normalizes to all zeros (no foreground)",
            DegenerateMapWarning,
            stacklevel=2,
        )
        values = np.zeros_like(raw.values)
    else:
        values = (raw.values - vmin) / (vmax - vmin)
    return AttentionMap(values, state=NORMALIZED, source=raw.source)


def scale_map(map_: AttentionMap, tau: float) -> AttentionMap:
    """Exponential temperature scaling: ``value <- exp(value / tau)``."""
    _require_state(map_, NORMALIZED, "scale_map")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return AttentionMap(np.exp(map_.values / tau), state=SCALED, tau=float(tau), source=map_.source)


def invert_map(map_: AttentionMap) -> AttentionMap:
    """Flip foreground and background: ``value <- 1 - value``."""
    _require_state(map_, NORMALIZED, "invert_map")
    return AttentionMap(1.0 - map_.values, state=NORMALIZED, source="inverted")


def quantile_zero(map_: AttentionMap, q: float) -> AttentionMap:
    """Zero every value strictly below the empirical ``q``-quantile."""
    _require_state(map_, NORMALIZED, "quantile_zero")
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must be in (0, 1), got {q}")
    threshold = np.quantile(map_.values, q)
    values = np.where(map_.values < threshold, 0.0, map_.values)
    return AttentionMap(values, state=NORMALIZED, source=map_.source)


def pool_heatmap(heatmap: np.ndarray, patch_size: int) -> AttentionMap:
    """Average-pool a pixel heatmap down to the patch grid."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.ndim != 2:
        raise DimensionError(f"heatmap must be 2-D, got shape {heatmap.shape}")
    h, w = heatmap.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(
            f"heatmap {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    values = heatmap.reshape(gh, patch_size, gw, patch_size).mean(axis=(1, 3))
    return AttentionMap(values, state=RAW, source="pooled")


@dataclass
class TemperatureSchedule:
    """Temperature trajectory over a training run.

    ``fixed`` holds ``tau_start``. ``half_cosine`` rises from ``tau_start``
    to ``tau_end`` along one half period of a cosine, so guidance is
    strongest early in training and relaxes toward the end.
    """

    kind: str
    tau_start: float
    tau_end: float
    total_epochs: int

    def __post_init__(self):
        if self.kind not in ("fixed", "half_cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ValueError("schedule temperatures must be positive")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be non-negative")


def temperature_at(schedule: TemperatureSchedule, epoch: int) -> float:
    """Temperature for a given epoch; endpoints are reproduced exactly."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside schedule range [0, {schedule.total_epochs}]"
        )
    if schedule.kind == "fixed":
        return schedule.tau_start
    if epoch == 0:
        return schedule.tau_start
    if epoch == schedule.total_epochs:
        return schedule.tau_end
    frac = (1.0 - math.cos(math.pi * epoch / schedule.total_epochs)) / 2.0
    return schedule.tau_start + (schedule.tau_end - schedule.tau_start) * frac


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def extract_attention(
    tokens: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    n_heads: int,
    bq: np.ndarray | None = None,
    bk: np.ndarray | None = None,
) -> np.ndarray:
    """Multi-head self-attention matrices from a token sequence.

    ``tokens`` is the (n+1) x d sequence (class token first). Each head j
    projects with its slice of ``wq``/``wk`` and returns the row-stochastic
    matrix softmax(Q_j K_j^T / sqrt(d')) with d' = d / n_heads. Output shape
    is (n_heads, n+1, n+1).
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be 2-D, got shape {tokens.shape}")
    t, d = tokens.shape
    if d % n_heads:
        raise DimensionError(f"token dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    q = tokens @ wq
    k = tokens @ wk
    if bq is not None:
        q = q + bq
    if bk is not None:
        k = k + bk
    qh = q.reshape(t, n_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(t, n_heads, dh).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)
    return softmax_rows(scores)


def cls_attention_map(attn: np.ndarray, grid_h: int, grid_w: int, source: str = "model") -> AttentionMap:
    """Head-averaged class-token attention over patch columns, as a raw map."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 3 or attn.shape[1] != attn.shape[2]:
        raise DimensionError(f"expected (heads, T, T) attention, got {attn.shape}")
    if attn.shape[1] != grid_h * grid_w + 1:
        raise DimensionError(
            f"attention over {attn.shape[1]} tokens does not match a "
            f"{grid_h}x{grid_w} grid plus class token"
        )
    row = attn[:, 0, 1:].mean(axis=0)
    return AttentionMap(row.reshape(grid_h, grid_w), state=RAW, source=source)
