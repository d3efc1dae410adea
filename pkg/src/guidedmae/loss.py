"""Masked per-patch reconstruction loss and attention-weighted guidance.

The training objective is a mean over masked patches of per-patch MSE,
optionally multiplied elementwise by a temperature-scaled attention map.
Because scaled maps send background zeros to weight 1, background patches
contribute exactly as they do under the unguided loss, while object patches
are amplified by up to exp(1 / tau).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import NORMALIZED, SCALED, AttentionMap, invert_map, quantile_zero, scale_map
from .errors import DimensionError, EmptyMaskError, StateError
from .patching import MaskSpec, NormalizedTarget

GUIDANCE_MODES = (
    "vanilla",
    "attg",
    "foreground_only",
    "background_only",
    "inverted",
    "input_masking",
)

FG_QUANTILE = 0.10  # cutoff for the foreground/background-only variants


@dataclass
class PerPatchLoss:
    """Non-negative per-patch mean squared errors."""

    values: np.ndarray


def per_patch_mse(prediction: np.ndarray, target) -> PerPatchLoss:
    """Mean squared error over each patch's pixel entries."""
    tgt = target.patches if isinstance(target, NormalizedTarget) else np.asarray(target)
    prediction = np.asarray(prediction)
    if prediction.shape != tgt.shape:
        raise DimensionError(
            f"prediction {prediction.shape} and target {tgt.shape} differ"
        )
    diff = prediction - tgt
    return PerPatchLoss((diff * diff).mean(axis=1))


def _loss_inputs(per_patch, mask: MaskSpec, weights):
    values = per_patch.values if isinstance(per_patch, PerPatchLoss) else np.asarray(per_patch)
    w = weights.flat if isinstance(weights, AttentionMap) else np.asarray(weights).reshape(-1)
    gamma = mask.gamma.astype(bool)
    if not (values.shape == w.shape == gamma.shape):
        raise DimensionError(
            f"per-patch loss {values.shape}, weights {w.shape} and mask "
            f"{gamma.shape} must share one length"
        )
    if not gamma.any():
        raise EmptyMaskError("loss is a mean over masked patches; none are masked")
    return values, gamma, w


def guided_loss(per_patch, mask: MaskSpec, weights) -> float:
    """Weighted mean of per-patch losses over the masked patches.

    Weight 0 marks a patch excluded from the mean entirely (used by the
    foreground-/background-only variants); every other weight scales its
    patch's contribution. With all weights 1 this is the unguided loss.
    """
    values, gamma, w = _loss_inputs(per_patch, mask, weights)
    active = gamma & (w != 0.0)
    denom = np.count_nonzero(active)
    if denom == 0:
        raise EmptyMaskError("every masked patch was excluded by a zero weight")
    return float((values * w)[active].sum() / denom)


def vanilla_loss(per_patch, mask: MaskSpec) -> float:
    """Unweighted mean of per-patch losses over the masked patches."""
    values = per_patch.values if isinstance(per_patch, PerPatchLoss) else np.asarray(per_patch)
    return guided_loss(per_patch, mask, np.ones_like(values))


def guided_loss_gradient(prediction: np.ndarray, target, mask: MaskSpec, weights) -> np.ndarray:
    """Gradient of :func:`guided_loss` with respect to the prediction matrix.

    Rows of unmasked or excluded patches are exactly zero.
    """
    tgt = target.patches if isinstance(target, NormalizedTarget) else np.asarray(target)
    prediction = np.asarray(prediction)
    if prediction.shape != tgt.shape:
        raise DimensionError(
            f"prediction {prediction.shape} and target {tgt.shape} differ"
        )
    n, d = prediction.shape
    values, gamma, w = _loss_inputs(np.zeros(n), mask, weights)
    active = gamma & (w != 0.0)
    denom = np.count_nonzero(active)
    if denom == 0:
        raise EmptyMaskError("every masked patch was excluded by a zero weight")
    coeff = np.where(active, w, 0.0) * (2.0 / (d * denom))
    return coeff[:, None] * (prediction - tgt)


def unit_weights(map_: AttentionMap) -> AttentionMap:
    """All-one weights in scaled state (the unguided limit tau -> inf)."""
    return AttentionMap(
        np.ones_like(map_.values), state=SCALED, tau=float("inf"), source=map_.source
    )


def apply_guidance_mode(
    mode: str,
    map_: AttentionMap,
    tau: float,
    fg_quantile: float = FG_QUANTILE,
):
    """Resolve a guidance mode into effective loss weights.

    Returns ``(weights, masking_override)``. ``weights`` is a scaled-state
    map ready for :func:`guided_loss`; entries of exactly 0 mark excluded
    patches. ``masking_override`` is the normalized map to drive
    highest-attention-first input masking, or None for the standard random
    masker.
    """
    if mode not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance mode {mode!r}")
    if mode == "vanilla":
        return unit_weights(map_), None
    if mode == "input_masking":
        if map_.state != NORMALIZED:
            raise StateError("input masking needs a normalized map to rank patches")
        return unit_weights(map_), map_
    if mode == "attg":
        return scale_map(map_, tau), None
    if mode == "inverted":
        return scale_map(invert_map(map_), tau), None
    # foreground_only / background_only
    base = map_ if mode == "foreground_only" else invert_map(map_)
    cutoff = np.quantile(base.values, fg_quantile)
    scaled = scale_map(quantile_zero(base, fg_quantile), tau)
    weights = scaled.values.copy()
    weights[base.values < cutoff] = 0.0
    return AttentionMap(weights, state=SCALED, tau=scaled.tau, source=base.source), None
