"""Images to patch grids, per-patch target normalization, and binary masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import NORMALIZED, AttentionMap, _require_state
from .errors import DimensionError


@dataclass
class Image:
    """An image sample: H x W x 3 pixels in [0, 1] plus bookkeeping."""

    pixels: np.ndarray
    label: int
    split: str
    id: str


@dataclass
class PatchGrid:
    """Flattened non-overlapping patches plus the grid geometry.

    Row i is the raster-order (row, column, channel) flattening of patch i;
    patches are ordered row-major over the grid, top-left first.
    """

    patches: np.ndarray
    grid_h: int
    grid_w: int
    patch_size: int

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class MaskSpec:
    """Binary per-patch mask; gamma[i] == 1 means patch i is hidden."""

    gamma: np.ndarray
    ratio: float
    seed: int | None
    visible_indices: np.ndarray

    @property
    def n_masked(self) -> int:
        return int(self.gamma.sum())


@dataclass
class NormalizedTarget:
    """Per-patch standardized reconstruction targets."""

    patches: np.ndarray
    epsilon: float


def _as_pixels(image) -> np.ndarray:
    pixels = image.pixels if isinstance(image, Image) else np.asarray(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got shape {pixels.shape}")
    return pixels


def patchify(image, patch_size: int) -> PatchGrid:
    """Split an image into non-overlapping square patches."""
    pixels = _as_pixels(image)
    h, w, _ = pixels.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(
            f"image {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    patches = (
        pixels.reshape(gh, patch_size, gw, patch_size, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch_size * patch_size * 3)
    )
    return PatchGrid(patches, gh, gw, patch_size)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    """Exact inverse of :func:`patchify`; returns the H x W x 3 pixel array."""
    gh, gw, p = grid.grid_h, grid.grid_w, grid.patch_size
    if grid.patches.shape != (gh * gw, p * p * 3):
        raise DimensionError(
            f"patch matrix {grid.patches.shape} inconsistent with "
            f"{gh}x{gw} grid of {p}px patches"
        )
    return (
        grid.patches.reshape(gh, gw, p, p, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * p, gw * p, 3)
    )


def normalize_targets(grid: PatchGrid, epsilon: float = 1e-6) -> NormalizedTarget:
    """Standardize each patch row by its own mean and variance.

    ``epsilon`` is added to the variance before the square root, so constant
    patches map to all-zero targets instead of dividing by zero.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    x = np.asarray(grid.patches, dtype=np.float64)
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return NormalizedTarget((x - mean) / np.sqrt(var + epsilon), epsilon)


def _masked_count(n_patches: int, ratio: float) -> int:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    # nudge past float error so e.g. 10 * 0.3 still floors to 3
    return int(np.floor(n_patches * ratio + 1e-9))


def _build_spec(masked: np.ndarray, n_patches: int, ratio: float, seed: int | None) -> MaskSpec:
    gamma = np.zeros(n_patches, dtype=np.uint8)
    gamma[masked] = 1
    visible = np.flatnonzero(gamma == 0)
    return MaskSpec(gamma, ratio, seed, visible)


def sample_random_mask(n_patches: int, ratio: float, seed: int) -> MaskSpec:
    """Uniformly random mask over exactly floor(n_patches * ratio) patches.

    A pure function of (n_patches, ratio, seed).
    """
    k = _masked_count(n_patches, ratio)
    rng = np.random.default_rng(seed)
    masked = rng.permutation(n_patches)[:k]
    return _build_spec(masked, n_patches, ratio, seed)


def attention_descending_mask(map_: AttentionMap, ratio: float) -> MaskSpec:
    """Mask the floor(N * ratio) patches with the highest map values.

    Ties go to the lower patch index first, so the mask is deterministic.
    """
    _require_state(map_, NORMALIZED, "attention_descending_mask")
    values = map_.flat
    n = values.size
    k = _masked_count(n, ratio)
    order = np.lexsort((np.arange(n), -values))
    return _build_spec(order[:k], n, ratio, None)
