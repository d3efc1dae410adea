"""Procedural object-on-background scenes with exact ground-truth masks.

A class is a (shape kind, fill pattern) pair drawn in a class-specific
palette, and every class also owns a background texture distribution, so
images carry both object-dependent and background-correlated signal. That
correlation is what makes the background-variant evaluation informative:
swapping in another class's background actively misleads features that
lean on texture.

Everything is a pure function of explicit seeds; per-image randomness is
derived from (dataset seed, image index) so output does not depend on how
generation work is scheduled.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .attention import RAW, AttentionMap
from .errors import (
    DimensionError,
    FormatError,
    GeometryError,
    MissingMapError,
    MissingVariantError,
)
from .patching import Image, patchify
from .segmentation import PatchFeatures

SHAPES = ("circle", "square", "triangle", "cross", "ring")
FILLS = ("solid", "banded")
TEXTURES = ("stripes", "gradient", "checker", "noise")
VARIANTS = ("OF", "MS", "MR", "MN")

_GOLDEN = 0.61803398875
_MIN_COVERAGE, _MAX_COVERAGE = 0.10, 0.50


@dataclass
class SceneSpec:
    """Sampled geometry and appearance parameters for one scene."""

    class_id: int
    shape: str
    fill: str
    center: tuple[float, float]
    scale: float
    rotation: float
    coverage_target: float


@dataclass
class GroundTruthMask:
    """Binary pixel mask and its exact patch-level average pooling."""

    pixel: np.ndarray
    patch: np.ndarray


@dataclass
class Record:
    id: str
    path: str
    label: int
    split: str


@dataclass
class DatasetIndex:
    root: Path
    records: list
    meta: dict


def class_shape(class_id: int) -> str:
    return SHAPES[class_id % len(SHAPES)]


def class_fill(class_id: int) -> str:
    return FILLS[(class_id // len(SHAPES)) % len(FILLS)]


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def _class_palette(class_id: int):
    """Foreground colors are class-specific; backgrounds are shared by the
    texture family (class_id mod 4), so background alone narrows a label only
    to its family and the exact class must be read off the object."""
    hue = (class_id * _GOLDEN) % 1.0
    fg0 = _hsv_to_rgb(hue, 0.85, 0.95)
    fg1 = _hsv_to_rgb((hue + 0.18) % 1.0, 0.85, 0.65)
    bg_hue = ((class_id % len(TEXTURES)) / len(TEXTURES) + 0.37) % 1.0
    bg0 = _hsv_to_rgb(bg_hue, 0.50, 0.62)
    bg1 = _hsv_to_rgb(bg_hue, 0.50, 0.28)
    return fg0, fg1, bg0, bg1


def render_background(class_id: int, image_size: int, rng) -> np.ndarray:
    """Sample one background from the class's texture distribution."""
    *_, bg0, bg1 = _class_palette(class_id)
    kind = TEXTURES[class_id % len(TEXTURES)]
    s = image_size
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    if kind == "stripes":
        angle = rng.uniform(0.0, math.pi)
        period = rng.uniform(6.0, 12.0)
        phase = rng.uniform(0.0, period)
        proj = xs * math.cos(angle) + ys * math.sin(angle) + phase
        t = ((proj / period) % 1.0 < 0.5).astype(np.float64)
    elif kind == "gradient":
        angle = rng.uniform(0.0, 2.0 * math.pi)
        proj = xs * math.cos(angle) + ys * math.sin(angle)
        lo, hi = proj.min(), proj.max()
        t = (proj - lo) / max(hi - lo, 1e-9)
    elif kind == "checker":
        cell = int(rng.choice([8, 12]))
        oy, ox = rng.integers(0, cell, size=2)
        t = (((ys + oy) // cell + (xs + ox) // cell) % 2).astype(np.float64)
    else:  # blocky noise
        block = 4
        coarse = rng.random((s // block + 1, s // block + 1))
        t = np.repeat(np.repeat(coarse, block, 0), block, 1)[:s, :s]
    pixels = bg0[None, None, :] + (bg1 - bg0)[None, None, :] * t[:, :, None]
    pixels = pixels * rng.uniform(0.88, 1.12)
    # irreducible 2px luminance speckle: backgrounds are never exactly
    # predictable from context, only their texture statistics are
    speckle = rng.uniform(-0.12, 0.12, (s // 2 + 1, s // 2 + 1))
    speckle = np.repeat(np.repeat(speckle, 2, 0), 2, 1)[:s, :s]
    pixels = pixels + speckle[:, :, None]
    return np.clip(pixels, 0.0, 1.0)


def _scale_for_coverage(shape: str, coverage: float, image_size: int) -> float:
    area = coverage * image_size * image_size
    if shape == "circle":
        return math.sqrt(area / math.pi)
    if shape == "square":
        return math.sqrt(area) / 2.0
    if shape == "triangle":
        return math.sqrt(4.0 * area / (3.0 * math.sqrt(3.0)))
    if shape == "cross":
        return math.sqrt(9.0 * area / 20.0)
    if shape == "ring":
        return math.sqrt(4.0 * area / (3.0 * math.pi))
    raise ValueError(f"unknown shape {shape!r}")


def _bounding_radius(shape: str, scale: float) -> float:
    if shape == "square":
        return scale * math.sqrt(2.0)
    if shape == "cross":
        return scale * math.sqrt(1.0 + 1.0 / 9.0)
    return scale


def _max_coverage(shape: str, image_size: int, margin: int) -> float:
    bound = (image_size - 2.0 * margin - 2.0) / 2.0
    if bound <= 0:
        return 0.0
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = (lo + hi) / 2.0
        if _bounding_radius(shape, _scale_for_coverage(shape, mid, image_size)) <= bound:
            lo = mid
        else:
            hi = mid
    return lo


def _shape_mask(shape, image_size, center, scale, rotation) -> np.ndarray:
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    dy, dx = ys - center[0], xs - center[1]
    cos_r, sin_r = math.cos(rotation), math.sin(rotation)
    u = dx * cos_r + dy * sin_r
    v = -dx * sin_r + dy * cos_r
    if shape == "circle":
        return u * u + v * v <= scale * scale
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= scale
    if shape == "triangle":
        return (v >= -scale / 2.0) & (math.sqrt(3.0) * np.abs(u) + v <= scale)
    if shape == "cross":
        arm = scale / 3.0
        return ((np.abs(u) <= arm) & (np.abs(v) <= scale)) | (
            (np.abs(v) <= arm) & (np.abs(u) <= scale)
        )
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= scale * scale) & (r2 >= (scale / 2.0) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def _pool_pixel_mask(pixel_mask: np.ndarray, patch_size: int) -> np.ndarray:
    h, w = pixel_mask.shape
    gh, gw = h // patch_size, w // patch_size
    return pixel_mask.astype(np.float64).reshape(gh, patch_size, gw, patch_size).mean(axis=(1, 3))


def render_scene(class_id: int, image_size: int, patch_size: int, rng):
    """Render one scene; returns (uint8 pixels, GroundTruthMask, SceneSpec)."""
    shape, fill = class_shape(class_id), class_fill(class_id)
    margin = patch_size
    f_hi = min(0.45, 0.95 * _max_coverage(shape, image_size, margin))
    f_lo = min(0.15, f_hi * 0.8)
    if f_lo < 0.11:
        f_lo = 0.11
    if f_hi <= f_lo:
        raise GeometryError(
            f"image size {image_size} leaves no room for a {shape} with "
            f"{margin}px margins at >= {_MIN_COVERAGE:.0%} coverage"
        )
    for _ in range(64):
        coverage = rng.uniform(f_lo, f_hi)
        scale = _scale_for_coverage(shape, coverage, image_size)
        bound = _bounding_radius(shape, scale) + 1.0
        lo, hi = margin + bound, image_size - margin - bound
        center = (rng.uniform(lo, hi), rng.uniform(lo, hi))
        rotation = rng.uniform(0.0, 2.0 * math.pi)
        mask = _shape_mask(shape, image_size, center, scale, rotation)
        border_clear = not (
            mask[:margin].any()
            or mask[-margin:].any()
            or mask[:, :margin].any()
            or mask[:, -margin:].any()
        )
        if border_clear and _MIN_COVERAGE <= mask.mean() <= _MAX_COVERAGE:
            break
    else:
        raise GeometryError(f"could not place a {shape} within coverage bounds")

    pixels = render_background(class_id, image_size, rng)
    fg0, fg1, *_ = _class_palette(class_id)
    jitter = rng.uniform(0.85, 1.05)
    if fill == "solid":
        color = np.broadcast_to(fg0 * jitter, pixels.shape)
    else:
        ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
        dy, dx = ys - center[0], xs - center[1]
        v = -dx * math.sin(rotation) + dy * math.cos(rotation)
        band = (np.floor(v / max(2.0, scale / 2.5)) % 2).astype(bool)
        color = np.where(band[:, :, None], fg1[None, None, :], fg0[None, None, :]) * jitter
    pixels = np.where(mask[:, :, None], np.clip(color, 0.0, 1.0), pixels)

    u8 = to_u8(pixels)
    gt = GroundTruthMask(mask.astype(np.uint8), _pool_pixel_mask(mask, patch_size))
    spec = SceneSpec(class_id, shape, fill, center, scale, rotation, coverage)
    return u8, gt, spec


def to_u8(float_pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(float_pixels) * 255.0), 0, 255).astype(np.uint8)


def background_variant(image: Image, gt: GroundTruthMask, mode: str, n_classes: int, seed: int) -> Image:
    """Swap or remove the background; foreground pixels are untouched.

    OF blacks out the background, MS resamples from the image's own class
    distribution, MR draws a uniformly random other class, MN takes the
    cyclically next class id.
    """
    if mode not in VARIANTS:
        raise ValueError(f"unknown background variant {mode!r}")
    pixels = np.asarray(image.pixels)
    if pixels.shape[:2] != gt.pixel.shape:
        raise DimensionError(
            f"mask {gt.pixel.shape} does not align with image {pixels.shape[:2]}"
        )
    u8 = to_u8(pixels)
    size = u8.shape[0]
    rng = np.random.default_rng(seed)
    if mode == "OF":
        bg_u8 = np.zeros_like(u8)
    else:
        if mode == "MS":
            cls = image.label
        elif mode == "MR":
            others = [c for c in range(n_classes) if c != image.label]
            cls = others[int(rng.integers(len(others)))]
        else:  # MN
            cls = (image.label + 1) % n_classes
        bg_u8 = to_u8(render_background(cls, size, rng))
    out = np.where(gt.pixel[:, :, None] == 1, u8, bg_u8)
    return Image(out.astype(np.float64) / 255.0, image.label, image.split, image.id)


def oracle_attention(gt, noise_amp: float = 0.0, seed: int = 0) -> AttentionMap:
    """Ground-truth foreground fraction per patch, optionally corrupted.

    ``gt`` is a GroundTruthMask or the fraction grid itself. ``noise_amp``
    adds seeded uniform noise in [-amp, amp] (clamped back to [0, 1]) to
    emulate lower-quality object-discovery maps.
    """
    values = np.array(gt.patch if isinstance(gt, GroundTruthMask) else gt, dtype=np.float64)
    if noise_amp > 0.0:
        rng = np.random.default_rng(seed)
        values = np.clip(values + rng.uniform(-noise_amp, noise_amp, values.shape), 0.0, 1.0)
    return AttentionMap(values, state=RAW, source="oracle")


def oracle_features(pixels, gt: GroundTruthMask, dim: int = 16, seed: int = 0) -> PatchFeatures:
    """Stand-in patch descriptors that cluster by foreground membership.

    Each patch's base vector combines a steep foreground-fraction response
    with mean color, variance and grid coordinates, then goes through a
    seeded random orthonormal projection to ``dim`` dimensions, which
    preserves the cosine geometry exactly.
    """
    if dim < 8:
        raise ValueError(f"feature dim must be at least 8, got {dim}")
    pixels = np.asarray(pixels, dtype=np.float64)
    gh, gw = gt.patch.shape
    p = pixels.shape[0] // gh
    grid = patchify(pixels, p)
    per_pixel = grid.patches.reshape(grid.n_patches, p * p, 3)
    mean_rgb = per_pixel.mean(axis=1)
    variance = per_pixel.var(axis=(1, 2))
    frac = gt.patch.reshape(-1)
    member = 1.0 / (1.0 + np.exp(-12.0 * (frac - 0.5)))
    iy, ix = np.divmod(np.arange(grid.n_patches), gw)
    base = np.column_stack(
        [
            member,
            1.0 - member,
            0.15 * (mean_rgb[:, 0] - 0.5),
            0.15 * (mean_rgb[:, 1] - 0.5),
            0.15 * (mean_rgb[:, 2] - 0.5),
            0.5 * variance,
            0.08 * ((ix + 0.5) / gw - 0.5),
            0.08 * ((iy + 0.5) / gh - 0.5),
        ]
    )
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((dim, base.shape[1]))
    q, r = np.linalg.qr(raw)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs[None, :]
    return PatchFeatures(base @ q.T, gh, gw)


def _resolve_workers(workers: int | None) -> int:
    cap = os.environ.get("ATTG_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(workers or limit, limit))


def generate_dataset(
    out_dir,
    classes: int = 10,
    per_class: int = 100,
    image_size: int = 64,
    patch_size: int = 8,
    seed: int = 0,
    feature_dim: int = 16,
    workers: int | None = None,
) -> DatasetIndex:
    """Write a deterministic corpus: images, masks, oracle features, variants.

    Layout under ``out_dir``: ``images/`` (PPM), ``masks/`` (PGM pixel
    masks), ``patch_masks/`` (raw ATMP fraction maps), ``features/``
    (PFEA), ``variants/{of,ms,mr,mn}/`` for the val split, ``index.csv``
    and ``dataset.cfg``. The split is 80/20 stratified per class.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    if image_size % patch_size:
        raise DimensionError(
            f"image size {image_size} not divisible by patch size {patch_size}"
        )
    root = Path(out_dir)
    for sub in ("images", "masks", "patch_masks", "features"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for mode in VARIANTS:
        (root / "variants" / mode.lower()).mkdir(parents=True, exist_ok=True)

    proj_seed = int(np.random.SeedSequence((seed, 3)).generate_state(1)[0])
    n_train = int(math.floor(0.8 * per_class))
    total = classes * per_class

    def build(idx: int):
        class_id = idx // per_class
        within = idx % per_class
        split = "train" if within < n_train else "val"
        image_id = f"img_{idx:05d}"
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0, idx)))
        u8, gt, _spec = render_scene(class_id, image_size, patch_size, rng)
        feats = oracle_features(u8.astype(np.float64) / 255.0, gt, feature_dim, proj_seed)
        variants = {}
        if split == "val":
            img = Image(u8.astype(np.float64) / 255.0, class_id, split, image_id)
            for mi, mode in enumerate(VARIANTS):
                vseed = int(np.random.SeedSequence((seed, 1, idx, mi)).generate_state(1)[0])
                variants[mode] = to_u8(background_variant(img, gt, mode, classes, vseed).pixels)
        return image_id, class_id, split, u8, gt, feats, variants

    records = []
    with ThreadPoolExecutor(max_workers=_resolve_workers(workers)) as pool:
        for image_id, class_id, split, u8, gt, feats, variants in pool.map(
            build, range(total)
        ):
            fileio.write_ppm(root / "images" / f"{image_id}.ppm", u8)
            fileio.write_pgm(root / "masks" / f"{image_id}.pgm", gt.pixel * 255)
            fileio.write_atmp(
                root / "patch_masks" / f"{image_id}.atmp",
                AttentionMap(gt.patch, state=RAW, source="oracle"),
            )
            fileio.write_pfea(root / "features" / f"{image_id}.pfea", feats.features)
            for mode, pix in variants.items():
                fileio.write_ppm(root / "variants" / mode.lower() / f"{image_id}.ppm", pix)
            records.append(Record(image_id, f"images/{image_id}.ppm", class_id, split))

    with open(root / "index.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "path", "label", "split"])
        for rec in records:
            writer.writerow([rec.id, rec.path, rec.label, rec.split])
    meta = {
        "classes": classes,
        "per_class": per_class,
        "image_size": image_size,
        "patch_size": patch_size,
        "seed": seed,
        "feature_dim": feature_dim,
    }
    with open(root / "dataset.cfg", "w") as f:
        for key in sorted(meta):
            f.write(f"{key}={meta[key]}\n")
    return DatasetIndex(root, records, {k: str(v) for k, v in meta.items()})


# --- loading ----------------------------------------------------------------

def load_index(root) -> DatasetIndex:
    root = Path(root)
    index_path = root / "index.csv"
    if not index_path.exists():
        raise FileNotFoundError(f"no index.csv under {root}")
    records = []
    with open(index_path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(Record(row["id"], row["path"], int(row["label"]), row["split"]))
    meta = {}
    cfg = root / "dataset.cfg"
    if cfg.exists():
        for line in cfg.read_text().splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                meta[key] = value
    return DatasetIndex(root, records, meta)


def load_split(index: DatasetIndex, split: str):
    """Images, labels and ids of one split as arrays."""
    recs = [r for r in index.records if r.split == split]
    pixels = np.stack(
        [fileio.read_ppm(index.root / r.path).astype(np.float64) / 255.0 for r in recs]
    )
    labels = np.array([r.label for r in recs], dtype=np.int64)
    return pixels, labels, [r.id for r in recs]


def load_variant_split(index: DatasetIndex, mode: str):
    """Val-split images with the given background variant applied."""
    var_dir = index.root / "variants" / mode.lower()
    if not var_dir.is_dir():
        raise MissingVariantError(f"variant directory {var_dir} is missing")
    recs = [r for r in index.records if r.split == "val"]
    pixels = []
    for rec in recs:
        path = var_dir / f"{rec.id}.ppm"
        if not path.exists():
            raise MissingVariantError(f"variant image {path} is missing")
        pixels.append(fileio.read_ppm(path).astype(np.float64) / 255.0)
    labels = np.array([r.label for r in recs], dtype=np.int64)
    return np.stack(pixels), labels, [r.id for r in recs]


def load_patch_mask(index: DatasetIndex, image_id: str) -> np.ndarray:
    """Ground-truth per-patch foreground fraction for one image."""
    return fileio.read_atmp(index.root / "patch_masks" / f"{image_id}.atmp").values


def load_maps(maps_dir, ids, require_state: str | None = None) -> np.ndarray:
    """Stack map values for the given ids; raise if any id has no map file."""
    maps_dir = Path(maps_dir)
    rows = []
    for image_id in ids:
        path = maps_dir / f"{image_id}.atmp"
        if not path.exists():
            raise MissingMapError(f"no attention map for id {image_id!r} in {maps_dir}")
        map_ = fileio.read_atmp(path)
        if require_state is not None and map_.state != require_state:
            raise FormatError(
                f"map {path} is in state {map_.state!r}, expected {require_state!r}"
            )
        rows.append(map_.values)
    return np.stack(rows)
