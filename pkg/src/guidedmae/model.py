"""Tiny ViT masked autoencoder with exact manual reverse-mode gradients.

The encoder sees a class token plus the visible patch tokens (pre-norm
attention + MLP blocks); the decoder re-inserts a learned mask token at the
hidden positions and regresses per-patch pixels. All gradients are derived
by hand so training stays deterministic and gradient-checkable in double
precision, with no autodiff dependency.

Positional embeddings are fixed 2-D sinusoids. The image-level embedding
used by every frozen-feature evaluation is the mean of the encoder's patch
tokens after the final layer norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .attention import TemperatureSchedule, temperature_at
from .errors import DimensionError, MissingMapError, NonFiniteLossError
from .loss import FG_QUANTILE, GUIDANCE_MODES, guided_loss_gradient
from .patching import MaskSpec, PatchGrid, normalize_targets, patchify

_LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class ModelConfig:
    """Geometry and sizing of the autoencoder."""

    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    decoder_dim: int = 64
    heads: int = 4
    encoder_blocks: int = 4
    decoder_blocks: int = 2
    mlp_ratio: float = 4.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise DimensionError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}"
            )
        for name, dim in (("embed_dim", self.embed_dim), ("decoder_dim", self.decoder_dim)):
            if dim % self.heads:
                raise DimensionError(f"{name} {dim} not divisible by {self.heads} heads")
            if dim % 4:
                raise DimensionError(f"{name} {dim} must be a multiple of 4 for 2-D sinusoids")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if key == "dtype":
                kwargs[key] = value
            elif key == "mlp_ratio":
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


@dataclass
class ModelParams:
    """Named parameter arrays; shapes are fully determined by the config."""

    arrays: dict
    config: ModelConfig


def sincos_pos_embed(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position codes, one row per patch."""

    def encode(pos: np.ndarray, d: int) -> np.ndarray:
        omega = 1.0 / 10000.0 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        angles = pos[:, None] * omega[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return np.concatenate(
        [encode(ys.reshape(-1).astype(np.float64), dim // 2),
         encode(xs.reshape(-1).astype(np.float64), dim // 2)],
        axis=1,
    )


def _trunc_normal(rng, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    x = rng.standard_normal(shape) * std
    while True:
        bad = np.abs(x) > bound
        if not bad.any():
            return x
        x[bad] = rng.standard_normal(int(bad.sum())) * std


def _block_specs(prefix: str, dim: int, hidden: int):
    yield f"{prefix}.ln1.g", (dim,), "one"
    yield f"{prefix}.ln1.b", (dim,), "zero"
    for proj in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.attn.{proj}", (dim, dim), "weight"
    for bias in ("bq", "bk", "bv", "bo"):
        yield f"{prefix}.attn.{bias}", (dim,), "zero"
    yield f"{prefix}.ln2.g", (dim,), "one"
    yield f"{prefix}.ln2.b", (dim,), "zero"
    yield f"{prefix}.mlp.w1", (dim, hidden), "weight"
    yield f"{prefix}.mlp.b1", (hidden,), "zero"
    yield f"{prefix}.mlp.w2", (hidden, dim), "weight"
    yield f"{prefix}.mlp.b2", (dim,), "zero"


def _param_specs(cfg: ModelConfig):
    d, dd = cfg.embed_dim, cfg.decoder_dim
    yield "patch_embed.w", (cfg.patch_dim, d), "weight"
    yield "patch_embed.b", (d,), "zero"
    yield "cls_token", (d,), "weight"
    for i in range(cfg.encoder_blocks):
        yield from _block_specs(f"enc.{i}", d, int(d * cfg.mlp_ratio))
    yield "enc_norm.g", (d,), "one"
    yield "enc_norm.b", (d,), "zero"
    yield "decoder_embed.w", (d, dd), "weight"
    yield "decoder_embed.b", (dd,), "zero"
    yield "mask_token", (dd,), "weight"
    for i in range(cfg.decoder_blocks):
        yield from _block_specs(f"dec.{i}", dd, int(dd * cfg.mlp_ratio))
    yield "dec_norm.g", (dd,), "one"
    yield "dec_norm.b", (dd,), "zero"
    yield "head.w", (dd, cfg.patch_dim), "weight"
    yield "head.b", (cfg.patch_dim,), "zero"


def init_params(cfg: ModelConfig) -> ModelParams:
    """Seeded init: truncated-normal weights (std 0.02), zero offsets, unit norms."""
    rng = np.random.default_rng(cfg.seed)
    arrays = {}
    for name, shape, kind in _param_specs(cfg):
        if kind == "weight":
            arr = _trunc_normal(rng, shape)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        arrays[name] = arr.astype(cfg.np_dtype)
    return ModelParams(arrays, cfg)


# --- forward / backward primitives ------------------------------------------

def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache, grads, name):
    xhat, inv, g = cache
    lead = tuple(range(dy.ndim - 1))
    grads[f"{name}.g"] += (dy * xhat).sum(axis=lead)
    grads[f"{name}.b"] += dy.sum(axis=lead)
    dxhat = dy * g
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def _gelu_fwd(x):
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _matmul_grads(x, dy, grads, w_name, b_name):
    d_in, d_out = x.shape[-1], dy.shape[-1]
    grads[w_name] += x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
    grads[b_name] += dy.reshape(-1, d_out).sum(axis=0)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attn_fwd(x, p, pre, n_heads):
    q = x @ p[f"{pre}.wq"] + p[f"{pre}.bq"]
    k = x @ p[f"{pre}.wk"] + p[f"{pre}.bk"]
    v = x @ p[f"{pre}.wv"] + p[f"{pre}.bv"]
    qh, kh, vh = (_split_heads(a, n_heads) for a in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = qh @ kh.transpose(0, 1, 3, 2) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    o = _merge_heads(attn @ vh)
    y = o @ p[f"{pre}.wo"] + p[f"{pre}.bo"]
    return y, (x, qh, kh, vh, attn, o, scale), attn


def _attn_bwd(dy, p, pre, cache, grads, n_heads):
    x, qh, kh, vh, attn, o, scale = cache
    _matmul_grads(o, dy, grads, f"{pre}.wo", f"{pre}.bo")
    doh = _split_heads(dy @ p[f"{pre}.wo"].T, n_heads)
    dattn = doh @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ doh
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    ds *= scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))
    _matmul_grads(x, dq, grads, f"{pre}.wq", f"{pre}.bq")
    _matmul_grads(x, dk, grads, f"{pre}.wk", f"{pre}.bk")
    _matmul_grads(x, dv, grads, f"{pre}.wv", f"{pre}.bv")
    return dq @ p[f"{pre}.wq"].T + dk @ p[f"{pre}.wk"].T + dv @ p[f"{pre}.wv"].T


def _block_fwd(x, p, pre, n_heads):
    a1, c_ln1 = _ln_fwd(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
    att, c_att, attn = _attn_fwd(a1, p, f"{pre}.attn", n_heads)
    x1 = x + att
    a2, c_ln2 = _ln_fwd(x1, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
    h1 = a2 @ p[f"{pre}.mlp.w1"] + p[f"{pre}.mlp.b1"]
    g, c_gelu = _gelu_fwd(h1)
    h2 = g @ p[f"{pre}.mlp.w2"] + p[f"{pre}.mlp.b2"]
    return x1 + h2, (c_ln1, c_att, c_ln2, a2, g, c_gelu), attn


def _block_bwd(dy, p, pre, cache, grads, n_heads):
    c_ln1, c_att, c_ln2, a2, g, c_gelu = cache
    _matmul_grads(g, dy, grads, f"{pre}.mlp.w2", f"{pre}.mlp.b2")
    dh1 = _gelu_bwd(dy @ p[f"{pre}.mlp.w2"].T, c_gelu)
    _matmul_grads(a2, dh1, grads, f"{pre}.mlp.w1", f"{pre}.mlp.b1")
    da2 = dh1 @ p[f"{pre}.mlp.w1"].T
    dx1 = _ln_bwd(da2, c_ln2, grads, f"{pre}.ln2") + dy
    da1 = _attn_bwd(dx1, p, f"{pre}.attn", c_att, grads, n_heads)
    return _ln_bwd(da1, c_ln1, grads, f"{pre}.ln1") + dx1


def _pos_tables(cfg: ModelConfig):
    enc = sincos_pos_embed(cfg.embed_dim, cfg.grid, cfg.grid).astype(cfg.np_dtype)
    dec = sincos_pos_embed(cfg.decoder_dim, cfg.grid, cfg.grid).astype(cfg.np_dtype)
    dec_full = np.concatenate([np.zeros((1, cfg.decoder_dim), cfg.np_dtype), dec])
    return enc, dec_full


def _forward(params: ModelParams, patches, vis_idx, want_attn: bool = False):
    """Batched forward: patches (B, N, D), vis_idx (B, V) visible indices.

    Returns (prediction (B, N, D), latent (B, d), cache, attns).
    """
    cfg = params.config
    p = params.arrays
    dtype = cfg.np_dtype
    b, n, _ = patches.shape
    pos_enc, pos_dec = _pos_tables(cfg)

    x_vis = np.take_along_axis(patches, vis_idx[:, :, None], axis=1).astype(dtype)
    tok = x_vis @ p["patch_embed.w"] + p["patch_embed.b"]
    tok = tok + pos_enc[vis_idx]
    cls = np.broadcast_to(p["cls_token"], (b, 1, cfg.embed_dim))
    y = np.concatenate([cls, tok], axis=1)

    attns = []
    enc_caches = []
    for i in range(cfg.encoder_blocks):
        y, cache, attn = _block_fwd(y, p, f"enc.{i}", cfg.heads)
        enc_caches.append(cache)
        if want_attn:
            attns.append(attn)
    y_norm, c_encln = _ln_fwd(y, p["enc_norm.g"], p["enc_norm.b"])
    latent = y_norm[:, 1:, :].mean(axis=1)

    z = y_norm @ p["decoder_embed.w"] + p["decoder_embed.b"]
    zfull = np.empty((b, n + 1, cfg.decoder_dim), dtype=dtype)
    zfull[:] = p["mask_token"]
    zfull[:, 0, :] = z[:, 0, :]
    zpatch = zfull[:, 1:, :]
    np.put_along_axis(zpatch, vis_idx[:, :, None], z[:, 1:, :], axis=1)
    zfull = zfull + pos_dec

    dec_caches = []
    for i in range(cfg.decoder_blocks):
        zfull, cache, attn = _block_fwd(zfull, p, f"dec.{i}", cfg.heads)
        dec_caches.append(cache)
        if want_attn:
            attns.append(attn)
    z_norm, c_decln = _ln_fwd(zfull, p["dec_norm.g"], p["dec_norm.b"])
    pred_full = z_norm @ p["head.w"] + p["head.b"]
    prediction = pred_full[:, 1:, :]

    cache = (x_vis, vis_idx, y_norm, z_norm, enc_caches, c_encln, dec_caches, c_decln)
    return prediction, latent, cache, attns


def _backward(dpred, params: ModelParams, cache):
    """Parameter gradients given d(loss)/d(prediction); exact reverse mode."""
    cfg = params.config
    p = params.arrays
    x_vis, vis_idx, y_norm, z_norm, enc_caches, c_encln, dec_caches, c_decln = cache
    b, n, _ = dpred.shape
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    dpred_full = np.zeros((b, n + 1, cfg.patch_dim), dtype=dpred.dtype)
    dpred_full[:, 1:, :] = dpred
    _matmul_grads(z_norm, dpred_full, grads, "head.w", "head.b")
    dzfull = _ln_bwd(dpred_full @ p["head.w"].T, c_decln, grads, "dec_norm")
    for i in reversed(range(cfg.decoder_blocks)):
        dzfull = _block_bwd(dzfull, p, f"dec.{i}", dec_caches[i], grads, cfg.heads)
    # dzfull is d/d(zfull + pos); positions are constants

    dz = np.empty((b, vis_idx.shape[1] + 1, cfg.decoder_dim), dtype=dpred.dtype)
    dz[:, 0, :] = dzfull[:, 0, :]
    dz_patch = np.take_along_axis(dzfull[:, 1:, :], vis_idx[:, :, None], axis=1)
    dz[:, 1:, :] = dz_patch
    grads["mask_token"] += dzfull[:, 1:, :].sum(axis=(0, 1)) - dz_patch.sum(axis=(0, 1))

    _matmul_grads(y_norm, dz, grads, "decoder_embed.w", "decoder_embed.b")
    dy_norm = dz @ p["decoder_embed.w"].T
    # latent is not on the loss path, so no contribution lands here
    dy = _ln_bwd(dy_norm, c_encln, grads, "enc_norm")
    for i in reversed(range(cfg.encoder_blocks)):
        dy = _block_bwd(dy, p, f"enc.{i}", enc_caches[i], grads, cfg.heads)

    grads["cls_token"] += dy[:, 0, :].sum(axis=0)
    dtok = dy[:, 1:, :]
    _matmul_grads(x_vis, dtok, grads, "patch_embed.w", "patch_embed.b")
    return grads


# --- public single-image operations -----------------------------------------

def _check_grid(params: ModelParams, grid: PatchGrid) -> None:
    cfg = params.config
    if grid.n_patches != cfg.n_patches or grid.patch_size != cfg.patch_size:
        raise DimensionError(
            f"grid {grid.grid_h}x{grid.grid_w}/{grid.patch_size}px does not match "
            f"model geometry {cfg.grid}x{cfg.grid}/{cfg.patch_size}px"
        )


def forward(params: ModelParams, grid: PatchGrid, mask: MaskSpec):
    """Single-image forward; returns (prediction (N, D), latent (d,))."""
    _check_grid(params, grid)
    if mask.gamma.shape[0] != grid.n_patches:
        raise DimensionError("mask length does not match the patch count")
    pred, latent, _, _ = _forward(
        params, grid.patches[None], mask.visible_indices[None]
    )
    return pred[0], latent[0]


def training_loss(params: ModelParams, grid: PatchGrid, mask: MaskSpec, weights) -> float:
    """Scalar guided loss of one image against its normalized targets."""
    from .loss import guided_loss, per_patch_mse

    pred, _ = forward(params, grid, mask)
    target = normalize_targets(grid)
    return guided_loss(per_patch_mse(pred, target), mask, weights)


def backward(params: ModelParams, grid: PatchGrid, mask: MaskSpec, weights) -> dict:
    """Gradients of :func:`training_loss` for every parameter array."""
    _check_grid(params, grid)
    pred, _, cache, _ = _forward(
        params, grid.patches[None], mask.visible_indices[None]
    )
    target = normalize_targets(grid).patches
    dpred = guided_loss_gradient(pred[0], target, mask, weights)
    return _backward(dpred[None].astype(params.config.np_dtype), params, cache)


def block_attentions(params: ModelParams, grid: PatchGrid, mask: MaskSpec):
    """Per-block attention matrices of a forward pass (for inspection/tests)."""
    _check_grid(params, grid)
    _, _, _, attns = _forward(
        params, grid.patches[None], mask.visible_indices[None], want_attn=True
    )
    return [a[0] for a in attns]


# --- optimizer ---------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay touches only rank >= 2 arrays (projection matrices); biases,
    norm parameters and tokens are left undecayed.
    """

    def __init__(self, params: ModelParams, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    def step(self, params: ModelParams, grads: dict, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, arr in params.arrays.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and arr.ndim >= 2:
                arr -= lr * self.weight_decay * arr
            arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def learning_rate_at(epoch: int, total_epochs: int, base_lr: float,
                     warmup_frac: float = 0.05) -> float:
    """Linear warmup over the first ``warmup_frac`` of epochs, then cosine decay."""
    warmup = max(1, int(round(warmup_frac * total_epochs)))
    if epoch < warmup:
        return base_lr * (epoch + 1) / warmup
    if total_epochs <= warmup:
        return base_lr
    progress = (epoch - warmup) / (total_epochs - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- training loop ------------------------------------------------------------

_MODES_NEEDING_MAPS = ("attg", "foreground_only", "background_only", "inverted", "input_masking")


def _mode_weights(mode: str, maps: np.ndarray | None, tau: float,
                  fg_quantile: float = FG_QUANTILE) -> np.ndarray | None:
    """Vectorized loss weights for a stack of normalized maps (M, N).

    Mirrors ``loss.apply_guidance_mode`` image by image; zero entries mark
    patches excluded from the loss mean.
    """
    if mode in ("vanilla", "input_masking"):
        return None  # unit weights
    if mode == "attg":
        return np.exp(maps / tau)
    if mode == "inverted":
        return np.exp((1.0 - maps) / tau)
    base = maps if mode == "foreground_only" else 1.0 - maps
    cutoff = np.quantile(base, fg_quantile, axis=1, keepdims=True)
    below = base < cutoff
    weights = np.exp(np.where(below, 0.0, base) / tau)
    weights[below] = 0.0
    return weights


def _batch_loss_and_grads(params, patches, targets, vis_idx, gamma, weights):
    """Mean-over-images guided loss for one batch plus parameter gradients."""
    cfg = params.config
    b, n, d = patches.shape
    pred, _, cache, _ = _forward(params, patches, vis_idx)
    diff = pred.astype(np.float64) - targets
    per_patch = (diff * diff).mean(axis=2)
    active = gamma & (weights != 0.0)
    denom = active.sum(axis=1)
    if (denom == 0).any():
        from .errors import EmptyMaskError

        raise EmptyMaskError("an image has no masked patches left after weight exclusion")
    masked_w = np.where(active, weights, 0.0)
    per_image = (per_patch * masked_w).sum(axis=1) / denom
    loss = float(per_image.mean())
    coeff = masked_w * (2.0 / (d * denom[:, None] * b))
    dpred = (coeff[:, :, None] * diff).astype(cfg.np_dtype)
    grads = _backward(dpred, params, cache)
    return loss, grads


def _mask_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, 17, epoch, index)).generate_state(1)[0])


def train_mae(
    config: ModelConfig,
    images: np.ndarray,
    *,
    maps: np.ndarray | None = None,
    schedule: TemperatureSchedule | None = None,
    mode: str = "attg",
    epochs: int = 100,
    batch_size: int = 32,
    mask_ratio: float = 0.75,
    base_lr: float = 1.5e-3,
    weight_decay: float = 0.05,
    betas=(0.9, 0.95),
    warmup_frac: float = 0.05,
    seed: int = 0,
    fg_quantile: float = FG_QUANTILE,
    on_epoch=None,
):
    """Train the masked autoencoder; returns (params, log_rows).

    ``images`` is (M, H, W, 3) in [0, 1]; ``maps`` stacks each image's
    normalized attention map (M, grid, grid) and is required for every
    guided mode. Masks are resampled per image and epoch from seeds derived
    from (seed, epoch, image index), so a run is a pure function of its
    arguments. Log rows are (epoch, step, tau, mode, loss) per batch.
    """
    if mode not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance mode {mode!r}")
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != config.image_size:
        raise DimensionError(
            f"expected (M, {config.image_size}, {config.image_size}, 3) images, "
            f"got {images.shape}"
        )
    m_total = images.shape[0]
    needs_maps = mode in _MODES_NEEDING_MAPS
    if needs_maps:
        if maps is None:
            raise MissingMapError(f"guidance mode {mode!r} requires attention maps")
        maps = np.asarray(maps, dtype=np.float64)
        if maps.shape[0] != m_total:
            raise MissingMapError(
                f"{maps.shape[0]} maps supplied for {m_total} images"
            )
        map_rows = maps.reshape(m_total, -1)
        if map_rows.shape[1] != config.n_patches:
            raise DimensionError("map grid does not match the model's patch grid")
    else:
        map_rows = None
    if schedule is None:
        schedule = TemperatureSchedule("half_cosine", 0.75, 1.0, max(epochs - 1, 1))

    dtype = config.np_dtype
    n = config.n_patches
    patches_all = np.stack(
        [patchify(images[i], config.patch_size).patches for i in range(m_total)]
    ).astype(dtype)
    targets_all = np.empty_like(patches_all, dtype=np.float64)
    for i in range(m_total):
        mean = patches_all[i].astype(np.float64).mean(axis=1, keepdims=True)
        var = patches_all[i].astype(np.float64).var(axis=1, keepdims=True)
        targets_all[i] = (patches_all[i] - mean) / np.sqrt(var + 1e-6)

    n_masked = int(np.floor(n * mask_ratio + 1e-9))
    if not 0 < n_masked < n:
        raise ValueError(f"mask ratio {mask_ratio} leaves no masked or no visible patches")

    desc_vis = desc_gamma = None
    if mode == "input_masking":
        order = np.lexsort(
            (np.tile(np.arange(n), (m_total, 1)), -map_rows), axis=1
        )
        desc_gamma = np.zeros((m_total, n), dtype=bool)
        np.put_along_axis(desc_gamma, order[:, :n_masked], True, axis=1)
        desc_vis = np.sort(order[:, n_masked:], axis=1)

    params = init_params(config)
    optimizer = AdamW(params, betas=betas, weight_decay=weight_decay)
    log_rows = []
    step = 0
    for epoch in range(epochs):
        tau = temperature_at(schedule, min(epoch, schedule.total_epochs))
        lr = learning_rate_at(epoch, epochs, base_lr, warmup_frac)
        if needs_maps and mode != "input_masking":
            weights_all = _mode_weights(mode, map_rows, tau, fg_quantile)
        else:
            weights_all = np.ones((m_total, n))
        order = np.random.default_rng(
            np.random.SeedSequence((seed, 11, epoch))
        ).permutation(m_total)
        for start in range(0, m_total, batch_size):
            idx = order[start : start + batch_size]
            if mode == "input_masking":
                vis = desc_vis[idx]
                gamma = desc_gamma[idx]
            else:
                vis = np.empty((len(idx), n - n_masked), dtype=np.int64)
                gamma = np.zeros((len(idx), n), dtype=bool)
                for row, image_idx in enumerate(idx):
                    rng = np.random.default_rng(_mask_seed(seed, epoch, int(image_idx)))
                    hidden = rng.permutation(n)[:n_masked]
                    gamma[row, hidden] = True
                    vis[row] = np.flatnonzero(~gamma[row])
            loss, grads = _batch_loss_and_grads(
                params, patches_all[idx], targets_all[idx], vis, gamma, weights_all[idx]
            )
            if not math.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss {loss} at epoch {epoch}, step {step}"
                )
            optimizer.step(params, grads, lr)
            log_rows.append((epoch, step, tau, mode, loss))
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params, log_rows


def embed(params: ModelParams, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Frozen-feature embeddings: full unmasked encoder pass, mean-pooled."""
    cfg = params.config
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != cfg.image_size or images.shape[2] != cfg.image_size:
        raise DimensionError(
            f"images {images.shape} do not match model geometry "
            f"{cfg.image_size}x{cfg.image_size}"
        )
    n = cfg.n_patches
    out = np.empty((images.shape[0], cfg.embed_dim), dtype=cfg.np_dtype)
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        patches = np.stack(
            [patchify(img, cfg.patch_size).patches for img in chunk]
        ).astype(cfg.np_dtype)
        vis = np.tile(np.arange(n), (len(chunk), 1))
        _, latent, _, _ = _forward(params, patches, vis)
        out[start : start + len(chunk)] = latent
    return out


# --- checkpoint glue ----------------------------------------------------------

def save_checkpoint(path, params: ModelParams) -> None:
    from .fileio import write_checkpoint

    write_checkpoint(path, params.arrays, params.config.to_text())


def load_checkpoint(path) -> ModelParams:
    from .fileio import read_checkpoint

    arrays, config_text = read_checkpoint(path)
    cfg = ModelConfig.from_text(config_text)
    expected = {name: shape for name, shape, _ in _param_specs(cfg)}
    if set(arrays) != set(expected):
        raise DimensionError("checkpoint parameter names do not match the config")
    cast = {name: arrays[name].astype(cfg.np_dtype) for name in arrays}
    for name, shape in expected.items():
        if cast[name].shape != shape:
            raise DimensionError(f"parameter {name} has shape {cast[name].shape}, wanted {shape}")
    ordered = {name: cast[name] for name, _, _ in _param_specs(cfg)}
    return ModelParams(ordered, cfg)


# --- estimator API -------------------------------------------------------------

from sklearn.base import BaseEstimator, TransformerMixin  # noqa: E402
from sklearn.utils.validation import check_array, check_is_fitted  # noqa: E402


class MaskedAutoencoder(BaseEstimator, TransformerMixin):
    """Masked-autoencoder pre-training as a fit/transform estimator.

    ``fit`` trains on an (M, H, W, 3) image stack (optionally guided by
    per-image attention maps); ``transform`` returns the frozen mean-pooled
    encoder embeddings, so the model drops straight into pipelines in front
    of any downstream classifier.

    Parameters mirror :class:`ModelConfig` plus the training loop knobs.
    """

    def __init__(
        self,
        image_size: int = 64,
        patch_size: int = 8,
        embed_dim: int = 128,
        decoder_dim: int = 64,
        heads: int = 4,
        encoder_blocks: int = 4,
        decoder_blocks: int = 2,
        mlp_ratio: float = 4.0,
        guidance: str = "attg",
        mask_ratio: float = 0.75,
        tau_start: float = 0.75,
        tau_end: float = 1.0,
        tau_schedule: str = "half_cosine",
        epochs: int = 100,
        batch_size: int = 32,
        base_lr: float = 1.5e-3,
        weight_decay: float = 0.05,
        warmup_frac: float = 0.05,
        seed: int = 0,
    ):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.decoder_dim = decoder_dim
        self.heads = heads
        self.encoder_blocks = encoder_blocks
        self.decoder_blocks = decoder_blocks
        self.mlp_ratio = mlp_ratio
        self.guidance = guidance
        self.mask_ratio = mask_ratio
        self.tau_start = tau_start
        self.tau_end = tau_end
        self.tau_schedule = tau_schedule
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.warmup_frac = warmup_frac
        self.seed = seed

    def _config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            decoder_dim=self.decoder_dim,
            heads=self.heads,
            encoder_blocks=self.encoder_blocks,
            decoder_blocks=self.decoder_blocks,
            mlp_ratio=self.mlp_ratio,
            seed=self.seed,
        )

    def _check_images(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 4 or X.shape[3] != 3:
            raise DimensionError(f"expected (M, H, W, 3) images, got {X.shape}")
        return X

    def fit(self, X, y=None, maps=None):
        """Pre-train on images; ``maps`` stacks normalized per-image maps."""
        X = self._check_images(X)
        schedule = TemperatureSchedule(
            self.tau_schedule, self.tau_start, self.tau_end, max(self.epochs - 1, 1)
        )
        self.params_, log = train_mae(
            self._config(),
            X,
            maps=maps,
            schedule=schedule,
            mode=self.guidance,
            epochs=self.epochs,
            batch_size=self.batch_size,
            mask_ratio=self.mask_ratio,
            base_lr=self.base_lr,
            weight_decay=self.weight_decay,
            warmup_frac=self.warmup_frac,
            seed=self.seed,
        )
        self.loss_log_ = log
        return self

    def transform(self, X) -> np.ndarray:
        """Frozen embeddings of shape (M, embed_dim)."""
        check_is_fitted(self, "params_")
        return np.asarray(embed(self.params_, self._check_images(X)), dtype=np.float64)
