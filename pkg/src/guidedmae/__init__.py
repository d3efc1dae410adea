"""Attention-guided masked autoencoder lab.

Pre-trains a tiny ViT masked autoencoder whose reconstruction loss is
weighted by an object-attention map, generates those maps (ground-truth
oracle, normalized-cuts segmentation of patch features, pooled heatmaps),
and evaluates the frozen representations with k-NN, linear probing,
retrieval and background-robustness protocols on synthetic scenes.
"""

from .attention import (
    AttentionMap,
    TemperatureSchedule,
    cls_attention_map,
    extract_attention,
    invert_map,
    normalize_map,
    pool_heatmap,
    quantile_zero,
    scale_map,
    temperature_at,
)
from .data import (
    background_variant,
    generate_dataset,
    load_index,
    oracle_attention,
    oracle_features,
)
from .evaluation import (
    CosineKNN,
    EmbeddingSet,
    LinearProbe,
    few_shot_indices,
    few_shot_subset,
    knn_accuracy,
    knn_classify,
    linear_probe,
    retrieval_map,
    robustness_suite,
)
from .loss import (
    GUIDANCE_MODES,
    PerPatchLoss,
    apply_guidance_mode,
    guided_loss,
    guided_loss_gradient,
    per_patch_mse,
    vanilla_loss,
)
from .model import (
    MaskedAutoencoder,
    ModelConfig,
    ModelParams,
    backward,
    embed,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_mae,
    training_loss,
)
from .patching import (
    Image,
    MaskSpec,
    NormalizedTarget,
    PatchGrid,
    attention_descending_mask,
    normalize_targets,
    patchify,
    sample_random_mask,
    unpatchify,
)
from .segmentation import (
    AffinityGraph,
    PatchFeatures,
    build_affinity,
    jacobi_eigh,
    ncut_bipartition,
    ncut_value,
    tokencut_map,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
