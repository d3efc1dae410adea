import numpy as np
import pytest

from guidedmae.attention import AttentionMap
from guidedmae.errors import DimensionError, StateError
from guidedmae.patching import (
    attention_descending_mask,
    normalize_targets,
    patchify,
    sample_random_mask,
    unpatchify,
)


def test_patchify_geometry():
    image = np.random.default_rng(0).random((32, 32, 3))
    grid = patchify(image, 16)
    assert grid.patches.shape == (4, 768)
    assert (grid.grid_h, grid.grid_w, grid.patch_size) == (2, 2, 16)


def test_patchify_constant_image():
    grid = patchify(np.full((32, 32, 3), 0.5), 16)
    assert np.array_equal(grid.patches, np.full((4, 768), 0.5))


def test_patchify_row_order_is_row_column_channel():
    image = np.zeros((4, 4, 3))
    image[0, 1, 2] = 1.0  # patch 0, row 0, col 1, channel 2
    grid = patchify(image, 2)
    # flat offset inside the patch: (row * patch + col) * 3 + channel
    assert grid.patches[0, (0 * 2 + 1) * 3 + 2] == 1.0
    assert grid.patches[0].sum() == 1.0


def test_patchify_rejects_indivisible():
    with pytest.raises(DimensionError):
        patchify(np.zeros((30, 32, 3)), 16)
    with pytest.raises(DimensionError):
        patchify(np.zeros((32, 32)), 16)


def test_roundtrip_is_exact_for_random_images():
    rng = np.random.default_rng(7)
    for trial in range(100):
        patch = int(rng.choice([4, 8]))
        gh, gw = rng.integers(1, 5, size=2)
        image = rng.random((gh * patch, gw * patch, 3))
        grid = patchify(image, patch)
        assert np.array_equal(unpatchify(grid), image)


def test_unpatchify_examples():
    image = np.random.default_rng(1).random((32, 32, 3))
    assert np.array_equal(unpatchify(patchify(image, 16)), image)
    zero = patchify(np.zeros((16, 16, 3)), 8)
    assert np.array_equal(unpatchify(zero), np.zeros((16, 16, 3)))


def test_unpatchify_shape_validation():
    grid = patchify(np.zeros((16, 16, 3)), 8)
    grid.patches = grid.patches[:, :-1]
    with pytest.raises(DimensionError):
        unpatchify(grid)


def test_normalize_targets_constant_row_is_zero():
    grid = patchify(np.full((16, 16, 3), 0.3), 8)
    target = normalize_targets(grid, epsilon=1e-6)
    assert np.allclose(target.patches, 0.0)


def test_normalize_targets_two_value_row():
    grid = patchify(np.zeros((2, 2, 3)), 2)
    grid.patches = np.array([[0.0, 1.0]])
    target = normalize_targets(grid, epsilon=1e-15)
    assert np.allclose(target.patches, [[-1.0, 1.0]], atol=1e-6)


def test_normalize_targets_statistics():
    rng = np.random.default_rng(3)
    grid = patchify(rng.random((40, 40, 3)), 8)
    assert grid.patches.shape[0] == 25
    extra = patchify(rng.random((40, 40, 3)), 8)
    rows = np.vstack([grid.patches, extra.patches])
    grid.patches = rows
    target = normalize_targets(grid, epsilon=1e-6)
    assert np.abs(target.patches.mean(axis=1)).max() <= 1e-6
    assert np.abs(target.patches.var(axis=1) - 1.0).max() <= 1e-4


def test_normalize_targets_epsilon_validation():
    grid = patchify(np.zeros((16, 16, 3)), 8)
    with pytest.raises(ValueError):
        normalize_targets(grid, epsilon=0.0)


def test_random_mask_counts():
    spec = sample_random_mask(196, 0.75, 0)
    assert spec.gamma.sum() == 147
    assert len(spec.visible_indices) == 49
    assert np.array_equal(np.flatnonzero(spec.gamma == 0), spec.visible_indices)


def test_random_mask_floor_and_purity():
    # 10 * 0.3 is 2.999... in floating point; the count must still be 3
    assert sample_random_mask(10, 0.3, 0).gamma.sum() == 3
    a = sample_random_mask(64, 0.75, 123)
    b = sample_random_mask(64, 0.75, 123)
    assert np.array_equal(a.gamma, b.gamma)
    c = sample_random_mask(64, 0.75, 124)
    assert not np.array_equal(a.gamma, c.gamma)


def test_random_mask_ratio_validation():
    for ratio in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            sample_random_mask(16, ratio, 0)


def test_random_mask_frequency():
    n, draws = 16, 10_000
    counts = np.zeros(n)
    for seed in range(draws):
        counts += sample_random_mask(n, 0.75, seed).gamma
    freq = counts / draws
    assert freq.min() >= 0.70 and freq.max() <= 0.80


def _brute_force_top_k(values, k):
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return set(order[:k])


def test_descending_mask_examples():
    spec = attention_descending_mask(
        AttentionMap(np.array([[0.1, 0.9], [0.5, 0.3]]), state="normalized"), 0.5
    )
    assert set(np.flatnonzero(spec.gamma)) == {1, 2}
    uniform = attention_descending_mask(
        AttentionMap(np.full((2, 2), 0.4), state="normalized"), 0.75
    )
    assert set(np.flatnonzero(uniform.gamma)) == {0, 1, 2}


def test_descending_mask_matches_sort_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        values = np.round(rng.random((4, 4)), 1)  # coarse values force ties
        spec = attention_descending_mask(AttentionMap(values, state="normalized"), 0.75)
        assert set(np.flatnonzero(spec.gamma)) == _brute_force_top_k(values.ravel(), 12)


def test_descending_mask_requires_normalized_state():
    with pytest.raises(StateError):
        attention_descending_mask(AttentionMap(np.ones((2, 2)), state="raw"), 0.5)
