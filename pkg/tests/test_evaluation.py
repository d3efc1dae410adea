import numpy as np
import pytest

from guidedmae.data import load_index, load_split
from guidedmae.errors import (
    DegenerateClassError,
    EmptyRelevanceError,
    InsufficientExamplesError,
)
from guidedmae.evaluation import (
    CosineKNN,
    EmbeddingSet,
    LinearProbe,
    average_precision,
    few_shot_indices,
    few_shot_subset,
    knn_accuracy,
    knn_classify,
    retrieval_map,
    robustness_suite,
)


def _embedding_set(vectors, labels, prefix="e"):
    vectors = np.asarray(vectors, dtype=float)
    return EmbeddingSet(vectors, np.asarray(labels), [f"{prefix}{i}" for i in range(len(vectors))])


def _oracle_knn(train_x, train_y, query, k):
    """Pure-python reimplementation of the voting and tie rules."""
    train_unit = train_x / np.linalg.norm(train_x, axis=1, keepdims=True)
    q = query / np.linalg.norm(query)
    sims = train_unit @ q
    neighbors = sorted(range(len(train_x)), key=lambda i: (-sims[i], i))[:k]
    votes = {}
    for i in neighbors:
        votes.setdefault(int(train_y[i]), []).append(1.0 - sims[i])
    best = max(len(v) for v in votes.values())
    tied = [c for c, v in votes.items() if len(v) == best]
    return min(tied, key=lambda c: (sum(votes[c]), c))


def test_knn_exact_match_wins_with_k1():
    train = _embedding_set([[1.0, 0.0], [0.0, 1.0]], [3, 7])
    query = _embedding_set([[0.0, 1.0]], [0])
    assert knn_classify(train, query, k=1)[0] == 7


def test_knn_two_pole_geometry():
    train = _embedding_set([[1, 0], [0.9, 0.1], [0.95, 0.05], [-1, 0], [-0.9, -0.1], [-0.95, -0.05]],
                           [0, 0, 0, 1, 1, 1])
    query = _embedding_set([[0.8, 0.05]], [0])
    assert knn_classify(train, query, k=3)[0] == 0


def test_knn_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    train_x = rng.normal(size=(200, 6))
    train_y = rng.integers(0, 5, size=200)
    queries = rng.normal(size=(40, 6))
    train = _embedding_set(train_x, train_y)
    model = None
    for k in (1, 5, 20):
        preds = knn_classify(train, _embedding_set(queries, np.zeros(40)), k)
        for qi in range(40):
            assert preds[qi] == _oracle_knn(train_x, train_y, queries[qi], k)


def test_knn_accuracy_self_match_and_bounds():
    rng = np.random.default_rng(1)
    vectors = rng.normal(size=(30, 8))
    labels = rng.integers(0, 3, size=30)
    train = _embedding_set(vectors, labels)
    assert knn_accuracy(train, train, k=1) == 1.0
    acc = knn_accuracy(train, train, k=7)
    assert 0.0 <= acc <= 1.0


def test_knn_chance_level_on_permuted_labels():
    rng = np.random.default_rng(2)
    n_classes, m, q = 4, 600, 400
    train = _embedding_set(rng.normal(size=(m, 10)), rng.integers(0, n_classes, size=m))
    query = _embedding_set(rng.normal(size=(q, 10)), rng.integers(0, n_classes, size=q))
    acc = knn_accuracy(train, query, k=20)
    p = 1.0 / n_classes
    sigma = np.sqrt(p * (1 - p) / q)
    assert abs(acc - p) <= 3 * sigma


def test_knn_validation():
    train = _embedding_set(np.eye(3), [0, 1, 2])
    with pytest.raises(InsufficientExamplesError):
        CosineKNN(k=4).fit(train.vectors, train.labels)
    with pytest.raises(InsufficientExamplesError):
        CosineKNN(k=1).fit(np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_probe_separable_toy_set():
    rng = np.random.default_rng(3)
    a = rng.normal(loc=(2.0, 0.0), scale=0.2, size=(40, 2))
    b = rng.normal(loc=(-2.0, 0.0), scale=0.2, size=(40, 2))
    x = np.vstack([a, b])
    y = np.array([0] * 40 + [1] * 40)
    probe = LinearProbe(epochs=400, lr=0.5).fit(x, y)
    assert (probe.predict(x) == y).all()


def test_probe_zero_epochs_uniform():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20, 5))
    y = rng.integers(0, 3, size=20)
    probe = LinearProbe(epochs=0).fit(x, y)
    probs = probe.predict_proba(rng.normal(size=(7, 5)))
    assert np.allclose(probs, 1.0 / 3.0)


def test_probe_loss_monotone_for_small_steps():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(50, 4))
    y = rng.integers(0, 3, size=50)
    probe = LinearProbe(epochs=200, lr=0.05).fit(x, y)
    diffs = np.diff(probe.loss_history_)
    assert (diffs <= 1e-12).all()


def test_probe_degenerate_class_error():
    x = np.random.default_rng(6).normal(size=(10, 3))
    y = np.array([0, 0, 2, 2, 0, 2, 0, 2, 0, 2])
    with pytest.raises(DegenerateClassError):
        LinearProbe(n_classes=3).fit(x, y)


def test_few_shot_contract():
    labels = np.repeat(np.arange(10), 12)
    picks = few_shot_indices(labels, 1, seed=0)
    assert len(picks) == 10
    assert np.array_equal(np.sort(labels[picks]), np.arange(10))
    again = few_shot_indices(labels, 1, seed=0)
    assert np.array_equal(picks, again)
    other = few_shot_indices(labels, 1, seed=1)
    assert not np.array_equal(picks, other)
    five = few_shot_indices(labels, 5, seed=2)
    assert np.array_equal(np.bincount(labels[five]), np.full(10, 5))
    with pytest.raises(InsufficientExamplesError):
        few_shot_indices(labels, 13, seed=0)


def test_few_shot_subset_wraps_indices():
    rng = np.random.default_rng(7)
    embeddings = _embedding_set(rng.normal(size=(40, 4)), np.repeat(np.arange(4), 10))
    subset = few_shot_subset(embeddings, 2, seed=3)
    assert len(subset) == 8
    assert np.array_equal(np.bincount(subset.labels), np.full(4, 2))


def test_average_precision_examples():
    assert average_precision([True, True, False]) == 1.0
    assert average_precision([False, True]) == 0.5
    with pytest.raises(EmptyRelevanceError):
        average_precision([False, False])


def _oracle_ap(ranked_rel):
    hits, precisions = 0, []
    for rank, rel in enumerate(ranked_rel, start=1):
        if rel:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / sum(ranked_rel)


def test_retrieval_map_examples_and_oracle():
    gallery = _embedding_set([[1, 0], [0, 1], [0.7, 0.7]], [0, 1, 0], prefix="g")
    queries = _embedding_set([[1.0, 0.05]], [0], prefix="q")
    # ranking by cosine: g0, g2, g1; relevant {g0, g2} -> AP = (1/1 + 2/2)/2 = 1
    assert retrieval_map(queries, gallery, [{"g0", "g2"}]) == 1.0
    # single relevant ranked second
    assert retrieval_map(queries, gallery, [{"g2"}]) == 0.5
    rng = np.random.default_rng(8)
    gallery = _embedding_set(rng.normal(size=(30, 5)), rng.integers(0, 3, 30), prefix="g")
    queries = _embedding_set(rng.normal(size=(10, 5)), rng.integers(0, 3, 10), prefix="q")
    relevance = []
    for qi in range(10):
        rel = {f"g{i}" for i in rng.choice(30, size=5, replace=False)}
        relevance.append(rel)
    got = retrieval_map(queries, gallery, relevance)
    sims = (queries.vectors / np.linalg.norm(queries.vectors, axis=1, keepdims=True)) @ (
        gallery.vectors / np.linalg.norm(gallery.vectors, axis=1, keepdims=True)
    ).T
    expected = []
    for qi in range(10):
        order = sorted(range(30), key=lambda i: (-sims[qi, i], i))
        ranked_rel = [f"g{i}" in relevance[qi] for i in order]
        expected.append(_oracle_ap(ranked_rel))
    assert abs(got - float(np.mean(expected))) <= 1e-12


def test_retrieval_map_empty_relevance():
    gallery = _embedding_set(np.eye(3), [0, 1, 2], prefix="g")
    queries = _embedding_set(np.eye(2, 3), [0, 1], prefix="q")
    with pytest.raises(EmptyRelevanceError):
        retrieval_map(queries, gallery, [{"g0"}, {"nope"}])


def test_map_perfect_ranking_is_one():
    rng = np.random.default_rng(9)
    gallery = _embedding_set(np.vstack([np.tile([1.0, 0.0], (4, 1)) + rng.normal(0, 0.01, (4, 2)),
                                        np.tile([0.0, 1.0], (4, 1)) + rng.normal(0, 0.01, (4, 2))]),
                             [0] * 4 + [1] * 4, prefix="g")
    queries = _embedding_set([[1.0, 0.0], [0.0, 1.0]], [0, 1], prefix="q")
    relevance = [{f"g{i}" for i in range(4)}, {f"g{i}" for i in range(4, 8)}]
    assert retrieval_map(queries, gallery, relevance) == 1.0


def _fg_histogram_embedder(index):
    """Background-invariant oracle features: histogram of foreground pixels."""
    from guidedmae import fileio

    masks = {
        rec.id: fileio.read_pgm(index.root / "masks" / f"{rec.id}.pgm") // 255
        for rec in index.records
    }
    order = {"train": [r.id for r in index.records if r.split == "train"],
             "val": [r.id for r in index.records if r.split == "val"]}

    def embed_images(images):
        split = "train" if len(images) == len(order["train"]) else "val"
        out = []
        for pixels, rec_id in zip(images, order[split]):
            fg = masks[rec_id].astype(bool)
            rows = []
            for c in range(3):
                hist, _ = np.histogram(pixels[:, :, c][fg], bins=8, range=(0.0, 1.0))
                rows.append(hist / max(fg.sum(), 1))
            out.append(np.concatenate(rows))
        return np.array(out)

    return embed_images


def test_robustness_suite_keys_and_of_equals_ms_for_fg_oracle(mini_dataset):
    index = load_index(mini_dataset.root)
    embedder = _fg_histogram_embedder(index)
    scores = robustness_suite(embedder, index, probe_epochs=150, probe_lr=0.3)
    assert sorted(scores) == ["MN", "MR", "MS", "OF"]
    # foreground histograms are bitwise identical across variants
    assert scores["OF"] == scores["MS"] == scores["MR"] == scores["MN"]


def test_robustness_identity_variant_equals_plain_probe(tmp_path, mini_dataset):
    import shutil

    root = tmp_path / "clone"
    shutil.copytree(mini_dataset.root, root)
    index = load_index(root)
    # overwrite one variant dir with the unmodified val images
    for rec in index.records:
        if rec.split == "val":
            shutil.copyfile(root / rec.path, root / "variants" / "of" / f"{rec.id}.ppm")
    rng = np.random.default_rng(10)
    proj = rng.normal(size=(32 * 32 * 3, 6))

    def embedder(images):
        return images.reshape(len(images), -1) @ proj

    scores = robustness_suite(embedder, index, probe_epochs=120, probe_lr=0.2)
    train_images, train_labels, _ = load_split(index, "train")
    val_images, val_labels, _ = load_split(index, "val")
    probe = LinearProbe(epochs=120, lr=0.2, n_classes=3).fit(embedder(train_images), train_labels)
    plain = float((probe.predict(embedder(val_images)) == val_labels).mean())
    assert scores["OF"] == plain


def test_embedding_set_validation():
    with pytest.raises(ValueError):
        EmbeddingSet(np.array([[np.nan, 1.0]]), np.array([0]), ["a"])
