import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from exceptions import ConfigurationError, DimensionError
from hsi_io import HsiCube, LabelMap
from preprocess import (
    PcaModel, SplitSpec, extract_coords, extract_patches, iter_coord_batches, jacobi_eigh, pca_apply,
    pca_fit, pca_inverse, split,
)
from synthetic import make_synthetic


@pytest.fixture
def correlated_cube(rng):
    mixing = rng.standard_normal((3, 8))
    sources = rng.standard_normal((6 * 7, 3)) * np.array([5.0, 2.0, 0.5])
    data = sources @ mixing + 0.01 * rng.standard_normal((6 * 7, 8))
    return HsiCube(data.reshape(6, 7, 8).astype(np.float32))


def test_jacobi_matches_numpy(rng):
    a = rng.standard_normal((6, 6))
    sym = a @ a.T
    values, vectors, _ = jacobi_eigh(sym)
    assert_allclose(np.sort(values), np.linalg.eigvalsh(sym), rtol=1e-7, atol=1e-7)
    assert_allclose(vectors @ np.diag(values) @ vectors.T, sym, atol=1e-6)
    assert_allclose(vectors.T @ vectors, np.eye(6), atol=1e-10)


@pytest.mark.parametrize("seed", [0, 3])
def test_pca_converges_on_synthetic_scenes(seed):
    model = pca_fit(make_synthetic(seed=seed).cube, 8)
    assert model.components.shape == (32, 8)
    assert_allclose(model.components.T @ model.components, np.eye(8), atol=1e-6)


def test_jacobi_threshold_scales_with_matrix(rng):
    a = rng.standard_normal((8, 8))
    sym = 1e6 * (a @ a.T)
    values, _, _ = jacobi_eigh(sym)
    assert_allclose(np.sort(values), np.linalg.eigvalsh(sym), rtol=1e-7)


def test_pca_components_orthonormal_and_sorted(correlated_cube):
    model = pca_fit(correlated_cube, 4)
    assert model.components.shape == (8, 4)
    assert_allclose(model.components.T @ model.components, np.eye(4), atol=1e-6)
    assert np.all(np.diff(model.eigenvalues) <= 0)
    ratio = model.explained_variance_ratio()
    assert ratio[0] > 0.5
    assert ratio.sum() <= 1.0 + 1e-6


def test_pca_sign_convention(correlated_cube):
    components = pca_fit(correlated_cube, 3).components
    for j in range(3):
        assert components[np.argmax(np.abs(components[:, j])), j] > 0


def test_pca_full_rank_round_trip(correlated_cube):
    model = pca_fit(correlated_cube, 8)
    restored = pca_inverse(pca_apply(correlated_cube, model), model)
    assert_allclose(restored.data, correlated_cube.data, atol=1e-4)


def test_reduced_bands_are_decorrelated(correlated_cube):
    reduced = pca_apply(correlated_cube, pca_fit(correlated_cube, 3)).data.reshape(-1, 3).astype(np.float64)
    cov = np.cov(reduced, rowvar=False)
    off = cov - np.diag(np.diag(cov))
    assert np.max(np.abs(off)) < 1e-3 * np.max(np.diag(cov))
    assert_allclose(reduced.mean(axis=0), 0.0, atol=1e-4)


def test_pca_constant_cube_is_stable():
    model = pca_fit(HsiCube(np.full((3, 3, 4), 2.5, dtype=np.float32)), 2)
    assert_array_equal(model.eigenvalues, np.zeros(2))
    assert_array_equal(pca_apply(HsiCube(np.full((3, 3, 4), 2.5, dtype=np.float32)), model).data, np.zeros((3, 3, 2)))


def test_pca_collinear_bands(rng):
    base = rng.standard_normal((5, 5, 1))
    cube = HsiCube(np.concatenate([base, 2 * base, -base], axis=-1).astype(np.float32))
    model = pca_fit(cube, 2)
    assert model.eigenvalues[1] == pytest.approx(0.0, abs=1e-6)
    assert_allclose(np.abs(model.components[:, 0]), np.array([1, 2, 1]) / np.sqrt(6), atol=1e-6)


def test_pca_stride_and_bounds(correlated_cube):
    strided = pca_fit(correlated_cube, 2, sample_stride=2)
    assert strided.output_bands == 2
    with pytest.raises(ConfigurationError):
        pca_fit(correlated_cube, 9)
    with pytest.raises(ConfigurationError):
        pca_fit(correlated_cube, 0)
    with pytest.raises(DimensionError):
        pca_apply(HsiCube(np.zeros((2, 2, 3))), strided)


def test_pca_params_round_trip(correlated_cube):
    model = pca_fit(correlated_cube, 3)
    back = PcaModel.from_params(model.to_params())
    assert_array_equal(back.components, model.components)
    assert back.total_variance == model.total_variance


def test_patches_centred_with_zero_padding():
    data = np.arange(1, 4 * 5 + 1, dtype=np.float32).reshape(4, 5, 1)
    labels = LabelMap(np.array([[2, 0, 0, 0, 0], [0, 0, 0, 0, 0], [0, 0, 1, 0, 0], [0, 0, 0, 0, 1]]), 2)
    patches = extract_patches(HsiCube(data), labels, 3)
    assert_array_equal(patches.coords, [[0, 0], [2, 2], [3, 4]])
    assert_array_equal(patches.labels, [2, 1, 1])
    assert_array_equal(patches.patches[0, :, :, 0], [[0, 0, 0], [0, 1, 2], [0, 6, 7]])
    assert_array_equal(patches.patches[1, :, :, 0], data[1:4, 1:4, 0])
    assert_array_equal(patches.patches[2, :, :, 0], [[14, 15, 0], [19, 20, 0], [0, 0, 0]])


def test_patch_size_must_be_odd():
    cube = HsiCube(np.zeros((3, 3, 2)))
    with pytest.raises(ConfigurationError):
        extract_coords(cube, [[1, 1]], 4)
    with pytest.raises(DimensionError):
        extract_patches(cube, LabelMap(np.ones((2, 3)), 1), 3)


def test_coord_batches_cover_scene_in_order():
    batches = list(iter_coord_batches(3, 4, 5))
    assert [len(b) for b in batches] == [5, 5, 2]
    flat = np.concatenate(batches)
    assert_array_equal(flat[:, 0] * 4 + flat[:, 1], np.arange(12))
    mask = np.zeros((3, 4), dtype=bool)
    mask[1, 2] = mask[2, 0] = True
    assert_array_equal(np.concatenate(list(iter_coord_batches(3, 4, 5, mask))), [[1, 2], [2, 0]])


def _labelled_set(counts):
    labels = np.concatenate([np.full(n, cls + 1) for cls, n in enumerate(counts)])
    width = len(labels)
    cube = HsiCube(np.zeros((1, width, 1)))
    return extract_patches(cube, LabelMap(labels.reshape(1, width), len(counts)), 3)


def test_split_sizes_with_whole_pool():
    train, val, test = split(_labelled_set([100]), SplitSpec(seed=0, train_fraction=1.0))
    assert (len(train), len(val), len(test)) == (70, 30, 0)


def test_split_is_stratified_and_disjoint():
    patch_set = _labelled_set([40, 20])
    train, val, test = split(patch_set, SplitSpec(seed=3))
    assert len(train) + len(val) + len(test) == 60
    assert np.sum(val.labels == 1) == 6 and np.sum(val.labels == 2) == 3
    assert np.sum(test.labels == 1) == 20 and np.sum(test.labels == 2) == 10
    seen = [tuple(c) for part in (train, val, test) for c in part.coords]
    assert len(set(seen)) == 60


def test_split_is_deterministic_per_seed():
    patch_set = _labelled_set([30, 30])
    first = split(patch_set, SplitSpec(seed=5))[1].coords
    assert_array_equal(first, split(patch_set, SplitSpec(seed=5))[1].coords)
    assert not np.array_equal(first, split(patch_set, SplitSpec(seed=6))[1].coords)


def test_split_with_train_mask():
    patch_set = _labelled_set([10, 10])
    mask = np.zeros((1, 20), dtype=np.int64)
    mask[0, [0, 1, 2, 3, 10, 11, 12, 13]] = 1
    train, val, test = split(patch_set, SplitSpec(seed=0), LabelMap(mask, 1))
    assert len(test) == 12
    assert len(train) + len(val) == 8
    assert np.sum(val.labels == 1) == 1 and np.sum(val.labels == 2) == 1


def test_singleton_class_stays_in_train():
    train, val, _ = split(_labelled_set([1, 10]), SplitSpec(seed=0, train_fraction=1.0))
    assert 1 in train.labels
    assert 1 not in val.labels


def test_split_rejects_bad_fractions():
    with pytest.raises(ConfigurationError):
        SplitSpec(val_fraction=1.0)
    with pytest.raises(ConfigurationError):
        SplitSpec(train_fraction=0.0)


def test_eigenvalues_match_dense_oracle(rng):
    for _ in range(5):
        cube = HsiCube(rng.standard_normal((8, 9, 6)) * rng.uniform(0.5, 3.0, size=6))
        model = pca_fit(cube, 6)
        pixels = cube.data.reshape(-1, 6).astype(np.float64)
        oracle = np.sort(np.linalg.eigvalsh(np.cov(pixels, rowvar=False)))[::-1]
        assert_allclose(model.eigenvalues, oracle, rtol=1e-6)
        assert_allclose(model.components.T @ model.components, np.eye(6), atol=1e-5)
