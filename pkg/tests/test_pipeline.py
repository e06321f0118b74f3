import itertools

import numpy as np
import pytest

from advnorm.exceptions import DegenerateInputError, ValidationError
from advnorm.pipeline import (
    GaussianStandardizer,
    PatchExtractor,
    PatchSet,
    average_patches,
    build_splits,
    extract_patches,
    gaussian_standardize,
    lattice_origins,
    reconstruct_from_patches,
    resample_intensities,
    resample_isotropic,
    skull_strip,
    stratified_split,
    tiling_origins,
)
from advnorm.volume import DomainSample, SegmentationMask, Volume


def _sample(data, labels, spacing=(1.0, 1.0, 1.0), domain=1):
    return DomainSample(Volume(data, spacing), SegmentationMask(labels, 4, spacing), domain, "s")


# ---------------------------------------------------------------- skull strip

def test_skull_strip_cases():
    data = np.random.default_rng(0).normal(size=(3, 3, 3)) + 10
    zero = skull_strip(Volume(data), SegmentationMask(np.zeros((3, 3, 3), int)))
    assert not zero.data.any()
    full = skull_strip(Volume(data), SegmentationMask(np.ones((3, 3, 3), int)))
    np.testing.assert_array_equal(full.data, np.float32(data))
    single = np.zeros((3, 3, 3))
    single[1, 1, 1] = 5.0
    labels = np.zeros((3, 3, 3), int)
    labels[1, 1, 1] = 2
    out = skull_strip(Volume(np.where(labels > 0, 5.0, 7.0)), SegmentationMask(labels))
    assert np.count_nonzero(out.data) == 1 and out.data[1, 1, 1] == 5.0


# ---------------------------------------------------------------- resampling

def test_resample_identity():
    data = np.random.default_rng(1).normal(size=(5, 6, 7))
    labels = np.random.default_rng(2).integers(0, 4, size=(5, 6, 7))
    img, msk = resample_isotropic(Volume(data), SegmentationMask(labels), 1.0)
    np.testing.assert_array_equal(img.data, np.float32(data))
    np.testing.assert_array_equal(msk.labels, labels)


def test_resample_anisotropic_shape():
    spacing = (0.958, 0.958, 3.0)
    img, msk = resample_isotropic(Volume(np.zeros((240, 240, 48)), spacing),
                                  SegmentationMask(np.zeros((240, 240, 48), int), 4, spacing), 1.0)
    assert img.shape == msk.shape == (230, 230, 144)
    assert img.spacing == (1.0, 1.0, 1.0)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_resample_reproduces_affine_ramp(axis):
    n = 12
    idx = np.arange(n, dtype=np.float64)
    ramp = 4.0 * idx + 1.0
    shape = [1, 1, 1]
    shape[axis] = n
    data = np.broadcast_to(ramp.reshape(shape), (n, n, n)).copy()
    spacing = [1.0, 1.0, 1.0]
    spacing[axis] = 2.0
    img, _ = resample_isotropic(Volume(data, tuple(spacing)), SegmentationMask(np.zeros((n, n, n), int), 4,
                                                                                tuple(spacing)), 1.0)
    assert img.shape[axis] == 2 * n
    out = np.moveaxis(img.data, axis, 0)[:, 0, 0].astype(np.float64)
    coords = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    interior = (coords >= 0) & (coords <= n - 1)
    np.testing.assert_array_equal(out[interior], 4.0 * coords[interior] + 1.0)
    # edges are clamped to the nearest sample
    assert out[0] == ramp[0] and out[-1] == ramp[-1]


def test_resample_trilinear_ramp_all_axes():
    g = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in (8, 9, 10)], indexing="ij")
    data = 2.0 * g[0] - 3.0 * g[1] + 0.5 * g[2]
    spacing = (1.0, 2.0, 0.5)
    out_shape = (8, 18, 5)
    out = resample_intensities(data, spacing, 1.0, out_shape)
    c = [(np.arange(n) + 0.5) * 1.0 / s - 0.5 for n, s in zip(out_shape, spacing)]
    cg = np.meshgrid(*c, indexing="ij")
    inside = np.ones(out_shape, bool)
    for k, n in enumerate((8, 9, 10)):
        inside &= (cg[k] >= 0) & (cg[k] <= n - 1)
    expected = 2.0 * cg[0] - 3.0 * cg[1] + 0.5 * cg[2]
    np.testing.assert_allclose(out[inside], expected[inside], rtol=0, atol=1e-12)


def test_resample_labels_nearest_neighbour():
    labels = np.zeros((4, 4, 4), int)
    labels[2:] = 3
    spacing = (2.0, 1.0, 1.0)
    _, msk = resample_isotropic(Volume(np.zeros((4, 4, 4)), spacing), SegmentationMask(labels, 4, spacing))
    assert msk.shape == (8, 4, 4)
    assert set(np.unique(msk.labels)) == {0, 3}
    np.testing.assert_array_equal(msk.labels[:, 0, 0], [0, 0, 0, 0, 3, 3, 3, 3])


# ---------------------------------------------------------------- standardization

def test_standardize_two_values():
    data = np.array([1.0, 3.0] * 4).reshape(2, 2, 2)
    out = gaussian_standardize(Volume(data), SegmentationMask(np.ones((2, 2, 2), int)))
    np.testing.assert_array_equal(out.data, np.where(data == 1.0, -1.0, 1.0))


def test_standardize_idempotent_and_background():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 4, size=(6, 6, 6))
    vol = Volume(rng.normal(size=(6, 6, 6)))
    once = gaussian_standardize(vol, SegmentationMask(labels))
    twice = gaussian_standardize(once, SegmentationMask(labels))
    np.testing.assert_allclose(twice.data, once.data, atol=1e-6)
    assert not once.data[labels == 0].any()
    fg = once.data[labels > 0].astype(np.float64)
    assert abs(fg.mean()) < 1e-6 and abs(fg.std() - 1) < 1e-6


def test_standardize_constant_foreground_errors():
    with pytest.raises(DegenerateInputError):
        gaussian_standardize(Volume(np.full((3, 3, 3), 2.0)), SegmentationMask(np.ones((3, 3, 3), int)))


def test_standardizer_transformer():
    rng = np.random.default_rng(5)
    s = _sample(rng.normal(3, 2, size=(6, 6, 6)), rng.integers(1, 4, size=(6, 6, 6)))
    (out,) = GaussianStandardizer().fit_transform([s])
    assert abs(out.image.data.mean()) < 1e-5 and out.mask is s.mask


# ---------------------------------------------------------------- patches

def _brute_force_origins(labels, patch_size, stride):
    """Every voxel considered as a corner; keep lattice corners that fit and are foreground-centred."""
    found = set()
    nx, ny, nz = labels.shape
    half = patch_size // 2
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if x % stride or y % stride or z % stride:
                    continue
                if x + patch_size > nx or y + patch_size > ny or z + patch_size > nz:
                    continue
                if labels[x + half, y + half, z + half] != 0:
                    found.add((x, y, z))
    return found


def test_extract_patches_matches_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(8, 49, size=3))
        p = int(rng.integers(2, min(shape) + 1))
        stride = int(rng.integers(1, 9))
        labels = (rng.random(shape) < rng.uniform(0.2, 0.8)) * rng.integers(1, 4, size=shape)
        data = rng.normal(size=shape)
        patches = extract_patches(_sample(data, labels), p, stride)
        origins = [pt.origin for pt in patches]
        assert len(origins) == len(set(origins))
        assert set(origins) == _brute_force_origins(labels, p, stride)
        for pt in patches[:5]:
            sl = tuple(slice(o, o + p) for o in pt.origin)
            np.testing.assert_array_equal(pt.image, np.float32(data)[sl])
            np.testing.assert_array_equal(pt.mask, labels[sl])
            assert pt.center_class == labels[tuple(o + p // 2 for o in pt.origin)]


def test_full_foreground_patch_count():
    s = _sample(np.zeros((64, 64, 64)), np.ones((64, 64, 64), int))
    assert len(extract_patches(s, 32, 8)) == 125
    assert len(lattice_origins((64, 64, 64), 32, 8)) == 125


def test_background_only_gives_no_patches():
    s = _sample(np.zeros((20, 20, 20)), np.zeros((20, 20, 20), int))
    assert extract_patches(s, 8, 4) == []


def test_patch_larger_than_volume_errors():
    with pytest.raises(ValidationError):
        extract_patches(_sample(np.zeros((8, 8, 8)), np.ones((8, 8, 8), int)), 16, 8)


def test_patch_extractor_and_patchset():
    rng = np.random.default_rng(6)
    samples = [_sample(rng.normal(size=(20, 20, 20)), np.ones((20, 20, 20), int), domain=d) for d in (1, 2)]
    ps = PatchExtractor(patch_size=8, stride=4).fit_transform(samples)
    assert isinstance(ps, PatchSet) and len(ps) == 2 * 4 ** 3
    assert ps.images.shape == (128, 8, 8, 8) and ps.images.dtype == np.float32
    assert sorted(set(ps.domains.tolist())) == [1, 2]
    sub = ps.subset(ps.domains == 2)
    assert len(sub) == 64 and (sub.domains == 2).all()
    assert len(PatchSet.from_patches(sub.to_patches())) == 64


# ---------------------------------------------------------------- splitting

def _fake_patches(classes):
    return PatchSet(np.zeros((len(classes), 2, 2, 2), np.float32), np.zeros((len(classes), 2, 2, 2), np.uint8),
                    np.ones(len(classes), int), np.asarray(classes), np.zeros((len(classes), 3), int),
                    [""] * len(classes))


def test_stratified_split_ten_and_ten():
    a = stratified_split(_fake_patches([1] * 10 + [2] * 10), seed=3)
    classes = np.array([1] * 10 + [2] * 10)
    for c in (1, 2):
        labels = a.labels[classes == c]
        assert [(labels == p).sum() for p in ("train", "validation", "test")] == [6, 2, 2]
    b = stratified_split(_fake_patches([1] * 10 + [2] * 10), seed=3)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_stratified_split_within_one_patch_per_stratum():
    rng = np.random.default_rng(8)
    for _ in range(20):
        classes = rng.permutation(np.repeat(np.arange(1, 5), rng.integers(3, 60, size=4)))
        a = stratified_split(_fake_patches(classes), seed=int(rng.integers(1000)))
        for c in range(1, 5):
            n = (classes == c).sum()
            for part, f in zip(("train", "validation", "test"), (0.6, 0.2, 0.2)):
                assert abs((a.labels[classes == c] == part).sum() - f * n) < 1


def test_stratified_split_rejects_tiny_strata_and_bad_fractions():
    with pytest.raises(ValidationError):
        stratified_split(_fake_patches([1, 1, 2, 2, 2]))
    with pytest.raises(ValidationError):
        stratified_split(_fake_patches([1] * 5), fractions=(0.5, 0.5, 0.5))


def test_build_splits_on_default_phantoms(default_splits):
    s = default_splits
    total = len(s.train) + len(s.validation) + len(s.test)
    assert total == 349
    for c in np.unique(s.train.center_class):
        n = sum((s[p].center_class == c).sum() for p in ("train", "validation", "test"))
        assert abs((s.train.center_class == c).sum() - 0.6 * n) < 1
    assert set(s.train.domains.tolist()) == {1, 2}
    one = s.restrict([1])
    assert set(one.test.domains.tolist()) == {1}


def test_standardized_splits_share_partition(default_config):
    from advnorm.pipeline import load_samples

    samples, _, _ = load_samples(default_config)
    raw = build_splits(default_config, False, samples)
    std = build_splits(default_config, True, samples)
    np.testing.assert_array_equal(raw.assignment.labels, std.assignment.labels)
    # standardization puts both domains on a common scale
    d1 = std.train.images[(std.train.masks > 0) & (std.train.domains == 1)[:, None, None, None]]
    d2 = std.train.images[(std.train.masks > 0) & (std.train.domains == 2)[:, None, None, None]]
    assert abs(d1.mean() - d2.mean()) < 0.5 and np.abs(std.train.images).max() < 10


# ---------------------------------------------------------------- reconstruction

def test_single_patch_reconstruction_is_identity():
    rng = np.random.default_rng(9)
    p = rng.dirichlet(np.ones(3), size=(4, 4, 4))
    p = np.moveaxis(p, -1, 0)
    out = reconstruct_from_patches([((0, 0, 0), p)], (4, 4, 4))
    np.testing.assert_allclose(out, p, atol=1e-12)


def test_two_overlapping_patches_average():
    rng = np.random.default_rng(10)
    p, q = (np.moveaxis(rng.dirichlet(np.ones(3), size=(4, 4, 4)), -1, 0) for _ in range(2))
    out = reconstruct_from_patches([((0, 0, 0), p), ((0, 0, 0), q)], (4, 4, 4))
    np.testing.assert_allclose(out, (p + q) / 2, atol=1e-12)


def test_uncovered_voxels_are_background():
    p = np.full((2, 2, 2, 2), 0.5)
    out = reconstruct_from_patches([((0, 0, 0), p)], (3, 3, 3))
    assert out[0, 2, 2, 2] == 1.0 and out[1, 2, 2, 2] == 0.0


def test_central_overlap_count_and_direct_sum():
    origins = lattice_origins((64, 64, 64), 32, 8)
    rng = np.random.default_rng(11)
    values = rng.random((len(origins), 1, 32, 32, 32))
    mean, count = average_patches(values, origins, (64, 64, 64))
    assert count[32, 32, 32] == 64
    # direct summation oracle at a handful of voxels
    for v in [(32, 32, 32), (0, 0, 0), (40, 7, 63), (17, 33, 50)]:
        hits = [values[i, 0][tuple(a - o for a, o in zip(v, org))] for i, org in enumerate(origins)
                if all(o <= a < o + 32 for a, o in zip(v, org))]
        assert count[v] == len(hits)
        assert mean[(0,) + v] == pytest.approx(np.mean(hits), abs=1e-12)


def test_tiling_covers_every_voxel():
    for shape in [(40, 40, 40), (42, 42, 39), (16, 17, 31)]:
        origins = tiling_origins(shape, 16, 8)
        _, count = average_patches(np.ones((len(origins), 1, 16, 16, 16)), origins, shape)
        assert count.min() >= 1
        assert len(origins) == len(set(origins))
    with pytest.raises(ValidationError):
        tiling_origins((10, 20, 20), 16, 8)


def test_lattice_origin_order_is_lexicographic():
    origins = lattice_origins((10, 10, 10), 4, 3)
    assert origins == sorted(origins)
    assert origins == list(itertools.product(range(0, 7, 3), repeat=3))
