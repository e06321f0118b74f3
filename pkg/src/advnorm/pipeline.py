"""Preprocessing and patch machinery.

Skull stripping, isotropic resampling, Gaussian standardization,
foreground-centred patch extraction on a stride lattice, stratified
train/validation/test splitting and overlap-averaged reconstruction.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DegenerateInputError, ValidationError
from .volume import DomainSample, SegmentationMask, Volume

logger = logging.getLogger(__name__)

PARTITIONS = ("train", "validation", "test")


def _check_pair(image, mask):
    if image.shape != mask.shape:
        raise ValidationError(f"image shape {image.shape} does not match mask shape {mask.shape}")


def skull_strip(image, mask):
    """Zero every voxel whose label is background."""
    _check_pair(image, mask)
    data = np.where(mask.labels > 0, image.data, np.float32(0))
    return Volume(data, image.spacing)


def resample_isotropic(image, mask, target_spacing=1.0):
    """Resample an image/mask pair onto an isotropic grid.

    Voxel ``i`` covers physical position ``(i + 0.5) * spacing``; output shape
    is ``round(shape * spacing / target)``. Intensities are interpolated
    trilinearly (edge values are clamped), labels by nearest neighbour.
    """
    _check_pair(image, mask)
    target = float(target_spacing)
    if not target > 0:
        raise ValidationError(f"target spacing must be > 0, got {target_spacing}")
    spacing = np.asarray(image.spacing, dtype=np.float64)
    shape = np.asarray(image.shape)
    out_shape = tuple(int(round(n * s / target)) for n, s in zip(shape, spacing))
    if min(out_shape) < 1:
        raise ValidationError(f"resampling {tuple(shape)} at {tuple(spacing)} -> {target} gives empty axis")
    iso = (target,) * 3
    if out_shape == tuple(shape) and np.allclose(spacing, target, rtol=0, atol=0):
        return Volume(image.data, iso), SegmentationMask(mask.labels, mask.n_classes, iso)

    coords = [(np.arange(n) + 0.5) * target / s - 0.5 for n, s in zip(out_shape, spacing)]
    grid = np.meshgrid(*coords, indexing="ij")
    data = ndimage.map_coordinates(image.data.astype(np.float64), grid, order=1, mode="nearest")
    # nearest-neighbour: round half up so the mapping is independent of scipy's spline code
    nn = [np.clip(np.floor(c + 0.5).astype(int), 0, n - 1) for c, n in zip(grid, shape)]
    labels = mask.labels[nn[0], nn[1], nn[2]]
    return Volume(data, iso), SegmentationMask(labels, mask.n_classes, iso)


def resample_intensities(data, spacing, new_spacing, out_shape):
    """Trilinearly resample ``data`` (voxel size ``spacing``) onto a grid of
    ``out_shape`` voxels of size ``new_spacing``, centre-aligned and edge-clamped."""
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    new_spacing = np.broadcast_to(np.asarray(new_spacing, dtype=np.float64), (3,))
    coords = [(np.arange(n) + 0.5) * t / s - 0.5 for n, s, t in zip(out_shape, spacing, new_spacing)]
    grid = np.meshgrid(*coords, indexing="ij")
    return ndimage.map_coordinates(np.asarray(data, dtype=np.float64), grid, order=1, mode="nearest")


def gaussian_standardize(image, mask):
    """Zero-mean, unit-variance (population) foreground; background set to 0."""
    _check_pair(image, mask)
    fg = mask.labels > 0
    if fg.sum() < 2:
        raise DegenerateInputError("standardization needs at least 2 foreground voxels")
    values = image.data[fg].astype(np.float64)
    mean, std = values.mean(), values.std()
    if not std > 0:
        raise DegenerateInputError("foreground intensities have zero variance")
    out = np.zeros(image.shape, dtype=np.float64)
    out[fg] = (values - mean) / std
    return Volume(out, image.spacing)


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Patch:
    image: np.ndarray
    mask: np.ndarray
    domain: int
    center_class: int
    origin: tuple
    source_id: str = ""


def patch_center(origin, patch_size):
    """Centre voxel of a cube; for even sides this is the upper median."""
    return tuple(int(o) + patch_size // 2 for o in origin)


def lattice_origins(shape, patch_size, stride):
    """All stride-lattice corners with ``origin + patch_size <= shape``, lexicographic."""
    axes = [range(0, n - patch_size + 1, stride) for n in shape]
    return list(itertools.product(*axes))


def extract_patches(sample, patch_size=16, stride=8):
    """Cut foreground-centred cubic patches from ``sample`` on the stride lattice."""
    patch_size, stride = int(patch_size), int(stride)
    if patch_size < 1 or stride < 1:
        raise ValidationError("patch size and stride must be positive")
    if min(sample.image.shape) < patch_size:
        raise ValidationError(f"volume {sample.image.shape} is smaller than the patch size {patch_size}")
    labels, data = sample.mask.labels, sample.image.data
    patches = []
    for origin in lattice_origins(sample.image.shape, patch_size, stride):
        cls = int(labels[patch_center(origin, patch_size)])
        if cls == 0:
            continue
        sl = tuple(slice(o, o + patch_size) for o in origin)
        patches.append(Patch(data[sl].copy(), labels[sl].copy(), int(sample.domain), cls,
                             tuple(int(o) for o in origin), sample.sample_id))
    return patches


@dataclass
class PatchSet:
    """Stacked patch arrays, the unit that estimators and trainers consume."""

    images: np.ndarray
    masks: np.ndarray
    domains: np.ndarray
    center_class: np.ndarray
    origins: np.ndarray
    source_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_patches(cls, patches, patch_size=None):
        if not patches:
            p = patch_size or 1
            return cls(np.zeros((0, p, p, p), np.float32), np.zeros((0, p, p, p), np.uint8),
                       np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3), int), [])
        return cls(
            np.stack([p.image for p in patches]).astype(np.float32),
            np.stack([p.mask for p in patches]).astype(np.uint8),
            np.array([p.domain for p in patches]),
            np.array([p.center_class for p in patches]),
            np.array([p.origin for p in patches]),
            [p.source_id for p in patches],
        )

    def subset(self, index):
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return PatchSet(self.images[index], self.masks[index], self.domains[index],
                        self.center_class[index], self.origins[index],
                        [self.source_ids[i] for i in index])

    def to_patches(self):
        return [Patch(self.images[i], self.masks[i], int(self.domains[i]), int(self.center_class[i]),
                      tuple(int(o) for o in self.origins[i]), self.source_ids[i])
                for i in range(len(self))]


@dataclass
class SplitAssignment:
    labels: np.ndarray
    fractions: dict

    def indices(self, partition):
        return np.flatnonzero(self.labels == partition)


def _apportion(n, fractions):
    # largest-remainder rounding keeps every partition within one item of its target
    raw = np.asarray(fractions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def stratified_split(patches, fractions=(0.6, 0.2, 0.2), seed=0):
    """Shuffle-split patches into train/validation/test within each centre-voxel class."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or not np.isclose(sum(fractions), 1.0):
        raise ValidationError(f"split fractions must be 3 non-negative numbers summing to 1, got {fractions}")
    classes = np.asarray([p.center_class for p in patches] if not isinstance(patches, PatchSet)
                         else patches.center_class)
    labels = np.empty(len(classes), dtype=object)
    rng = np.random.default_rng(seed)
    achieved = {}
    for cls in np.unique(classes):
        idx = np.flatnonzero(classes == cls)
        if len(idx) < 3:
            raise ValidationError(f"class {int(cls)} has only {len(idx)} patches; at least 3 are required")
        idx = rng.permutation(idx)
        counts = _apportion(len(idx), fractions)
        bounds = np.cumsum(counts)[:-1]
        for name, part in zip(PARTITIONS, np.split(idx, bounds)):
            labels[part] = name
        achieved[int(cls)] = {name: c / len(idx) for name, c in zip(PARTITIONS, counts)}
    return SplitAssignment(labels.astype(str), achieved)


# --------------------------------------------------------------------------
# reconstruction
# --------------------------------------------------------------------------

def average_patches(values, origins, shape):
    """Average channel-first patch values ``(n, ch, P, P, P)`` into a ``(ch, *shape)`` grid.

    Returns the per-voxel mean and the coverage count (zero where no patch lands).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 5:
        raise ValidationError("patch values must have shape (n, channels, P, P, P)")
    total = np.zeros((values.shape[1],) + tuple(shape))
    count = np.zeros(tuple(shape))
    p = values.shape[2:]
    for v, o in zip(values, origins):
        sl = tuple(slice(int(a), int(a) + n) for a, n in zip(o, p))
        total[(slice(None),) + sl] += v
        count[sl] += 1
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return mean, count


def reconstruct_from_patches(predictions, shape):
    """Merge per-patch class distributions into a full-volume soft segmentation.

    ``predictions`` is an iterable of ``(origin, probs)`` with ``probs`` shaped
    ``(C, P, P, P)``. Overlaps are averaged and renormalized; voxels no patch
    covers are background with probability 1.
    """
    predictions = list(predictions)
    if not predictions:
        raise ValidationError("no patch predictions to reconstruct from")
    origins = [o for o, _ in predictions]
    probs = np.stack([np.asarray(p) for _, p in predictions])
    mean, count = average_patches(probs, origins, shape)
    total = mean.sum(axis=0)
    covered = count > 0
    out = np.zeros_like(mean)
    out[:, covered] = mean[:, covered] / total[covered]
    out[0, ~covered] = 1.0
    return out


def tiling_origins(shape, patch_size, stride):
    """Stride lattice extended with a final origin per axis so every voxel is covered."""
    axes = []
    for n in shape:
        if n < patch_size:
            raise ValidationError(f"axis of length {n} is shorter than the patch size {patch_size}")
        ax = list(range(0, n - patch_size + 1, stride))
        if ax[-1] != n - patch_size:
            ax.append(n - patch_size)
        axes.append(ax)
    return list(itertools.product(*axes))


# --------------------------------------------------------------------------
# sample-level preprocessing chain
# --------------------------------------------------------------------------

def preprocess_sample(sample, target_spacing=1.0, standardize=False):
    """Skull-strip, resample to isotropic spacing and optionally standardize."""
    image = skull_strip(sample.image, sample.mask)
    image, mask = resample_isotropic(image, sample.mask, target_spacing)
    if standardize:
        image = gaussian_standardize(image, mask)
    return DomainSample(image, mask, sample.domain, sample.sample_id)


def prepare_patches(samples, patch_size=16, stride=8, target_spacing=1.0, standardize=False):
    """Preprocess each sample and pool its patches in sample order."""
    patches = []
    for sample in samples:
        patches.extend(extract_patches(preprocess_sample(sample, target_spacing, standardize),
                                       patch_size, stride))
    logger.info("extracted %d patches (P=%d, stride=%d)", len(patches), patch_size, stride)
    return PatchSet.from_patches(patches, patch_size)


class GaussianStandardizer(BaseEstimator, TransformerMixin):
    """Stateless transformer applying :func:`gaussian_standardize` per sample.

    ``transform`` takes and returns lists of :class:`DomainSample`.
    """

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [DomainSample(gaussian_standardize(s.image, s.mask), s.mask, s.domain, s.sample_id)
                for s in X]


class PatchExtractor(BaseEstimator, TransformerMixin):
    """Turn a list of :class:`DomainSample` into a :class:`PatchSet`."""

    def __init__(self, patch_size=16, stride=8, target_spacing=1.0, standardize=False):
        self.patch_size = patch_size
        self.stride = stride
        self.target_spacing = target_spacing
        self.standardize = standardize

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return prepare_patches(X, self.patch_size, self.stride, self.target_spacing, self.standardize)


# --------------------------------------------------------------------------
# dataset -> split patch sets
# --------------------------------------------------------------------------

@dataclass
class Splits:
    """Train/validation/test patch sets cut from one dataset."""

    train: PatchSet
    validation: PatchSet
    test: PatchSet
    n_domains: int
    n_classes: int
    assignment: SplitAssignment = None

    def __getitem__(self, name):
        if name not in PARTITIONS:
            raise ValidationError(f"unknown partition {name!r}; expected one of {PARTITIONS}")
        return getattr(self, name)

    def restrict(self, domains):
        """Copy keeping only patches from ``domains`` in every partition."""
        domains = np.asarray(sorted(domains))
        keep = {p: self[p].subset(np.isin(self[p].domains, domains)) for p in PARTITIONS}
        return Splits(keep["train"], keep["validation"], keep["test"], self.n_domains, self.n_classes,
                      self.assignment)


def load_samples(config):
    """Samples described by an experiment config: its manifest, else generated phantoms.

    Returns ``(samples, n_domains, n_classes)``.
    """
    from .phantom import generate_samples
    from .volume import DatasetManifest

    if config.manifest:
        manifest = DatasetManifest.load(config.manifest)
        return list(manifest), manifest.n_domains, manifest.n_classes
    return list(generate_samples(config.phantom)), config.n_domains, config.n_classes


def split_patch_set(patches, fractions=(0.6, 0.2, 0.2), seed=0, n_domains=None, n_classes=4):
    assignment = stratified_split(patches, fractions, seed)
    parts = {p: patches.subset(assignment.indices(p)) for p in PARTITIONS}
    n_domains = int(patches.domains.max()) if n_domains is None else n_domains
    return Splits(parts["train"], parts["validation"], parts["test"], n_domains, n_classes, assignment)


def build_splits(config, standardize=False, samples=None):
    """Preprocess, extract patches and split them as an experiment config prescribes.

    The split depends only on the patch centre classes and the seed, so the
    raw and standardized variants of one dataset share the same partition.
    """
    if samples is None:
        samples, n_domains, n_classes = load_samples(config)
    else:
        n_domains, n_classes = config.n_domains, config.n_classes
    pc = config.pipeline
    patches = prepare_patches(samples, pc.patch_size, pc.stride, pc.target_spacing, standardize)
    if len(patches) == 0:
        raise ValidationError("no foreground-centred patches could be extracted")
    return split_patch_set(patches, pc.split, config.seed, n_domains, n_classes)
