"""Synthetic multi-domain brain-like phantoms.

Each phantom is a set of nested ellipsoids (CSF shell, GM shell, WM core)
filled with class-conditional Gaussian intensities and modulated by a smooth
multiplicative bias field. Domains differ in class means, noise, GM/WM
contrast and voxel spacing, which is enough to make a segmenter trained on one
domain fail on the other.
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .volume import DatasetManifest, DomainSample, ManifestEntry, SegmentationMask, Volume, save_volume

logger = logging.getLogger(__name__)

CLASS_NAMES = ("background", "CSF", "GM", "WM")
BACKGROUND, CSF, GM, WM = range(4)
MAX_ATTEMPTS = 10


@dataclass
class DomainSpec:
    """Acquisition characteristics of one synthetic domain.

    ``class_means``/``class_stds`` are indexed by label (background, CSF, GM,
    WM). ``contrast_overlap`` pulls the GM and WM means towards their midpoint:
    0 keeps them as given, 1 makes them equal.
    """

    class_means: tuple = (0.0, 0.3, 0.6, 0.8)
    class_stds: tuple = (0.01, 0.05, 0.05, 0.05)
    bias_field_amplitude: float = 0.1
    spacing: tuple = (1.0, 1.0, 1.0)
    contrast_overlap: float = 0.0
    name: str = ""

    def __post_init__(self):
        self.class_means = tuple(float(m) for m in self.class_means)
        self.class_stds = tuple(float(s) for s in self.class_stds)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.class_means) != len(self.class_stds) or len(self.class_means) < 4:
            raise ValidationError("class_means and class_stds need one entry per class (>= 4)")
        if not all(np.isfinite(self.class_means)):
            raise ValidationError("class means must be finite")
        if not all(s > 0 and np.isfinite(s) for s in self.class_stds):
            raise ValidationError("class stds must be finite and > 0")
        if not 0.0 <= self.bias_field_amplitude < 1.0:
            raise ValidationError("bias_field_amplitude must lie in [0, 1)")
        if not 0.0 <= self.contrast_overlap <= 1.0:
            raise ValidationError("contrast_overlap must lie in [0, 1]")
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise ValidationError("spacing must have 3 positive components")

    @property
    def n_classes(self):
        return len(self.class_means)

    def effective_means(self):
        """Class means after applying the GM/WM contrast overlap."""
        means = np.array(self.class_means, dtype=np.float64)
        mid = 0.5 * (means[GM] + means[WM])
        keep = 1.0 - self.contrast_overlap
        means[GM] = mid + keep * (means[GM] - mid)
        means[WM] = mid + keep * (means[WM] - mid)
        return means


@dataclass
class Geometry:
    """Radius ranges, as fractions of the half-extent, for each nested shell."""

    csf_radius: tuple = (0.82, 0.90)
    gm_radius: tuple = (0.70, 0.78)
    wm_radius: tuple = (0.50, 0.62)
    center_jitter: float = 0.04

    def __post_init__(self):
        self.csf_radius = tuple(self.csf_radius)
        self.gm_radius = tuple(self.gm_radius)
        self.wm_radius = tuple(self.wm_radius)
        for lo, hi in (self.csf_radius, self.gm_radius, self.wm_radius):
            if not 0 < lo <= hi <= 1:
                raise ValidationError("radius fractions must satisfy 0 < lo <= hi <= 1")
        if not (self.wm_radius[1] < self.gm_radius[0] and self.gm_radius[1] < self.csf_radius[0]):
            raise ValidationError("shell radius ranges must be strictly nested")


def default_domains():
    """Infant-like (low contrast, isotropic) and adult-like (high contrast, anisotropic)."""
    infant = DomainSpec(
        class_means=(0.0, 0.25, 0.55, 0.75),
        class_stds=(0.02, 0.05, 0.06, 0.06),
        bias_field_amplitude=0.15,
        spacing=(1.0, 1.0, 1.0),
        contrast_overlap=0.5,
        name="infant-like",
    )
    adult = DomainSpec(
        class_means=(1.2, 1.8, 2.6, 3.3),
        class_stds=(0.15, 0.08, 0.08, 0.08),
        bias_field_amplitude=0.1,
        spacing=(0.958, 0.958, 3.0),
        contrast_overlap=0.1,
        name="adult-like",
    )
    return [infant, adult]


@dataclass
class PhantomConfig:
    """Recipe for a multi-domain phantom dataset.

    ``shape`` is the physical field of view in millimetres (equivalently the
    grid shape at 1 mm isotropic spacing); each domain's grid is
    ``round(shape / spacing)``.
    """

    shape: tuple = (40, 40, 40)
    domains: list = field(default_factory=default_domains)
    volumes_per_domain: int = 5
    seed: int = 0
    geometry: Geometry = field(default_factory=Geometry)
    min_side: int = 16

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.domains = [d if isinstance(d, DomainSpec) else DomainSpec(**d) for d in self.domains]
        if isinstance(self.geometry, dict):
            self.geometry = Geometry(**self.geometry)
        if self.volumes_per_domain < 1:
            raise ValidationError("volumes_per_domain must be >= 1")
        if not self.domains:
            raise ValidationError("at least one domain is required")
        if len({d.n_classes for d in self.domains}) != 1:
            raise ValidationError("all domains must share the same number of classes")
        if len(self.shape) != 3 or min(self.shape) < self.min_side:
            raise ValidationError(f"shape {self.shape} must be >= {self.min_side} along every axis")

    @property
    def n_classes(self):
        return self.domains[0].n_classes

    def grid_shape(self, spec):
        return tuple(max(1, int(round(n / s))) for n, s in zip(self.shape, spec.spacing))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "domains" in doc:
            doc["domains"] = [DomainSpec(**d) for d in doc["domains"]]
        if "geometry" in doc:
            doc["geometry"] = Geometry(**doc["geometry"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ValidationError(f"invalid phantom config: {exc}") from None


def _label_geometry(shape, spacing, geometry, rng, n_classes):
    # physical voxel-centre coordinates, normalised to [-1, 1] over the field of view
    extent = np.array(shape) * np.array(spacing)
    axes = [((np.arange(n) + 0.5) * s) / e * 2.0 - 1.0 for n, s, e in zip(shape, spacing, extent)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    center = rng.uniform(-geometry.center_jitter, geometry.center_jitter, size=3)
    labels = np.zeros(shape, dtype=np.uint8)
    for label, (lo, hi) in ((CSF, geometry.csf_radius), (GM, geometry.gm_radius), (WM, geometry.wm_radius)):
        radii = rng.uniform(lo, hi, size=3)
        inside = ((X - center[0]) / radii[0]) ** 2 + ((Y - center[1]) / radii[1]) ** 2 \
            + ((Z - center[2]) / radii[2]) ** 2 <= 1.0
        labels[inside] = label
    # classes beyond WM (if configured) are carved as a small core inside WM
    for extra in range(WM + 1, n_classes):
        radii = rng.uniform(0.1, 0.2, size=3) * (extra - WM)
        inside = ((X - center[0]) / radii[0]) ** 2 + ((Y - center[1]) / radii[1]) ** 2 \
            + ((Z - center[2]) / radii[2]) ** 2 <= 1.0
        labels[inside & (labels == WM)] = extra
    return labels


def bias_field(shape, amplitude, rng, n_modes=3):
    """``exp`` of a sum of low-frequency separable cosine modes with random phases.

    The exponent is bounded by ``amplitude`` in absolute value.
    """
    if amplitude == 0:
        return np.ones(shape)
    field_ = np.zeros(shape)
    for _ in range(n_modes):
        freq = rng.uniform(0.5, 1.0, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        mode = np.ones(shape)
        for axis, n in enumerate(shape):
            u = (np.arange(n) + 0.5) / n
            profile = np.cos(np.pi * freq[axis] * u + phase[axis])
            mode = mode * profile.reshape([-1 if a == axis else 1 for a in range(3)])
        field_ += mode
    return np.exp(amplitude * field_ / n_modes)


def generate_phantom(spec, rng, shape=(40, 40, 40), geometry=None, domain=1, sample_id=""):
    """Draw one phantom for ``spec`` on a grid covering ``shape`` millimetres.

    Regenerates the label geometry (with fresh radii) if any class comes out
    empty, giving up after ten attempts.
    """
    geometry = geometry or Geometry()
    grid = tuple(max(1, int(round(n / s))) for n, s in zip(shape, spec.spacing))
    for attempt in range(MAX_ATTEMPTS):
        labels = _label_geometry(grid, spec.spacing, geometry, rng, spec.n_classes)
        counts = np.bincount(labels.ravel(), minlength=spec.n_classes)
        if (counts > 0).all():
            break
        logger.debug("phantom attempt %d left classes %s empty", attempt, np.flatnonzero(counts == 0))
    else:
        raise ValidationError(f"geometry produced an empty tissue class after {MAX_ATTEMPTS} attempts")

    means = spec.effective_means()
    stds = np.asarray(spec.class_stds)
    noise = rng.standard_normal(grid)
    image = means[labels] + stds[labels] * noise
    image = image * bias_field(grid, spec.bias_field_amplitude, rng)
    return DomainSample(
        Volume(image, spec.spacing),
        SegmentationMask(labels, spec.n_classes, spec.spacing),
        domain,
        sample_id,
    )


def sample_rng(seed, domain, index):
    """Independent RNG stream per (seed, domain, sample index)."""
    return np.random.default_rng([int(seed), int(domain), int(index)])


def generate_samples(config):
    """Yield every sample of ``config`` in deterministic (domain, index) order."""
    for k, spec in enumerate(config.domains, start=1):
        for i in range(config.volumes_per_domain):
            sid = f"d{k}_s{i:03d}"
            yield generate_phantom(spec, sample_rng(config.seed, k, i), config.shape, config.geometry, k, sid)


def generate_domain_dataset(config, out_dir):
    """Generate all phantoms of ``config`` under ``out_dir`` and write ``manifest.json``.

    On any failure the partially written files are removed before re-raising.
    """
    out_dir = Path(out_dir)
    created_dir = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        entries = []
        for sample in generate_samples(config):
            img_name = f"{sample.sample_id}_image.mvol"
            mask_name = f"{sample.sample_id}_mask.mvol"
            save_volume(sample.image, out_dir / img_name)
            written.append(out_dir / img_name)
            save_volume(sample.mask, out_dir / mask_name)
            written.append(out_dir / mask_name)
            entries.append(ManifestEntry(sample.sample_id, img_name, mask_name, sample.domain))
        manifest = DatasetManifest(
            entries,
            n_domains=len(config.domains),
            n_classes=config.n_classes,
            provenance={
                "generator": "advnorm.phantom",
                "seed": int(config.seed),
                "config": config.to_dict(),
            },
            root=out_dir,
        )
        manifest.save(out_dir / "manifest.json")
        written.append(out_dir / "manifest.json")
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        if created_dir:
            shutil.rmtree(out_dir, ignore_errors=True)
        raise
    logger.info("wrote %d phantoms to %s", len(entries), out_dir)
    return manifest


def load_config(path):
    return PhantomConfig.from_dict(json.loads(Path(path).read_text()))
