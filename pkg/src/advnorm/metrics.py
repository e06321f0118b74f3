"""Evaluation metrics: hard Dice, intensity histograms, Jensen-Shannon divergence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError

SMOOTHING = 1e-12


def dice_score(prediction, truth, c):
    """Hard Dice ``2|P & T| / (|P| + |T|)`` for class ``c``; 1.0 when both are empty."""
    prediction, truth = np.asarray(prediction), np.asarray(truth)
    if prediction.shape != truth.shape:
        raise ValidationError(f"prediction shape {prediction.shape} != truth shape {truth.shape}")
    p, t = prediction == c, truth == c
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def dice_report(prediction, truth, classes):
    """Per-class Dice plus the list of classes that hit the empty-set convention."""
    scores = {int(c): dice_score(prediction, truth, c) for c in classes}
    empty = [int(c) for c in classes
             if not (np.asarray(prediction) == c).any() and not (np.asarray(truth) == c).any()]
    return scores, empty


@dataclass(frozen=True, eq=False)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.float64)
        if edges.ndim != 1 or len(edges) != len(counts) + 1:
            raise ValidationError("histogram needs len(edges) == len(counts) + 1")
        if not (np.diff(edges) > 0).all():
            raise ValidationError("histogram edges must be strictly increasing")
        if (counts < 0).any():
            raise ValidationError("histogram counts must be non-negative")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_values(cls, values, bins, value_range):
        if bins < 2:
            raise ValidationError("at least 2 bins are required")
        lo, hi = value_range
        if not hi > lo:
            hi = lo + 1.0
        counts, edges = np.histogram(np.asarray(values, dtype=np.float64).ravel(), bins=bins, range=(lo, hi))
        return cls(edges, counts)

    @property
    def empty(self):
        return self.counts.sum() == 0

    @property
    def mass(self):
        total = self.counts.sum()
        return self.counts / total if total else np.zeros_like(self.counts)

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def class_histograms(volume, mask, bins=64, value_range=None, classes=None):
    """Normalized intensity histogram of each foreground class.

    ``volume``/``mask`` may be Volume/SegmentationMask objects or raw arrays.
    Absent classes yield an empty histogram (``hist.empty`` is True).
    """
    data = np.asarray(getattr(volume, "data", volume), dtype=np.float64)
    labels = np.asarray(getattr(mask, "labels", mask))
    if data.shape != labels.shape:
        raise ValidationError(f"volume shape {data.shape} != mask shape {labels.shape}")
    n_classes = getattr(mask, "n_classes", int(labels.max()) + 1 if labels.size else 1)
    classes = range(1, n_classes) if classes is None else classes
    if value_range is None:
        fg = data[labels > 0]
        value_range = (float(fg.min()), float(fg.max())) if fg.size else (0.0, 1.0)
    return {int(c): Histogram.from_values(data[labels == c], bins, value_range) for c in classes}


def kl_divergence(p, q):
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    return float(np.sum(p * np.log(p / q)))


def jsd(histograms):
    """Mean KL divergence (natural log) of each histogram from their average.

    Accepts :class:`Histogram` objects or raw mass vectors. Bins are smoothed by
    an additive 1e-12 before taking logarithms.
    """
    if len(histograms) < 2:
        raise ValidationError("JSD needs at least 2 histograms")
    masses = []
    edges = None
    for h in histograms:
        if isinstance(h, Histogram):
            if edges is None:
                edges = h.edges
            elif h.edges.shape != edges.shape or not np.array_equal(h.edges, edges):
                raise ValidationError("all histograms must share the same binning")
            masses.append(h.mass)
        else:
            masses.append(np.asarray(h, dtype=np.float64))
    if len({m.shape for m in masses}) != 1:
        raise ValidationError("all histograms must share the same binning")
    masses = np.stack(masses)
    if not np.allclose(masses.sum(axis=1), 1.0, atol=1e-9):
        raise ValidationError("histograms must be normalized to unit mass")
    mean = masses.mean(axis=0) + SMOOTHING
    smoothed = masses + SMOOTHING
    return float(np.mean([kl_divergence(m, mean) for m in smoothed]))


def patch_histograms(images, masks, bins=100, value_range=None):
    """One foreground-intensity histogram per patch over a shared range.

    The range defaults to the global min/max of foreground intensities across
    all patches. Patches without foreground are skipped.
    """
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks)
    fg = masks > 0
    if value_range is None:
        values = images[fg]
        if values.size == 0:
            return []
        value_range = (float(values.min()), float(values.max()))
    return [Histogram.from_values(img[m], bins, value_range) for img, m in zip(images, fg) if m.any()]


def patch_jsd(images, masks, bins=100):
    hists = patch_histograms(images, masks, bins)
    if len(hists) < 2:
        return float("nan")
    return jsd(hists)


def histogram_rows(inputs, normalized, masks, bins=64, class_names=None):
    """Per-class histogram rows ``(bin_center, input_mass, normalized_mass, class)``.

    Inputs and generator outputs are binned over one shared range (the union of
    their foreground ranges) so the two curves can be overlaid.
    """
    inputs, normalized = np.asarray(inputs, np.float64), np.asarray(normalized, np.float64)
    fg = np.asarray(masks) > 0
    both = np.concatenate([inputs[fg], normalized[fg]])
    value_range = (float(both.min()), float(both.max())) if both.size else (0.0, 1.0)
    hin = class_histograms(inputs, masks, bins, value_range)
    hout = class_histograms(normalized, masks, bins, value_range)
    rows = []
    for c in hin:
        name = class_names[c] if class_names else str(c)
        for center, a, b in zip(hin[c].centers, hin[c].mass, hout[c].mass):
            rows.append({"bin_center": float(center), "input_mass": float(a),
                         "normalized_mass": float(b), "class": name})
    return rows
