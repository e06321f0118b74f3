"""Volumes, label masks, datasets and the ``.mvol`` container format.

An ``.mvol`` file is a single-line JSON header, a newline, a sentinel line and
a raw little-endian payload::

    {"magic":"MVOL","version":1,"kind":"intensity",...}\\n
    %MVOL-PAYLOAD%\\n
    <payload bytes>

Voxels are serialized with x varying fastest, i.e. the flat index of voxel
``(x, y, z)`` is ``x + nx * (y + ny * z)``. Arrays in memory are indexed
``data[x, y, z]``, so (de)serialization uses Fortran order.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .exceptions import CorruptionError, FormatError, ValidationError

MAGIC = b'{"magic":"MVOL"'
SENTINEL = b"%MVOL-PAYLOAD%\n"
FORMAT_VERSION = 1
EXTENSION = ".mvol"

_KIND_DTYPES = {"intensity": "<f4", "labels": "|u1"}


def _freeze(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValidationError(f"spacing must have 3 components, got {spacing}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValidationError(f"spacing components must be finite and > 0, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensity grid ``data[x, y, z]`` with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume data must be a non-empty 3-D array, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("volume contains non-finite intensities")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    """Hard per-voxel labels in ``{0, ..., n_classes - 1}``; 0 is background."""

    labels: np.ndarray
    n_classes: int = 4
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValidationError(f"mask must be a non-empty 3-D array, got shape {labels.shape}")
        if not 2 <= self.n_classes <= 256:
            raise ValidationError(f"n_classes must lie in [2, 256], got {self.n_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes - 1}]")
        object.__setattr__(self, "labels", _freeze(labels.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self):
        return self.labels.shape

    def one_hot(self, dtype=np.float64):
        """Return the ``(C, nx, ny, nz)`` one-hot encoding of the labels."""
        return one_hot(self.labels, self.n_classes, dtype=dtype)


def one_hot(labels, n_classes, dtype=np.float64):
    """One-hot encode an integer array along a new leading class axis."""
    labels = np.asarray(labels)
    eye = np.eye(n_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, 0)


@dataclass(frozen=True, eq=False)
class DomainSample:
    image: Volume
    mask: SegmentationMask
    domain: int
    sample_id: str = ""

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValidationError(
                f"image shape {self.image.shape} does not match mask shape {self.mask.shape}"
            )
        if int(self.domain) < 1:
            raise ValidationError(f"domain labels start at 1, got {self.domain}")


def flat_index(x, y, z, shape):
    nx, ny, _ = shape
    return x + nx * (y + ny * z)


def unflat_index(index, shape):
    nx, ny, _ = shape
    x = index % nx
    y = (index // nx) % ny
    z = index // (nx * ny)
    return x, y, z


# --------------------------------------------------------------------------
# container I/O
# --------------------------------------------------------------------------

def _encode(header, payload):
    head = dict(magic="MVOL", version=FORMAT_VERSION)
    head.update(header)
    text = json.dumps(head, separators=(",", ":"), sort_keys=False, allow_nan=False)
    return text.encode("utf-8") + b"\n" + SENTINEL + payload


def _decode(raw):
    if not raw.startswith(MAGIC):
        raise FormatError("missing MVOL magic string")
    marker = b"\n" + SENTINEL
    end = raw.find(marker)
    if end < 0:
        raise FormatError("header is not terminated by the payload sentinel")
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    if not isinstance(header, dict) or header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {header.get('version')!r}")
    return header, raw[end + len(marker):]


def _write_atomic(path, blob):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def encode_volume(obj):
    """Serialize a :class:`Volume` or :class:`SegmentationMask` to bytes."""
    if isinstance(obj, Volume):
        kind, arr, extra = "intensity", obj.data, {}
    elif isinstance(obj, SegmentationMask):
        kind, arr, extra = "labels", obj.labels, {"n_classes": int(obj.n_classes)}
    else:
        raise ValidationError(f"cannot serialize object of type {type(obj).__name__}")
    dtype = _KIND_DTYPES[kind]
    header = {
        "kind": kind,
        "shape": [int(s) for s in arr.shape],
        "spacing": [float(s) for s in obj.spacing],
        "dtype": dtype,
        **extra,
    }
    payload = np.asarray(arr, dtype=dtype).tobytes(order="F")
    return _encode(header, payload)


def save_volume(obj, path):
    """Write a volume or mask to ``path``.

    Objects are validated at construction, so an invalid volume can never reach
    the filesystem. Output is byte-for-byte deterministic.
    """
    _write_atomic(path, encode_volume(obj))


def decode_volume(raw):
    header, payload = _decode(raw)
    kind = header.get("kind")
    if kind not in _KIND_DTYPES:
        raise FormatError(f"unknown container kind {kind!r}")
    try:
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed header field: {exc}") from None
    if len(shape) != 3 or min(shape) < 1:
        raise FormatError(f"invalid shape {shape}")
    dtype = np.dtype(_KIND_DTYPES[kind])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise CorruptionError(
            f"payload holds {len(payload)} bytes, header declares {expected} "
            f"({int(np.prod(shape))} voxels of {dtype.str})"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    if kind == "intensity":
        if not np.isfinite(arr).all():
            raise ValidationError("payload contains non-finite intensities")
        return Volume(arr, spacing)
    return SegmentationMask(arr, int(header.get("n_classes", 256)), spacing)


def load_volume(path):
    """Read a :class:`Volume` (``kind=intensity``) or :class:`SegmentationMask`."""
    with open(path, "rb") as fh:
        return decode_volume(fh.read())


def save_tensors(path, tensors, meta=None):
    """Write named numpy arrays plus a JSON ``meta`` block in the container format.

    This is the checkpoint flavour of ``.mvol`` (``kind=tensors``); entries are
    stored in insertion order with C-order payloads.
    """
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, order="C")  # keeps 0-d arrays 0-d
        dtype = arr.dtype.newbyteorder("<")
        blob = arr.astype(dtype, copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": dtype.str,
            "shape": [int(s) for s in arr.shape],
            "offset": offset,
            "nbytes": len(blob),
        })
        chunks.append(blob)
        offset += len(blob)
    header = {"kind": "tensors", "entries": entries, "meta": meta or {}}
    _write_atomic(path, _encode(header, b"".join(chunks)))


def load_tensors(path):
    """Inverse of :func:`save_tensors`; returns ``(tensors, meta)``."""
    with open(path, "rb") as fh:
        header, payload = _decode(fh.read())
    if header.get("kind") != "tensors":
        raise FormatError(f"expected a tensor container, found kind {header.get('kind')!r}")
    tensors = {}
    for entry in header["entries"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(payload):
            raise CorruptionError(f"entry {entry['name']!r} extends past the payload")
        arr = np.frombuffer(payload[start:stop], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    if sum(e["nbytes"] for e in header["entries"]) != len(payload):
        raise CorruptionError("payload size does not match tensor entries")
    return tensors, header["meta"]


# --------------------------------------------------------------------------
# dataset manifest
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    image: str
    mask: str
    domain: int


@dataclass
class DatasetManifest:
    """List of on-disk samples with domain labels.

    Paths are stored relative to the manifest file and resolved against
    ``root`` when samples are loaded.
    """

    samples: list
    n_domains: int
    n_classes: int = 4
    provenance: dict = field(default_factory=dict)
    root: Path = field(default=Path("."), repr=False)

    def __post_init__(self):
        if self.n_domains < 1:
            raise ValidationError(f"K must be >= 1, got {self.n_domains}")
        if self.n_classes < 2:
            raise ValidationError(f"C must be >= 2, got {self.n_classes}")
        self.samples = [s if isinstance(s, ManifestEntry) else ManifestEntry(**s) for s in self.samples]
        for s in self.samples:
            if not 1 <= s.domain <= self.n_domains:
                raise ValidationError(f"sample {s.sample_id!r} has domain {s.domain} outside [1, {self.n_domains}]")
        self.root = Path(self.root)

    def __len__(self):
        return len(self.samples)

    def __iter__(self) -> Iterator[DomainSample]:
        for entry in self.samples:
            yield self.load_sample(entry)

    def domains(self):
        return sorted({s.domain for s in self.samples})

    def load_sample(self, entry):
        image = load_volume(self.root / entry.image)
        mask = load_volume(self.root / entry.mask)
        if not isinstance(image, Volume) or not isinstance(mask, SegmentationMask):
            raise FormatError(f"sample {entry.sample_id!r}: wrong container kinds")
        if mask.n_classes != self.n_classes:
            mask = SegmentationMask(mask.labels, self.n_classes, mask.spacing)
        return DomainSample(image, mask, entry.domain, entry.sample_id)

    def to_dict(self):
        return {
            "n_domains": self.n_domains,
            "n_classes": self.n_classes,
            "provenance": self.provenance,
            "samples": [vars(s) for s in self.samples],
        }

    def save(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid manifest JSON: {exc}") from None
        try:
            return cls(
                samples=doc["samples"],
                n_domains=int(doc["n_domains"]),
                n_classes=int(doc.get("n_classes", 4)),
                provenance=doc.get("provenance", {}),
                root=path.parent,
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed manifest: {exc}") from None

    def subset(self, domains: Sequence[int]):
        keep = set(domains)
        return DatasetManifest(
            [s for s in self.samples if s.domain in keep],
            self.n_domains, self.n_classes, dict(self.provenance), self.root,
        )

