"""Experiment configuration: one JSON document describing a complete run.

Top-level keys::

    {"seed": 0,
     "phantom": {...},        # PhantomConfig
     "manifest": null,        # optional path to an existing dataset manifest
     "pipeline": {"patch_size": 16, "stride": 8, "target_spacing": 1.0,
                  "split": [0.6, 0.2, 0.2]},
     "generator": {...}, "segmenter": {...}, "discriminator": {...},
     "loss": {"lambda": 1.0, "epsilon": 1e-8, "class_weights": "inverse_frequency"},
     "train": {...},
     "evaluation": {"jsd_bins": 100, "histogram_bins": 64}}

Unknown keys are rejected so that typos surface as validation errors rather
than silently falling back to defaults.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .exceptions import ValidationError
from .losses import LossConfig
from .networks import DiscriminatorConfig, UNetConfig
from .phantom import PhantomConfig
from .trainer import TrainConfig


def _build(cls, doc, where):
    if doc is None:
        return cls()
    if isinstance(doc, cls):
        return doc
    if not isinstance(doc, dict):
        raise ValidationError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValidationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid {where}: {exc}") from None


@dataclass
class PipelineConfig:
    patch_size: int = 16
    stride: int = 8
    target_spacing: float = 1.0
    split: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if self.patch_size < 1 or self.stride < 1:
            raise ValidationError("patch_size and stride must be positive")
        if not self.target_spacing > 0:
            raise ValidationError("target_spacing must be > 0")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValidationError(f"split must be 3 non-negative fractions summing to 1, got {self.split}")


@dataclass
class EvaluationConfig:
    jsd_bins: int = 100
    histogram_bins: int = 64

    def __post_init__(self):
        if self.jsd_bins < 2 or self.histogram_bins < 2:
            raise ValidationError("histograms need at least 2 bins")


def _loss_from_json(doc):
    if doc is None:
        return LossConfig()
    if isinstance(doc, LossConfig):
        return doc
    doc = dict(doc)
    if "lambda" in doc:
        if "adv_weight" in doc:
            raise ValidationError("loss: give either 'lambda' or 'adv_weight', not both")
        doc["adv_weight"] = doc.pop("lambda")
    return _build(LossConfig, doc, "loss")


def _loss_to_json(loss):
    doc = asdict(loss)
    doc["lambda"] = doc.pop("adv_weight")
    return doc


@dataclass
class ExperimentConfig:
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    manifest: str | None = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    generator: UNetConfig = field(default_factory=UNetConfig)
    segmenter: UNetConfig = field(default_factory=lambda: UNetConfig(identity_skip=False))
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    source: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.validate()

    @property
    def n_domains(self):
        return len(self.phantom.domains)

    @property
    def n_classes(self):
        return self.phantom.n_classes

    def validate(self):
        p = self.pipeline.patch_size
        for name, cfg in (("generator", self.generator), ("segmenter", self.segmenter)):
            if p % (2 ** cfg.depth):
                raise ValidationError(f"patch_size {p} is not divisible by 2**depth of the {name} "
                                      f"({2 ** cfg.depth})")
        if p < 2 ** len(self.discriminator.channels):
            raise ValidationError(f"patch_size {p} is too small for {len(self.discriminator.channels)} "
                                  "strided discriminator convolutions")
        if min(self.phantom.shape) < p and self.manifest is None:
            raise ValidationError(f"phantom field of view {self.phantom.shape} is smaller than patch_size {p}")
        n_weights = None if isinstance(self.loss.class_weights, str) else len(self.loss.class_weights)
        if n_weights is not None and n_weights != self.n_classes:
            raise ValidationError(f"{n_weights} class weights given for {self.n_classes} classes")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError("seed must be a non-negative integer")
        return self

    # ---------------------------------------------------------------- serde
    @classmethod
    def from_dict(cls, doc, source=None):
        if not isinstance(doc, dict):
            raise ValidationError("experiment config must be a JSON object")
        known = {f.name for f in fields(cls)} - {"source"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError(f"unknown top-level key(s): {', '.join(unknown)}")
        phantom = doc.get("phantom")
        if phantom is not None and not isinstance(phantom, PhantomConfig):
            if not isinstance(phantom, dict):
                raise ValidationError("phantom must be a JSON object")
            phantom = PhantomConfig.from_dict(phantom)
        seed = doc.get("seed", 0)
        train = doc.get("train")
        if isinstance(train, dict) and "seed" not in train:
            train = {**train, "seed": seed}
        elif train is None:
            train = {"seed": seed}
        return cls(
            seed=seed,
            phantom=phantom or PhantomConfig(),
            manifest=doc.get("manifest"),
            pipeline=_build(PipelineConfig, doc.get("pipeline"), "pipeline"),
            generator=_build(UNetConfig, doc.get("generator"), "generator"),
            segmenter=_build(UNetConfig, doc.get("segmenter", {"identity_skip": False}), "segmenter"),
            discriminator=_build(DiscriminatorConfig, doc.get("discriminator"), "discriminator"),
            loss=_loss_from_json(doc.get("loss")),
            train=_build(TrainConfig, train, "train"),
            evaluation=_build(EvaluationConfig, doc.get("evaluation"), "evaluation"),
            source=source,
        )

    @classmethod
    def load(cls, path):
        path = os.fspath(path)
        if not os.path.isfile(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path} is not valid JSON: {exc}") from None
        cfg = cls.from_dict(doc, source=os.path.abspath(path))
        if cfg.manifest and not os.path.isabs(cfg.manifest):
            cfg.manifest = os.path.normpath(os.path.join(os.path.dirname(os.path.abspath(path)), cfg.manifest))
        return cfg

    def to_dict(self):
        return {
            "seed": self.seed,
            "phantom": self.phantom.to_dict(),
            "manifest": self.manifest,
            "pipeline": asdict(self.pipeline),
            "generator": asdict(self.generator),
            "segmenter": asdict(self.segmenter),
            "discriminator": asdict(self.discriminator),
            "loss": _loss_to_json(self.loss),
            "train": asdict(self.train),
            "evaluation": asdict(self.evaluation),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    def hash(self):
        """Short content hash of the resolved configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # ------------------------------------------------------------ overrides
    def with_seed(self, seed):
        """Copy with the global seed (and the training seed) replaced."""
        out = copy.deepcopy(self)
        out.seed = int(seed)
        out.train = replace(out.train, seed=int(seed))
        return out.validate()

    def with_pipeline(self, **overrides):
        out = copy.deepcopy(self)
        out.pipeline = replace(out.pipeline, **{k: v for k, v in overrides.items() if v is not None})
        return out.validate()

    def with_train(self, **overrides):
        out = copy.deepcopy(self)
        out.train = replace(out.train, **overrides)
        return out.validate()


def load_config(path=None):
    """Load an experiment config, or return defaults when ``path`` is None."""
    return ExperimentConfig() if path is None else ExperimentConfig.load(path)
