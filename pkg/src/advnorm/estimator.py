"""scikit-learn style wrapper around :class:`advnorm.trainer.Trainer`.

>>> est = AdversarialNormalizer(epochs=10).fit(X, y, domains=z)   # doctest: +SKIP
>>> Xn = est.transform(X)          # generator outputs, same shape as X
>>> labels = est.predict(Xn_raw)   # segmentation of raw patches through G then S
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ValidationError
from .losses import LossConfig
from .metrics import dice_score
from .networks import DiscriminatorConfig, UNetConfig
from .pipeline import PatchSet
from .trainer import MODES, Trainer, TrainConfig
from .validation import check_domains, check_labels, check_patches


def _patch_set(X, y, domains):
    return PatchSet(X, y, domains, y[:, X.shape[1] // 2, X.shape[2] // 2, X.shape[3] // 2].astype(int),
                    np.zeros((len(X), 3), dtype=int), [""] * len(X))


class AdversarialNormalizer(BaseEstimator, TransformerMixin):
    """Jointly trained intensity normalizer (G), segmenter (S) and domain critic (D).

    Parameters
    ----------
    mode : {"adversarial", "no_discriminator", "segmenter_only"}
        Which networks take part in training.
    n_classes : int
        Number of segmentation classes including background.
    epochs : int, optional
        Total epochs including generator pretraining; defaults to
        ``TrainConfig.total_epochs``.
    adv_weight : float
        Weight of the adversarial term in the generator/segmenter objective.
    class_weights : "inverse_frequency", "uniform" or sequence
        Dice class weights.
    warm_start : bool
        When True, a second ``fit`` continues training the existing networks
        up to ``epochs`` instead of starting over.

    Remaining parameters mirror :class:`~advnorm.trainer.TrainConfig` and the
    network configs.
    """

    def __init__(self, mode="adversarial", n_classes=4, epochs=None, pretrain_epochs=3, batch_size=8,
                 optimizer="adamw", lr_generator=1e-5, lr_segmenter=2e-3, lr_discriminator=2e-3,
                 momentum=0.9, weight_decay=0.1, patience=3, factor=10.0, adv_weight=1.0,
                 class_weights="inverse_frequency", generator_channels=(8, 16),
                 segmenter_channels=(8, 16), discriminator_channels=(8, 16, 32),
                 random_state=0, warm_start=False):
        self.mode = mode
        self.n_classes = n_classes
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr_generator = lr_generator
        self.lr_segmenter = lr_segmenter
        self.lr_discriminator = lr_discriminator
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.patience = patience
        self.factor = factor
        self.adv_weight = adv_weight
        self.class_weights = class_weights
        self.generator_channels = generator_channels
        self.segmenter_channels = segmenter_channels
        self.discriminator_channels = discriminator_channels
        self.random_state = random_state
        self.warm_start = warm_start

    def _train_config(self):
        total = self.epochs if self.epochs is not None else TrainConfig().total_epochs
        return TrainConfig(
            pretrain_epochs=self.pretrain_epochs, total_epochs=max(total, self.pretrain_epochs),
            batch_size=self.batch_size, lr_generator=self.lr_generator, lr_segmenter=self.lr_segmenter,
            lr_discriminator=self.lr_discriminator, momentum=self.momentum, weight_decay=self.weight_decay,
            patience=self.patience, factor=self.factor, seed=int(self.random_state), optimizer=self.optimizer,
        )

    def _new_trainer(self, n_domains, patch_size):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        return Trainer(
            mode=self.mode, n_classes=self.n_classes, n_domains=n_domains, patch_size=patch_size,
            generator_config=UNetConfig(tuple(self.generator_channels)),
            segmenter_config=UNetConfig(tuple(self.segmenter_channels), identity_skip=False),
            discriminator_config=DiscriminatorConfig(tuple(self.discriminator_channels)),
            train_config=self._train_config(),
            loss_config=LossConfig(adv_weight=self.adv_weight, class_weights=self.class_weights),
        )

    def fit(self, X, y, domains=None, X_val=None, y_val=None, domains_val=None, callback=None):
        """Train on patches ``X`` (n, P, P, P) with labels ``y`` and 1-based ``domains``.

        ``X`` may also be a :class:`~advnorm.pipeline.PatchSet`, in which case
        ``y`` and ``domains`` default to its masks and domains.
        """
        if isinstance(X, PatchSet):
            y = X.masks if y is None else y
            domains = X.domains if domains is None else domains
        X = check_patches(X)
        y = check_labels(y, X, self.n_classes)
        domains = check_domains(np.ones(len(X), int) if domains is None else domains, len(X))
        train = _patch_set(X, y, domains)
        val = None
        if X_val is not None:
            if isinstance(X_val, PatchSet):
                y_val = X_val.masks if y_val is None else y_val
                domains_val = X_val.domains if domains_val is None else domains_val
            Xv = check_patches(X_val, "X_val")
            yv = check_labels(y_val, Xv, self.n_classes, "y_val")
            dv = check_domains(np.ones(len(Xv), int) if domains_val is None else domains_val, len(Xv),
                               "domains_val")
            val = _patch_set(Xv, yv, dv)

        n_domains = int(max(domains.max(), 1 if val is None else val.domains.max()))
        if not (self.warm_start and hasattr(self, "trainer_")):
            self.trainer_ = self._new_trainer(max(n_domains, 1), X.shape[1])
        elif self.trainer_.patch_size != X.shape[1]:
            raise ValidationError("warm start requires the patch size of the first fit")
        self.trainer_.fit(train, val, epochs=self._train_config().total_epochs, callback=callback)
        self.n_domains_ = self.trainer_.n_domains
        self.patch_size_ = self.trainer_.patch_size
        self.class_weights_ = self.trainer_.class_weights
        self.history_ = self.trainer_.history
        return self

    def _check_input(self, X):
        check_is_fitted(self, "trainer_")
        X = check_patches(X)
        if X.shape[1] != self.patch_size_:
            raise ValidationError(f"expected {self.patch_size_}^3 patches, got {X.shape[1:]}")
        return X

    def transform(self, X):
        """Generator outputs ``G(X)``, same shape as ``X``."""
        X = self._check_input(X)
        return self.trainer_.normalize(X)

    def predict_proba(self, X):
        """Per-voxel class probabilities, shape ``(n, C, P, P, P)``."""
        X = self._check_input(X)
        return self.trainer_.predict_proba(X)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1).astype(np.uint8)

    def score(self, X, y):
        """Mean hard Dice over foreground classes."""
        pred = self.predict(X)
        y = check_labels(y, check_patches(X), self.n_classes)
        return float(np.mean([dice_score(pred, y, c) for c in range(1, self.n_classes)]))

    # ---------------------------------------------------------------- io
    def save(self, path):
        check_is_fitted(self, "trainer_")
        self.trainer_.save(path, {"estimator_params": {k: (list(v) if isinstance(v, tuple) else v)
                                                      for k, v in self.get_params().items()}})
        return path

    @classmethod
    def from_checkpoint(cls, path):
        trainer = Trainer.load(path)
        params = dict(trainer.meta.get("estimator_params", {}))
        if not params:
            c = trainer.config
            params = dict(mode=trainer.mode, n_classes=trainer.n_classes, pretrain_epochs=c.pretrain_epochs,
                          epochs=c.total_epochs, batch_size=c.batch_size, optimizer=c.optimizer,
                          lr_generator=c.lr_generator, lr_segmenter=c.lr_segmenter,
                          lr_discriminator=c.lr_discriminator, momentum=c.momentum,
                          weight_decay=c.weight_decay, patience=c.patience, factor=c.factor,
                          adv_weight=trainer.loss_config.adv_weight, random_state=c.seed)
        for key in ("generator_channels", "segmenter_channels", "discriminator_channels"):
            if key in params:
                params[key] = tuple(params[key])
        est = cls(**params)
        est.trainer_ = trainer
        est.n_domains_ = trainer.n_domains
        est.patch_size_ = trainer.patch_size
        est.class_weights_ = trainer.class_weights
        est.history_ = trainer.history
        return est
