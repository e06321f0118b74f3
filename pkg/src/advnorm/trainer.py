"""Training procedure: MSE pretraining of the generator, then alternating
(generator + segmenter) / discriminator updates with SGD, momentum, decoupled
weight decay and plateau learning-rate scheduling.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import metrics
from .exceptions import DivergenceError, ValidationError
from .losses import Batch, LossConfig, mse, objective_d, objective_gs
from .networks import (
    DiscriminatorConfig,
    UNetConfig,
    build_discriminator,
    build_generator,
    build_segmenter,
    is_kernel,
    load_state_arrays,
    param_hash,
    state_arrays,
)
from .volume import load_tensors, save_tensors

logger = logging.getLogger(__name__)

MODES = ("adversarial", "no_discriminator", "segmenter_only")
OPTIMIZERS = ("sgd", "adamw")
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    pretrain_epochs: int = 3
    total_epochs: int = 50
    batch_size: int = 8
    lr_generator: float = 1e-5
    lr_segmenter: float = 1e-4
    lr_discriminator: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.1
    patience: int = 3
    factor: float = 10.0
    seed: int = 0
    optimizer: str = "sgd"
    lr_pretrain: float | None = None

    def __post_init__(self):
        for name in ("lr_generator", "lr_segmenter", "lr_discriminator"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if self.pretrain_epochs < 0:
            raise ValidationError("pretrain_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.total_epochs < self.pretrain_epochs:
            raise ValidationError("total_epochs must be >= pretrain_epochs")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.patience < 1 or self.factor <= 1:
            raise ValidationError("need weight_decay >= 0, patience >= 1 and factor > 1")
        if self.lr_pretrain is not None and not self.lr_pretrain > 0:
            raise ValidationError("lr_pretrain must be > 0 when given")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


    @property
    def pretrain_lr(self):
        """Generator learning rate during MSE pretraining (``lr_generator`` unless overridden)."""
        return self.lr_generator if self.lr_pretrain is None else self.lr_pretrain


class SGDW(torch.optim.Optimizer):
    """SGD with heavy-ball momentum and decoupled weight decay.

    ``p <- p * (1 - lr * wd) - lr * buf`` with ``buf <- momentum * buf + grad``.
    Decay is applied per parameter group, so biases can be exempted.
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        _check_gradients(self)
        for group in self.param_groups:
            lr, mom, wd = group["lr"], group["momentum"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                d_p = p.grad
                if mom:
                    state = self.state[p]
                    buf = state.get("momentum_buffer")
                    if buf is None:
                        buf = state["momentum_buffer"] = d_p.clone()
                    else:
                        buf.mul_(mom).add_(d_p)
                    d_p = buf
                if wd:
                    p.mul_(1.0 - lr * wd)
                p.add_(d_p, alpha=-lr)


def _check_gradients(optimizer):
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise DivergenceError("non-finite gradient")


class AdamW(torch.optim.AdamW):
    """Adam with decoupled weight decay that refuses non-finite gradients.

    ``momentum`` plays the role of the first-moment coefficient beta1.
    """

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        super().__init__(params, lr=lr, betas=(momentum, 0.999), weight_decay=weight_decay)

    @torch.no_grad()
    def step(self, closure=None):
        _check_gradients(self)
        return super().step(closure)


def make_optimizer(module, lr, momentum, weight_decay, kind="sgd"):
    """Optimizer over ``module`` with weight decay on kernels only (never biases)."""
    named = list(module.named_parameters())
    kernels = [(n, p) for n, p in named if is_kernel(n, p)]
    others = [(n, p) for n, p in named if not is_kernel(n, p)]
    groups = [{"params": [p for _, p in kernels], "weight_decay": weight_decay, "names": [n for n, _ in kernels]},
              {"params": [p for _, p in others], "weight_decay": 0.0, "names": [n for n, _ in others]}]
    cls = {"sgd": SGDW, "adamw": AdamW}.get(kind)
    if cls is None:
        raise ValidationError(f"unknown optimizer {kind!r}")
    return cls(groups, lr=lr, momentum=momentum, weight_decay=weight_decay)


class PlateauScheduler:
    """Divide the learning rate of every attached optimizer by ``factor`` once the
    monitored value has failed to improve for ``patience`` consecutive epochs.

    The first observation sets the reference; the counter resets after a cut.
    """

    def __init__(self, optimizers, patience=3, factor=10.0):
        self.optimizers = list(optimizers)
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.num_bad = 0
        self.reductions = 0

    def step(self, value):
        value = float(value)
        if value < self.best:
            self.best = value
            self.num_bad = 0
            return False
        self.num_bad += 1
        if self.num_bad >= self.patience:
            for opt in self.optimizers:
                for group in opt.param_groups:
                    group["lr"] /= self.factor
            self.num_bad = 0
            self.reductions += 1
            return True
        return False

    def state_dict(self):
        return {"best": self.best if math.isfinite(self.best) else None,
                "num_bad": self.num_bad, "reductions": self.reductions}

    def load_state_dict(self, state):
        self.best = math.inf if state["best"] is None else state["best"]
        self.num_bad = state["num_bad"]
        self.reductions = state["reductions"]


def _batch(images, masks, domains, index, dtype=torch.float32):
    return Batch(
        torch.as_tensor(images[index], dtype=dtype).unsqueeze(1),
        torch.as_tensor(masks[index].astype(np.int64)),
        torch.as_tensor(np.asarray(domains)[index].astype(np.int64)),
    )


def epoch_batches(domains, batch_size, seed, epoch):
    """Seeded shuffled batches for one epoch, interleaving domains proportionally.

    Each domain is shuffled independently, then merged so that every window of
    ``batch_size`` consecutive patches samples all domains in proportion.
    """
    domains = np.asarray(domains)
    rng = np.random.default_rng([int(seed), int(epoch)])
    keys, order = [], []
    for d in np.unique(domains):
        idx = rng.permutation(np.flatnonzero(domains == d))
        keys.append((np.arange(len(idx)) + 0.5) / len(idx))
        order.append(idx)
    if not order:
        return []
    keys, order = np.concatenate(keys), np.concatenate(order)
    order = order[np.argsort(keys, kind="stable")]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def pretrain_generator(generator, images, config, optimizer=None, epochs=None):
    """Fit ``G(x) ~ x`` with per-voxel MSE; returns the per-epoch mean losses."""
    epochs = config.pretrain_epochs if epochs is None else epochs
    optimizer = optimizer or make_optimizer(generator, config.pretrain_lr, config.momentum, config.weight_decay,
                                            config.optimizer)
    trace = []
    dummy = np.zeros(len(images), dtype=np.int64)
    step = 0
    for epoch in range(1, epochs + 1):
        losses = []
        for index in epoch_batches(dummy, config.batch_size, config.seed, epoch):
            x = torch.as_tensor(images[index], dtype=torch.float32).unsqueeze(1)
            losses.append(pretrain_step(x, generator, optimizer, step))
            step += 1
        trace.append(float(np.mean(losses)))
    return trace


def pretrain_step(x, generator, optimizer, step=None):
    optimizer.zero_grad(set_to_none=True)
    loss = mse(generator(x), x)
    if not torch.isfinite(loss):
        raise DivergenceError("non-finite pretraining loss", step)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _set_trainable(module, flag):
    if module is not None:
        for p in module.parameters():
            p.requires_grad_(flag)


def train_step_gs(batch, generator, segmenter, discriminator, optimizers, weights, loss_config):
    """One update of G and S against ``objective_gs`` with D frozen.

    ``optimizers`` holds the optimizers of G (omitted when there is no
    generator) and S. Returns the objective value before the update.
    """
    frozen = param_hash(discriminator) if discriminator is not None else None
    _set_trainable(discriminator, False)
    try:
        for opt in optimizers:
            opt.zero_grad(set_to_none=True)
        value = objective_gs(batch, generator, segmenter, discriminator, weights,
                             loss_config.adv_weight, loss_config.epsilon)
        value.backward()
        for opt in optimizers:
            opt.step()
    finally:
        _set_trainable(discriminator, True)
    if discriminator is not None and param_hash(discriminator) != frozen:
        raise RuntimeError("discriminator parameters changed during the generator/segmenter step")
    return float(value.detach())


def train_step_d(batch, generator, discriminator, optimizer, segmenter=None):
    """One update of D against ``objective_d`` with G (and S) frozen."""
    frozen = [param_hash(m) for m in (generator, segmenter) if m is not None]
    _set_trainable(generator, False)
    try:
        optimizer.zero_grad(set_to_none=True)
        value = objective_d(batch, generator, discriminator)
        value.backward()
        optimizer.step()
    finally:
        _set_trainable(generator, True)
    if [param_hash(m) for m in (generator, segmenter) if m is not None] != frozen:
        raise RuntimeError("generator/segmenter parameters changed during the discriminator step")
    return float(value.detach())


def _hash_config(doc):
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Trainer:
    """Owns the three networks, their optimizers and schedulers, and the epoch loop.

    Epochs are numbered from 1. For modes with a generator, epochs
    ``1..pretrain_epochs`` fit G to the identity with MSE; segmentation (and,
    in adversarial mode, the discriminator game) starts at epoch
    ``pretrain_epochs + 1``. ``segmenter_only`` skips the pretraining epochs so
    all modes run the same number of segmentation epochs.
    """

    def __init__(self, mode="adversarial", n_classes=4, n_domains=2, patch_size=16,
                 generator_config=None, segmenter_config=None, discriminator_config=None,
                 train_config=None, loss_config=None, class_weights=None):
        if mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.n_classes = n_classes
        self.n_domains = n_domains
        self.patch_size = patch_size
        self.generator_config = generator_config or UNetConfig()
        self.segmenter_config = segmenter_config or UNetConfig(identity_skip=False)
        self.discriminator_config = discriminator_config or DiscriminatorConfig()
        self.config = train_config or TrainConfig()
        self.loss_config = loss_config or LossConfig()
        self.class_weights = None if class_weights is None else np.asarray(class_weights, dtype=np.float64)
        seed = self.config.seed
        self.generator = build_generator(self.generator_config, seed) if mode != "segmenter_only" else None
        self.segmenter = build_segmenter(n_classes, self.segmenter_config, seed + 1)
        self.discriminator = (build_discriminator(n_domains, patch_size, self.discriminator_config, seed + 2)
                              if mode == "adversarial" else None)
        c = self.config
        self.optimizers = {}
        if self.generator is not None:
            lr = c.pretrain_lr if c.pretrain_epochs > 0 else c.lr_generator
            self.optimizers["generator"] = make_optimizer(self.generator, lr, c.momentum,
                                                          c.weight_decay, c.optimizer)
        self.optimizers["segmenter"] = make_optimizer(self.segmenter, c.lr_segmenter, c.momentum,
                                                      c.weight_decay, c.optimizer)
        if self.discriminator is not None:
            self.optimizers["discriminator"] = make_optimizer(
                self.discriminator, c.lr_discriminator, c.momentum, c.weight_decay, c.optimizer)
        self.schedulers = {
            "gs": PlateauScheduler([self.optimizers[k] for k in ("generator", "segmenter") if k in self.optimizers],
                                   c.patience, c.factor),
        }
        if self.discriminator is not None:
            self.schedulers["d"] = PlateauScheduler([self.optimizers["discriminator"]], c.patience, c.factor)
        self.epoch = 0
        self.history = []
        self.batch_losses = []
        if c.optimizer == "sgd" and c.weight_decay >= 0.01:
            logger.warning("weight decay %.3g is aggressive for small networks", c.weight_decay)

    @classmethod
    def from_config(cls, config, mode="adversarial", n_domains=None, n_classes=None):
        """Build a trainer from an experiment config (see :mod:`advnorm.config`)."""
        return cls(
            mode=mode,
            n_classes=config.n_classes if n_classes is None else n_classes,
            n_domains=config.n_domains if n_domains is None else n_domains,
            patch_size=config.pipeline.patch_size,
            generator_config=config.generator,
            segmenter_config=config.segmenter,
            discriminator_config=config.discriminator,
            train_config=config.train,
            loss_config=config.loss,
        )

    # ------------------------------------------------------------------ helpers
    @property
    def modules(self):
        return {"generator": self.generator, "segmenter": self.segmenter, "discriminator": self.discriminator}

    def _train_mode(self, flag):
        for m in self.modules.values():
            if m is not None:
                m.train(flag)

    def first_epoch(self):
        return self.config.pretrain_epochs + 1 if self.mode == "segmenter_only" else 1

    def is_pretrain_epoch(self, epoch):
        return self.generator is not None and epoch <= self.config.pretrain_epochs

    def lrs(self):
        return {k: opt.param_groups[0]["lr"] for k, opt in self.optimizers.items()}

    def config_doc(self):
        return {
            "mode": self.mode,
            "n_classes": self.n_classes,
            "n_domains": self.n_domains,
            "patch_size": self.patch_size,
            "generator": asdict(self.generator_config),
            "segmenter": asdict(self.segmenter_config),
            "discriminator": asdict(self.discriminator_config),
            "train": asdict(self.config),
            "loss": asdict(self.loss_config),
        }

    # ------------------------------------------------------------- inference
    @torch.no_grad()
    def normalize(self, images, batch_size=32):
        if self.generator is None:
            raise ValidationError("this model has no generator (segmenter_only mode)")
        self.generator.eval()
        out = [self.generator(torch.as_tensor(images[i:i + batch_size], dtype=torch.float32).unsqueeze(1))
               for i in range(0, len(images), batch_size)]
        return torch.cat(out).squeeze(1).numpy() if out else np.zeros_like(images, dtype=np.float32)

    @torch.no_grad()
    def predict_proba(self, images, batch_size=32):
        self.segmenter.eval()
        if self.generator is not None:
            self.generator.eval()
        out = []
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(images[i:i + batch_size], dtype=torch.float32).unsqueeze(1)
            if self.generator is not None:
                x = self.generator(x)
            out.append(self.segmenter(x))
        if not out:
            return np.zeros((0, self.n_classes) + images.shape[1:], dtype=np.float32)
        return torch.cat(out).numpy()

    # -------------------------------------------------------------- training
    def run_epoch(self, data):
        """Run the next epoch over ``data`` (a PatchSet); returns the epoch record."""
        epoch = max(self.epoch + 1, self.first_epoch())
        c = self.config
        batches = epoch_batches(data.domains, c.batch_size, c.seed, epoch)
        pretrain = self.is_pretrain_epoch(epoch)
        if self.generator is not None and epoch == c.pretrain_epochs + 1 and c.pretrain_epochs > 0:
            # joint phase starts: hand the generator over to its regular learning rate
            for group in self.optimizers["generator"].param_groups:
                group["lr"] = c.lr_generator
        self._train_mode(True)
        gs_losses, d_losses = [], []
        weights = torch.as_tensor(self.class_weights, dtype=torch.float32)
        for step, index in enumerate(batches):
            batch = _batch(data.images, data.masks, data.domains, index)
            if pretrain:
                gs_losses.append(pretrain_step(batch.x, self.generator, self.optimizers["generator"], step))
                self.batch_losses.append({"epoch": epoch, "step": step, "mse": gs_losses[-1]})
                continue
            opts = [self.optimizers[k] for k in ("generator", "segmenter") if k in self.optimizers]
            gs_losses.append(train_step_gs(batch, self.generator, self.segmenter, self.discriminator,
                                           opts, weights, self.loss_config))
            record = {"epoch": epoch, "step": step, "gs": gs_losses[-1]}
            if self.discriminator is not None:
                d_losses.append(train_step_d(batch, self.generator, self.discriminator,
                                             self.optimizers["discriminator"], self.segmenter))
                record["d"] = d_losses[-1]
            self.batch_losses.append(record)
        self.epoch = epoch
        record = {"epoch": epoch, "phase": "pretrain" if pretrain else "joint", "n_batches": len(batches)}
        if pretrain:
            record["train_mse"] = float(np.mean(gs_losses))
        else:
            record["train_objective_gs"] = float(np.mean(gs_losses)) / c.batch_size
            if d_losses:
                record["train_objective_d"] = float(np.mean(d_losses)) / c.batch_size
        return record

    @torch.no_grad()
    def evaluate(self, data, pretrain=False, jsd_bins=100):
        """Validation metrics for ``data``: per-sample mean objectives, Dice, JSD."""
        self._train_mode(False)
        out = {}
        if len(data) == 0:
            return out
        weights = torch.as_tensor(self.class_weights, dtype=torch.float32)
        sq, gs, dl, n = 0.0, 0.0, 0.0, 0
        for i in range(0, len(data), 32):
            index = np.arange(i, min(i + 32, len(data)))
            batch = _batch(data.images, data.masks, data.domains, index)
            if self.generator is not None:
                sq += float(((self.generator(batch.x) - batch.x) ** 2).mean(dim=(1, 2, 3, 4)).sum())
            if not pretrain:
                gs += float(objective_gs(batch, self.generator, self.segmenter, self.discriminator, weights,
                                         self.loss_config.adv_weight, self.loss_config.epsilon))
                if self.discriminator is not None:
                    dl += float(objective_d(batch, self.generator, self.discriminator))
            n += len(index)
        if self.generator is not None:
            out["val_mse"] = sq / n
            out["val_variance"] = float(np.var(data.images))
        if pretrain:
            return out
        out["val_objective_gs"] = gs / n
        if self.discriminator is not None:
            out["val_objective_d"] = dl / n
        pred = self.predict_proba(data.images).argmax(axis=1)
        out["val_dice"] = {str(c): metrics.dice_score(pred, data.masks, c) for c in range(1, self.n_classes)}
        if self.generator is not None:
            normalized = self.normalize(data.images)
            out["val_jsd_input"] = metrics.patch_jsd(data.images, data.masks, jsd_bins)
            out["val_jsd_normalized"] = metrics.patch_jsd(normalized, data.masks, jsd_bins)
        return out

    def fit(self, train, val=None, epochs=None, callback=None, jsd_bins=100):
        """Train until ``epochs`` (default ``total_epochs``) epochs have completed."""
        target = self.config.total_epochs if epochs is None else epochs
        if self.class_weights is None:
            self.class_weights = self.loss_config.resolve_weights(train.masks, self.n_classes)
        while max(self.epoch + 1, self.first_epoch()) <= target:
            record = self.run_epoch(train)
            pretrain = record["phase"] == "pretrain"
            if val is not None and len(val):
                record.update(self.evaluate(val, pretrain=pretrain, jsd_bins=jsd_bins))
                if not pretrain:
                    self.schedulers["gs"].step(record["val_objective_gs"])
                    if "d" in self.schedulers:
                        self.schedulers["d"].step(record["val_objective_d"])
            record["lr"] = self.lrs()
            self.history.append(record)
            logger.info("epoch %d: %s", record["epoch"],
                        {k: v for k, v in record.items() if isinstance(v, float)})
            if callback is not None:
                callback(self, record)
        return self

    # ----------------------------------------------------------- checkpoints
    def save(self, path, extra_meta=None):
        tensors = {}
        for name, module in self.modules.items():
            if module is not None:
                tensors.update(state_arrays(module, name))
        for name, opt in self.optimizers.items():
            for group in opt.param_groups:
                for pname, p in zip(group["names"], group["params"]):
                    for key, value in opt.state.get(p, {}).items():
                        if isinstance(value, torch.Tensor):
                            tensors[f"optim/{name}/{pname}/{key}"] = value.detach().numpy()
        tensors["rng/torch"] = torch.get_rng_state().numpy()
        doc = self.config_doc()
        meta = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "config": doc,
            "config_hash": _hash_config(doc),
            "epoch": self.epoch,
            "lrs": self.lrs(),
            "schedulers": {k: s.state_dict() for k, s in self.schedulers.items()},
            "class_weights": None if self.class_weights is None else [float(w) for w in self.class_weights],
            "history": self.history,
            "networks": [k for k, m in self.modules.items() if m is not None],
        }
        meta.update(extra_meta or {})
        save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = load_tensors(path)
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
        doc = meta["config"]
        trainer = cls(
            mode=doc["mode"], n_classes=doc["n_classes"], n_domains=doc["n_domains"],
            patch_size=doc["patch_size"],
            generator_config=UNetConfig(**doc["generator"]),
            segmenter_config=UNetConfig(**doc["segmenter"]),
            discriminator_config=DiscriminatorConfig(**doc["discriminator"]),
            train_config=TrainConfig(**doc["train"]),
            loss_config=LossConfig(**doc["loss"]),
            class_weights=meta["class_weights"],
        )
        for name, module in trainer.modules.items():
            if module is not None:
                load_state_arrays(module, tensors, name)
        for name, opt in trainer.optimizers.items():
            for group in opt.param_groups:
                group["lr"] = meta["lrs"][name]
                for pname, p in zip(group["names"], group["params"]):
                    prefix = f"optim/{name}/{pname}/"
                    for key in tensors:
                        if key.startswith(prefix):
                            opt.state[p][key[len(prefix):]] = torch.from_numpy(np.array(tensors[key]))
        for k, s in trainer.schedulers.items():
            s.load_state_dict(meta["schedulers"][k])
        torch.set_rng_state(torch.from_numpy(tensors["rng/torch"].copy()))
        trainer.epoch = meta["epoch"]
        trainer.history = meta["history"]
        trainer.meta = meta
        return trainer


# --------------------------------------------------------------------------
# end-to-end run
# --------------------------------------------------------------------------

CHECKPOINT_NAME = "checkpoint.mvol"
METRICS_NAME = "metrics.jsonl"
CONFIG_SNAPSHOT = "resolved_config.json"


def _json_line(record):
    return json.dumps(record, sort_keys=True, default=float) + "\n"


def run_training(config, mode="adversarial", out_dir=None, splits=None, train_domains=None,
                 standardize=False, resume=None, epochs=None):
    """Train one model as the experiment ``config`` prescribes.

    Writes into ``out_dir`` (when given): the resolved config snapshot, the
    per-epoch metrics log (newline-delimited JSON, one record per epoch), the
    per-batch loss log and a checkpoint refreshed after every epoch. On
    divergence the checkpoint holds the last finite state, ``error.json``
    describes the failure and the :class:`DivergenceError` is re-raised.

    ``train_domains`` restricts training and validation patches to those
    domains; ``resume`` is a checkpoint path to continue from.
    """
    import os

    from .pipeline import build_splits

    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    if splits is None:
        splits = build_splits(config, standardize=standardize)
    data = splits.restrict(train_domains) if train_domains else splits
    if len(data.train) == 0:
        raise ValidationError(f"no training patches for domains {train_domains}")
    if resume is not None:
        trainer = Trainer.load(resume)
        if trainer.mode != mode:
            raise ValidationError(f"checkpoint was trained in mode {trainer.mode!r}, not {mode!r}")
    else:
        trainer = Trainer.from_config(config, mode, n_domains=splits.n_domains, n_classes=splits.n_classes)
    extra = {
        "experiment": config.to_dict(),
        "experiment_hash": config.hash(),
        "train_domains": sorted(int(d) for d in train_domains) if train_domains else None,
        "standardize": bool(standardize),
    }
    paths = {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        config.save(os.path.join(out_dir, CONFIG_SNAPSHOT))
        paths = {k: os.path.join(out_dir, v) for k, v in
                 (("checkpoint", CHECKPOINT_NAME), ("metrics", METRICS_NAME), ("batches", "batch_losses.jsonl"))}
        if resume is None:
            for key in ("metrics", "batches"):
                open(paths[key], "w").close()

    def callback(tr, record):
        if not paths:
            return
        with open(paths["metrics"], "a") as fh:
            fh.write(_json_line(record))
        with open(paths["batches"], "a") as fh:
            for rec in tr.batch_losses:
                fh.write(_json_line(rec))
        tr.batch_losses.clear()
        tr.save(paths["checkpoint"], extra)

    try:
        trainer.fit(data.train, data.validation, epochs=epochs, callback=callback,
                    jsd_bins=config.evaluation.jsd_bins)
    except DivergenceError as exc:
        if paths:
            trainer.save(paths["checkpoint"], extra)
            with open(os.path.join(out_dir, "error.json"), "w") as fh:
                json.dump({"error": "divergence", "message": str(exc), "step": exc.step,
                           "epoch": trainer.epoch + 1}, fh, indent=2)
        raise
    trainer.meta = {**getattr(trainer, "meta", {}), **extra}
    return trainer
