"""The seven-row experiment matrix and its reports.

Rows (train domains -> test domains, training mode):

1. domain 1 -> domain 1, segmenter only
2. domain 2 -> domain 2, segmenter only
3. domain 1 -> domain 2, segmenter only (cross-testing)
4. domain 2 -> domain 1, segmenter only (cross-testing)
5. pooled, Gaussian-standardized inputs, segmenter only
6. pooled, generator + segmenter without discriminator
7. pooled, adversarial normalization

Rows 1/3 and 2/4 evaluate the same trained model on different test domains,
so the matrix trains five models. Dice is computed over all voxels of the
test-split patches of the row's test domains.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .exceptions import AdvNormError, DivergenceError
from .pipeline import build_splits, load_samples
from .trainer import run_training

logger = logging.getLogger(__name__)

CLASS_NAMES = ("background", "CSF", "GM", "WM")


@dataclass(frozen=True)
class ExperimentSpec:
    experiment_id: int
    name: str
    train_domains: tuple
    test_domains: tuple
    mode: str
    standardize: bool = False

    @property
    def model_key(self):
        return (self.train_domains, self.mode, self.standardize)


EXPERIMENTS = (
    ExperimentSpec(1, "No adaptation (domain 1)", (1,), (1,), "segmenter_only"),
    ExperimentSpec(2, "No adaptation (domain 2)", (2,), (2,), "segmenter_only"),
    ExperimentSpec(3, "Cross-testing 1 -> 2", (1,), (2,), "segmenter_only"),
    ExperimentSpec(4, "Cross-testing 2 -> 1", (2,), (1,), "segmenter_only"),
    ExperimentSpec(5, "Standardized", (1, 2), (1, 2), "segmenter_only", True),
    ExperimentSpec(6, "Without constraint", (1, 2), (1, 2), "no_discriminator"),
    ExperimentSpec(7, "Adversarially normalized", (1, 2), (1, 2), "adversarial"),
)


@dataclass
class ExperimentReport:
    experiment_id: int
    name: str
    train_domains: list
    test_domains: list
    mode: str
    standardize: bool
    dice: dict = field(default_factory=dict)
    mean_dice: float = float("nan")
    empty_classes: list = field(default_factory=list)
    jsd_input: float | None = None
    jsd_normalized: float | None = None
    config_hash: str = ""
    runtime_s: float = 0.0
    status: str = "ok"
    error: str | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


def _class_names(n_classes):
    return list(CLASS_NAMES[:n_classes]) if n_classes <= len(CLASS_NAMES) else \
        [str(c) for c in range(n_classes)]


def evaluate_patches(trainer, data, n_classes):
    """Per-class hard Dice of ``trainer`` on a PatchSet, keyed by class name."""
    pred = trainer.predict_proba(data.images).argmax(axis=1)
    names = _class_names(n_classes)
    scores, empty = metrics.dice_report(pred, data.masks, range(1, n_classes))
    dice = {names[c]: float(v) for c, v in scores.items()}
    return dice, float(np.mean(list(dice.values()))), [names[c] for c in empty]


def write_histograms(path, trainer, data, bins, n_classes):
    rows = metrics.histogram_rows(data.images, trainer.normalize(data.images), data.masks, bins,
                                  _class_names(n_classes))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["bin_center", "input_mass", "normalized_mass", "class"])
        writer.writeheader()
        writer.writerows(rows)
    return path


def run_experiment_matrix(config, out_dir, experiments=EXPERIMENTS, epochs=None):
    """Run every row of the matrix; a failing row is marked and the rest continue.

    Writes per-model run directories, one JSON report per row, ``reports.json``,
    the rendered table (``table.txt``/``table.csv``), pairwise mean-Dice deltas
    and, for rows with a generator, per-class histogram CSVs.
    """
    os.makedirs(out_dir, exist_ok=True)
    config.save(os.path.join(out_dir, "resolved_config.json"))
    samples, n_domains, n_classes = load_samples(config)
    split_cache = {}

    def splits_for(standardize):
        if standardize not in split_cache:
            split_cache[standardize] = build_splits(config, standardize, samples)
        return split_cache[standardize]

    models = {}
    reports = []
    for spec in experiments:
        t0 = time.perf_counter()
        report = ExperimentReport(spec.experiment_id, spec.name, list(spec.train_domains),
                                  list(spec.test_domains), spec.mode, spec.standardize,
                                  config_hash=config.hash())
        try:
            splits = splits_for(spec.standardize)
            key = spec.model_key
            if key not in models:
                run_dir = os.path.join(out_dir, "models", "{}_{}{}".format(
                    "-".join(map(str, spec.train_domains)), spec.mode, "_std" if spec.standardize else ""))
                models[key] = (run_training(config, spec.mode, run_dir, splits=splits,
                                            train_domains=spec.train_domains, standardize=spec.standardize,
                                            epochs=epochs), None)
            trainer, failure = models[key]
            if failure is not None:
                raise failure
            test = splits.restrict(spec.test_domains).test
            report.dice, report.mean_dice, report.empty_classes = evaluate_patches(trainer, test, n_classes)
            if trainer.generator is not None:
                val = splits.restrict(spec.train_domains).validation
                bins = config.evaluation.jsd_bins
                report.jsd_input = metrics.patch_jsd(val.images, val.masks, bins)
                report.jsd_normalized = metrics.patch_jsd(trainer.normalize(val.images), val.masks, bins)
                write_histograms(os.path.join(out_dir, f"histograms_row{spec.experiment_id}.csv"),
                                 trainer, val, config.evaluation.histogram_bins, n_classes)
        except (AdvNormError, RuntimeError, ValueError) as exc:
            if spec.model_key not in models:
                models[spec.model_key] = (None, exc)
            report.status = "failed"
            report.error = f"{type(exc).__name__}: {exc}"
            logger.error("experiment %d failed: %s", spec.experiment_id, report.error)
            if not isinstance(exc, (DivergenceError, AdvNormError)):
                logger.exception("unexpected failure")
        report.runtime_s = time.perf_counter() - t0
        with open(os.path.join(out_dir, f"report_row{spec.experiment_id}.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        reports.append(report)

    write_reports(out_dir, reports)
    return reports


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def _fmt(v, digits=3):
    return "-" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.{digits}f}"


def table_rows(reports):
    names = []
    for r in reports:
        for k in r.dice:
            if k not in names:
                names.append(k)
    header = ["id", "experiment", "train", "test", "mode"] + names + ["mean", "jsd_in", "jsd_out", "status"]
    rows = []
    for r in reports:
        rows.append([str(r.experiment_id), r.name, ",".join(map(str, r.train_domains)),
                     ",".join(map(str, r.test_domains)), r.mode + (" +std" if r.standardize else "")]
                    + [_fmt(r.dice.get(n)) for n in names]
                    + [_fmt(r.mean_dice), _fmt(r.jsd_input, 4), _fmt(r.jsd_normalized, 4), r.status])
    return header, rows


def render_table(reports):
    header, rows = table_rows(reports)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(header), line(["-" * w for w in widths])] + [line(r) for r in rows]
    return "\n".join(out) + "\n"


def pairwise_deltas(reports):
    """Mean-Dice difference (absolute and relative) for every ordered pair of successful rows."""
    ok = [r for r in reports if r.status == "ok"]
    out = []
    for a, b in itertools.permutations(ok, 2):
        diff = a.mean_dice - b.mean_dice
        rel = diff / b.mean_dice * 100.0 if b.mean_dice > 0 else float("nan")
        out.append({"row": a.experiment_id, "baseline": b.experiment_id,
                    "delta": diff, "relative_percent": rel})
    return out


def write_reports(out_dir, reports):
    with open(os.path.join(out_dir, "reports.json"), "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)
    with open(os.path.join(out_dir, "table.txt"), "w") as fh:
        fh.write(render_table(reports))
    header, rows = table_rows(reports)
    with open(os.path.join(out_dir, "table.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    with open(os.path.join(out_dir, "deltas.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["row", "baseline", "delta", "relative_percent"])
        writer.writeheader()
        writer.writerows(pairwise_deltas(reports))


def load_reports(run_dir):
    """Reports of a finished matrix run, from ``reports.json`` or the per-row files."""
    path = os.path.join(run_dir, "reports.json")
    if os.path.isfile(path):
        with open(path) as fh:
            return [ExperimentReport.from_dict(d) for d in json.load(fh)]
    found = sorted(f for f in os.listdir(run_dir) if f.startswith("report_row") and f.endswith(".json"))
    if not found:
        raise FileNotFoundError(f"no experiment reports in {run_dir}")
    reports = []
    for name in found:
        with open(os.path.join(run_dir, name)) as fh:
            reports.append(ExperimentReport.from_dict(json.load(fh)))
    return sorted(reports, key=lambda r: r.experiment_id)
