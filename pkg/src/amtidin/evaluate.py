"""Accuracy reports, experiment sweeps and similarity export."""

from __future__ import annotations

import csv
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset, SplitError, SplitSpec, stratified_split, task_labels
from .model import TASKS, VARIANTS, AmtidinModel, ArchConfig, load_model, predict_logits
from .objective import SimilarityReport, estimate_w1_matrix
from .siggen import ConfigError, GenConfig, generate_dataset


def chance_levels(arch: ArchConfig) -> dict[str, float]:
    """Accuracy in percent of a uniform guess over each task's label set."""
    return {t: 100.0 / arch.classes(t) for t in TASKS}


@dataclass
class EvalReport:
    """Per-task accuracy in percent, per-SNR curves, confusion matrices and sample counts.

    ID is scored on every record; MI and II only on records that carry
    interference.  Per-SNR ID accuracy uses that SNR's positives plus an
    equally sized, fixed slice of the negatives.
    """

    accuracy: dict[str, float]
    per_snr: dict[str, dict[float, float]]
    confusion: dict[str, np.ndarray]
    counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_snr": {t: {f"{k:g}": v for k, v in sorted(c.items())} for t, c in self.per_snr.items()},
            "confusion": {t: m.tolist() for t, m in self.confusion.items()},
            "counts": self.counts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, classes: int) -> np.ndarray:
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, np.int64), np.asarray(y_pred, np.int64)), 1)
    return cm


def evaluate(model: AmtidinModel, test: Dataset) -> EvalReport:
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, test.iq)
    labels = task_labels(test)
    present = test.present_indices()
    negatives = np.flatnonzero(test.presence == 0)
    snr = test.snr_db
    accuracy, per_snr, confusion, counts = {}, {}, {}, {}
    for t in model.tasks:
        rows = np.arange(len(test)) if t == "ID" else present
        if len(rows) == 0:
            continue
        pred = np.argmax(logits[t], axis=1)
        hit = pred == labels[t]
        accuracy[t] = 100.0 * float(hit[rows].mean())
        confusion[t] = confusion_matrix(labels[t][rows], pred[rows], model.arch.classes(t))
        counts[t] = int(len(rows))
        curve = {}
        for value in np.unique(snr[present]):
            pos = present[snr[present] == value]
            sel = np.concatenate([pos, negatives[: len(pos)]]) if t == "ID" else pos
            curve[float(value)] = 100.0 * float(hit[sel].mean())
        per_snr[t] = curve
    return EvalReport(accuracy, per_snr, confusion, counts)


# -- sweeps ----------------------------------------------------------------------

AXES = ("snr", "sample_size", "signal_length")


@dataclass
class SweepSpec:
    axis: str
    values: list
    repetitions: int = 5
    variants: list[str] = field(default_factory=lambda: ["AMTIDIN"])
    gen: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"sweep axis must be one of {AXES}, got {self.axis!r}")
        if not self.values:
            raise ValueError("sweep values must be non-empty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown variants {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        return cls(**data)


def _point_configs(spec: SweepSpec, value) -> tuple[GenConfig, ArchConfig]:
    gen = GenConfig.from_dict(spec.gen) if spec.gen else GenConfig()
    arch = dict(spec.arch)
    if spec.axis == "snr":
        gen.snr_list_db = [float(value)]
    elif spec.axis == "sample_size":
        gen.samples_per_class = int(value)
    else:
        gen.n = int(value)
    arch["n"] = gen.n
    return gen.validate(), ArchConfig(**arch)


def _run_point(spec: SweepSpec, value, variant: str) -> dict:
    from .trainer import TrainConfig, Trainer

    row = {"axis": spec.axis, "value": value, "variant": variant, "status": "ok", "repetitions": spec.repetitions}
    try:
        gen, arch = _point_configs(spec, value)
        data = generate_dataset(gen)
        train_set, val_set, test_set = stratified_split(data, SplitSpec(**spec.split))
        # Building the trainers up front surfaces an undefined C1 (too few records) as a skip.
        trainers = [
            Trainer(
                AmtidinModel(arch, variant, seed=rep),
                train_set,
                val_set,
                TrainConfig.from_dict({**spec.train, "variant": variant, "seed": rep}),
            )
            for rep in range(spec.repetitions)
        ]
    except (ConfigError, SplitError, ValueError) as exc:
        row["status"] = f"skipped: {exc}"
        return row
    scores = {t: [] for t in TASKS}
    for trainer in trainers:
        trainer.fit()
        report = evaluate(trainer.model, test_set)
        for t, acc in report.accuracy.items():
            scores[t].append(acc)
    for t in TASKS:
        vals = np.array(scores[t])
        row[f"acc_{t}_mean"] = float(vals.mean()) if len(vals) else float("nan")
        row[f"acc_{t}_std"] = float(vals.std()) if len(vals) else float("nan")
    return row


SWEEP_COLUMNS = ["axis", "value", "variant", "repetitions", "status"] + [
    f"acc_{t}_{s}" for t in TASKS for s in ("mean", "std")
]


def run_sweep(spec: SweepSpec, out_csv, workers: int = 1) -> list[dict]:
    """Train and score every (value, variant) point; write one CSV row per point.

    Rows come out in (value, variant) order whatever the worker count, and the
    file is replaced atomically.
    """
    points = [(v, var) for v in spec.values for var in spec.variants]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_single_threaded) as pool:
            rows = list(pool.map(_run_point, [spec] * len(points), *zip(*points)))
    else:
        rows = [_run_point(spec, v, var) for v, var in points]
    for row in rows:
        if row["status"] != "ok":
            warnings.warn(f"sweep point {row['axis']}={row['value']} {row['variant']}: {row['status']}", stacklevel=2)
    write_rows_csv(out_csv, rows, SWEEP_COLUMNS)
    return rows


def _single_threaded() -> None:
    # Each sweep point trains on one BLAS thread so results do not depend on the pool size.
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


def write_rows_csv(path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c, "")) for c in columns])
    os.replace(tmp, path)
    return path


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -- similarity --------------------------------------------------------------------


def similarity_cmd(model_path, eval_set: Dataset, out_dir, per_snr: bool = False) -> SimilarityReport:
    """Load a checkpoint, estimate the critic W1 matrices on ``eval_set`` and write them."""
    model, arrays, _ = load_model(model_path)
    alpha = arrays.get("alpha")
    report = estimate_w1_matrix(model, eval_set, alpha=alpha, per_snr=per_snr)
    report.write(out_dir)
    return report

