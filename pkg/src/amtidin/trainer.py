"""Alternating optimization: Adam epochs on the network, then one convex alpha solve per task.

Randomness is counter-based: batch order is keyed by ``(seed, epoch)`` and
dropout masks by ``(seed, epoch, step, t, i)``, so a run is reproducible
bit for bit and can be resumed from a checkpoint without RNG state.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._runtime import tune_allocator
from .autodiff import Adam, PlateauScheduler, Tensor, clip_grad_norm, no_grad, scheduler_step
from .autodiff import functional as F
from .dataio import Dataset, make_task_batches, task_labels
from .model import (
    TASKS,
    AmtidinModel,
    ArchConfig,
    arch_to_dict,
    extract_features,
    forward_from_features,
    forward_train,
    load_checkpoint,
    load_model_state,
    model_state,
    save_checkpoint,
)
from .objective import (
    ObjectiveConfig,
    PGDConfig,
    adversarial_terms,
    check_alpha,
    compute_c1,
    pair_key,
    solve_alpha,
    total_objective,
)


class TrainingDiverged(RuntimeError):
    """A non-finite loss appeared; the model holds the last good parameters."""


@dataclass
class TrainConfig:
    variant: str = "AMTIDIN"
    lambdas: tuple[float, float, float] = (0.05, 0.85, 0.15)
    rho: float = 1.0
    batch_size: int = 256
    epochs: int = 100
    lr: float = 1e-3
    lr_factor: float = 0.1
    lr_patience: int = 8
    min_lr: float = 1e-7
    c1: float | None = None
    pseudo_dim: float = 100.0
    delta: float = 0.1
    beta: tuple[float, float, float] | None = None
    adv_output_mode: str = "sigmoid"
    grad_clip: float | None = 5.0
    freeze_alpha: bool = False
    pgd_max_iters: int = 500
    pgd_step: float = 1e-2
    pgd_tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if self.beta is not None:
            self.beta = tuple(float(v) for v in self.beta)
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if min(self.lambdas) < 0 or not sum(self.lambdas) > 0:
            raise ValueError(f"lambdas must be non-negative with a positive sum, got {self.lambdas}")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: dict[str, float]
    train_parts: dict[str, float]
    ce: list[list[float]]
    w1: list[list[float]]
    alpha: list[list[float]]


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    diverged: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "records": [asdict(r) for r in self.records],
                "best_epoch": self.best_epoch,
                "best_val": self.best_val if math.isfinite(self.best_val) else None,
                "diverged": self.diverged,
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TrainLog":
        data = json.loads(text)
        best_val = data["best_val"]
        return cls(
            records=[EpochRecord(**r) for r in data["records"]],
            best_epoch=data["best_epoch"],
            best_val=math.inf if best_val is None else best_val,
            diverged=data["diverged"],
        )

    def write_csv(self, path) -> None:
        header = ["epoch", "lr", "train_loss", "val_loss"]
        header += [f"val_acc_{t}" for t in TASKS]
        header += [f"alpha_{t}_{i}" for t in TASKS for i in TASKS]
        header += [f"w1_{t}_{i}" for t, i in (("ID", "MI"), ("ID", "II"), ("MI", "II"))]
        header += [f"ce_{t}_{i}" for t in TASKS for i in TASKS]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for r in self.records:
                row = [r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss)]
                row += [repr(r.val_acc.get(t, float("nan"))) for t in TASKS]
                row += [repr(v) for line in r.alpha for v in line]
                row += [repr(r.w1[a][b]) for a, b in ((0, 1), (0, 2), (1, 2))]
                row += [repr(v) for line in r.ce for v in line]
                writer.writerow(row)


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 7, epoch]).generate_state(1)[0])


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of rows whose argmax equals the label."""
    if len(labels) == 0:
        raise ValueError("accuracy over an empty set")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


class Trainer:
    """Owns the model, optimizer, scheduler and relation matrix for one run."""

    def __init__(self, model: AmtidinModel, train: Dataset, val: Dataset, cfg: TrainConfig):
        if cfg.variant != model.variant:
            raise ValueError(f"config variant {cfg.variant} does not match model variant {model.variant}")
        if train.n != model.arch.n or val.n != model.arch.n:
            raise ValueError("dataset record length does not match the architecture")
        tune_allocator()
        self.model = model
        self.train_set = train
        self.val_set = val
        self.cfg = cfg
        self.alpha = np.eye(3)
        self.optimizer = Adam(model.parameters(), lr=cfg.lr)
        self.scheduler = PlateauScheduler(lr=cfg.lr, factor=cfg.lr_factor, patience=cfg.lr_patience, min_lr=cfg.min_lr)
        self.epoch = 0
        self.log = TrainLog()
        self.best_state: dict[str, np.ndarray] | None = None
        self.best_alpha = self.alpha.copy()
        self.epoch_seconds: list[float] = []
        self.objective = self._objective_config()

    # -- configuration ---------------------------------------------------------

    def _objective_config(self) -> ObjectiveConfig:
        cfg = self.cfg
        # Every epoch draws the same number of records from each stream.
        draws = max(len(self.train_set), len(self.train_set.present_indices()))
        beta = cfg.beta or (1 / 3, 1 / 3, 1 / 3)
        c1 = cfg.c1 if cfg.c1 is not None else compute_c1(cfg.pseudo_dim, 3 * draws, 3, cfg.delta)
        rho = cfg.rho if self.model.adversarial else 0.0
        return ObjectiveConfig(
            lambdas=cfg.lambdas,
            rho=rho,
            c1=c1,
            beta=beta,
            adv_output_mode=cfg.adv_output_mode,
            pgd=PGDConfig(cfg.pgd_max_iters, cfg.pgd_step, cfg.pgd_tol),
        )

    @property
    def updates_alpha(self) -> bool:
        return self.model.learns_alpha and not self.cfg.freeze_alpha

    def _pairs(self) -> tuple[list, list]:
        """Heads in the loss (positive alpha) and heads trained only as probes."""
        tasks = self.model.tasks
        main = [(t, i) for t in tasks for i in TASKS if (t, i) in self.model.heads and self.alpha[TASKS.index(t), TASKS.index(i)] > 0]
        probes = []
        if self.updates_alpha:
            # Off-diagonal heads outside the loss still need a fitted estimate of L_i(h_t).
            probes = [p for p in self.model.heads if p not in main]
        return main, probes

    # -- one epoch -------------------------------------------------------------------

    def train_epoch(self) -> dict:
        model, cfg, obj = self.model, self.cfg, self.objective
        lam = dict(zip(TASKS, cfg.lambdas))
        main, probes = self._pairs()
        use_disc = model.adversarial and obj.rho > 0
        ce_sum = np.zeros((3, 3))
        ce_count = np.zeros((3, 3))
        w1_sum = np.zeros((3, 3))
        loss_sum = 0.0
        parts_sum: dict[str, float] = {}
        steps = 0
        batches = make_task_batches(self.train_set, cfg.batch_size, epoch_seed(cfg.seed, self.epoch))
        for step, batch in enumerate(batches):
            out = forward_train(
                model, batch, True, (cfg.seed, self.epoch, step), pairs=main, probe_pairs=probes, discriminators=use_disc
            )
            loss, parts = total_objective(out, batch, self.alpha, obj, tasks=model.tasks)
            full = loss
            for t, i in probes:
                probe_ce = F.softmax_cross_entropy(out.probe_logits[(t, i)], batch.labels(i))
                full = full + probe_ce * lam[t]
                ce_sum[TASKS.index(t), TASKS.index(i)] += probe_ce.item()
                ce_count[TASKS.index(t), TASKS.index(i)] += 1
            for (t, i), logits in out.logits.items():
                ce_sum[TASKS.index(t), TASKS.index(i)] += F.softmax_cross_entropy(Tensor(logits.data), batch.labels(i)).item()
                ce_count[TASKS.index(t), TASKS.index(i)] += 1
            if use_disc:
                for (t, i), value in adversarial_terms(out, obj.adv_output_mode).items():
                    a, b = TASKS.index(t), TASKS.index(i)
                    w1_sum[a, b] -= value.item()
                    w1_sum[b, a] = w1_sum[a, b]
            if not math.isfinite(full.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {self.epoch}, step {step}")
            self.optimizer.zero_grad()
            full.backward()
            if cfg.grad_clip is not None:
                clip_grad_norm(self.optimizer.params, cfg.grad_clip)
            self.optimizer.step()
            loss_sum += parts["total"]
            for k, v in parts.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + v
            steps += 1
        ce = np.where(ce_count > 0, ce_sum / np.maximum(ce_count, 1), np.nan)
        return {
            "loss": loss_sum / steps,
            "parts": {k: v / steps for k, v in sorted(parts_sum.items())},
            "ce": ce,
            "w1": w1_sum / steps,
        }

    def update_alpha(self, ce: np.ndarray, w1: np.ndarray) -> None:
        if not self.updates_alpha:
            return
        new = self.alpha.copy()
        for t in self.model.tasks:
            k = TASKS.index(t)
            w = w1[k].copy()
            w[k] = 0.0
            new[k] = solve_alpha(ce[k], w, self.objective, warm_start=self.alpha[k])
        self.alpha = check_alpha(new)

    # -- validation ---------------------------------------------------------------

    def validate(self, ds: Dataset | None = None) -> tuple[float, dict[str, float]]:
        """Objective value (current alpha) and per-task accuracy on ``ds`` in eval mode."""
        ds = self.val_set if ds is None else ds
        model = self.model
        present = ds.present_indices()
        all_feats = extract_features(model, ds.iq)
        stream_feats = {"ID": all_feats, "MI": all_feats[present], "II": all_feats[present]}
        labels_all = task_labels(ds)
        labels = {"ID": labels_all["ID"], "MI": labels_all["MI"][present], "II": labels_all["II"][present]}
        main, _ = self._pairs()
        # Diagonal heads give the predictions even when their own alpha weight is zero.
        pairs = main + [(t, t) for t in model.tasks if (t, t) not in main]
        with no_grad():
            feats = {t: Tensor(stream_feats[t]) for t in model.tasks}
            out = forward_from_features(
                model, feats, False, pairs=pairs, discriminators=model.adversarial and self.objective.rho > 0
            )
            loss, _ = total_objective(out, labels, self.alpha, self.objective, tasks=model.tasks)
        acc = {t: accuracy(out.logits[(t, t)].data, labels[t]) for t in model.tasks}
        return loss.item(), acc

    # -- driver ------------------------------------------------------------------------

    def run_epoch(self) -> EpochRecord:
        start = time.perf_counter()
        stats = self.train_epoch()
        self.update_alpha(stats["ce"], stats["w1"])
        val_loss, val_acc = self.validate()
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {self.epoch}")
        lr_used = self.optimizer.lr
        scheduler_step(self.scheduler, val_loss, self.optimizer)
        record = EpochRecord(
            epoch=self.epoch,
            lr=lr_used,
            train_loss=stats["loss"],
            val_loss=val_loss,
            val_acc=val_acc,
            train_parts=stats["parts"],
            ce=_listify(stats["ce"]),
            w1=_listify(stats["w1"]),
            alpha=_listify(self.alpha),
        )
        self.log.records.append(record)
        if val_loss < self.log.best_val:
            self.log.best_val = val_loss
            self.log.best_epoch = self.epoch
            self.best_state = {k: v.copy() for k, v in model_state(self.model).items()}
            self.best_alpha = self.alpha.copy()
        self.epoch += 1
        self.epoch_seconds.append(time.perf_counter() - start)
        return record

    def fit(self, epochs: int | None = None, checkpoint_dir=None, restore_best: bool = True, verbose: bool = False) -> TrainLog:
        """Train until ``epochs`` total epochs have run (default: the config's E)."""
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            try:
                record = self.run_epoch()
            except TrainingDiverged:
                self.log.diverged = True
                self._restore_best()
                raise
            if verbose:
                acc = " ".join(f"{t}={v:.1f}" for t, v in record.val_acc.items())
                print(f"epoch {record.epoch:3d} lr={record.lr:.1e} train={record.train_loss:.4f} val={record.val_loss:.4f} {acc}", flush=True)
            if checkpoint_dir is not None:
                self.save(checkpoint_dir)
        if restore_best:
            self._restore_best()
        return self.log

    def _restore_best(self) -> None:
        if self.best_state is not None:
            load_model_state(self.model, self.best_state)
            self.alpha = self.best_alpha.copy()

    # -- checkpoints ---------------------------------------------------------------------

    def save(self, path) -> None:
        arrays = dict(model_state(self.model))
        arrays.update(self.optimizer.state_dict())
        arrays["alpha"] = self.alpha
        arrays["best_alpha"] = self.best_alpha
        if self.best_state is not None:
            arrays.update({f"best.{k}": v for k, v in self.best_state.items()})
        meta = {
            "arch": arch_to_dict(self.model.arch),
            "variant": self.model.variant,
            "seed": self.model.seed,
            "train_config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "adam_step": self.optimizer.step_count,
            "lr": self.optimizer.lr,
            "scheduler": {
                "lr": self.scheduler.lr,
                "best": self.scheduler.best if math.isfinite(self.scheduler.best) else None,
                "num_bad_epochs": self.scheduler.num_bad_epochs,
                "history": self.scheduler.history,
            },
            "log": json.loads(self.log.to_json()),
        }
        save_checkpoint(path, arrays, meta)

    @classmethod
    def resume(cls, path, train: Dataset, val: Dataset) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        model = AmtidinModel(ArchConfig(**meta["arch"]), meta["variant"], meta["seed"])
        load_model_state(model, arrays)
        trainer = cls(model, train, val, TrainConfig.from_dict(meta["train_config"]))
        trainer.optimizer.load_state_dict(arrays, meta["adam_step"], meta["lr"])
        sched = meta["scheduler"]
        trainer.scheduler.lr = sched["lr"]
        trainer.scheduler.best = math.inf if sched["best"] is None else sched["best"]
        trainer.scheduler.num_bad_epochs = sched["num_bad_epochs"]
        trainer.scheduler.history = list(sched["history"])
        trainer.alpha = check_alpha(arrays["alpha"])
        trainer.best_alpha = arrays["best_alpha"]
        best = {k[len("best.") :]: v for k, v in arrays.items() if k.startswith("best.")}
        trainer.best_state = best or None
        trainer.epoch = meta["epoch"]
        trainer.log = TrainLog.from_json(json.dumps(meta["log"]))
        return trainer


def _listify(a: np.ndarray) -> list[list[float]]:
    return [[float(v) for v in row] for row in np.asarray(a)]


def train(model: AmtidinModel, train_set: Dataset, val_set: Dataset, cfg: TrainConfig, **kwargs) -> tuple[AmtidinModel, TrainLog]:
    """Functional entry point: run the full schedule and return the best model and the log."""
    trainer = Trainer(model, train_set, val_set, cfg)
    log = trainer.fit(**kwargs)
    return trainer.model, log
