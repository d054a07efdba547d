"""Loss assembly and the task-relation coefficient subproblem."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff import functional as F
from .model import PAIRS, TASKS, AmtidinModel, extract_features


@dataclass
class PGDConfig:
    max_iters: int = 500
    step: float = 1e-2
    tol: float = 1e-9


@dataclass
class ObjectiveConfig:
    lambdas: tuple[float, float, float] = (0.05, 0.85, 0.15)
    rho: float = 1.0
    c1: float = 0.0
    beta: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    adv_output_mode: str = "sigmoid"
    pgd: PGDConfig = field(default_factory=PGDConfig)

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        beta = np.asarray(self.beta, dtype=float)
        # The published weights sum to 1.05, so only non-negativity is enforced here.
        if lam.shape != (3,) or np.any(lam < 0) or not lam.sum() > 0:
            raise ValueError(f"lambdas must be three non-negative weights, got {self.lambdas}")
        if np.any(beta <= 0) or abs(beta.sum() - 1.0) > 1e-9:
            raise ValueError(f"beta must be positive and sum to 1, got {self.beta}")
        if self.rho < 0 or self.c1 < 0:
            raise ValueError("rho and c1 must be non-negative")
        if self.adv_output_mode not in ("sigmoid", "logit"):
            raise ValueError(f"unknown adv_output_mode {self.adv_output_mode!r}")


def check_alpha(alpha: np.ndarray, atol: float = 1e-8) -> np.ndarray:
    """Validate a task relation matrix: square, rows on the probability simplex."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 2 or alpha.shape[0] != alpha.shape[1]:
        raise ValueError(f"alpha must be square, got shape {alpha.shape}")
    if np.any(alpha < -atol) or np.any(np.abs(alpha.sum(axis=1) - 1.0) > atol):
        raise ValueError(f"alpha rows must lie on the simplex:\n{alpha}")
    return alpha


# -- losses ------------------------------------------------------------------


def _labels(labels, task: str) -> np.ndarray:
    if isinstance(labels, dict):
        return labels[task]
    return labels.labels(task)


def task_ce(out, labels, t: str, i: str) -> Tensor:
    return F.softmax_cross_entropy(out.logits[(t, i)], _labels(labels, i))


def alpha_weighted_loss(out, labels, alpha_row, t: str) -> Tensor:
    """``sum_i alpha_{t,i} CE(z^{t,i}, y^i)``; zero-weight heads are skipped."""
    total = None
    for k, i in enumerate(TASKS):
        w = float(alpha_row[k])
        if w == 0.0:
            continue
        term = task_ce(out, labels, t, i) * w
        total = term if total is None else total + term
    if total is None:
        raise ValueError("alpha row has no positive entry")
    return total


def adversarial_pair_loss(d_out_t: Tensor, d_out_i: Tensor) -> Tensor:
    """``mean d(X^t) - mean d(X^i)``.

    Minimizing it moves the critic toward ``mean d(X^i) - mean d(X^t)``
    (the dual W1 estimate, which is therefore ``-loss``) while the
    gradient reversal makes the extractor shrink that estimate.
    """
    if d_out_t.shape[0] == 0 or d_out_i.shape[0] == 0:
        raise ValueError("adversarial loss needs two non-empty batches")
    return d_out_t.mean() - d_out_i.mean()


def pair_key(t: str, i: str) -> tuple[str, str]:
    a, b = sorted((t, i), key=TASKS.index)
    return a, b


def adversarial_terms(out, mode: str) -> dict[tuple[str, str], Tensor]:
    table = out.d_sigmoid if mode == "sigmoid" else out.d_logit
    return {pair: adversarial_pair_loss(*table[pair]) for pair in table}


def total_objective(
    out,
    labels,
    alpha: np.ndarray,
    cfg: ObjectiveConfig,
    tasks=TASKS,
) -> tuple[Tensor, dict]:
    """Lambda-weighted alpha-losses plus ``rho`` times the alpha-weighted critic terms.

    Pair ``(t, i)`` and ``(i, t)`` share one critic and one (symmetric)
    distance term; the diagonal term is zero.  Returns ``(loss, parts)``
    where ``parts`` holds float diagnostics.
    """
    alpha = np.asarray(alpha, dtype=float)
    lam = dict(zip(TASKS, cfg.lambdas))
    parts: dict = {}
    total = None
    for t in tasks:
        k = TASKS.index(t)
        cls_t = alpha_weighted_loss(out, labels, alpha[k], t)
        parts[f"cls_{t}"] = cls_t.item()
        term = cls_t * lam[t] if len(tasks) > 1 else cls_t
        total = term if total is None else total + term
    if cfg.rho > 0 and out.d_logit:
        adv = adversarial_terms(out, cfg.adv_output_mode)
        for pair, value in adv.items():
            parts[f"adv_{pair[0]}_{pair[1]}"] = value.item()
        for t in tasks:
            k = TASKS.index(t)
            for j, i in enumerate(TASKS):
                w = lam[t] * alpha[k, j]
                if i == t or w == 0.0:
                    continue
                total = total + adv[pair_key(t, i)] * (cfg.rho * w)
    parts["total"] = total.item()
    return total, parts


# -- simplex machinery -----------------------------------------------------------


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum x = 1}`` by sorting."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0 or not np.all(np.isfinite(v)):
        raise ValueError("project_simplex expects a finite non-empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def alpha_objective(alpha, a, w, rho: float, c1: float, beta) -> float:
    alpha = np.asarray(alpha, dtype=float)
    lin = float(np.dot(alpha, np.asarray(a) + rho * np.asarray(w)))
    return lin + c1 * math.sqrt(float(np.sum(alpha**2 / np.asarray(beta))))


def _alpha_gradient(alpha, c, c1, beta):
    q = np.sum(alpha**2 / beta)
    if c1 == 0.0 or q == 0.0:
        return c.copy()
    return c + c1 * (alpha / beta) / math.sqrt(q)


def solve_alpha(
    a,
    w,
    cfg: ObjectiveConfig,
    warm_start=None,
) -> np.ndarray:
    """Minimize ``alpha.(a + rho w) + C1 sqrt(sum alpha_i^2 / beta_i)`` over the simplex.

    Projected gradient descent with Armijo backtracking from ``warm_start``
    (uniform by default).  The objective is convex, so the first iterate
    whose step changes ``alpha`` by less than ``tol`` is returned.
    """
    a = np.asarray(a, dtype=float)
    w = np.asarray(w, dtype=float)
    beta = np.asarray(cfg.beta, dtype=float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(w))):
        raise ValueError("solve_alpha: non-finite inputs")
    if a.shape != w.shape or a.shape != beta.shape:
        raise ValueError(f"solve_alpha: shapes a={a.shape}, w={w.shape}, beta={beta.shape} differ")
    c = a + cfg.rho * w
    c1 = cfg.c1
    x = project_simplex(np.full(a.size, 1.0 / a.size) if warm_start is None else np.asarray(warm_start, float))

    def phi(z):
        return float(z @ c) + c1 * math.sqrt(float(np.sum(z * z / beta)))

    step = cfg.pgd.step
    fx = phi(x)
    for _ in range(cfg.pgd.max_iters):
        g = _alpha_gradient(x, c, c1, beta)
        while True:
            y = project_simplex(x - step * g)
            fy = phi(y)
            # Sufficient decrease for the projected step (gradient-mapping form).
            if fy <= fx + g @ (y - x) + np.sum((y - x) ** 2) / (2 * step) + 1e-15 or step < 1e-12:
                break
            step *= 0.5
        moved = np.max(np.abs(y - x))
        x, fx = y, fy
        if moved < cfg.pgd.tol:
            break
        step = min(step * 2.0, 1e3)
    return x


def compute_c1(d: float, m: float, T: int, delta: float) -> float:
    """Complexity constant ``2 sqrt(2 (d log(2 e m / d) + log(16 T / delta)) / m)`` (natural logs)."""
    if d < 1 or m <= d or not 0.0 < delta < 1.0 or T < 1:
        raise ValueError(f"compute_c1 needs d >= 1, m > d, 0 < delta < 1, T >= 1 (got d={d}, m={m}, delta={delta}, T={T})")
    inner = d * math.log(2 * math.e * m / d) + math.log(16 * T / delta)
    return 2.0 * math.sqrt(2.0 * inner / m)


# -- similarity report ------------------------------------------------------------


@dataclass
class SimilarityReport:
    """Pairwise critic-based W1 estimates (3x3, symmetric, zero diagonal) and alpha."""

    w1_logit: np.ndarray
    w1_sigmoid: np.ndarray
    alpha: np.ndarray
    per_snr: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {
            "tasks": list(TASKS),
            "W1_logit": self.w1_logit.tolist(),
            "W1_sigmoid": self.w1_sigmoid.tolist(),
            "alpha": self.alpha.tolist(),
            "per_snr": {
                str(k): {name: np.asarray(v).tolist() for name, v in rep.items()} for k, rep in self.per_snr.items()
            },
        }
        return json.dumps(body, indent=1, sort_keys=True)

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, mat in (("W1_logit", self.w1_logit), ("W1_sigmoid", self.w1_sigmoid), ("alpha", self.alpha)):
            written.append(write_matrix_csv(out / f"{name}.csv", mat))
        for snr, rep in sorted(self.per_snr.items()):
            for name in ("W1_logit", "W1_sigmoid"):
                written.append(write_matrix_csv(out / f"{name}_snr{snr:g}.csv", rep[name]))
        path = out / "similarity.json"
        path.write_text(self.to_json())
        written.append(path)
        return written


def write_matrix_csv(path, mat: np.ndarray) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", *TASKS])
        for t, row in zip(TASKS, np.asarray(mat)):
            writer.writerow([t, *(repr(float(v)) for v in row)])
    return path


def read_matrix_csv(path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def _pair_estimates(model: AmtidinModel, feats: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    w_logit = np.zeros((3, 3))
    w_sig = np.zeros((3, 3))
    with no_grad():
        for (t, i), disc in model.discriminators.items():
            zt = disc.score(Tensor(feats[t])).data.astype(np.float64)
            zi = disc.score(Tensor(feats[i])).data.astype(np.float64)
            a, b = TASKS.index(t), TASKS.index(i)
            # Critic is trained to raise stream i and lower stream t.
            w_logit[a, b] = w_logit[b, a] = zi.mean() - zt.mean()
            w_sig[a, b] = w_sig[b, a] = _sigmoid64(zi).mean() - _sigmoid64(zt).mean()
    return w_logit, w_sig


def _sigmoid64(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def estimate_w1_matrix(model: AmtidinModel, eval_set, alpha: np.ndarray | None = None, per_snr: bool = False) -> SimilarityReport:
    """Critic W1 estimates on the full evaluation set (ID stream: all records; MI/II: present ones)."""
    if not model.adversarial:
        raise ValueError(f"variant {model.variant} has no discriminators")
    present = eval_set.present_indices()
    if len(eval_set) == 0 or len(present) == 0:
        raise ValueError("evaluation set has an empty task stream")
    all_feats = extract_features(model, eval_set.iq)
    feats = {"ID": all_feats, "MI": all_feats[present], "II": all_feats[present]}
    w_logit, w_sig = _pair_estimates(model, feats)
    report = SimilarityReport(w_logit, w_sig, np.eye(3) if alpha is None else np.asarray(alpha, float))
    if per_snr:
        snr = eval_set.snr_db
        negatives = np.flatnonzero(eval_set.presence == 0)
        for value in np.unique(snr[present]):
            pos = present[snr[present] == value]
            # Pair each SNR's positives with the same number of negatives for the ID stream.
            neg = negatives[: len(pos)]
            ids = np.sort(np.concatenate([pos, neg]))
            sub = {"ID": all_feats[ids], "MI": all_feats[pos], "II": all_feats[pos]}
            wl, ws = _pair_estimates(model, sub)
            report.per_snr[float(value)] = {"W1_logit": wl, "W1_sigmoid": ws}
    return report
