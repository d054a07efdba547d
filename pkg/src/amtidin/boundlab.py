"""Numeric checks of the multi-task generalization bound on 1-D toy tasks.

Every quantity in the bound has a brute-force counterpart here: expected
losses come from dense quadrature against the task density, the joint
minimal loss from a sweep over the hypothesis grid and Wasserstein
distances from the exact 1-D quantile formula.  Losses are absolute
losses of ``[0, 1]``-valued hypotheses.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from .autodiff import Adam, SNLinear, Tensor, no_grad
from .autodiff import functional as F
from .objective import compute_c1


def exact_w1_empirical_1d(a, b, weights_a=None, weights_b=None) -> float:
    """Exact W1 between two (weighted) empirical measures on the real line.

    Computed as the integral of ``|F_a - F_b|`` over the merged support,
    which equals the mean absolute difference of sorted samples when both
    sides are unweighted and of equal size.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("W1 needs two non-empty sample sets")
    wa = np.full(a.size, 1.0 / a.size) if weights_a is None else _normalized(weights_a, a.size)
    wb = np.full(b.size, 1.0 / b.size) if weights_b is None else _normalized(weights_b, b.size)
    if weights_a is None and weights_b is None and a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    points = np.concatenate([a, b])
    mass = np.concatenate([wa, -wb])
    order = np.argsort(points, kind="mergesort")
    points, mass = points[order], mass[order]
    cdf_gap = np.cumsum(mass)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(points)))


def _normalized(w, size) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size != size or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be non-negative, non-zero and match the samples")
    return w / w.sum()


# -- toy task family ----------------------------------------------------------------


@dataclass
class ToyTask:
    """1-D input distribution plus a ``[0, 1]``-valued labeling function.

    ``dist`` is ``("gaussian", mu, sigma)`` or ``("discrete", support, probs)``;
    ``label`` is ``("threshold", c)`` or ``("clipped_linear", slope, c)``.
    """

    dist: tuple
    label: tuple
    m: int = 200

    def __post_init__(self):
        kind = self.dist[0]
        if kind == "gaussian":
            if not self.dist[2] > 0:
                raise ValueError("gaussian sigma must be positive")
        elif kind == "discrete":
            p = np.asarray(self.dist[2], dtype=float)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12 or len(p) != len(self.dist[1]):
                raise ValueError("discrete probabilities must be non-negative and sum to 1")
        else:
            raise ValueError(f"unknown distribution kind {kind!r}")
        if self.label[0] not in ("threshold", "clipped_linear"):
            raise ValueError(f"unknown labeling function {self.label[0]!r}")

    def f(self, x: np.ndarray) -> np.ndarray:
        if self.label[0] == "threshold":
            return (x > self.label[1]).astype(float)
        slope, c = self.label[1], self.label[2]
        return np.clip(slope * (x - c), 0.0, 1.0)

    def sample(self, rng: np.random.Generator, m: int | None = None) -> np.ndarray:
        m = self.m if m is None else m
        if self.dist[0] == "gaussian":
            return rng.normal(self.dist[1], self.dist[2], size=m)
        return rng.choice(np.asarray(self.dist[1], float), size=m, p=np.asarray(self.dist[2], float))

    def quadrature(self, n_points: int = 20001) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and weights that integrate against the task distribution."""
        if self.dist[0] == "discrete":
            return np.asarray(self.dist[1], float), np.asarray(self.dist[2], float)
        mu, sigma = self.dist[1], self.dist[2]
        x = np.linspace(mu - 10 * sigma, mu + 10 * sigma, n_points)
        w = stats.norm.pdf(x, mu, sigma)
        w[[0, -1]] *= 0.5
        w *= x[1] - x[0]
        return x, w / w.sum()


@dataclass
class ToyHypothesisClass:
    """``h_theta(x) = clip(k (x - theta), 0, 1)`` with ``theta`` on a finite grid (K = k)."""

    slope: float = 1.0
    thetas: np.ndarray = field(default_factory=lambda: np.linspace(-3.0, 3.0, 601))
    pseudo_dim: int = 1

    @property
    def K(self) -> float:
        return abs(self.slope)

    def values(self, x: np.ndarray) -> np.ndarray:
        """``(n_theta, len(x))`` matrix of hypothesis outputs."""
        return np.clip(self.slope * (np.asarray(x)[None, :] - self.thetas[:, None]), 0.0, 1.0)

    def expected_losses(self, task: ToyTask) -> np.ndarray:
        x, w = task.quadrature()
        return np.abs(self.values(x) - task.f(x)[None, :]) @ w

    def empirical_losses(self, task: ToyTask, xs: np.ndarray) -> np.ndarray:
        return np.abs(self.values(xs) - task.f(xs)[None, :]).mean(axis=1)


@dataclass
class BoundInputs:
    """Everything the right-hand side needs; matrices are indexed ``[t, i]``.

    ``emp_loss[t, i]`` is the empirical loss of hypothesis ``h_t`` on task
    ``i``; ``w1[t, i]`` the empirical distance between tasks ``t`` and ``i``.
    """

    lam: np.ndarray
    alpha: np.ndarray
    m: np.ndarray
    delta: float
    K: float
    emp_loss: np.ndarray
    w1: np.ndarray
    xi: np.ndarray
    d: float = 1.0
    s: float = 2.0
    A: np.ndarray | None = None
    beta: np.ndarray | None = None

    def __post_init__(self):
        self.lam = np.asarray(self.lam, float)
        self.alpha = np.atleast_2d(np.asarray(self.alpha, float))
        self.m = np.asarray(self.m, float)
        T = self.lam.size
        self.A = np.ones(T) if self.A is None else np.asarray(self.A, float)
        self.beta = self.m / self.m.sum() if self.beta is None else np.asarray(self.beta, float)
        for name in ("emp_loss", "w1", "xi"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), float)))
        if abs(self.lam.sum() - 1) > 1e-9 or np.any(self.lam < 0):
            raise ValueError("lambda must lie on the simplex")
        if np.any(self.alpha < -1e-12) or np.any(np.abs(self.alpha.sum(axis=1) - 1) > 1e-9):
            raise ValueError("alpha rows must lie on the simplex")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        for name in ("alpha", "emp_loss", "w1", "xi"):
            if getattr(self, name).shape != (T, T):
                raise ValueError(f"{name} must be {T}x{T}")


def gamma_matrix(b: BoundInputs) -> np.ndarray:
    """``gamma[i, t] = A_i m_i^(-1/s) + A_t m_t^(-1/s) + sqrt(log(4T^2/delta)/2) (m_i^-1/2 + m_t^-1/2)``."""
    T = b.lam.size
    conc = b.A * b.m ** (-1.0 / b.s)
    dev = math.sqrt(0.5 * math.log(4 * T * T / b.delta)) * np.sqrt(1.0 / b.m)
    return conc[:, None] + conc[None, :] + dev[:, None] + dev[None, :]


def bound_rhs(b: BoundInputs) -> tuple[float, dict]:
    """Right-hand side of the bound and its five terms."""
    T = b.lam.size
    c1 = compute_c1(b.d, b.m.sum(), T, b.delta)
    gamma = gamma_matrix(b)
    # alpha[t, i] pairs with gamma[i, t] and xi[i, t].
    terms = {
        "empirical": float(np.sum(b.lam * np.sum(b.alpha * b.emp_loss, axis=1))),
        "regularization": float(c1 * np.sum(b.lam * np.sqrt(np.sum(b.alpha**2 / b.beta[None, :], axis=1)))),
        "wasserstein": float(2 * b.K * np.sum(b.lam * np.sum(b.alpha * b.w1, axis=1))),
        "complexity": float(2 * b.K * np.sum(b.lam * np.sum(b.alpha * gamma.T, axis=1))),
        "optimal": float(np.sum(b.lam * np.sum(b.alpha * b.xi.T, axis=1))),
    }
    terms["C1"] = c1
    total = sum(terms[k] for k in ("empirical", "regularization", "wasserstein", "complexity", "optimal"))
    return float(total), terms


# -- Monte Carlo harness ------------------------------------------------------------


@dataclass
class ToyFamily:
    tasks: list[ToyTask]
    hclass: ToyHypothesisClass
    lam: np.ndarray
    alpha: np.ndarray
    s: float = 2.0
    A: float = 1.0


def default_family() -> ToyFamily:
    """Two shifted Gaussian tasks with step labels the clipped-linear class cannot fit exactly (K = 2)."""
    tasks = [
        ToyTask(("gaussian", 0.0, 1.0), ("threshold", 0.0), m=200),
        ToyTask(("gaussian", 0.5, 1.0), ("threshold", 0.3), m=200),
    ]
    return ToyFamily(
        tasks=tasks,
        hclass=ToyHypothesisClass(slope=2.0, thetas=np.linspace(-3.0, 3.0, 1201)),
        lam=np.array([0.5, 0.5]),
        alpha=np.array([[0.7, 0.3], [0.3, 0.7]]),
    )


def joint_minimal_loss(expected: np.ndarray) -> np.ndarray:
    """``xi[t, i] = min_theta L_t(theta) + L_i(theta)`` from a ``(T, n_theta)`` loss table."""
    T = expected.shape[0]
    return np.array([[np.min(expected[t] + expected[i]) for i in range(T)] for t in range(T)])


def mc_bound_check(family: ToyFamily | None = None, trials: int = 200, delta: float = 0.1, seed: int = 0) -> dict:
    """Draw samples, fit each ``h_t`` by ERM on the grid and compare both sides of the bound."""
    family = family or default_family()
    tasks, hc = family.tasks, family.hclass
    T = len(tasks)
    spacing = np.max(np.diff(np.sort(hc.thetas)))
    if spacing * hc.K > 0.05:
        warnings.warn(f"hypothesis grid spacing {spacing:.3g} is coarse for slope {hc.K}", RuntimeWarning)
    expected = np.stack([hc.expected_losses(task) for task in tasks])
    xi = joint_minimal_loss(expected)
    m = np.array([task.m for task in tasks], float)
    rng = np.random.default_rng(seed)
    lhs, rhs, margins = [], [], []
    term_sums: dict[str, float] = {}
    for _ in range(trials):
        xs = [task.sample(rng) for task in tasks]
        emp_table = np.stack([hc.empirical_losses(task, x) for task, x in zip(tasks, xs)])
        chosen = np.argmin(emp_table, axis=1)
        emp = emp_table[:, chosen].T  # emp[t, i] = L_hat_i(h_t)
        w1 = np.array([[exact_w1_empirical_1d(xs[t], xs[i]) for i in range(T)] for t in range(T)])
        inputs = BoundInputs(
            lam=family.lam, alpha=family.alpha, m=m, delta=delta, K=hc.K, emp_loss=emp, w1=w1, xi=xi,
            d=hc.pseudo_dim, s=family.s, A=np.full(T, family.A),
        )
        total, terms = bound_rhs(inputs)
        left = float(np.sum(family.lam * expected[np.arange(T), chosen]))
        lhs.append(left)
        rhs.append(total)
        margins.append(total - left)
        for k, v in terms.items():
            term_sums[k] = term_sums.get(k, 0.0) + v
    margins_arr = np.array(margins)
    return {
        "trials": trials,
        "delta": delta,
        "violations": int(np.sum(margins_arr < 0)),
        "lhs_mean": float(np.mean(lhs)),
        "lhs_max": float(np.max(lhs)),
        "rhs_mean": float(np.mean(rhs)),
        "margin_min": float(margins_arr.min()),
        "margin_mean": float(margins_arr.mean()),
        "term_means": {k: v / trials for k, v in term_sums.items()},
        "xi": xi.tolist(),
    }


# -- lemma audits --------------------------------------------------------------------


def _rand_fraction(rng: np.random.Generator, denom: int = 1000) -> Fraction:
    return Fraction(int(rng.integers(0, denom + 1)), denom)


def _lemma1_case(rng: np.random.Generator, size: int) -> Fraction:
    raw = [int(rng.integers(1, 1000)) for _ in range(size)]
    total = sum(raw)
    p = [Fraction(r, total) for r in raw]
    h = [_rand_fraction(rng) for _ in range(size)]
    h_star = [_rand_fraction(rng) for _ in range(size)]
    f = [_rand_fraction(rng) for _ in range(size)]
    loss_h = sum(pk * abs(a - c) for pk, a, c in zip(p, h, f))
    loss_hh = sum(pk * abs(a - b) for pk, a, b in zip(p, h, h_star))
    loss_star = sum(pk * abs(b - c) for pk, b, c in zip(p, h_star, f))
    # Slack is non-negative exactly when the lemma holds.
    return loss_star - abs(loss_h - loss_hh)


def _lemma2_case(rng: np.random.Generator, size: int) -> float:
    K = float(rng.uniform(0.1, 5.0))
    pts_t = rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 2.0), size)
    pts_i = rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 2.0), size)
    p_t = rng.dirichlet(np.ones(size))
    p_i = rng.dirichlet(np.ones(size))

    def lipschitz(theta, slope):
        return lambda x: np.clip(slope * (x - theta), 0.0, 1.0)

    h = lipschitz(rng.uniform(-2, 2), K * rng.choice([-1, 1]) * rng.uniform(0, 1))
    h2 = lipschitz(rng.uniform(-2, 2), K * rng.choice([-1, 1]) * rng.uniform(0, 1))
    loss_i = float(np.sum(p_i * np.abs(h(pts_i) - h2(pts_i))))
    loss_t = float(np.sum(p_t * np.abs(h(pts_t) - h2(pts_t))))
    w1 = exact_w1_empirical_1d(pts_t, pts_i, p_t, p_i)
    return loss_t + 2 * K * w1 - loss_i


def lemma_property_check(kind: str, cases: int = 10_000, seed: int = 0, size: int = 8) -> dict:
    """Random audit of the loss triangle inequality (``lemma1``) or the transfer bound (``lemma2``)."""
    rng = np.random.default_rng(seed)
    if kind == "lemma1":
        slacks = [_lemma1_case(rng, size) for _ in range(cases)]
        violations = sum(1 for s in slacks if s < 0)
        return {"kind": kind, "cases": cases, "violations": violations, "min_slack": float(min(slacks))}
    if kind == "lemma2":
        slacks = np.array([_lemma2_case(rng, size) for _ in range(cases)])
        violations = int(np.sum(slacks < -1e-12))
        return {"kind": kind, "cases": cases, "violations": violations, "min_slack": float(slacks.min())}
    raise ValueError(f"unknown lemma {kind!r}")


# -- critic-based W1 estimates --------------------------------------------------------


class _Critic:
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = SNLinear(dim, hidden, rng, np.float64)
        self.fc2 = SNLinear(hidden, 1, rng, np.float64)

    def params(self):
        return [self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.elu(self.fc1(x)))[:, 0]

    def train(self, mode: bool):
        self.fc1.training = self.fc2.training = mode


def critic_w1_estimate(
    sample_a,
    sample_b,
    steps: int = 200,
    batch: int = 256,
    lr: float = 1e-2,
    mode: str = "logit",
    eval_size: int = 8192,
    seed: int = 0,
) -> float:
    """Train a spectrally normalized critic to separate two distributions and return its dual estimate.

    ``sample_a`` / ``sample_b`` are callables ``(rng, count) -> (count, dim)``
    arrays.  Training batches and the final evaluation sets are independent
    draws, so the estimate is not inflated by memorized sample noise.
    """
    rng = np.random.default_rng(seed)
    dim = sample_a(rng, 1).shape[1]
    critic = _Critic(dim, 64, np.random.default_rng(seed + 1))
    opt = Adam(critic.params(), lr=lr)
    critic.train(True)
    for _ in range(steps):
        xa = Tensor(sample_a(rng, batch).astype(np.float64))
        xb = Tensor(sample_b(rng, batch).astype(np.float64))
        za, zb = critic(xa), critic(xb)
        if mode == "sigmoid":
            za, zb = F.sigmoid(za), F.sigmoid(zb)
        loss = za.mean() - zb.mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    critic.train(False)
    with no_grad():
        za = critic(Tensor(sample_a(rng, eval_size).astype(np.float64)))
        zb = critic(Tensor(sample_b(rng, eval_size).astype(np.float64)))
        if mode == "sigmoid":
            za, zb = F.sigmoid(za), F.sigmoid(zb)
    return float(zb.data.mean() - za.data.mean())


def gaussian_sampler(dim: int, shift: float = 0.0, direction: np.ndarray | None = None):
    """Standard normal in ``dim`` dimensions translated by ``shift`` along a unit ``direction``."""
    if direction is None:
        direction = np.ones(dim) / math.sqrt(dim)
    offset = shift * direction / np.linalg.norm(direction)

    def draw(rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.standard_normal((count, dim)) + offset

    return draw
