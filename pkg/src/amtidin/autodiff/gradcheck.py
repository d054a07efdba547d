"""Central finite-difference checks of the tape gradients in float64.

Each op is wrapped as ``f(*inputs) -> Tensor``; the scalar probed is
``sum(f(...) * R)`` for a fixed random ``R`` so every output entry
contributes.  Errors are reported as ``max|g - g_fd| / max(|g|, |g_fd|)``
over the whole gradient array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import Tensor, concat, split


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tol)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-300)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``x`` (edited in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        hi = f()
        flat[k] = old - eps
        lo = f()
        flat[k] = old
        out[k] = (hi - lo) / (2 * eps)
    return grad


def check_op(name: str, fn, arrays: list[np.ndarray], seed: int = 0, tol: float = 1e-5, sign: float = 1.0) -> CheckResult:
    """Compare tape and finite-difference gradients of ``sum(fn(*xs) * R)``.

    ``sign=-1`` checks an op whose backward is defined as the negated derivative.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    proj = None

    def forward(track: bool):
        nonlocal proj
        xs = [Tensor(a, requires_grad=track) for a in arrays]
        out = fn(*xs)
        if proj is None:
            proj = rng.standard_normal(out.shape)
        return xs, (out * Tensor(proj)).sum()

    xs, loss = forward(True)
    loss.backward()
    worst = 0.0
    for x, arr in zip(xs, arrays):
        fd = numeric_grad(lambda: forward(False)[1].item(), arr)
        analytic = np.zeros_like(arr) if x.grad is None else x.grad
        worst = max(worst, rel_err(analytic, sign * fd))
    return CheckResult(name, worst, tol)


def _op_cases(rng: np.random.Generator):
    r = rng.standard_normal
    drop_seed = int(rng.integers(2**31))
    u0 = r(5)
    u0 /= np.linalg.norm(u0)

    def sn(w):
        # Many power iterations from a fixed start make sigma the exact top singular value.
        return F.spectral_normalize(w, u0.copy(), 2000)

    def bn(channels_last):
        def f(x, g, b):
            c = x.shape[-1] if channels_last else x.shape[1]
            return F.batchnorm1d(x, g, b, np.zeros(c), np.ones(c), True, channels_last=channels_last)

        return f

    return [
        ("add_broadcast", lambda a, b: a + b, [r((4, 3)), r(3)], 1.0),
        ("mul", lambda a, b: a * b, [r((4, 3)), r((4, 3))], 1.0),
        ("div", lambda a, b: a / b, [r((4, 3)), 2.0 + rng.random((4, 3))], 1.0),
        ("neg_sub", lambda a, b: b - (-a), [r((3, 2)), r((3, 2))], 1.0),
        ("matmul", lambda a, b: a @ b, [r((4, 5)), r((5, 3))], 1.0),
        ("sum_axis", lambda a: a.sum(axis=1), [r((4, 5))], 1.0),
        ("mean", lambda a: a.mean(axis=0, keepdims=True), [r((4, 5))], 1.0),
        ("reshape_transpose", lambda a: a.reshape(6, 2).T, [r((3, 4))], 1.0),
        ("getitem", lambda a: a[:, 1], [r((4, 3))], 1.0),
        ("concat", lambda a, b: concat([a, b], axis=0), [r((2, 3)), r((4, 3))], 1.0),
        ("split", lambda a: split(a, [1, 3])[1] * 2.0 + split(a, [1, 3])[0].sum(), [r((4, 2))], 1.0),
        ("linear", F.linear, [r((5, 4)), r((3, 4)), r(3)], 1.0),
        ("conv1d", lambda x, w, b: F.conv1d(x, w, b, padding=1), [r((2, 3, 9)), r((4, 3, 3)), r(4)], 1.0),
        (
            "conv1d_channels_last",
            lambda x, w, b: F.conv1d(x, w, b, padding=2, channels_last=True),
            [r((2, 9, 3)), r((4, 3, 5)), r(4)],
            1.0,
        ),
        ("batchnorm1d_2d", bn(False), [r((6, 3)), 1.0 + 0.1 * r(3), r(3)], 1.0),
        ("batchnorm1d_3d", bn(False), [r((3, 2, 5)), 1.0 + 0.1 * r(2), r(2)], 1.0),
        ("batchnorm1d_channels_last", bn(True), [r((3, 5, 2)), 1.0 + 0.1 * r(2), r(2)], 1.0),
        ("gelu", F.gelu, [r((4, 5))], 1.0),
        ("elu", F.elu, [r((4, 5))], 1.0),
        ("sigmoid", F.sigmoid, [r((4, 5))], 1.0),
        ("softmax_cross_entropy", lambda z: F.softmax_cross_entropy(z, [0, 2, 1, 2]), [r((4, 3))], 1.0),
        ("dropout", lambda x: F.dropout(x, 0.3, True, drop_seed), [r((4, 5))], 1.0),
        ("adaptive_avg_pool1d", F.adaptive_avg_pool1d, [r((2, 3, 7))], 1.0),
        ("grad_reverse", F.grad_reverse, [r((4, 3))], -1.0),
        ("spectral_normalize", sn, [r((5, 4))], 1.0),
    ]


def op_suite(seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [check_op(name, fn, arrays, seed=k, tol=tol, sign=sign) for k, (name, fn, arrays, sign) in enumerate(_op_cases(rng))]


def model_loss_check(coords: int = 16, seed: int = 0, tol: float = 1e-4, batch: int = 6, n: int = 32) -> CheckResult:
    """Spot-check the full multi-task adversarial loss at ``coords`` random parameter entries.

    Parameters upstream of the gradient reversal receive the classification
    gradient minus the adversarial gradient; the critics receive the plain
    gradient.  The oracle differentiates both parts separately and combines
    them with those signs.
    """
    from ..model import TASKS, AmtidinModel, ArchConfig, forward_train
    from ..objective import ObjectiveConfig, total_objective

    arch = ArchConfig(n=n, feature_dim=16, hyp_hidden=12, hyp_out=8, conv_channels=(4, 6))
    model = AmtidinModel(arch, "AMTIDIN", seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    data = {t: rng.standard_normal((batch, 2, n)) for t in TASKS}
    labels = {
        "ID": rng.integers(0, 2, batch),
        "MI": rng.integers(0, arch.m_classes, batch),
        "II": rng.integers(0, arch.i_classes, batch),
    }
    alpha = np.array([[0.6, 0.2, 0.2], [0.1, 0.7, 0.2], [0.25, 0.25, 0.5]])
    cfg = ObjectiveConfig(rho=0.7, adv_output_mode="sigmoid")
    lam = dict(zip(TASKS, cfg.lambdas))
    # The tape treats the singular vectors as constants, which is exact once they have converged.
    for disc in model.discriminators.values():
        for layer in (disc.fc1, disc.fc2):
            F.power_iteration(layer.weight.data, layer.u, 2000)
    buffers = {k: v.copy() for k, v in model.named_buffers()}

    def evaluate():
        for name, buf in model.named_buffers():
            buf[...] = buffers[name]
        out = forward_train(model, data, True, rng_key=(seed, 0, 0))
        loss, parts = total_objective(out, labels, alpha, cfg)
        cls = sum(lam[t] * parts[f"cls_{t}"] for t in TASKS)
        return loss, cls, parts["total"] - cls

    model.zero_grad()
    loss, _, _ = evaluate()
    loss.backward()
    params = list(model.named_parameters())
    picks = rng.choice(sum(p.size for _, p in params), size=coords, replace=False)
    offsets = np.cumsum([0] + [p.size for _, p in params])
    analytic, oracle, names = [], [], []
    h = 1e-4
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, p = params[k]
        idx = np.unravel_index(flat - offsets[k], p.shape)
        old = p.data[idx]
        values = {}
        for step in (-2, -1, 1, 2):
            p.data[idx] = old + step * h
            values[step] = evaluate()[1:]
        p.data[idx] = old
        # Five-point stencil: O(h^4) truncation and ~1e-12 roundoff.
        c_d, a_d = (
            (8 * (values[1][j] - values[-1][j]) - (values[2][j] - values[-2][j])) / (12 * h) for j in (0, 1)
        )
        sign = 1.0 if name.startswith("discriminators") else -1.0
        oracle.append(c_d + sign * a_d)
        analytic.append(p.grad[idx])
        names.append(name)
    analytic = np.array(analytic)
    oracle = np.array(oracle)
    # Entries below the stencil's roundoff (a conv bias ahead of batchnorm has exactly zero gradient) get a floor.
    err = np.abs(analytic - oracle) / np.maximum(np.maximum(np.abs(analytic), np.abs(oracle)), 1e-8)
    details = [(nm, float(a), float(o)) for nm, a, o in zip(names, analytic, oracle)]
    return CheckResult("amtidin_total_loss", float(err.max()), tol, details)


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_suite(seed) + [model_loss_check(seed=seed)]
