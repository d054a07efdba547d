"""Network assembly: shared extractor, per-task hypotheses, head grid, critics.

Tasks are named ``"ID"`` (interference detection), ``"MI"`` (modulation
identification) and ``"II"`` (interference identification).  Head
``(t, i)`` reads hypothesis ``t``'s output on task ``i``'s stream and
predicts task ``i``'s classes; discriminator ``(t, i)`` (``t`` before ``i``
in task order) scores extractor features of both streams.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import BatchNorm1d, Conv1d, Linear, Module, SNLinear, Tensor, no_grad
from .autodiff import functional as F
from .autodiff.tensor import concat, split

TASKS = ("ID", "MI", "II")
PAIRS = (("ID", "MI"), ("ID", "II"), ("MI", "II"))
VARIANTS = ("AMTIDIN", "STL_ID", "STL_MI", "STL_II", "MTL_Vanilla", "MTL_NonAdv")


class CheckpointError(ValueError):
    """A checkpoint directory is missing, inconsistent or corrupted."""


@dataclass
class ArchConfig:
    n: int = 256
    m_classes: int = 14
    i_classes: int = 6
    feature_dim: int = 128
    hyp_hidden: int = 256
    hyp_out: int = 64
    dropout: float = 0.1
    adv_output_mode: str = "sigmoid"
    conv_channels: tuple[int, int] = (32, 64)
    conv_kernels: tuple[int, int, int] = (3, 5, 7)

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.conv_kernels = tuple(self.conv_kernels)
        dims = (self.n, self.m_classes, self.i_classes, self.feature_dim, self.hyp_hidden, self.hyp_out)
        if min(dims) < 1 or min(self.conv_channels) < 1:
            raise ValueError(f"architecture dimensions must be positive: {self}")
        if self.adv_output_mode not in ("sigmoid", "logit"):
            raise ValueError(f"adv_output_mode must be 'sigmoid' or 'logit', got {self.adv_output_mode!r}")
        if any(k % 2 == 0 for k in self.conv_kernels):
            raise ValueError("conv kernels must be odd to preserve length")

    def classes(self, task: str) -> int:
        return {"ID": 2, "MI": self.m_classes, "II": self.i_classes}[task]


def _component_rng(seed: int, *key: int) -> np.random.Generator:
    # Each component draws from its own stream so variants share initial values.
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


class Extractor(Module):
    """Three Conv1d-BN-GELU blocks, then global average pooling."""

    def __init__(self, arch: ArchConfig, seed: int, dtype=np.float32):
        rng = _component_rng(seed, 0)
        chans = (2, *arch.conv_channels, arch.feature_dim)
        self.convs = {}
        self.norms = {}
        for k, kernel in enumerate(arch.conv_kernels):
            self.convs[k] = Conv1d(chans[k], chans[k + 1], kernel, kernel // 2, rng, dtype, channels_last=True)
            self.norms[k] = BatchNorm1d(chans[k + 1], dtype, channels_last=True)
        self.n = arch.n
        self.dtype = dtype

    def __call__(self, x: np.ndarray) -> Tensor:
        if x.ndim != 3 or x.shape[1:] != (2, self.n):
            raise ValueError(f"expected input of shape (B, 2, {self.n}), got {x.shape}")
        h = Tensor(np.ascontiguousarray(x.transpose(0, 2, 1), dtype=self.dtype))
        for k in range(len(self.convs)):
            h = F.gelu(self.norms[k](self.convs[k](h)))
        return F.adaptive_avg_pool1d(h, axis=1)


class Hypothesis(Module):
    """Residual 128->256 block (dropout on the main path), then 256->128->64 with GELU."""

    def __init__(self, arch: ArchConfig, seed: int, task_index: int, dtype=np.float32):
        rng = _component_rng(seed, 1, task_index)
        self.main = Linear(arch.feature_dim, arch.hyp_hidden, rng, dtype)
        self.skip = Linear(arch.feature_dim, arch.hyp_hidden, rng, dtype)
        self.fc1 = Linear(arch.hyp_hidden, arch.feature_dim, rng, dtype)
        self.fc2 = Linear(arch.feature_dim, arch.hyp_out, rng, dtype)
        self.p = arch.dropout

    def __call__(self, f: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = F.dropout(F.gelu(self.main(f)), self.p, self.training, rng) + self.skip(f)
        return F.gelu(self.fc2(F.gelu(self.fc1(h))))


class Discriminator(Module):
    """GRL, SN-Linear, ELU, SN-Linear to one logit (sigmoid taken by the caller)."""

    def __init__(self, arch: ArchConfig, seed: int, pair_index: int, dtype=np.float32):
        rng = _component_rng(seed, 3, pair_index)
        self.fc1 = SNLinear(arch.feature_dim, 64, rng, dtype)
        self.fc2 = SNLinear(64, 1, rng, dtype)

    def __call__(self, f: Tensor) -> Tensor:
        return self.fc2(F.elu(self.fc1(F.grad_reverse(f))))[:, 0]

    def score(self, f: Tensor) -> Tensor:
        """Critic logit without the gradient reversal (for probing)."""
        return self.fc2(F.elu(self.fc1(f)))[:, 0]


class AmtidinModel(Module):
    """Parameter bundle for every variant; absent parts are simply not built."""

    def __init__(self, arch: ArchConfig, variant: str = "AMTIDIN", seed: int = 0, dtype=np.float32):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        self.arch = arch
        self.variant = variant
        self.seed = seed
        self.dtype = dtype
        self.tasks = (variant[4:],) if variant.startswith("STL_") else TASKS
        self.extractor = Extractor(arch, seed, dtype)
        self.hypotheses = {t: Hypothesis(arch, seed, TASKS.index(t), dtype) for t in self.tasks}
        if variant in ("AMTIDIN", "MTL_NonAdv"):
            keys = [(t, i) for t in TASKS for i in TASKS]
        else:
            keys = [(t, t) for t in self.tasks]
        self.heads = {
            (t, i): Linear(arch.hyp_out, arch.classes(i), _component_rng(seed, 2, TASKS.index(t), TASKS.index(i)), dtype)
            for t, i in keys
        }
        self.discriminators = {}
        if variant == "AMTIDIN":
            self.discriminators = {pair: Discriminator(arch, seed, k, dtype) for k, pair in enumerate(PAIRS)}

    @property
    def adversarial(self) -> bool:
        return bool(self.discriminators)

    @property
    def learns_alpha(self) -> bool:
        return self.variant in ("AMTIDIN", "MTL_NonAdv")

    def num_parameters_by_part(self) -> dict[str, int]:
        def count(mods):
            return sum(m.num_parameters() for m in mods)

        return {
            "extractor": self.extractor.num_parameters(),
            "hypotheses": count(self.hypotheses.values()),
            "heads": count(self.heads.values()),
            "discriminators": count(self.discriminators.values()),
        }


def build(arch: ArchConfig, seed: int = 0, dtype=np.float32) -> AmtidinModel:
    return AmtidinModel(arch, "AMTIDIN", seed, dtype)


def build_baseline(kind: str, arch: ArchConfig, seed: int = 0, dtype=np.float32) -> AmtidinModel:
    if kind == "AMTIDIN":
        raise ValueError("build_baseline builds the ablations; use build() for the full model")
    return AmtidinModel(arch, kind, seed, dtype)


@dataclass
class ForwardTrainOutput:
    """Activations of one training step.

    ``logits[(t, i)]`` is head ``(t, i)`` applied to hypothesis ``t`` on
    stream ``i``; ``probe_logits`` holds the same heads on detached inputs.
    ``d_logit[(t, i)]`` / ``d_sigmoid[(t, i)]`` are ``(scores on stream t,
    scores on stream i)``.
    """

    features: dict[str, Tensor]
    logits: dict[tuple[str, str], Tensor] = field(default_factory=dict)
    probe_logits: dict[tuple[str, str], Tensor] = field(default_factory=dict)
    d_logit: dict[tuple[str, str], tuple[Tensor, Tensor]] = field(default_factory=dict)
    d_sigmoid: dict[tuple[str, str], tuple[Tensor, Tensor]] = field(default_factory=dict)


def _stream_inputs(batch, tasks) -> dict[str, np.ndarray]:
    if isinstance(batch, dict):
        return {t: batch[t] for t in tasks}
    return {t: batch.inputs(t) for t in tasks}


def dropout_rng(key, t: str, i: str) -> np.random.Generator | None:
    if key is None:
        return None
    return np.random.default_rng(np.random.SeedSequence([*key, TASKS.index(t), TASKS.index(i)]))


def forward_train(
    model: AmtidinModel,
    batch,
    training: bool = True,
    rng_key: tuple[int, ...] | None = None,
    pairs=None,
    probe_pairs=(),
    discriminators: bool = True,
) -> ForwardTrainOutput:
    """Run every stream through the extractor once (as one union batch), then the heads.

    ``pairs`` restricts which heads are evaluated (default: all built
    heads); ``probe_pairs`` additionally evaluates heads on hypothesis
    outputs cut from the graph, so only the head parameters learn from them.
    Dropout masks are drawn from ``rng_key + (t, i)`` so they do not depend
    on which other heads are evaluated.
    """
    model.train(training)
    streams = _stream_inputs(batch, model.tasks)
    sizes = [len(streams[t]) for t in model.tasks]
    x = np.concatenate([streams[t] for t in model.tasks]) if len(sizes) > 1 else streams[model.tasks[0]]
    pieces = split(model.extractor(x), sizes) if len(sizes) > 1 else [model.extractor(x)]
    feats = dict(zip(model.tasks, pieces))
    return forward_from_features(model, feats, training, rng_key, pairs, probe_pairs, discriminators)


def forward_from_features(
    model: AmtidinModel,
    feats: dict[str, Tensor],
    training: bool = False,
    rng_key: tuple[int, ...] | None = None,
    pairs=None,
    probe_pairs=(),
    discriminators: bool = True,
) -> ForwardTrainOutput:
    """Hypotheses, heads and critics on already extracted stream features."""
    out = ForwardTrainOutput(features=feats)
    pairs = list(model.heads) if pairs is None else list(pairs)
    needed = sorted(set(pairs) | set(probe_pairs), key=lambda p: (TASKS.index(p[0]), TASKS.index(p[1])))
    for t, i in needed:
        h = model.hypotheses[t](feats[i], dropout_rng(rng_key, t, i) if training else None)
        head = model.heads[(t, i)]
        if (t, i) in pairs:
            out.logits[(t, i)] = head(h)
        if (t, i) in probe_pairs:
            out.probe_logits[(t, i)] = head(h.detach())
    if discriminators:
        for pair, disc in model.discriminators.items():
            t, i = pair
            z = disc(concat([feats[t], feats[i]]))
            z_t, z_i = split(z, [len(feats[t]), len(feats[i])])
            out.d_logit[pair] = (z_t, z_i)
            out.d_sigmoid[pair] = (F.sigmoid(z_t), F.sigmoid(z_i))
    return out


def extract_features(model: AmtidinModel, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Eval-mode extractor features for ``x`` of shape ``(R, 2, n)``."""
    model.eval()
    out = []
    with no_grad():
        for s in range(0, len(x), chunk):
            out.append(model.extractor(np.asarray(x[s : s + chunk])).data)
    if not out:
        return np.zeros((0, model.arch.feature_dim), dtype=model.dtype)
    return np.concatenate(out)


def predict_logits(model: AmtidinModel, x: np.ndarray, chunk: int = 512) -> dict[str, np.ndarray]:
    """Diagonal-head logits per task; discriminators and off-diagonal heads are not touched."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (2, model.arch.n):
        raise ValueError(f"expected input (B, 2, {model.arch.n}) or (2, {model.arch.n}), got {x.shape}")
    feats = extract_features(model, x, chunk)
    out = {}
    with no_grad():
        f = Tensor(feats)
        for t in model.tasks:
            out[t] = model.heads[(t, t)](model.hypotheses[t](f)).data
    return out


def predict(model: AmtidinModel, x: np.ndarray, chunk: int = 512) -> tuple[np.ndarray | None, ...]:
    """``(y_ID, y_MI, y_II)`` class indices; ties go to the lowest index (``argmax``).

    Tasks the variant does not model are returned as ``None``.
    """
    single = np.asarray(x).ndim == 2
    logits = predict_logits(model, x, chunk)
    preds = []
    for t in TASKS:
        if t in logits:
            y = np.argmax(logits[t], axis=1)
            preds.append(y[0] if single else y)
        else:
            preds.append(None)
    return tuple(preds)


# -- checkpoints -----------------------------------------------------------------


def model_state(model: AmtidinModel) -> dict[str, np.ndarray]:
    return {f"model.{k}": v for k, v in model.state_dict().items()}


def load_model_state(model: AmtidinModel, arrays: dict[str, np.ndarray]) -> None:
    model.load_state_dict({k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")})


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``manifest.json`` plus one little-endian blob file into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": "amtidin-ckpt", "version": 1, "tensors": entries, **meta}
    tmp_bin = path / "tensors.bin.tmp"
    tmp_json = path / "manifest.json.tmp"
    with open(tmp_bin, "wb") as fh:
        for raw in blobs:
            fh.write(raw)
    with open(tmp_json, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp_bin, path / "tensors.bin")
    os.replace(tmp_json, path / "manifest.json")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
        with open(path / "tensors.bin", "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {path}: {exc.filename} missing") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    if manifest.get("format") != "amtidin-ckpt":
        raise CheckpointError("not an amtidin checkpoint")
    arrays = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"tensor {e['name']} is truncated")
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"checksum mismatch for tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest


def arch_to_dict(arch: ArchConfig) -> dict:
    d = asdict(arch)
    d["conv_channels"] = list(arch.conv_channels)
    d["conv_kernels"] = list(arch.conv_kernels)
    return d


def save_model(model: AmtidinModel, path, extra: dict | None = None, arrays: dict | None = None) -> None:
    """Parameters and buffers, plus optional extra tensors (e.g. ``alpha``) and metadata."""
    meta = {"arch": arch_to_dict(model.arch), "variant": model.variant, "seed": model.seed}
    meta.update(extra or {})
    save_checkpoint(path, {**model_state(model), **(arrays or {})}, meta)


def load_model(path) -> tuple[AmtidinModel, dict[str, np.ndarray], dict]:
    arrays, manifest = load_checkpoint(path)
    arch = ArchConfig(**manifest["arch"])
    model = AmtidinModel(arch, manifest["variant"], manifest.get("seed", 0))
    load_model_state(model, arrays)
    return model, arrays, manifest
