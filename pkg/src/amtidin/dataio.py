"""Columnar datasets, the SIGD container, stratified splits and task batches."""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .siggen import ABSENT_INTERFERENCE, InterferenceType, ModulationType, SignalRecord

MAGIC = b"SIGD"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class DatasetFormatError(ValueError):
    """A SIGD file could not be decoded."""


class SplitError(ValueError):
    """A stratified split is infeasible."""


def record_dtype(n: int) -> np.dtype:
    return np.dtype(
        [
            ("presence", "<u1"),
            ("modulation", "<u2"),
            ("interference", "<u2"),
            ("snr_db", "<f4"),
            ("realized_signal_power", "<f4"),
            ("noise_variance", "<f4"),
            ("seed", "<u8"),
            ("iq", "<f4", (2, n)),
        ]
    )


def label_maps() -> dict:
    return {
        "modulation": {m.name: int(m) for m in ModulationType},
        "interference": {i.name: int(i) for i in InterferenceType},
    }


class Dataset:
    """Records stored as parallel arrays; ``iq`` is ``(count, 2, n)`` float32."""

    def __init__(self, table: np.ndarray, n: int, gen_config: dict | None = None):
        if table.dtype != record_dtype(n):
            table = table.astype(record_dtype(n))
        self.table = table
        self.n = n
        self.gen_config = gen_config or {}

    @classmethod
    def from_records(cls, records: Sequence[SignalRecord], n: int, gen_config: dict | None = None) -> "Dataset":
        table = np.zeros(len(records), dtype=record_dtype(n))
        for k, r in enumerate(records):
            if r.iq.shape != (2, n):
                raise ValueError(f"record {k} has iq shape {r.iq.shape}, expected (2, {n})")
            table[k] = (
                r.presence,
                int(r.modulation),
                int(r.interference),
                r.snr_db,
                r.realized_signal_power,
                r.noise_variance,
                r.seed,
                r.iq,
            )
        return cls(table, n, gen_config)

    @classmethod
    def empty(cls, n: int, gen_config: dict | None = None) -> "Dataset":
        return cls(np.zeros(0, dtype=record_dtype(n)), n, gen_config)

    def __len__(self) -> int:
        return len(self.table)

    def __getitem__(self, k: int) -> SignalRecord:
        row = self.table[k]
        return SignalRecord(
            iq=row["iq"].copy(),
            presence=int(row["presence"]),
            modulation=ModulationType(int(row["modulation"])),
            interference=int(row["interference"]),
            snr_db=float(row["snr_db"]),
            realized_signal_power=float(row["realized_signal_power"]),
            noise_variance=float(row["noise_variance"]),
            seed=int(row["seed"]),
        )

    @property
    def records(self) -> Iterator[SignalRecord]:
        for k in range(len(self)):
            yield self[k]

    # column views
    @property
    def iq(self) -> np.ndarray:
        return self.table["iq"]

    @property
    def presence(self) -> np.ndarray:
        return self.table["presence"]

    @property
    def modulation(self) -> np.ndarray:
        return self.table["modulation"]

    @property
    def interference(self) -> np.ndarray:
        return self.table["interference"]

    @property
    def snr_db(self) -> np.ndarray:
        return self.table["snr_db"]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.table[np.asarray(indices, dtype=np.int64)], self.n, self.gen_config)

    def present_indices(self) -> np.ndarray:
        return np.flatnonzero(self.presence == 1)

    def header(self) -> dict:
        return {
            "version": VERSION,
            "n": self.n,
            "count": len(self),
            "m_classes": len(ModulationType),
            "i_classes": len(InterferenceType),
            "label_maps": label_maps(),
            "gen_config": self.gen_config,
        }

    def equals(self, other: "Dataset") -> bool:
        return (
            self.n == other.n
            and self.gen_config == other.gen_config
            and self.table.tobytes() == other.table.tobytes()
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and self.equals(other)

    def stratum_keys(self) -> np.ndarray:
        """One integer key per record from (modulation, interference, snr, presence)."""
        snr_bits = self.snr_db.view(np.uint32).astype(np.uint64)
        return (
            (snr_bits << np.uint64(32))
            | (self.modulation.astype(np.uint64) << np.uint64(17))
            | (self.interference.astype(np.uint64) << np.uint64(1))
            | self.presence.astype(np.uint64)
        )


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    if not parts:
        raise ValueError("nothing to concatenate")
    n = parts[0].n
    if any(p.n != n for p in parts):
        raise ValueError("datasets have different record lengths")
    return Dataset(np.concatenate([p.table for p in parts]), n, parts[0].gen_config)


# -- SIGD container -----------------------------------------------------------


def dumps_dataset(ds: Dataset) -> bytes:
    header = json.dumps(ds.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = ds.table.tobytes()
    return b"".join(
        [_PREFIX.pack(MAGIC, VERSION, len(header)), header, body, struct.pack("<I", zlib.crc32(body))]
    )


def save_dataset(ds: Dataset, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps_dataset(ds))
    os.replace(tmp, path)


def loads_dataset(blob: bytes) -> Dataset:
    if len(blob) < _PREFIX.size:
        raise DatasetFormatError("truncated file: missing prefix")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetFormatError("bad magic")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    start = _PREFIX.size + header_len
    if len(blob) < start:
        raise DatasetFormatError("truncated file: header")
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"corrupt header: {exc}") from None
    n, count = int(header["n"]), int(header["count"])
    dtype = record_dtype(n)
    end = start + count * dtype.itemsize
    if len(blob) != end + 4:
        raise DatasetFormatError(f"truncated payload: expected {end + 4} bytes, found {len(blob)}")
    body = blob[start:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(body) != crc:
        raise DatasetFormatError("checksum mismatch in record region")
    table = np.frombuffer(body, dtype=dtype).copy()
    return Dataset(table, n, header.get("gen_config") or {})


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())


# -- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if any(not 0.0 <= f <= 1.0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must lie in [0, 1] and sum to 1, got {self.fractions}")


def _split_counts(size: int, fractions) -> list[int]:
    train = round(size * fractions[0])
    val = round(size * fractions[1])
    val = min(val, size - train)
    return [train, val, size - train - val]


def stratified_split(ds: Dataset, spec: SplitSpec = SplitSpec(), min_stratum: int = 5) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded per-stratum shuffle and cut into (train, val, test)."""
    keys = ds.stratum_keys()
    uniq, inverse = np.unique(keys, return_inverse=True)
    sizes = np.bincount(inverse, minlength=len(uniq))
    small = [k for k, s in enumerate(sizes) if s < min_stratum]
    if small:
        described = [_describe_stratum(ds, np.flatnonzero(inverse == k)[0]) for k in small]
        raise SplitError(f"strata with fewer than {min_stratum} records: {described}")
    rng = np.random.default_rng(spec.seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for k in range(len(uniq)):
        members = np.flatnonzero(inverse == k)
        members = members[rng.permutation(len(members))]
        cuts = np.cumsum(_split_counts(len(members), spec.fractions))
        for p, chunk in enumerate(np.split(members, cuts[:2])):
            parts[p].append(chunk)
    out = []
    for chunks in parts:
        idx = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
        out.append(ds.subset(idx))
    return tuple(out)


def _describe_stratum(ds: Dataset, k: int) -> str:
    rec = ds[k]
    interference = "absent" if rec.interference == ABSENT_INTERFERENCE else InterferenceType(rec.interference).name
    return f"({rec.modulation.name}, {interference}, snr={rec.snr_db}, presence={rec.presence})"


# -- task batches ------------------------------------------------------------------


@dataclass
class TaskBatch:
    """One mini-batch per task stream; ``idx_*`` index into the source dataset."""

    x_id: np.ndarray
    y_id: np.ndarray
    x_mi: np.ndarray
    y_mi: np.ndarray
    x_ii: np.ndarray
    y_ii: np.ndarray
    idx_id: np.ndarray
    idx_mi: np.ndarray
    idx_ii: np.ndarray

    def inputs(self, task: str) -> np.ndarray:
        return getattr(self, f"x_{task.lower()}")

    def labels(self, task: str) -> np.ndarray:
        return getattr(self, f"y_{task.lower()}")


def task_labels(ds: Dataset) -> dict[str, np.ndarray]:
    return {
        "ID": ds.presence.astype(np.int64),
        "MI": ds.modulation.astype(np.int64),
        "II": ds.interference.astype(np.int64),
    }


class _Stream:
    """Cyclic, reshuffled walk over a fixed index pool."""

    def __init__(self, pool: np.ndarray, rng: np.random.Generator):
        self.pool = pool
        self.rng = rng
        self.order = pool[rng.permutation(len(pool))]
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self.pos == len(self.order):
                self.order = self.pool[self.rng.permutation(len(self.pool))]
                self.pos = 0
            step = min(count, len(self.order) - self.pos)
            out.append(self.order[self.pos : self.pos + step])
            self.pos += step
            count -= step
        return np.concatenate(out)


def batch_sizes(longest: int, batch_size: int) -> list[int]:
    """Sizes of the batches in one epoch; a trailing remainder of 1 joins the previous batch."""
    sizes = [batch_size] * (longest // batch_size)
    rest = longest - sum(sizes)
    if rest >= 2 or not sizes:
        sizes.append(rest)
    elif rest == 1:
        sizes[-1] += 1
    return [s for s in sizes if s > 0]


def make_task_batches(train: Dataset, batch_size: int, epoch_seed: int) -> Iterator[TaskBatch]:
    """Three independently shuffled streams (all records / present / present)."""
    if batch_size < 2:
        raise ValueError(f"batch size must be at least 2, got {batch_size}")
    present = train.present_indices()
    if len(present) == 0:
        raise ValueError("dataset has no interference-present records for the MI/II streams")
    all_idx = np.arange(len(train))
    streams = [
        _Stream(pool, np.random.default_rng(np.random.SeedSequence([epoch_seed, k])))
        for k, pool in enumerate((all_idx, present, present))
    ]
    labels = task_labels(train)
    iq = train.iq
    for size in batch_sizes(max(len(all_idx), len(present)), batch_size):
        ids, mis, iis = (s.take(size) for s in streams)
        yield TaskBatch(
            x_id=iq[ids],
            y_id=labels["ID"][ids],
            x_mi=iq[mis],
            y_mi=labels["MI"][mis],
            x_ii=iq[iis],
            y_ii=labels["II"][iis],
            idx_id=ids,
            idx_mi=mis,
            idx_ii=iis,
        )


def n_batches(train: Dataset, batch_size: int) -> int:
    return len(batch_sizes(max(len(train), len(train.present_indices())), batch_size))


__all__ = [
    "Dataset",
    "DatasetFormatError",
    "SplitError",
    "SplitSpec",
    "TaskBatch",
    "concat_datasets",
    "load_dataset",
    "loads_dataset",
    "dumps_dataset",
    "make_task_batches",
    "save_dataset",
    "stratified_split",
    "task_labels",
]
