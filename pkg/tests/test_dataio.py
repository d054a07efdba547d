import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amtidin.dataio import (
    Dataset,
    DatasetFormatError,
    SplitError,
    SplitSpec,
    batch_sizes,
    concat_datasets,
    dumps_dataset,
    load_dataset,
    loads_dataset,
    make_task_batches,
    n_batches,
    save_dataset,
    stratified_split,
)
from amtidin.siggen import GenConfig, InterferenceType as I, ModulationType as M, generate_dataset


@pytest.fixture(scope="module")
def small():
    cfg = GenConfig(n=64, samples_per_class=10, snr_list_db=[0.0], pairing={I.CWI: (M.UNMOD,), I.DMI: (M.BPSK, M.QPSK)})
    return generate_dataset(cfg)


def test_roundtrip_bytes(small, tmp_path):
    path = tmp_path / "d.sigd"
    save_dataset(small, path)
    back = load_dataset(path)
    assert back == small
    assert dumps_dataset(back) == path.read_bytes()


def test_record_access(small):
    rec = small[0]
    assert rec.iq.shape == (2, 64)
    assert rec.presence == 1
    assert sum(1 for _ in small.records) == len(small)


def test_corruption_detected(small):
    blob = bytearray(dumps_dataset(small))
    with pytest.raises(DatasetFormatError, match="magic"):
        loads_dataset(b"XXXX" + bytes(blob[4:]))
    bad = bytearray(blob)
    bad[-100] ^= 0xFF
    with pytest.raises(DatasetFormatError, match="checksum"):
        loads_dataset(bytes(bad))
    with pytest.raises(DatasetFormatError, match="truncated"):
        loads_dataset(bytes(blob[:-10]))
    versioned = bytearray(blob)
    versioned[4] = 9
    with pytest.raises(DatasetFormatError, match="version"):
        loads_dataset(bytes(versioned))


def test_empty_roundtrip():
    ds = Dataset.empty(64)
    assert loads_dataset(dumps_dataset(ds)) == ds


def test_concat(small):
    both = concat_datasets([small.subset([0, 1]), small.subset([2])])
    assert len(both) == 3
    with pytest.raises(ValueError):
        concat_datasets([small, Dataset.empty(128)])


def test_split_is_stratified_and_disjoint(small):
    tr, va, te = stratified_split(small, SplitSpec(seed=4))
    assert (len(tr), len(va), len(te)) == (36, 12, 12)
    seeds = [set(p.table["seed"].tolist()) for p in (tr, va, te)]
    assert not (seeds[0] & seeds[1] or seeds[0] & seeds[2] or seeds[1] & seeds[2])
    for part, per_stratum in ((tr, 6), (va, 2), (te, 2)):
        _, counts = np.unique(part.stratum_keys(), return_counts=True)
        # Three positive strata of 10 and one negative stratum of 30 records.
        assert sorted(counts.tolist()) == sorted([per_stratum] * 3 + [per_stratum * 3])


def test_split_deterministic(small):
    a = stratified_split(small, SplitSpec(seed=1))
    b = stratified_split(small, SplitSpec(seed=1))
    assert all(x == y for x, y in zip(a, b))


def test_split_rejects_tiny_strata(small):
    with pytest.raises(SplitError):
        stratified_split(small.subset(np.arange(3)), SplitSpec())


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(fractions=(0.5, 0.5, 0.5))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5000), st.integers(2, 512))
def test_batch_sizes_cover_epoch(longest, b):
    sizes = batch_sizes(longest, b)
    assert sum(sizes) == longest
    assert all(s >= 2 for s in sizes) or longest == 1
    assert all(s <= b + 1 for s in sizes)


def test_task_batches(small):
    batches = list(make_task_batches(small, 16, epoch_seed=5))
    assert len(batches) == n_batches(small, 16)
    first = batches[0]
    assert first.x_id.shape == (16, 2, 64)
    assert np.all(small.presence[first.idx_mi] == 1)
    np.testing.assert_array_equal(first.y_ii, small.interference[first.idx_ii])
    # One epoch covers every record of the longest stream exactly once.
    ids = np.concatenate([b.idx_id for b in batches])
    assert sorted(ids.tolist()) == list(range(len(small)))
    again = list(make_task_batches(small, 16, epoch_seed=5))
    assert all(np.array_equal(a.idx_mi, b.idx_mi) for a, b in zip(batches, again))
