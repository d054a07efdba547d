import json

import numpy as np
import pytest

from amtidin.dataio import SplitSpec, stratified_split
from amtidin.model import ArchConfig, build, build_baseline, model_state
from amtidin.siggen import GenConfig, InterferenceType as I, ModulationType as M, generate_dataset
from amtidin.trainer import TrainConfig, Trainer, TrainingDiverged, TrainLog, epoch_seed

SMALL = ArchConfig(n=64, feature_dim=16, hyp_hidden=12, hyp_out=8, conv_channels=(4, 6))


@pytest.fixture(scope="module")
def splits():
    cfg = GenConfig(n=64, samples_per_class=10, pairing={I.CWI: (M.UNMOD,), I.DMI: (M.BPSK, M.QPSK)}, master_seed=2)
    return stratified_split(generate_dataset(cfg), SplitSpec(seed=0))


def _trainer(splits, variant="AMTIDIN", seed=0, **kw):
    tr, va, _ = splits
    model = build(SMALL, seed=seed) if variant == "AMTIDIN" else build_baseline(variant, SMALL, seed=seed)
    return Trainer(model, tr, va, TrainConfig(variant=variant, batch_size=16, epochs=3, seed=seed, **kw))


def _states_equal(a, b):
    sa, sb = model_state(a), model_state(b)
    assert sa.keys() == sb.keys()
    for k in sa:
        np.testing.assert_array_equal(sa[k], sb[k], err_msg=k)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambdas=(-1, 1, 1))
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig(beta=(0.2, 0.3, 0.5))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_epoch_seed_distinct():
    assert len({epoch_seed(0, e) for e in range(50)}) == 50
    assert epoch_seed(1, 0) != epoch_seed(0, 0)


def test_deterministic_runs(splits):
    a, b = _trainer(splits), _trainer(splits)
    la, lb = a.fit(2, restore_best=False), b.fit(2, restore_best=False)
    _states_equal(a.model, b.model)
    np.testing.assert_array_equal(a.alpha, b.alpha)
    assert la.to_json() == lb.to_json()


def test_alpha_rows_on_simplex(splits):
    t = _trainer(splits)
    log = t.fit(3, restore_best=False)
    for rec in log.records:
        alpha = np.array(rec.alpha)
        assert np.all(alpha >= -1e-12)
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-9)
    assert np.isfinite(log.records[-1].train_loss)


def test_resume_matches_uninterrupted(splits, tmp_path):
    full = _trainer(splits)
    full.fit(3, restore_best=False)
    part = _trainer(splits)
    part.fit(2, restore_best=False)
    part.save(tmp_path / "state")
    resumed = Trainer.resume(tmp_path / "state", splits[0], splits[1])
    resumed.fit(3, restore_best=False)
    _states_equal(full.model, resumed.model)
    np.testing.assert_array_equal(full.alpha, resumed.alpha)
    assert [r.val_loss for r in full.log.records] == [r.val_loss for r in resumed.log.records]


def test_vanilla_keeps_identity(splits):
    t = _trainer(splits, variant="MTL_Vanilla")
    t.fit(2, restore_best=False)
    np.testing.assert_array_equal(t.alpha, np.eye(3))
    assert t.objective.rho == 0.0


def test_frozen_identity_without_critic_matches_vanilla(splits):
    # With rho = 0 and alpha frozen at the identity, only the diagonal heads see gradients,
    # so the shared trunk follows the vanilla multi-task trajectory exactly.
    full = _trainer(splits, rho=0.0, freeze_alpha=True)
    vanilla = _trainer(splits, variant="MTL_Vanilla")
    full.fit(2, restore_best=False)
    vanilla.fit(2, restore_best=False)
    sf, sv = model_state(full.model), model_state(vanilla.model)
    shared = [k for k in sv if k in sf]
    assert any(k.startswith("model.extractor") for k in shared)
    for k in shared:
        np.testing.assert_array_equal(sf[k], sv[k], err_msg=k)
    assert [r.val_loss for r in full.log.records] == [r.val_loss for r in vanilla.log.records]


def test_single_task_baseline(splits):
    t = _trainer(splits, variant="STL_II")
    log = t.fit(1)
    assert set(log.records[0].val_acc) == {"II"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_restores_best(splits):
    t = _trainer(splits)
    t.fit(1, restore_best=False)
    best = {k: v.copy() for k, v in t.best_state.items()}
    t.optimizer.lr = 1e30
    t.cfg.grad_clip = None
    for p in t.model.parameters():
        p.data[...] = np.float32(1e30)
    with pytest.raises(TrainingDiverged):
        t.fit(3)
    assert t.log.diverged
    for k, v in model_state(t.model).items():
        np.testing.assert_array_equal(v, best[k])


def test_log_roundtrip(splits, tmp_path):
    t = _trainer(splits)
    log = t.fit(2)
    back = TrainLog.from_json(log.to_json())
    assert back.to_json() == log.to_json()
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("epoch,lr,train_loss,val_loss")
    assert json.loads(log.to_json())["best_epoch"] in (0, 1)
