import csv
import json

import numpy as np
import pytest

from amtidin.cli import main
from amtidin.dataio import load_dataset, task_labels
from amtidin.evaluate import SweepSpec, chance_levels, confusion_matrix, evaluate, run_sweep
from amtidin.model import ArchConfig, build, load_model, predict_logits
from amtidin.objective import read_matrix_csv
from amtidin.siggen import GenConfig, InterferenceType as I, ModulationType as M, generate_dataset

SMALL = ArchConfig(n=64, feature_dim=16, hyp_hidden=12, hyp_out=8, conv_channels=(4, 6))
PAIRING = {I.CWI: (M.UNMOD,), I.DMI: (M.BPSK, M.QPSK)}


@pytest.fixture(scope="module")
def data():
    return generate_dataset(GenConfig(n=64, samples_per_class=6, snr_list_db=[0.0, 10.0], pairing=PAIRING, master_seed=4))


def test_chance_levels():
    chance = chance_levels(ArchConfig())
    assert chance["ID"] == pytest.approx(50.0)
    assert chance["MI"] == pytest.approx(100 / 14)
    assert chance["II"] == pytest.approx(100 / 6)


def test_confusion_matrix():
    cm = confusion_matrix(np.array([0, 1, 1, 2]), np.array([0, 2, 1, 2]), 3)
    np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [0, 0, 1]])


def test_evaluate_matches_direct_recomputation(data):
    model = build(SMALL, seed=2)
    report = evaluate(model, data)
    logits = predict_logits(model, data.iq)
    labels = task_labels(data)
    present = data.present_indices()
    for t in ("ID", "MI", "II"):
        rows = np.arange(len(data)) if t == "ID" else present
        direct = 100.0 * np.mean(np.argmax(logits[t][rows], axis=1) == labels[t][rows])
        assert abs(report.accuracy[t] - direct) <= 1e-12
        cm = report.confusion[t]
        np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(labels[t][rows], minlength=cm.shape[0]))
        assert report.counts[t] == len(rows)
        assert set(report.per_snr[t]) == {0.0, 10.0}
    assert json.loads(report.to_json())["counts"]["ID"] == len(data)
    with pytest.raises(ValueError):
        evaluate(model, data.subset(np.arange(0)))


def test_sweep_rows(tmp_path):
    spec = SweepSpec(
        axis="snr",
        values=[0.0, 10.0],
        repetitions=1,
        variants=["AMTIDIN", "STL_II"],
        gen={"n": 64, "samples_per_class": 6, "pairing": {"CWI": ["UNMOD"], "DMI": ["BPSK"]}},
        train={"epochs": 1, "batch_size": 16, "pseudo_dim": 5},
        arch={"feature_dim": 16, "hyp_hidden": 12, "hyp_out": 8, "conv_channels": [4, 6]},
    )
    rows = run_sweep(spec, tmp_path / "sweep.csv")
    assert len(rows) == 4
    assert [(r["value"], r["variant"]) for r in rows] == [(0.0, "AMTIDIN"), (0.0, "STL_II"), (10.0, "AMTIDIN"), (10.0, "STL_II")]
    assert all(r["status"] == "ok" for r in rows)
    assert rows[0]["acc_II_std"] == 0.0
    assert np.isnan(rows[1]["acc_MI_mean"])
    with open(tmp_path / "sweep.csv") as fh:
        assert len(list(csv.reader(fh))) == 5
    with pytest.raises(ValueError):
        SweepSpec(axis="bogus", values=[1])


def test_sweep_skips_infeasible_point(tmp_path):
    spec = SweepSpec(
        axis="sample_size",
        values=[1],
        repetitions=1,
        gen={"n": 64, "pairing": {"CWI": ["UNMOD"]}},
        train={"epochs": 1},
        arch={"feature_dim": 16, "hyp_hidden": 12, "hyp_out": 8, "conv_channels": [4, 6]},
    )
    with pytest.warns(UserWarning, match="skipped"):
        rows = run_sweep(spec, tmp_path / "s.csv")
    assert rows[0]["status"].startswith("skipped")


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def test_cli_pipeline(tmp_path, capsys):
    gen = _write(tmp_path / "gen.json", {"n": 64, "samples_per_class": 8, "pairing": {"CWI": ["UNMOD"], "DMI": ["BPSK"]}})
    assert main(["gen", "--config", gen, "--seed", "3", "--out", str(tmp_path / "all.sigd")]) == 0
    assert main(["split", "--data", str(tmp_path / "all.sigd"), "--out", str(tmp_path / "split")]) == 0
    train = _write(
        tmp_path / "train.json",
        {"epochs": 2, "batch_size": 16, "pseudo_dim": 5, "arch": {"feature_dim": 16, "hyp_hidden": 12, "hyp_out": 8, "conv_channels": [4, 6]}},
    )
    run = tmp_path / "run"
    assert main(["train", "--config", train, "--data", str(tmp_path / "split"), "--out", str(run), "--quiet"]) == 0
    assert {"state", "model", "train_log.csv", "train_log.json"} <= {p.name for p in run.iterdir()}
    # Resuming a finished run trains no further epochs and leaves the log intact.
    assert main(["train", "--config", train, "--data", str(tmp_path / "split"), "--out", str(run), "--resume", "--quiet"]) == 0
    assert len(json.loads((run / "train_log.json").read_text())["records"]) == 2
    test_path = str(tmp_path / "split" / "test.sigd")
    assert main(["eval", "--model", str(run / "model"), "--data", test_path, "--out", str(tmp_path / "eval.json")]) == 0
    report = json.loads((tmp_path / "eval.json").read_text())
    model, _, _ = load_model(run / "model")
    assert report["accuracy"] == pytest.approx(evaluate(model, load_dataset(test_path)).accuracy)
    assert main(["similarity", "--model", str(run / "model"), "--data", test_path, "--out", str(tmp_path / "sim")]) == 0
    w = read_matrix_csv(tmp_path / "sim" / "W1_sigmoid.csv")
    np.testing.assert_allclose(w, w.T)
    np.testing.assert_allclose(read_matrix_csv(tmp_path / "sim" / "alpha.csv").sum(axis=1), 1.0, atol=1e-8)
    capsys.readouterr()


def test_cli_user_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["gen"]) == 1
    assert main(["eval", "--model", str(tmp_path / "missing"), "--data", str(tmp_path / "x.sigd")]) == 1
    bad = _write(tmp_path / "bad.json", {"n": 3})
    assert main(["gen", "--config", bad, "--out", str(tmp_path / "d.sigd")]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert main(["gen", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path / "d.sigd")]) == 1
    assert main(["gen", "--seed", "-1", "--out", str(tmp_path / "d.sigd")]) == 1
    capsys.readouterr()


def test_cli_gradcheck_and_bounds(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path / "g.json")]) == 0
    assert all(r["max_rel_err"] <= r["tol"] for r in json.loads((tmp_path / "g.json").read_text()))
    conf = _write(tmp_path / "b.json", {"trials": 5, "cases": 50})
    assert main(["bound-check", "--config", conf, "--out", str(tmp_path / "b_out.json")]) == 0
    result = json.loads((tmp_path / "b_out.json").read_text())
    assert result["bound"]["violations"] == 0
    capsys.readouterr()
