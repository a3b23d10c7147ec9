import csv
import hashlib
import json

import numpy as np
import pytest

from conftest import TINY
from evisurv import cli, dataio

TINY_FLAGS = ["--d-model", "8", "--heads", "2", "--attn-hidden", "8", "--ffn-dim", "16", "--gene-hidden", "8"]
SYNTH_FLAGS = ["--patients", "20", "--d-h", "6", "--n-genes", "12", "--mean-bag-size", "4", "--seed", "5"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "data"), *SYNTH_FLAGS]) == 0
    assert cli.main(["train", "--data", str(root / "data" / "manifest.json"), "--out", str(root / "run"),
                     "--folds", "5", "--fold", "4", "--epochs", "3", "--learning-rate", "2e-3", *TINY_FLAGS]) == 0
    assert cli.main(["eval", "--checkpoint", str(root / "run" / "fold4.ckpt"),
                     "--data", str(root / "data" / "manifest.json"), "--out", str(root / "eval")]) == 0
    return root


class TestSynth:
    def test_round_trip(self, workspace):
        ds = dataio.load_dataset(workspace / "data" / "manifest.json")
        ref, _ = dataio.synth_cohort(dataio.SynthConfig(patients=20, d_h=6, n_genes=12, mean_bag_size=4, seed=5))
        assert [r.id for r in ds.records] == [r.id for r in ref.records]
        for a, b in zip(ds.records, ref.records):
            np.testing.assert_array_equal(a.wsi_bag, b.wsi_bag)
            assert a.survival_months == b.survival_months and a.status == b.status

    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert cli.main(["synth", "--out", str(tmp_path / name), *SYNTH_FLAGS]) == 0
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_censor_rate(self, tmp_path, capsys):
        assert cli.main(["synth", "--out", str(tmp_path / "d"), "--patients", "400", "--d-h", "4",
                         "--n-genes", "12", "--mean-bag-size", "2", "--censor-rate", "0.3"]) == 0
        ds = dataio.load_dataset(tmp_path / "d" / "manifest.json")
        rate = np.mean([r.status for r in ds.records])
        assert abs(rate - 0.3) <= 0.02
        json.loads(capsys.readouterr().out)


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace / "run"
        assert (run / "fold4.ckpt").is_file() and (run / "fold4_history.csv").is_file()
        assert not (run / "fold0.ckpt").exists()
        hist = read_csv(run / "fold4_history.csv")
        assert [int(r["epoch"]) for r in hist] == [1, 2, 3]
        cfg = json.loads((run / "config.json").read_text())
        assert cfg["d_model"] == 8 and cfg["epochs"] == 3

    def test_validation_fold_disjoint(self, workspace):
        from evisurv import trainer
        ckpt = trainer.load_checkpoint(workspace / "run" / "fold4.ckpt")
        ds = dataio.load_dataset(workspace / "data" / "manifest.json")
        train_idx, val_idx = dataio.kfold_split(len(ds), 5, 0)[4]
        assert ckpt.meta["val_ids"] == [ds[i].id for i in val_idx]
        assert not set(ckpt.meta["val_ids"]) & {ds[i].id for i in train_idx}

    def test_config_file_and_override(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({**TINY, "epochs": 5}))
        assert cli.main(["train", "--data", str(workspace / "data" / "manifest.json"), "--out", str(tmp_path / "r"),
                         "--config", str(cfg), "--epochs", "1", "--fold", "0"]) == 0
        assert len(read_csv(tmp_path / "r" / "fold0_history.csv")) == 1

    def test_unknown_config_key(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"d_model": 8, "learning_rat": 1e-3}))
        code = cli.main(["train", "--data", str(workspace / "data" / "manifest.json"), "--out", str(tmp_path / "r"),
                         "--config", str(cfg)])
        assert code == 1 and "learning_rat" in capsys.readouterr().err

    def test_fold_out_of_range(self, workspace, tmp_path):
        assert cli.main(["train", "--data", str(workspace / "data" / "manifest.json"), "--out", str(tmp_path / "r"),
                         "--folds", "3", "--fold", "3", *TINY_FLAGS]) == 1

    def test_missing_manifest(self, tmp_path, capsys):
        assert cli.main(["train", "--data", str(tmp_path / "nope.json"), "--out", str(tmp_path / "r")]) == 1
        assert "manifest" in capsys.readouterr().err


class TestEval:
    def test_matches_history(self, workspace):
        metrics = json.loads((workspace / "eval" / "metrics.json").read_text())
        last = read_csv(workspace / "run" / "fold4_history.csv")[-1]
        assert repr(float(metrics["c_index"])) == last["val_cindex"]
        assert 0.0 <= metrics["c_index"] <= 1.0
        assert metrics["n_patients"] == 4

    def test_risks_csv(self, workspace):
        rows = read_csv(workspace / "eval" / "risks.csv")
        assert len(rows) == 4
        for r in rows:
            assert float(r["u_fused"]) <= min(float(r["u_h"]), float(r["u_g"])) + 1e-12
            hz = [float(r[f"o_risk_{k}"]) for k in range(4)]
            assert all(0 < h < 1 for h in hz)

    def test_subset_all(self, workspace, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(workspace / "run" / "fold4.ckpt"), "--subset", "all",
                         "--data", str(workspace / "data" / "manifest.json"), "--out", str(tmp_path)]) == 0
        assert len(read_csv(tmp_path / "risks.csv")) == 20


class TestKM:
    def test_from_risks(self, workspace, tmp_path):
        # full cohort so both groups have events
        ckpt, data = workspace / "run" / "fold4.ckpt", workspace / "data" / "manifest.json"
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--subset", "all",
                         "--out", str(tmp_path / "e")]) == 0
        assert cli.main(["km", "--risks", str(tmp_path / "e" / "risks.csv"), "--out", str(tmp_path / "k")]) == 0
        rows = read_csv(tmp_path / "k" / "km.csv")
        for group in ("low", "high"):
            s = [float(r["survival"]) for r in rows if r["group"] == group]
            assert all(b <= a for a, b in zip(s, s[1:]))
        report = json.loads((tmp_path / "k" / "logrank.json").read_text())
        assert report["chi2"] >= 0 and 0 <= report["p"] <= 1
        assert cli.main(["km", "--checkpoint", str(ckpt), "--data", str(data), "--subset", "all",
                         "--out", str(tmp_path / "k2")]) == 0
        assert json.loads((tmp_path / "k2" / "logrank.json").read_text()) == report

    def test_degenerate_split(self, tmp_path, capsys):
        p = tmp_path / "risks.csv"
        p.write_text("patient_id,time,event,scalar_risk\na,1.0,1,-2.0\nb,2.0,1,-2.0\nc,3.0,0,-2.0\n")
        assert cli.main(["km", "--risks", str(p), "--out", str(tmp_path / "k")]) == 1
        assert "one group" in capsys.readouterr().err

    def test_needs_source(self, tmp_path):
        assert cli.main(["km", "--out", str(tmp_path)]) == 1


class TestAttend:
    def test_exports(self, workspace, tmp_path):
        ds = dataio.load_dataset(workspace / "data" / "manifest.json")
        rec = ds[3]
        assert cli.main(["attend", "--checkpoint", str(workspace / "run" / "fold4.ckpt"), "--top", "2",
                         "--data", str(workspace / "data" / "manifest.json"), "--patient", rec.id,
                         "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / f"{rec.id}_coattention.csv")
        assert [r["category"] for r in rows] == list(ds.gene_sets.names)
        M = rec.wsi_bag.shape[0]
        A = np.array([[float(r[f"patch_{m}"]) for m in range(M)] for r in rows])
        assert len(rows[0]) == M + 1
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-9)
        top = read_csv(tmp_path / f"{rec.id}_top.csv")
        first = {r["category"]: int(r["patch_index"]) for r in top if r["rank"] == "1"}
        for name, row in zip(ds.gene_sets.names, A):
            assert row[first[name]] == row.max()
        assert len(top) == 6 * min(2, M)

    def test_unknown_patient(self, workspace, tmp_path, capsys):
        code = cli.main(["attend", "--checkpoint", str(workspace / "run" / "fold4.ckpt"),
                         "--data", str(workspace / "data" / "manifest.json"), "--patient", "ghost",
                         "--out", str(tmp_path)])
        assert code == 1 and "ghost" in capsys.readouterr().err


def test_top_patches_ties():
    A = np.array([[0.25, 0.25, 0.5], [0.1, 0.6, 0.3]])
    np.testing.assert_array_equal(cli.top_patches(A, 2), [[2, 0], [1, 2]])
    assert cli.top_patches(A, 10).shape == (2, 3)
