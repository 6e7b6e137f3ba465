import csv
import hashlib
import json

import numpy as np
import pytest

from sten.cli import main

SMALL_CONFIG = """
# small end-to-end settings
n_train = 400
n_test = 200
dims = 2
anomaly_rate = 0.05
seg_len_min = 5
seg_len_max = 15
l = 3
m = 4
R_train = 3
R_test = 6
d_model = 8
epochs = 2
batch_size = 32
lr = 0.001
seed = 7
"""


@pytest.fixture
def workspace(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL_CONFIG)
    return tmp_path, cfg


def run(argv):
    return main([str(a) for a in argv])


def file_hash(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSynth:
    def test_deterministic_files(self, workspace):
        tmp, cfg = workspace
        assert run(["synth", "--config", cfg, "--out-dir", tmp / "d1"]) == 0
        assert run(["synth", "--config", cfg, "--out-dir", tmp / "d2"]) == 0
        assert (tmp / "d1/train.csv").read_bytes() == (tmp / "d2/train.csv").read_bytes()
        assert (tmp / "d1/test.csv").read_bytes() == (tmp / "d2/test.csv").read_bytes()

    def test_row_counts(self, workspace):
        tmp, cfg = workspace
        run(["synth", "--config", cfg, "--out-dir", tmp / "d"])
        assert len((tmp / "d/train.csv").read_text().splitlines()) == 401
        assert len((tmp / "d/test.csv").read_text().splitlines()) == 201

    def test_zero_rate_labels(self, workspace):
        tmp, cfg = workspace
        run(["synth", "--config", cfg, "--out-dir", tmp / "d",
             "--set", "anomaly_rate=0"])
        rows = list(csv.DictReader(open(tmp / "d/test.csv")))
        assert all(r["label"] == "0" for r in rows)


def prepared_data(tmp, cfg):
    run(["synth", "--config", cfg, "--out-dir", tmp / "data"])
    return tmp / "data/train.csv", tmp / "data/test.csv"


class TestTrain:
    def test_checkpoint_reproducible(self, workspace):
        tmp, cfg = workspace
        train_csv, _ = prepared_data(tmp, cfg)
        assert run(["train", "--train", train_csv, "--config", cfg,
                    "--out", tmp / "a.ckpt"]) == 0
        assert run(["train", "--train", train_csv, "--config", cfg,
                    "--out", tmp / "b.ckpt"]) == 0
        assert (tmp / "a.ckpt").read_bytes() == (tmp / "b.ckpt").read_bytes()

    def test_otn_only_log_dsn_zero(self, workspace):
        tmp, cfg = workspace
        train_csv, _ = prepared_data(tmp, cfg)
        run(["train", "--train", train_csv, "--config", cfg,
             "--mode", "otn_only", "--out", tmp / "m.ckpt"])
        log = (tmp / "m.ckpt.log").read_text().splitlines()
        assert log[0] == "epoch,otn,dsn,total"
        assert all(line.split(",")[2] == "0.0" for line in log[1:])

    def test_bad_layout_usage_error(self, workspace):
        tmp, cfg = workspace
        train_csv, _ = prepared_data(tmp, cfg)
        code = run(["train", "--train", train_csv, "--config", cfg,
                    "--set", "L=11", "--out", tmp / "m.ckpt"])
        assert code == 1


class TestScore:
    def setup_model(self, tmp, cfg):
        train_csv, test_csv = prepared_data(tmp, cfg)
        run(["train", "--train", train_csv, "--config", cfg, "--out", tmp / "m.ckpt"])
        return test_csv

    def test_every_timestamp_once(self, workspace):
        tmp, cfg = workspace
        test_csv = self.setup_model(tmp, cfg)
        assert run(["score", "--model", tmp / "m.ckpt", "--test", test_csv,
                    "--config", cfg, "--out", tmp / "s.csv"]) == 0
        rows = list(csv.DictReader(open(tmp / "s.csv")))
        assert [int(r["timestamp"]) for r in rows] == list(range(1, 201))

    def test_beta_zero_matches_otn_column(self, workspace):
        tmp, cfg = workspace
        test_csv = self.setup_model(tmp, cfg)
        run(["score", "--model", tmp / "m.ckpt", "--test", test_csv,
             "--config", cfg, "--beta", "0", "--out", tmp / "s.csv"])
        rows = list(csv.DictReader(open(tmp / "s.csv")))
        assert all(r["score"] == r["score_otn"] for r in rows)

    def test_rerun_identical(self, workspace):
        tmp, cfg = workspace
        test_csv = self.setup_model(tmp, cfg)
        run(["score", "--model", tmp / "m.ckpt", "--test", test_csv,
             "--config", cfg, "--out", tmp / "s1.csv"])
        run(["score", "--model", tmp / "m.ckpt", "--test", test_csv,
             "--config", cfg, "--out", tmp / "s2.csv"])
        assert (tmp / "s1.csv").read_bytes() == (tmp / "s2.csv").read_bytes()

    def test_dimension_mismatch_exit_code(self, workspace, capsys):
        tmp, cfg = workspace
        self.setup_model(tmp, cfg)
        bad = tmp / "bad.csv"
        bad.write_text("a,b,c\n" + "\n".join("1,2,3" for _ in range(120)) + "\n")
        code = run(["score", "--model", tmp / "m.ckpt", "--test", bad,
                    "--config", cfg, "--out", tmp / "s.csv"])
        assert code == 2
        err = capsys.readouterr().err
        assert "3" in err and "2" in err


class TestEval:
    def write_scores(self, tmp, labels, scores):
        path = tmp / "scores.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "score", "score_otn", "score_dsn", "label"])
            for i, (s, y) in enumerate(zip(scores, labels), 1):
                w.writerow([i, repr(float(s)), repr(float(s)), "0.0", int(y)])
        return path

    def test_perfect_detector(self, workspace, capsys):
        tmp, _ = workspace
        rng = np.random.default_rng(0)
        labels = np.zeros(60, dtype=int)
        labels[20:25] = 1
        scores = labels * 10.0 + rng.random(60)
        path = self.write_scores(tmp, labels, scores)
        assert run(["eval", "--scores", path, "--out", tmp / "rep.json"]) == 0
        doc = json.loads((tmp / "rep.json").read_text())
        assert doc["auc_roc"] == 1.0
        assert doc["auc_pr"] == 1.0

    def test_both_point_adjust_modes_emitted(self, workspace):
        tmp, _ = workspace
        rng = np.random.default_rng(1)
        labels = np.zeros(80, dtype=int)
        labels[30:40] = 1
        scores = rng.random(80) + labels * 0.4
        path = self.write_scores(tmp, labels, scores)
        run(["eval", "--scores", path, "--point-adjust", "both",
             "--out", tmp / "rep.json"])
        doc = json.loads((tmp / "rep.json").read_text())
        assert "auc_roc" in doc and "raw_auc_roc" in doc
        assert doc["auc_roc"] >= doc["raw_auc_roc"]

    def test_report_echoes_config(self, workspace):
        tmp, _ = workspace
        labels = np.zeros(50, dtype=int)
        labels[10:14] = 1
        path = self.write_scores(tmp, labels, np.random.default_rng(2).random(50))
        run(["eval", "--scores", path, "--delta", "1.5",
             "--set", "vus_wmax=4", "--out", tmp / "rep.json"])
        doc = json.loads((tmp / "rep.json").read_text())
        assert doc["delta"] == 1.5
        assert doc["vus_wmax"] == 4.0
        assert doc["point_adjust"] == "on"

    def test_metric_subset(self, workspace):
        tmp, _ = workspace
        labels = np.zeros(50, dtype=int)
        labels[10:14] = 1
        path = self.write_scores(tmp, labels, np.random.default_rng(3).random(50))
        run(["eval", "--scores", path, "--metrics", "roc,pr",
             "--out", tmp / "rep.json"])
        doc = json.loads((tmp / "rep.json").read_text())
        assert "auc_roc" in doc and "best_f1" not in doc

    def test_length_mismatch_exit_code(self, workspace):
        tmp, _ = workspace
        labels = np.zeros(50, dtype=int)
        labels[5:8] = 1
        path = self.write_scores(tmp, labels, np.random.default_rng(4).random(50))
        other = tmp / "labels.csv"
        other.write_text("x,label\n" + "\n".join("0.0,0" for _ in range(30)) + "\n")
        assert run(["eval", "--scores", path, "--labels-from", other]) == 2


class TestSweep:
    def test_beta_sweep_trains_once(self, workspace):
        tmp, cfg = workspace
        train_csv, test_csv = prepared_data(tmp, cfg)
        work = tmp / "work"
        assert run(["sweep", "--param", "beta", "--values", "0.5,1,2",
                    "--train", train_csv, "--test", test_csv, "--config", cfg,
                    "--out", tmp / "sweep.csv", "--work-dir", work]) == 0
        ckpts = sorted(work.glob("*.ckpt"))
        assert len(ckpts) == 1
        rows = list(csv.DictReader(open(tmp / "sweep.csv")))
        assert [r["value"] for r in rows] == ["0.5", "1.0", "2.0"]
        assert all(r["param"] == "beta" for r in rows)
        assert all(r["auc_pr"] for r in rows)

    def test_delta_sweep_single_checkpoint(self, workspace):
        tmp, cfg = workspace
        train_csv, test_csv = prepared_data(tmp, cfg)
        work = tmp / "work"
        run(["sweep", "--param", "delta", "--values", "0.5,1",
             "--train", train_csv, "--test", test_csv, "--config", cfg,
             "--out", tmp / "sweep.csv", "--work-dir", work])
        assert len(sorted(work.glob("*.ckpt"))) == 1

    def test_alpha_sweep_trains_per_value(self, workspace):
        tmp, cfg = workspace
        train_csv, test_csv = prepared_data(tmp, cfg)
        work = tmp / "work"
        run(["sweep", "--param", "alpha", "--values", "0.5,2",
             "--train", train_csv, "--test", test_csv, "--config", cfg,
             "--out", tmp / "sweep.csv", "--work-dir", work])
        assert len(sorted(work.glob("*.ckpt"))) == 2

    def test_l_sweep_adjusts_layout(self, workspace):
        tmp, cfg = workspace
        train_csv, test_csv = prepared_data(tmp, cfg)
        work = tmp / "work"
        assert run(["sweep", "--param", "l", "--values", "2,4",
                    "--train", train_csv, "--test", test_csv, "--config", cfg,
                    "--out", tmp / "sweep.csv", "--work-dir", work]) == 0
        rows = list(csv.DictReader(open(tmp / "sweep.csv")))
        assert len(rows) == 2


class TestConfigHandling:
    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus_key = 3\n")
        assert run(["synth", "--config", cfg, "--out-dir", tmp_path / "d"]) == 1

    def test_flag_overrides_config(self, workspace, capsys):
        tmp, cfg = workspace
        run(["synth", "--config", cfg, "--out-dir", tmp / "d1", "--seed", "7"])
        run(["synth", "--config", cfg, "--out-dir", tmp / "d2", "--seed", "8"])
        assert (tmp / "d1/test.csv").read_bytes() != (tmp / "d2/test.csv").read_bytes()

    def test_missing_required_flag_usage_error(self):
        assert run(["train", "--out", "x.ckpt"]) == 1

    def test_bad_value_type(self, workspace):
        tmp, cfg = workspace
        assert run(["synth", "--config", cfg, "--out-dir", tmp / "d",
                    "--set", "dims=three"]) == 1
