import csv
import json
import math

import pytest

from refixmatch import data as D
from refixmatch import metrics as X
from refixmatch.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--classes", "4", "--n", "160", "--n-test", "40", "--size", "8",
                 "--out", str(root / "data"), "--name", "toy"]) == 0
    assert main(["split", "--manifest", str(root / "data" / "toy.manifest"), "--per-class", "3",
                 "--out", str(root / "split")]) == 0
    cfg = root / "run.cfg"
    cfg.write_text("\n".join([
        f"labeled={root / 'split' / 'labeled.manifest'}",
        f"unlabeled={root / 'split' / 'unlabeled.manifest'}",
        f"eval={root / 'data' / 'toy-test.manifest'}",
        "arch=mlp", "widths=16", "iterations=24", "batch_size=4", "mu=2",
        "eval_interval=8", "log_interval=4",
    ]) + "\n")
    return root, cfg


def read_log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_gen_data_echo_and_determinism(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-data", "-K", "10", "-N", "300", "--size", "16", "--out", str(tmp_path / d)]) == 0
    m = D.read_manifest(tmp_path / "a" / "dataset.manifest")
    assert m["K"] == "10" and m["N"] == "300" and "images" in m and "labels" in m
    for name in ("dataset.manifest", "dataset.images.rfxt", "dataset.labels.rfxt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_data_invalid_kind(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--kind", "cifar", "--out", str(tmp_path)])
    assert e.value.code != 0
    assert main(["gen-data", "-K", "40", "--out", str(tmp_path)]) != 0


def test_split_reports(tmp_path):
    main(["gen-data", "-K", "10", "-N", "600", "--size", "8", "--out", str(tmp_path / "d")])
    assert main(["split", "--manifest", str(tmp_path / "d" / "dataset.manifest"), "--per-class", "4",
                 "--out", str(tmp_path / "s")]) == 0
    rep = D.read_manifest(tmp_path / "s" / "split.report")
    assert rep["labeled"] == "40"
    assert int(rep["labeled"]) + int(rep["unlabeled"]) == 600


def test_long_tailed_split_report(tmp_path):
    main(["gen-data", "-K", "10", "-N", "12000", "--size", "8", "--out", str(tmp_path / "d")])
    assert main(["split", "--manifest", str(tmp_path / "d" / "dataset.manifest"), "--n1", "1000",
                 "--ratio", "100", "--beta", "0.2", "--out", str(tmp_path / "s")]) == 0
    rep = D.read_manifest(tmp_path / "s" / "split.report")
    assert rep["labeled.class9"] == "2" and rep["labeled.class0"] == "200"
    assert int(rep["labeled.class9"]) + int(rep["unlabeled.class9"]) == 10


def test_split_underflow_is_data_error(tmp_path, capsys):
    main(["gen-data", "-K", "4", "-N", "20", "--size", "8", "--out", str(tmp_path / "d")])
    assert main(["split", "--manifest", str(tmp_path / "d" / "dataset.manifest"), "--per-class", "9",
                 "--out", str(tmp_path / "s")]) == 3


def test_train_outputs_and_replay(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    a = tmp_path / "a"
    for name in ("config.resolved", "log.csv", "summary.json", "checkpoint/checkpoint.manifest"):
        assert (a / name).exists()
    rows = read_log(a / "log.csv")
    assert list(rows[0]) == ["iteration", "lr", "loss_total", "loss_sup", "loss_unsup_ce", "loss_kl",
                             "mask_ratio", "utilization", "pseudo_acc", "eval_top1", "eval_top5", "eval_ece"]
    assert [r["iteration"] for r in rows] == [str(i) for i in range(4, 25, 4)]
    assert rows[0]["eval_top1"] == "" and rows[1]["eval_top1"] != ""
    assert all(float(r["utilization"]) == 1.0 for r in rows)
    summary = json.loads((a / "summary.json").read_text())
    assert summary["status"] == "completed"
    assert summary["best_top1_error"] <= summary["final_top1_error"]
    assert {"median_last20_top1_error", "final_ece"} <= summary.keys()
    # replay from the resolved config alone
    assert main(["train", "--config", str(a / "config.resolved"), "--out", str(tmp_path / "b")]) == 0
    assert (a / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()


def test_eval_reproduces_final_logged_error(workspace, tmp_path):
    root, cfg = workspace
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")])
    out = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint"),
                 "--data", str(root / "data" / "toy-test.manifest"), "--out", str(out)]) == 0
    final = read_log(tmp_path / "r" / "log.csv")[-1]
    got = json.loads(out.read_text())
    assert repr(got["top1_error"]) == final["eval_top1"]
    assert repr(got["ece"]) == final["eval_ece"]


def test_calibrate_outputs(workspace, tmp_path):
    root, cfg = workspace
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")])
    assert main(["calibrate", "--checkpoint", str(tmp_path / "r" / "checkpoint"), "--bins", "12",
                 "--data", str(root / "data" / "toy-test.manifest"), "--out", str(tmp_path / "cal")]) == 0
    text = (tmp_path / "cal" / "reliability.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    assert len(rows) == 12
    assert abs(math.fsum(float(r["weight"]) for r in rows) - 1) <= 1e-9
    metrics = json.loads((tmp_path / "cal" / "metrics.json").read_text())
    by_hand = 100 * sum(float(r["weight"]) * abs(float(r["accuracy"]) - float(r["mean_confidence"]))
                        for r in rows if int(r["count"]) > 0)
    assert abs(by_hand - metrics["ece"]) <= 1e-9
    assert abs(X.CalibrationBins.from_csv(text).ece() - metrics["ece"]) <= 1e-9
    hist = list(csv.DictReader((tmp_path / "cal" / "histogram.csv").read_text().splitlines()))
    assert [r["count"] for r in hist] == [r["count"] for r in rows]


def test_hard_only_mode_log(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--set", "ablation=hard_only", "--out", str(tmp_path / "h")]) == 0
    rows = read_log(tmp_path / "h" / "log.csv")
    assert all(float(r["loss_kl"]) == 0.0 for r in rows)
    assert all(float(r["utilization"]) == 1 - float(r["mask_ratio"]) for r in rows)


def test_seed_env_override(workspace, tmp_path, monkeypatch):
    root, cfg = workspace
    monkeypatch.setenv("RFX_SEED", "5")
    assert main(["train", "--config", str(cfg), "--set", "iterations=4", "--out", str(tmp_path / "e")]) == 0
    assert "seed=5\n" in (tmp_path / "e" / "config.resolved").read_text()


def test_exit_codes(workspace, tmp_path, capsys):
    root, cfg = workspace
    missing = tmp_path / "nowhere.manifest"
    assert main(["train", "--config", str(cfg), "--set", f"labeled={missing}", "--out", str(tmp_path / "x")]) == 3
    assert str(missing) in capsys.readouterr().err
    assert main(["train", "--config", str(cfg), "--set", "colour=red"]) == 2
    assert main(["train", "--config", str(tmp_path / "none.cfg")]) == 2
    assert main(["train", "--config", str(cfg), "--set", "lr=1e38", "--set", "log_interval=1",
                 "--out", str(tmp_path / "n")]) == 4
    summary = json.loads((tmp_path / "n" / "summary.json").read_text())
    assert summary["status"] == "aborted" and summary["iteration"] == summary["last_good_iteration"] + 1
    assert "last good iteration" in capsys.readouterr().err


def test_eval_shape_mismatch(workspace, tmp_path):
    root, cfg = workspace
    main(["train", "--config", str(cfg), "--set", "iterations=2", "--out", str(tmp_path / "r")])
    main(["gen-data", "-K", "4", "-N", "20", "--size", "10", "--out", str(tmp_path / "big")])
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint"),
                 "--data", str(tmp_path / "big" / "dataset.manifest")]) == 3


def test_augment_preview(workspace, tmp_path):
    root, _ = workspace
    assert main(["augment-preview", "--data", str(root / "data" / "toy.manifest"), "--n", "5",
                 "--out", str(tmp_path / "p")]) == 0
    pgm = (tmp_path / "p" / "preview.pgm").read_bytes()
    assert pgm.startswith(b"P5 40 24 255\n") and len(pgm) == len(b"P5 40 24 255\n") + 40 * 24
    strong = D.read_tensor_file(tmp_path / "p" / "strong.rfxt")
    assert strong.shape == (5, 1, 8, 8) and strong.min() >= 0 and strong.max() <= 1
    ops = list(csv.reader((tmp_path / "p" / "ops.csv").read_text().splitlines()))
    assert ops[0] == ["index", "op0", "op1"] and len(ops) == 6


def test_defaults_command(capsys):
    assert main(["defaults"]) == 0
    out = capsys.readouterr().out
    assert "threshold=0.95" in out and "mu=7" in out
