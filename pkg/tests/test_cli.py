import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from hiertsp import data, oracle, training
from hiertsp.cli import main, paired_bootstrap

TINY = {"model": {"d": 8, "n_heads": 2, "enc_layers": 1, "n_clusters": 3, "cluster_iters": 2},
        "n": 6, "epochs": 1, "episodes_per_epoch": 8, "batch_size": 4, "eval_size": 4}


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    for variant in ("full", "pomo_only"):
        assert main(["train", "--config", str(cfg), "--ablation", variant,
                     "--run-dir", str(root / variant), "--seed", "5"]) == 0
    assert main(["make-testset", "--source", "uniform", "--n", "6", "--count", "5", "--seed", "1",
                 "--exact-refs", "true", "--out", str(root / "ts.jsonl")]) == 0
    return root


def ckpt(root, variant="full"):
    return str(root / variant / "checkpoints" / "epoch_0001.ckpt")


def test_make_testset_exact_and_deterministic(tmp_path, capsys):
    args = ["make-testset", "--source", "uniform", "--n", "10", "--count", "100", "--seed", "3",
            "--exact-refs", "true"]
    assert main(args + ["--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.jsonl")]) == 0
    ts = data.load_testset(tmp_path / "a.jsonl")
    assert len(ts) == 100 and all(ts.ref_exact) and ts.has_refs
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_make_testset_blobs(tmp_path):
    out = tmp_path / "blobs.jsonl"
    assert main(["make-testset", "--source", "blobs:k=5,sigma=0.03", "--n", "20", "--count", "3",
                 "--out", str(out)]) == 0
    ts = data.load_testset(out)
    grid = data.blobs_map(5, 0.03).coords
    for c in ts.instances:
        # every city is a point of the fixed map
        assert all((np.abs(grid - p).sum(1) == 0).any() for p in c)


def test_make_testset_bounds_checked_before_writing(tmp_path, capsys):
    out = tmp_path / "never.jsonl"
    assert main(["make-testset", "--n", "21", "--count", "2", "--exact-refs", "true", "--out", str(out)]) == 1
    assert "n <= 20" in capsys.readouterr().err
    assert not out.exists()


def test_train_writes_run_dir(workdir):
    run = workdir / "full"
    assert (run / "config.json").exists()
    rows = read_csv(run / "metrics.csv")
    assert list(rows[0]) == training.METRICS_HEADER and len(rows) == 1
    assert training.load_checkpoint(ckpt(workdir)).config.model.variant == "full"


def test_train_same_seed_same_checkpoint(workdir, tmp_path):
    assert main(["train", "--config", str(workdir / "tiny.json"), "--run-dir", str(tmp_path / "again"),
                 "--seed", "5"]) == 0
    a = training.load_checkpoint(ckpt(workdir)).params
    b = training.load_checkpoint(tmp_path / "again" / "checkpoints" / "epoch_0001.ckpt").params
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_train_resume_rejects_changed_config(workdir, tmp_path, capsys):
    run = tmp_path / "r"
    assert main(["train", "--config", str(workdir / "tiny.json"), "--run-dir", str(run)]) == 0
    assert main(["train", "--config", str(workdir / "tiny.json"), "--run-dir", str(run),
                 "--resume", "--epochs", "4"]) == 1
    assert "refusing to resume" in capsys.readouterr().err


def test_eval_report_and_csv(workdir, capsys):
    out = workdir / "eval.csv"
    assert main(["eval", "--checkpoint", ckpt(workdir), "--testset", str(workdir / "ts.jsonl"),
                 "--augment", "true", "--out-csv", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["augmented"] and report["n_instances"] == 5
    assert report["mean_aug_len"] <= report["mean_model_len"]
    rows = read_csv(out)
    assert list(rows[0]) == ["idx", "n", "model_len", "aug_len", "ref_len", "gap_pct"]
    for r in rows:
        assert float(r["aug_len"]) <= float(r["model_len"])
        assert float(r["gap_pct"]) >= -1e-9


def test_eval_without_refs_leaves_gap_empty(workdir, tmp_path, capsys):
    ts = tmp_path / "norefs.jsonl"
    main(["make-testset", "--n", "6", "--count", "3", "--out", str(ts)])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ckpt(workdir), "--testset", str(ts),
                 "--out-csv", str(tmp_path / "e.csv")]) == 0
    assert json.loads(capsys.readouterr().out)["gap_pct"] is None
    assert all(r["gap_pct"] == "" for r in read_csv(tmp_path / "e.csv"))


def test_compare_writes_paired_diffs(workdir, capsys):
    out = workdir / "cmp.csv"
    assert main(["compare", "--checkpoint-a", ckpt(workdir), "--checkpoint-b", ckpt(workdir, "pomo_only"),
                 "--testset", str(workdir / "ts.jsonl"), "--out-csv", str(out)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["variant_a"] == "full" and rep["variant_b"] == "pomo_only"
    lo, hi = rep["ci95"]
    assert lo <= rep["mean_diff_b_minus_a"] <= hi
    assert len(read_csv(out)) == 5


def test_paired_bootstrap_interval():
    diff = np.random.default_rng(0).normal(1.0, 0.5, size=2000)
    mean, lo, hi = paired_bootstrap(diff, seed=1)
    assert lo < mean < hi and lo > 0.9 and hi < 1.1


def test_solve_square_and_trace(workdir, tmp_path, capsys):
    sq = tmp_path / "sq.csv"
    sq.write_text("x,y\n0,0\n1,0\n1,1\n0,1\n")
    assert main(["solve", "--checkpoint", ckpt(workdir), "--coords-file", str(sq), "--trace"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert sorted(out["order"]) == [0, 1, 2, 3]
    assert len(out["trace"]) == 3
    for row in out["trace"]:
        assert math.isclose(sum(row), 1.0, abs_tol=1e-6)


def test_solve_sampling_and_two_cities(workdir, tmp_path, capsys):
    c = tmp_path / "c.csv"
    c.write_text("\n".join(f"{x},{y}" for x, y in np.random.default_rng(2).random((7, 2))) + "\n")
    args = ["solve", "--checkpoint", ckpt(workdir), "--coords-file", str(c), "--mode", "sample",
            "--samples", "16", "--seed", "4"]
    assert main(args) == 0 and main(args) == 0
    a, b = capsys.readouterr().out.splitlines()
    assert a == b
    two = tmp_path / "two.csv"
    two.write_text("0,0\n0.3,0.4\n")
    assert main(["solve", "--checkpoint", "unused", "--coords-file", str(two)]) == 0
    assert json.loads(capsys.readouterr().out) == {"order": [0, 1], "length": pytest.approx(1.0)}


def test_dump_clusters_shapes_and_untrained_entropy(workdir, tmp_path):
    out = tmp_path / "cl.csv"
    assert main(["dump-clusters", "--checkpoint", ckpt(workdir), "--coords-file",
                 str(workdir / "ts.jsonl"), "--out-csv", str(out)]) == 0
    nodes = read_csv(out)
    centers = read_csv(tmp_path / "cl.centers.csv")
    assert len(nodes) == 5 * 6 and len(centers) == 5 * 3
    assert list(nodes[0])[:5] == ["instance_id", "node_id", "x", "y", "argmax_cluster"]
    pi = np.array([[float(r[f"pi_{j}"]) for j in range(3)] for r in nodes])
    np.testing.assert_allclose(pi.sum(1), 1.0, atol=1e-6)
    entropy = -(pi * np.log(pi)).sum(1).mean()
    assert entropy > 0.8 * math.log(3)


def test_dump_clusters_rejects_variant_without_clusters(workdir, tmp_path, capsys):
    assert main(["dump-clusters", "--checkpoint", ckpt(workdir, "pomo_only"), "--coords-file",
                 str(workdir / "ts.jsonl"), "--out-csv", str(tmp_path / "x.csv")]) == 1
    assert "no clustering" in capsys.readouterr().err


def test_oracle_csv(workdir, tmp_path):
    out = tmp_path / "o.csv"
    assert main(["oracle", "--testset", str(workdir / "ts.jsonl"), "--out-csv", str(out)]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["idx", "n", "hk_len", "nn_len", "nn2opt_len"]
    ts = data.load_testset(workdir / "ts.jsonl")
    for r, ref in zip(rows, ts.ref_lens):
        assert float(r["hk_len"]) == pytest.approx(ref, abs=1e-12)
        assert float(r["hk_len"]) <= float(r["nn2opt_len"]) + 1e-12 <= float(r["nn_len"]) + 2e-12


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--testset", "x.jsonl"]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "hiertsp.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "make-testset" in proc.stdout
