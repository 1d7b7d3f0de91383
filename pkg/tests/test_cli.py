import json

import numpy as np
import pytest

from lsvt import svt_init
from lsvt.blobio import read_manifest
from lsvt.cli import main, version_string
from lsvt.datagen import load_dataset, generate_dataset, save_dataset
from lsvt.training import load_checkpoint, save_checkpoint


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "data"
    rc = main(
        [
            "gen-data", "--d", "5", "--r", "1", "--m", "12",
            "--sizes", "200,60,40", "--seed", "9", "--out", str(path),
        ]
    )
    assert rc == 0
    return path


def test_gen_data_resolves_oversampling(tmp_path):
    out = tmp_path / "ds"
    rc = main(
        [
            "gen-data", "--d", "10", "--r", "1", "--oversample", "3",
            "--sizes", "5,2,2", "--out", str(out),
        ]
    )
    assert rc == 0
    manifest = read_manifest(out)
    assert manifest["m"] == 57
    assert manifest["sizes"] == [5, 2, 2]
    assert manifest["master_seed"] == 0
    assert manifest["vec_convention"] == "row-major"


def test_gen_data_missing_rank_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["gen-data", "--d", "4", "--m", "8", "--out", str(tmp_path / "x")])
    assert err.value.code == 2


def test_gen_data_needs_exactly_one_of_m_and_oversample(tmp_path):
    args = ["gen-data", "--d", "4", "--r", "1", "--sizes", "4,2,2", "--out", str(tmp_path / "x")]
    assert main(args) == 2
    assert main(args + ["--m", "8", "--oversample", "3"]) == 2


def test_gen_data_refuses_existing_output(tmp_path):
    out = tmp_path / "ds"
    args = [
        "gen-data", "--d", "4", "--r", "1", "--m", "8",
        "--sizes", "4,2,2", "--out", str(out),
    ]
    assert main(args) == 0
    assert main(args) == 2
    assert main(args + ["--force"]) == 0


def test_gen_data_sizes_conflicts_with_paper_scale(tmp_path):
    rc = main(
        [
            "gen-data", "--d", "4", "--r", "1", "--m", "8", "--sizes", "4,2,2",
            "--paper-scale", "--out", str(tmp_path / "x"),
        ]
    )
    assert rc == 2


def test_train_records_hidden_layer_count(data_dir, tmp_path):
    ckpt = tmp_path / "ckpt"
    rc = main(
        [
            "train", "--data", str(data_dir), "--T", "4", "--lr", "1e-3",
            "--minibatch", "100", "--max-epochs", "2", "--out", str(ckpt),
        ]
    )
    assert rc == 0
    _, manifest = load_checkpoint(ckpt)
    assert manifest["num_hidden"] == 3
    assert manifest["num_layers"] == 4
    assert manifest["train_config"]["learning_rate"] == 1e-3
    assert "dataset_digest" in manifest
    lines = (ckpt / "history.csv").read_text().splitlines()
    assert lines[0] == "step,train_minibatch_mse,val_mse"
    assert len(lines) >= 3


def test_train_zero_learning_rate_checkpoint_equals_init(data_dir, tmp_path):
    ckpt = tmp_path / "ckpt0"
    rc = main(
        [
            "train", "--data", str(data_dir), "--T", "3", "--lr", "0",
            "--minibatch", "200", "--max-epochs", "1", "--out", str(ckpt),
        ]
    )
    assert rc == 0
    theta, _ = load_checkpoint(ckpt)
    dataset = load_dataset(data_dir)
    init = svt_init(dataset.operator, 3)
    assert np.array_equal(theta.W, init.W)
    assert np.array_equal(theta.delta, init.delta)
    assert np.array_equal(theta.tau, init.tau)


def test_train_divergent_initialization_is_numeric_failure(data_dir, tmp_path):
    rc = main(
        [
            "train", "--data", str(data_dir), "--T", "3", "--delta", "1e120",
            "--out", str(tmp_path / "ckpt"),
        ]
    )
    assert rc == 3


def test_eval_svt_report(data_dir, tmp_path):
    out = tmp_path / "report"
    rc = main(
        [
            "eval", "--data", str(data_dir), "--solver", "svt", "--iters", "3",
            "--out", str(out),
        ]
    )
    assert rc == 0
    report = json.loads(out.with_suffix(".json").read_text())
    assert report["solver"] == "svt"
    assert report["config"]["tau"] == 25.0
    assert report["n_total"] == 40 and report["n_diverged"] == 0
    assert report["mean_frob_sq"] > 0
    assert np.isclose(report["mse_per_entry"], report["mean_frob_sq"] / 25.0)
    assert "q50" in report["quantiles_frob_sq"]
    assert len(report["dataset_digest"]) == 64
    assert report["version"].startswith("lsvt-")
    lines = out.with_suffix(".csv").read_text().splitlines()
    assert lines[0] == "index,frob_sq" and len(lines) == 41


def test_eval_lsvt_at_init_matches_svt(data_dir, tmp_path):
    dataset = load_dataset(data_dir)
    ckpt = tmp_path / "init_ckpt"
    save_checkpoint(ckpt, svt_init(dataset.operator, 3))
    out_lsvt = tmp_path / "rep_lsvt"
    out_svt = tmp_path / "rep_svt"
    assert main(
        ["eval", "--data", str(data_dir), "--solver", "lsvt",
         "--checkpoint", str(ckpt), "--out", str(out_lsvt)]
    ) == 0
    assert main(
        ["eval", "--data", str(data_dir), "--solver", "svt", "--iters", "3",
         "--out", str(out_svt)]
    ) == 0
    lsvt_rep = json.loads(out_lsvt.with_suffix(".json").read_text())
    svt_rep = json.loads(out_svt.with_suffix(".json").read_text())
    assert lsvt_rep["mean_frob_sq"] == svt_rep["mean_frob_sq"]
    assert lsvt_rep["checkpoint_digest"]
    assert out_lsvt.with_suffix(".csv").read_text() == out_svt.with_suffix(".csv").read_text()


def test_eval_usage_errors(data_dir, tmp_path):
    base = ["eval", "--data", str(data_dir), "--out", str(tmp_path / "r")]
    assert main(base + ["--solver", "svt"]) == 2  # no --iters
    assert main(base + ["--solver", "lsvt"]) == 2  # no --checkpoint
    dataset = load_dataset(data_dir)
    ckpt = tmp_path / "c"
    save_checkpoint(ckpt, svt_init(dataset.operator, 2))
    assert main(
        base + ["--solver", "lsvt", "--checkpoint", str(ckpt), "--tau", "3"]
    ) == 2


def test_eval_empty_split_is_error(tmp_path):
    ds = generate_dataset(d=4, r=1, m=8, master_seed=2, sizes=(6, 2, 0))
    path = tmp_path / "empty"
    save_dataset(ds, path)
    rc = main(
        ["eval", "--data", str(path), "--solver", "svt", "--iters", "2",
         "--out", str(tmp_path / "r")]
    )
    assert rc == 2


def test_compare_produces_table_and_reruns_identically(data_dir, tmp_path):
    out = tmp_path / "table"
    args = [
        "compare", "--data", str(data_dir), "--T-values", "2,3",
        "--workdir", str(tmp_path / "work"), "--out", str(out),
        "--lr", "1e-3", "--minibatch", "200", "--max-epochs", "1",
    ]
    assert main(args) == 0
    csv_text = out.with_suffix(".csv").read_text()
    lines = csv_text.splitlines()
    assert lines[0].startswith("d,r,m,T,svt_mse_per_entry,lsvt_mse_per_entry")
    assert len(lines) == 3
    assert out.with_suffix(".txt").read_text().count("T=") == 2
    # second run reuses the cached checkpoints and reproduces the bytes
    assert main(args) == 0
    assert out.with_suffix(".csv").read_text() == csv_text


def test_grid_single_pair_matches_eval(data_dir, tmp_path):
    out = tmp_path / "grid"
    rc = main(
        [
            "grid", "--data", str(data_dir), "--pairs", "25:1.0", "--T", "2",
            "--workdir", str(tmp_path / "gwork"), "--out", str(out),
            "--lr", "1e-3", "--minibatch", "200", "--max-epochs", "1",
        ]
    )
    assert rc == 0
    lines = out.with_suffix(".csv").read_text().splitlines()
    assert lines[0] == (
        "tau,delta,svt_mse_per_entry,lsvt_mse_per_entry,"
        "svt_diverged,lsvt_diverged,lsvt_better"
    )
    assert len(lines) == 2
    row = lines[1].split(",")
    # the svt column equals a direct eval of the same configuration
    rep = tmp_path / "direct"
    assert main(
        ["eval", "--data", str(data_dir), "--solver", "svt", "--iters", "2",
         "--tau", "25", "--delta", "1.0", "--out", str(rep)]
    ) == 0
    direct = json.loads(rep.with_suffix(".json").read_text())
    assert abs(float(row[2]) - direct["mse_per_entry"]) < 1e-6
    assert row[6] in ("true", "false")


def test_threads_env_fallback_gives_same_report(data_dir, tmp_path, monkeypatch):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    args = ["eval", "--data", str(data_dir), "--solver", "svt", "--iters", "2"]
    assert main(args + ["--out", str(out1)]) == 0
    monkeypatch.setenv("LSVT_THREADS", "3")
    assert main(args + ["--out", str(out2)]) == 0
    a = json.loads(out1.with_suffix(".json").read_text())
    b = json.loads(out2.with_suffix(".json").read_text())
    assert a["mean_frob_sq"] == b["mean_frob_sq"]
    assert out1.with_suffix(".csv").read_text() == out2.with_suffix(".csv").read_text()


def test_version_flag():
    with pytest.raises(SystemExit) as err:
        main(["--version"])
    assert err.value.code == 0
    assert version_string().startswith("lsvt-0.1.0")


def test_no_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2
