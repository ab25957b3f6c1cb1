import hashlib
import subprocess
import sys

import numpy as np
import pytest

from tomoprior.rawio import read_manifest, read_tpraw


def run_cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "tomoprior.cli", *map(str, args)],
                          capture_output=True, text=True, cwd=cwd)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cliwork")


def test_dataset_command_and_idempotence(workdir):
    out = workdir / "ds"
    r = run_cli("dataset", "--count", 3, "--size", 64, "--seed", 5, "--outdir", out, cwd=workdir)
    assert r.returncode == 0, r.stderr
    manifest = read_manifest(out / "manifest.txt")
    assert manifest["count"] == "3"
    h1 = hashlib.sha256((out / "phantom_00000.tpraw").read_bytes()).hexdigest()
    r2 = run_cli("dataset", "--count", 3, "--size", 64, "--seed", 5, "--outdir", out, cwd=workdir)
    assert r2.returncode == 0
    h2 = hashlib.sha256((out / "phantom_00000.tpraw").read_bytes()).hexdigest()
    assert h1 == h2


def test_dataset_count_zero_usage_error(workdir):
    r = run_cli("dataset", "--count", 0, "--outdir", workdir / "x", cwd=workdir)
    assert r.returncode == 2


def test_simulate_lact_geometry(workdir):
    out = workdir / "sim_lact"
    r = run_cli("simulate", "--task", "lact", "--range", 90, "--bins", 32, "--size", 32,
                "--base-views", 64, "--outdir", out, cwd=workdir)
    assert r.returncode == 0, r.stderr
    sino = read_tpraw(out / "clean.tpraw")
    assert sino.shape == (32, 32)  # 64 base views over 180 deg -> 32 in [0,90)


def test_simulate_noise_flags(workdir):
    out = workdir / "sim_noise"
    r = run_cli("simulate", "--task", "svct", "--views", 10, "--bins", 32, "--size", 32,
                "--noise", "poisson", "--b", 1.3e4, "--r", 10, "--seed", 3,
                "--outdir", out, cwd=workdir)
    assert r.returncode == 0, r.stderr
    clean = read_tpraw(out / "clean.tpraw")
    noisy = read_tpraw(out / "noisy.tpraw")
    assert clean.shape == (10, 32)
    assert not np.array_equal(clean, noisy)
    r = run_cli("simulate", "--task", "svct", "--views", 10, "--bins", 32, "--size", 32,
                "--noise", "gaussian", "--var", 0.64, "--outdir", out, cwd=workdir)
    assert r.returncode == 0


def test_simulate_bad_geometry_exit2(workdir):
    r = run_cli("simulate", "--task", "lact", "--range", 0, "--outdir", workdir / "bad",
                cwd=workdir)
    assert r.returncode == 2


def test_reconstruct_fbp_and_evaluate(workdir):
    sim = workdir / "sim_full"
    r = run_cli("simulate", "--task", "full", "--bins", 32, "--size", 32, "--base-views", 48,
                "--outdir", sim, cwd=workdir)
    assert r.returncode == 0, r.stderr
    runs = workdir / "runs"
    r = run_cli("reconstruct", "--sino", sim / "clean.tpraw", "--method", "fbp",
                "--task", "full", "--bins", 32, "--base-views", 48,
                "--gt", sim / "phantom.tpraw", "--outdir", runs, cwd=workdir)
    assert r.returncode == 0, r.stderr
    assert "psnr=" in r.stdout
    assert (runs / "fbp_full_s7" / "recon.tpraw").exists()
    assert (runs / "fbp_full_s7" / "run.cfg").exists()
    r = run_cli("evaluate", "--recon", runs / "fbp_full_s7" / "recon.tpraw",
                "--gt", sim / "phantom.tpraw", "--csv", workdir / "m.csv",
                "--method", "fbp", "--task", "full", cwd=workdir)
    assert r.returncode == 0, r.stderr
    assert (workdir / "m.csv").exists()


def test_reconstruct_geometry_mismatch_exit3(workdir):
    sim = workdir / "sim_full"
    r = run_cli("reconstruct", "--sino", sim / "clean.tpraw", "--method", "fbp",
                "--task", "full", "--bins", 32, "--base-views", 40,
                "--outdir", workdir / "runs2", cwd=workdir)
    assert r.returncode == 3


def test_reconstruct_identical_evaluation_same_files(workdir):
    sim = workdir / "sim_full"
    runs = workdir / "runs_det"
    for run_id in ("a", "b"):
        r = run_cli("reconstruct", "--sino", sim / "clean.tpraw", "--method", "sart",
                    "--task", "full", "--bins", 32, "--base-views", 48, "--seed", 7,
                    "--sart-iters", 3, "--run-id", run_id, "--outdir", runs, cwd=workdir)
        assert r.returncode == 0, r.stderr
    ha = hashlib.sha256((runs / "a" / "recon.tpraw").read_bytes()).hexdigest()
    hb = hashlib.sha256((runs / "b" / "recon.tpraw").read_bytes()).hexdigest()
    assert ha == hb


def test_config_file_roundtrip_and_unknown_key(workdir):
    sim = workdir / "sim_full"
    runs = workdir / "runs_cfg"
    r = run_cli("reconstruct", "--sino", sim / "clean.tpraw", "--method", "fbp",
                "--task", "full", "--bins", 32, "--base-views", 48,
                "--run-id", "cfgrun", "--outdir", runs, cwd=workdir)
    assert r.returncode == 0, r.stderr
    cfg_path = runs / "cfgrun" / "run.cfg"
    text = cfg_path.read_text()
    assert "method=fbp" in text
    # rerunning from the emitted config reproduces the output
    r2 = run_cli("reconstruct", "--config", cfg_path, "--run-id", "cfgrun2",
                 "--outdir", runs, cwd=workdir)
    assert r2.returncode == 0, r2.stderr
    h1 = hashlib.sha256((runs / "cfgrun" / "recon.tpraw").read_bytes()).hexdigest()
    h2 = hashlib.sha256((runs / "cfgrun2" / "recon.tpraw").read_bytes()).hexdigest()
    assert h1 == h2
    bad = workdir / "bad.cfg"
    bad.write_text("method=fbp\nwibble=1\n")
    r3 = run_cli("reconstruct", "--config", bad, "--sino", sim / "clean.tpraw",
                 cwd=workdir)
    assert r3.returncode == 2


def test_train_score_missing_dataset_exit2(workdir):
    r = run_cli("train-score", "--dataset", workdir / "nope", "--out", workdir / "s.ndg",
                cwd=workdir)
    assert r.returncode == 2


def test_train_score_tiny_and_resume_determinism(workdir):
    ds = workdir / "tinyds"
    r = run_cli("dataset", "--count", 8, "--size", 32, "--seed", 2, "--outdir", ds, cwd=workdir)
    assert r.returncode == 0
    ck = workdir / "tiny.ndg"
    r = run_cli("train-score", "--dataset", ds, "--epochs", 1, "--batch", 4, "--T", 10,
                "--out", ck, "--seed", 3, "--loss-csv", workdir / "loss.csv", cwd=workdir)
    assert r.returncode == 0, r.stderr
    assert ck.exists() and (workdir / "loss.csv").read_text().startswith("epoch,step,loss")
    # resume twice from the same checkpoint -> identical weights
    for name in ("r1.ndg", "r2.ndg"):
        r = run_cli("train-score", "--dataset", ds, "--epochs", 1, "--batch", 4, "--T", 10,
                    "--resume", ck, "--out", workdir / name, "--seed", 9, cwd=workdir)
        assert r.returncode == 0, r.stderr
    h1 = hashlib.sha256((workdir / "r1.ndg").read_bytes()).hexdigest()
    h2 = hashlib.sha256((workdir / "r2.ndg").read_bytes()).hexdigest()
    assert h1 == h2


def test_dper_requires_matching_schedule(workdir):
    ds = workdir / "tinyds"
    sim = workdir / "sim_small"
    r = run_cli("simulate", "--task", "lact", "--range", 90, "--bins", 32, "--size", 32,
                "--base-views", 32, "--outdir", sim, cwd=workdir)
    assert r.returncode == 0
    r = run_cli("reconstruct", "--sino", sim / "clean.tpraw", "--method", "dper",
                "--task", "lact", "--range", 90, "--bins", 32, "--base-views", 32,
                "--checkpoint", workdir / "tiny.ndg", "--T", 200,
                "--outdir", workdir / "runs3", cwd=workdir)
    assert r.returncode == 3  # checkpoint was trained with T=10
