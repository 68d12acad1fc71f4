import numpy as np
import pytest

from ifladder import io
from ifladder.cli import main

CONFIG = """
seed: 1
dataset: {source: blobs, blobs_n: 100, blobs_classes: 3, blobs_dim: 4, test_fraction: 0.2}
model: {depth: 1, width: 4}
train: {epochs: 5, batch: 16}
elso: {K: 6, R: 2, queries: 3}
evaluation: {resamples: 50}
"""


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write(tmp, CONFIG + "sweep: {epochs: [2, 4, 6]}\n")
    assert main(["--config", str(cfg), "--out", str(tmp / "out"), "--jobs", "1"]) == 0
    return tmp, cfg


def test_full_run_report(full_run):
    tmp, _ = full_run
    rows = io.read_csv(tmp / "out" / "report" / "scatter.csv")
    assert len(rows) == 3 * 5
    for setting in {r["setting"] for r in rows}:
        assert sorted(r["method"] for r in rows if r["setting"] == setting) == sorted(
            ["hessian", "ggn", "block_ggn", "ekfac", "kfac"])
    steps = io.read_csv(tmp / "out" / "report" / "steps.csv")
    for setting in {r["setting"] for r in steps}:
        shares = [float(r["dES_pct"]) for r in steps if r["setting"] == setting]
        assert len(shares) == 4 and abs(sum(shares) - 100.0) <= 0.1
    assert len(io.read_csv(tmp / "out" / "report" / "diagnostics.csv")) == 3


def test_elso_rows(full_run):
    tmp, _ = full_run
    rows = io.read_csv(tmp / "out" / "e2_d1_w4_s1" / "elso" / "measurements.csv")
    assert len(rows) == 6 * 2 * 3
    seeds = io.read_csv(tmp / "out" / "e2_d1_w4_s1" / "elso" / "seeds.csv")
    assert len(seeds) == 6 * 2


def test_cache_hit(full_run, capsys):
    tmp, cfg = full_run
    ckpt = tmp / "out" / "e2_d1_w4_s1" / "train" / "checkpoint.bin"
    before = io.sha256_file(ckpt)
    capsys.readouterr()
    assert main(["--config", str(cfg), "--out", str(tmp / "out"), "--stage", "train"]) == 0
    assert "cache hit" in capsys.readouterr().out
    assert io.sha256_file(ckpt) == before


def test_report_from_run_dirs(full_run, tmp_path):
    tmp, _ = full_run
    runs = [str(tmp / "out" / "e2_d1_w4_s1"), str(tmp / "out" / "e6_d1_w4_s1")]
    assert main(["--out", str(tmp_path), "--stage", "report", *runs]) == 0
    assert len(io.read_csv(tmp_path / "report" / "scatter.csv")) == 10


def test_heterogeneous_report(full_run, tmp_path, capsys):
    tmp, _ = full_run
    other = write(tmp_path, CONFIG.replace("K: 6", "K: 5"))
    assert main(["--config", str(other), "--out", str(tmp_path / "o"), "--stage", "all"]) == 0
    capsys.readouterr()
    code = main(["--out", str(tmp_path / "r"), "--stage", "report",
                 str(tmp / "out" / "e2_d1_w4_s1"), str(tmp_path / "o" / "e5_d1_w4_s1")])
    assert code == 2
    assert "elso.K" in capsys.readouterr().err


def test_missing_upstream(tmp_path, capsys):
    cfg = write(tmp_path, CONFIG)
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o"), "--stage", "influence"]) == 3
    assert "run --stage train first" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["model: {depth: oops}", "nonsense: 1"])
def test_bad_config(tmp_path, text):
    assert main(["--config", str(write(tmp_path, text)), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path / "o")]) == 2


def test_elso_stage_alone(tmp_path):
    cfg = write(tmp_path, CONFIG.replace("K: 6, R: 2", "K: 2, R: 2"))
    out = tmp_path / "o"
    assert main(["--config", str(cfg), "--out", str(out), "--stage", "train"]) == 0
    assert main(["--config", str(cfg), "--out", str(out), "--stage", "elso", "--jobs", "2"]) == 0
    rows = io.read_csv(out / "e5_d1_w4_s1" / "elso" / "measurements.csv")
    assert len(rows) == 2 * 2 * 3
    assert np.isfinite([float(r["metric"]) for r in rows]).all()


def test_seed_override(tmp_path):
    cfg = write(tmp_path, CONFIG + "sweep: {seeds: [4, 5]}\n")
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o"), "--stage", "train", "--seed", "9"]) == 0
    assert [p.name for p in (tmp_path / "o").glob("e*")] == ["e5_d1_w4_s9"]
