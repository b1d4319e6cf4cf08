import json
import os
from pathlib import Path

import pytest

from maskel.cli import main
from maskel.phantom import dataset_files

TINY = """
seed = 1
device = "cpu"
precision = "float32"

[data]
n = 8
n_test = 3
n_hr = 3

[diffusion]
T = 10
steps = 3
batch_size = 4
channels = [8, 16]
n_samples = 2
log_every = 0

[sr]
T = 4
steps = 2
batch_size = 2
channels = [8, 8]
n_upscale = 2
log_every = 0

[mae]
steps = 3
batch_size = 4
dim = 32
depth = 2
heads = 2
decoder_dim = 32
decoder_heads = 2
warmup = 1
log_every = 0

[stage2]
steps = 3
batch_size = 4
num_codes = 16
decoder_channels = [16, 8, 8, 8, 8]
warmup = 1
log_every = 0

[eval]
perceptual = true
"""


def run(*argv):
    return main(["--quiet", *map(str, argv)])


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_verify_passes(capsys):
    assert run("verify") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 7 and "FAIL" not in out


def test_gen_data_twice_identical(tmp_path):
    for d in ("a", "b"):
        assert run("gen-data", "--n", 10, "--res", 64, "--seed", 3, "--out", tmp_path / d) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    assert len(dataset_files(tmp_path / "a")) == 21


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--n", "2", "--frobnicate"])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_runtime_failure_exit_one(tmp_path, capsys):
    assert run("sample", "--ckpt", tmp_path / "missing.ckpt", "--out", tmp_path / "s") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "error" in err[0]


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MASKEL_OUTPUT_ROOT", str(tmp_path))
    assert run("gen-data", "--n", 2) == 0
    assert (tmp_path / "gen-data" / "manifest.json").is_file()


def test_locked_output_rejected(tmp_path):
    from maskel.cli import OutputLock
    with OutputLock(tmp_path):
        assert run("gen-data", "--n", 2, "--out", tmp_path) == 1


def test_config_unknown_key_rejected(tmp_path):
    gen = tmp_path / "data"
    assert run("gen-data", "--n", 4, "--out", gen) == 0
    cfg = tmp_path / "c.toml"
    cfg.write_text("[mae]\nstepz = 3\n")
    assert run("train-mae", "--data", gen, "--config", cfg, "--out", tmp_path / "m") == 2
    assert not (tmp_path / "m" / "mae.ckpt").exists()


def test_flags_override_config(tmp_path):
    gen = tmp_path / "data"
    assert run("gen-data", "--n", 4, "--out", gen) == 0
    cfg = tmp_path / "c.toml"
    cfg.write_text("[mae]\nsteps = 50\ndim = 16\ndepth = 1\nheads = 2\ndecoder_dim = 16\ndecoder_heads = 2\nlog_every = 1\n")
    assert run("train-mae", "--data", gen, "--config", cfg, "--steps", 2, "--out", tmp_path / "m") == 0
    resolved = json.loads((tmp_path / "m" / "config.json").read_text())
    assert resolved["config"]["steps"] == 2 and resolved["config"]["dim"] == 16
    records = [json.loads(line) for line in (tmp_path / "m" / "run.log").read_text().splitlines()]
    assert [r["step"] for r in records if "step" in r] == [1, 2]


def test_pipeline_missing_section_rejected(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(TINY.replace("[eval]\nperceptual = true\n", ""))
    assert run("pipeline", "--config", cfg, "--out", tmp_path / "run") == 2
    assert not (tmp_path / "run").exists()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    assert run("pipeline", "--config", cfg, "--out", root / "run") == 0
    return cfg, root / "run"


def test_pipeline_smoke(tiny_run):
    _, out = tiny_run
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["rows"]) == {"desk_R", "desk_G"}
    assert "Ours_R" in summary["table"] and "desk_G" in summary["table"]
    assert (out / "predict" / "panels_grid.png").is_file()
    assert (out / "upscale" / "grid.png").is_file()
    assert len(list((out / "upscale" / "images").glob("*.png"))) == 2


def test_pipeline_resume_skips_completed(tiny_run):
    cfg, out = tiny_run
    # simulate a run killed during stage 4: later markers are gone
    for stage in ("train-sr", "upscale", "train-mae", "mae-recon", "train-stage2", "predict", "evaluate"):
        (out / stage / "complete.json").unlink()
    before = (out / "train-diffusion" / "diffusion.ckpt").stat().st_mtime_ns
    assert run("pipeline", "--config", cfg, "--out", out) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["skipped"] == ["gen-data", "train-diffusion", "sample"]
    assert summary["ran"][0] == "train-sr"
    assert (out / "train-diffusion" / "diffusion.ckpt").stat().st_mtime_ns == before


def test_pipeline_stage_failure_names_stage(tiny_run, capsys):
    cfg, out = tiny_run
    (out / "predict" / "complete.json").unlink()
    os.remove(out / "train-stage2" / "stage2.ckpt")
    assert run("pipeline", "--config", cfg, "--out", out) == 1
    assert "stage predict failed" in capsys.readouterr().err
