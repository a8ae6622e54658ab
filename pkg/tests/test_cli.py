import numpy as np
import pytest

from hcml import cli, gradcheck, motion_blocks
from hcml import tensor as tn
from hcml.cli import KEYS, ConfigError, RunConfig, main
from hcml.flowviz import read_ppm

TINY_CFG = """
# 16x16 clips, small widths, one epoch per stage
data.height = 16
data.width = 16
data.radius = 2.5,3.5
data.orbit_radius = 2.0,3.0
data.train = 16
data.test = 8
data.seed = 1
model.channels = 8,8,16
model.motion_channels = 8,8,8
model.beta = 1,2,2
model.flow_growth = 4
model.predictor_hidden = 16
recon.epochs = 2
recon.warmup = 0
level1.epochs = 1
level1.warmup = 0
level2.epochs = 1
level2.warmup = 0
joint.epochs = 2
joint.warmup = 0
eval.probe_epochs = 20
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_CFG + f"run_dir = {tmp_path / 'run'}\n")
    return path


def test_defaults_cover_every_key():
    cfg = RunConfig()
    assert set(cfg.values) == set(KEYS)
    assert RunConfig.parse(cfg.dump()).dump() == cfg.dump()


def test_unknown_and_bad_keys_rejected():
    with pytest.raises(ConfigError):
        RunConfig.parse("nope = 1")
    with pytest.raises(ConfigError):
        RunConfig.parse("data.height = tall")
    with pytest.raises(ConfigError):
        RunConfig.parse("data.height = 16\ndata.height = 16")
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["recon.epochs=1", "recon.warmup=3"])


def test_help_lists_every_key(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for k, v in KEYS.items():
        assert k in out and f"= {v.default}" in out
    assert "HCML_THREADS" in out


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train"]) == 2
    assert main(["gen", "--set", "bogus=1"]) == 2
    assert main(["gen", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_gradcheck_subset_passes(capsys):
    assert main(["gradcheck", "linear", "cosine_sim", "--set", "gradcheck.instances=2"]) == 0
    out = capsys.readouterr().out
    assert "linear" in out and "PASS" in out


def test_gradcheck_reports_every_op_once(capsys):
    assert main(["gradcheck", "--set", "gradcheck.instances=1"]) == 0
    rows = [l.split()[0] for l in capsys.readouterr().out.splitlines()[1:] if l.strip()][:-1]
    assert sorted(rows) == sorted(gradcheck.REGISTRY)


def test_gradcheck_negative_control(monkeypatch, capsys):
    real = motion_blocks.cost_volume

    def corrupted(a, b, params, eps=tn.COSINE_EPS):
        out = real(a, b, params, eps)
        backward = out._backward
        out._backward = lambda g: tuple(None if x is None else 1.5 * x for x in backward(g))
        return out

    monkeypatch.setattr(motion_blocks, "cost_volume", corrupted)
    assert main(["gradcheck", "cost_volume", "linear", "--set", "gradcheck.instances=2"]) == 1
    out = capsys.readouterr().out
    assert "FAILED: cost_volume" in out


def test_pipeline_all_stages(cfg_file, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--stage", "recon", "-c", str(cfg_file)]) == 2     # no data yet
    assert main(["gen", "-c", str(cfg_file)]) == 0
    assert main(["train", "--stage", "level2", "-c", str(cfg_file)]) == 2
    assert "level1" in capsys.readouterr().err
    assert not (run / "level2.ck").exists()
    assert main(["train", "--stage", "all", "-c", str(cfg_file)]) == 0
    for name in ("recon.ck", "level1.ck", "level2.ck", "joint.ck", "metrics.csv", "resolved.cfg"):
        assert (run / name).exists()
    rows = (run / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 + 1 + 1 + 2
    assert RunConfig.parse((run / "resolved.cfg").read_text())["data.train"] == 16

    before = (run / "joint.ck").read_bytes()
    assert main(["train", "--stage", "level2", "-c", str(cfg_file), "--set", "model.variant=pmb"]) == 2
    assert (run / "joint.ck").read_bytes() == before

    capsys.readouterr()
    assert main(["eval", "knn", "-c", str(cfg_file)]) == 0
    assert main(["eval", "probe", "-c", str(cfg_file), "--levels", "1"]) == 0
    out = capsys.readouterr().out
    assert "knn" in out and "probe train" in out
    code = main(["eval", "efficacy", "-c", str(cfg_file)])
    assert code in (0, 1)
    assert "efficacy" in capsys.readouterr().out

    out_ppm = tmp_path / "flow.ppm"
    assert main(["export-flow", "-c", str(cfg_file), "--out", str(out_ppm), "--index", "1"]) == 0
    assert read_ppm(out_ppm).shape == (16, 16, 3)
    assert main(["export-flow", "-c", str(cfg_file), "--out", str(out_ppm), "--ground-truth"]) == 0
    assert main(["export-flow", "-c", str(cfg_file), "--out", str(out_ppm), "--index", "99"]) == 2


def test_export_constant_flows(tmp_path):
    out = tmp_path / "z.ppm"
    assert main(["export-flow", "--out", str(out), "--constant", "0,0", "--size", "4,6"]) == 0
    assert np.all(read_ppm(out) == 128)
    assert main(["export-flow", "--out", str(out), "--constant", "1,0", "--size", "4,6"]) == 0
    img = read_ppm(out)
    assert len(np.unique(img.reshape(-1, 3), axis=0)) == 1


def test_cli_runs_deterministic_and_resumable(cfg_file, tmp_path):
    runs = {}
    for name in ("a", "b", "c"):
        runs[name] = tmp_path / name
        sets = ["--set", f"run_dir={runs[name]}"]
        assert main(["gen", "-c", str(cfg_file), *sets]) == 0
        assert main(["train", "--stage", "recon", "-c", str(cfg_file), *sets,
                     *(["--stop-epoch", "1"] if name == "c" else [])]) == 0
    assert (runs["c"] / "recon.partial.ck").exists() and not (runs["c"] / "recon.ck").exists()
    assert main(["train", "--stage", "recon", "--resume", "-c", str(cfg_file), "--set", f"run_dir={runs['c']}"]) == 0
    a = (runs["a"] / "metrics.csv").read_text()
    assert a == (runs["b"] / "metrics.csv").read_text()
    assert a == (runs["c"] / "metrics.csv").read_text()
