import csv
import hashlib
import json
import subprocess
import sys

import pytest

from abspose.cli import main
from abspose.config import ConfigParseError, RunConfig, build_config, config_hash, load_config, parse_config_text

FAST = ["--set", "posenet.hidden_width=16", "--set", "posenet.epochs=2", "--set", "posenet.batch_size=64"]


# -- configuration --


def test_defaults_echo_and_hash():
    cfg = RunConfig()
    text = cfg.to_text()
    assert "posenet.loss = l1\n" in text and "scene.fx = 1000.0\n" in text and "noise.hip_miss_prob = 0.03\n" in text
    assert cfg.hash() == hashlib.sha256(text.encode()).hexdigest()


def test_parse_comments_and_line_numbers():
    parsed = parse_config_text("# comment\nposenet.loss = l2  # trailing\n\nscene.fx=700\n")
    assert parsed == {"posenet.loss": "l2", "scene.fx": "700"}
    with pytest.raises(ConfigParseError, match=r":3: unknown key"):
        parse_config_text("run.seed = 1\n\nposenet.colour = red\n", "f.cfg")
    with pytest.raises(ConfigParseError, match=r":1: expected"):
        parse_config_text("just words\n")
    with pytest.raises(ConfigParseError, match=r":2: duplicate"):
        parse_config_text("run.seed = 1\nrun.seed = 2\n")


def test_value_coercion_and_conflicts():
    cfg = build_config({"posenet.augmentation": "yes", "scene.people_per_scene": "2", "noise.sigma_2d_px": "3"})
    assert cfg.posenet.augmentation is True and cfg.scene.people_per_scene == 2
    assert cfg.scene_config.noise.sigma_2d_px == 3.0
    for bad in ({"posenet.augmentation": "maybe"}, {"scene.people_per_scene": "two"},
                {"posenet.stage2": "true", "posenet.use_depth_features": "false"}):
        with pytest.raises(ConfigParseError):
            build_config(bad)


def test_precedence_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("posenet.loss = l2\nrun.seed = 4\n")
    cfg = load_config(path, {"run.seed": "9"})
    assert cfg.posenet.loss == "l2" and cfg.run.seed == 9
    assert load_config().posenet.loss == "l1"
    assert cfg.run.seed_list == [0, 1, 2]


# -- CLI --


def _gen(out, scenes=6, seed=1, extra=()):
    return main(["gen-data", "--scenes", str(scenes), "--seed", str(seed), "--out", str(out), *extra])


def test_gen_data_is_byte_identical(tmp_path):
    assert _gen(tmp_path / "a") == 0 and _gen(tmp_path / "b") == 0
    for name in ("poses.csv", "cameras.csv", "config.echo"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    ma.pop("created"), mb.pop("created")
    assert ma == mb
    for sub in ("checkpoints", "reports", "logs"):
        assert (tmp_path / "a" / sub).is_dir()


def test_manifest_hash_recomputes(tmp_path):
    assert _gen(tmp_path, extra=["--set", "noise.sigma_2d_px=2"]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    echo = (tmp_path / "config.echo").read_text(encoding="utf-8")
    assert manifest["config_hash"] == hashlib.sha256(echo.encode("utf-8")).hexdigest() == config_hash(echo)
    assert "noise.sigma_2d_px = 2.0" in echo
    assert manifest["files"]["poses.csv"] == hashlib.sha256((tmp_path / "poses.csv").read_bytes()).hexdigest()


def test_scenes_zero_is_usage_error(tmp_path, capsys):
    assert main(["gen-data", "--scenes", "0", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("abspose: error:")


def test_output_root_environment(tmp_path, monkeypatch):
    monkeypatch.delenv("ABSPOSE_OUTPUT_ROOT", raising=False)
    assert main(["gen-data", "--scenes", "2"]) == 2
    monkeypatch.setenv("ABSPOSE_OUTPUT_ROOT", str(tmp_path))
    assert main(["gen-data", "--scenes", "2"]) == 0
    assert (tmp_path / "gen-data" / "poses.csv").exists()


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert _gen(root / "train", scenes=40, seed=1) == 0
    assert _gen(root / "test", scenes=10, seed=2) == 0
    return root


def test_train_eval_round(datasets, tmp_path):
    out = tmp_path / "train"
    assert main(["train", "--data", str(datasets / "train"), "--val", str(datasets / "test"), "--out", str(out),
                 *FAST]) == 0
    assert (out / "checkpoints" / "posenet.ckpt").exists()
    assert (out / "reports" / "loss_curve.png").exists()
    log_rows = list(csv.reader(open(out / "logs" / "train_log.csv")))
    assert log_rows[0] == ["stage", "epoch", "lr", "mean_train_loss", "val_a_mpjpe", "val_r_mpjpe"]
    assert len(log_rows) == 3

    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(out / "checkpoints" / "posenet.ckpt"), "--data",
                 str(datasets / "train"), "--out", str(ev)]) == 0
    report = json.loads((ev / "reports" / "eval.json").read_text())
    from abspose.synthdata import read_dataset

    ds = read_dataset(datasets / "train")
    assert report["n_poses"] == len(ds) - int((~ds.detected).sum())
    assert all(float(report[k]) == float(report[k]) for k in ("a_mpjpe", "r_mpjpe"))
    assert (ev / "reports" / "error_histogram.png").exists()


def test_train_is_deterministic(datasets, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--data", str(datasets / "train"), "--out", str(tmp_path / name), "--seed", "3",
                     *FAST]) == 0
    for rel in ("checkpoints/posenet.ckpt", "logs/train_log.csv", "reports/loss_curve.png", "config.echo"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_train_with_stage2(datasets, tmp_path):
    assert main(["train", "--data", str(datasets / "train"), "--out", str(tmp_path), *FAST,
                 "--set", "posenet.stage2=true", "--set", "posenet.stage2_epochs=1"]) == 0
    stages = [r[0] for r in csv.reader(open(tmp_path / "logs" / "train_log.csv"))][1:]
    assert stages == ["1", "1", "2"]


def test_compare_baseline_schema(datasets, tmp_path):
    assert main(["compare-baseline", "--train", str(datasets / "train"), "--test", str(datasets / "test"),
                 "--out", str(tmp_path), *FAST]) == 0
    rows = list(csv.reader(open(tmp_path / "reports" / "compare.csv")))
    assert rows[0] == ["method", "A-MPJPE", "R-MPJPE", "Detection Rate"]
    assert [r[0] for r in rows[1:]] == ["Baseline", "Ours"]
    assert rows[1][3] == rows[2][3]
    for name in ("histogram_baseline.csv", "histogram_ours.csv", "compare_histogram.png", "corruption_suite.csv",
                 "corruption_suite.png"):
        assert (tmp_path / "reports" / name).exists()


def test_ablate_runs_ladder(datasets, tmp_path):
    assert main(["ablate", "--train", str(datasets / "train"), "--test", str(datasets / "test"), "--out",
                 str(tmp_path), *FAST, "--set", "run.seeds=0", "--set", "posenet.stage2_epochs=1"]) == 0
    rows = list(csv.reader(open(tmp_path / "reports" / "ablation.csv")))
    assert [r[0] for r in rows[1:]] == ["L2 loss", "w/ L1 loss", "w/ depth features", "log hip z", "augmentation",
                                       "stage-2 (recalibration stand-in)"]
    assert all(r[-1] == "" for r in rows[1:])


@pytest.mark.parametrize("argv,code", [
    (["train", "--data", "/nonexistent/data", "--out", "{tmp}"], 1),
    (["eval", "--checkpoint", "{tmp}/missing.ckpt", "--data", "{train}", "--out", "{tmp}"], 1),
    (["eval", "--checkpoint", "{tmp}/bad.ckpt", "--data", "{train}", "--out", "{tmp}"], 1),
    (["train", "--data", "{train}", "--out", "{tmp}", "--set", "posenet.stage2=true",
      "--set", "posenet.use_depth_features=false"], 2),
    (["train", "--data", "{train}", "--out", "{tmp}", "--set", "posenet.nope=1"], 2),
    (["train", "--data", "{train}", "--out", "{tmp}", "--config", "{tmp}/missing.cfg"], 2),
    (["train", "--data", "{train}", "--out", "{tmp}", "--set", "novalue"], 2),
    (["frobnicate"], 2),
    (["gen-data", "--out", "{tmp}"], 2),
    (["gen-data", "--scenes", "x", "--out", "{tmp}"], 2),
])
def test_error_paths(argv, code, datasets, tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage bytes")
    argv = [a.format(tmp=tmp_path, train=datasets / "train") for a in argv]
    assert main(argv) == code
    err = capsys.readouterr().err.splitlines()
    assert len(err) == 1 and err[0].startswith("abspose: error:")


def test_config_file_error_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("run.seed = 1\nposenet.bogus = 2\n")
    assert main(["gen-data", "--scenes", "1", "--out", str(tmp_path), "--config", str(cfg)]) == 2
    err = capsys.readouterr().err.strip()
    assert "bad.cfg:2:" in err and len(err.splitlines()) == 1


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "abspose", "gen-data", "--scenes", "1", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "abspose", "gen-data", "--scenes", "0", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 2 and res.stderr.count("\n") == 1
