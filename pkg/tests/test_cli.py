import csv
import json
import os

import numpy as np
import pytest

from beags import cli, metrics, scenegen

from conftest import small_spec

FAST = {"pretrain_iters": 40, "refine_iters": 20, "log_every": 10}


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh)
    return str(path)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = write_json(root / "spec.json", small_spec().to_dict())
    out = str(root / "data")
    assert cli.main(["gen", spec, "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    return write_json(tmp_path_factory.mktemp("cfg") / "fast.json", FAST)


def effective(out):
    with open(os.path.join(out, "effective_config.json")) as fh:
        return json.load(fh)


def test_unknown_flag_writes_nothing(tmp_path):
    out = str(tmp_path / "never")
    assert cli.main(["gen", "--out", out, "--bogus"]) == 1
    assert not os.path.exists(out)


def test_missing_subcommand_and_bad_values(tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["gen", "--threads", "0", "--out", str(tmp_path / "x")]) == 1
    assert not os.path.exists(str(tmp_path / "x"))


def test_help(capsys):
    assert cli.main(["--help"]) == 0
    text = capsys.readouterr().out
    for cmd in ("gen", "pretrain", "refine", "render", "extract", "eval", "sweep"):
        assert cmd in text
    assert cli.main(["eval", "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--threads", "--out"):
        assert flag in text


def test_gen_layout(data_dir):
    for name in ("scene.txt", "clean.txt", "init.txt", "train_cameras.json", "test_cameras.json",
                 "spec.json", "benchmark.json", "effective_config.json"):
        assert os.path.exists(os.path.join(data_dir, name))
    assert os.path.exists(os.path.join(data_dir, "train", "mask_000.png"))


def test_effective_config_holds_defaults(data_dir):
    eff = effective(data_dir)
    assert (eff["lambda_bound"], eff["lambda_occ"], eff["Z"], eff["k"]) == (0.5, 10.0, 20, 2000)
    assert eff["command"] == "gen" and eff["threads"] == 1


def test_config_override_and_seed(data_dir, tmp_path):
    cfg = write_json(tmp_path / "c.json", {"lambda_occ": 0.0, "Z": 5})
    out = str(tmp_path / "o")
    assert cli.main(["eval", data_dir, os.path.join(data_dir, "clean.txt"), "--config", cfg,
                     "--seed", "9", "--out", out]) == 0
    eff = effective(out)
    assert (eff["lambda_occ"], eff["Z"], eff["seed"], eff["lambda_bound"]) == (0.0, 5, 9, 0.5)


def test_bad_config_is_a_data_error(data_dir, tmp_path):
    cfg = write_json(tmp_path / "c.json", {"lambda_bnd": 1.0})
    assert cli.main(["eval", data_dir, os.path.join(data_dir, "clean.txt"), "--config", cfg,
                     "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["eval", str(tmp_path / "nowhere"), "x.txt", "--out", str(tmp_path / "p")]) == 2


def test_malformed_scene_is_a_data_error(data_dir, tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("BEAGS 1\n1 2 3\n")
    assert cli.main(["eval", data_dir, str(p), "--out", str(tmp_path / "o")]) == 2


def test_oracle_end_to_end_is_perfect(tmp_path):
    spec = small_spec()
    spec.n_spikes = spec.n_stretch = spec.n_bleed = 0
    data = str(tmp_path / "data")
    assert cli.main(["gen", write_json(tmp_path / "s.json", spec.to_dict()), "--out", data]) == 0
    out = str(tmp_path / "eval")
    assert cli.main(["eval", data, os.path.join(data, "scene.txt"), "--out", out]) == 0
    with open(os.path.join(out, "metrics.json")) as fh:
        rep = json.load(fh)
    assert rep["extracted"]["mean"]["iou"] == 1.0
    assert os.path.exists(os.path.join(out, "metrics.txt"))


def test_pipeline_commands(data_dir, fast_config, tmp_path):
    pre = str(tmp_path / "pre")
    assert cli.main(["pretrain", data_dir, "--config", fast_config, "--out", pre]) == 0
    scene = os.path.join(pre, "pretrained.txt")
    assert os.path.exists(scene)
    ref = str(tmp_path / "ref")
    assert cli.main(["refine", data_dir, scene, "--config", fast_config, "--out", ref]) == 0
    with open(os.path.join(ref, "refine_report.json")) as fh:
        rep = json.load(fh)
    assert np.isfinite(rep["psnr_after"])
    assert os.path.exists(os.path.join(ref, "masks", "refined_000.png"))
    # B-only: no occupancy term
    bcfg = write_json(tmp_path / "b.json", {**FAST, "lambda_occ": 0.0})
    assert cli.main(["refine", data_dir, scene, "--config", bcfg, "--out", str(tmp_path / "b")]) == 0
    assert cli.main(["refine", data_dir, scene, "--config", fast_config, "--no-reprojection",
                     "--out", str(tmp_path / "nr")]) == 0


def test_render_and_extract(data_dir, tmp_path):
    scene = os.path.join(data_dir, "scene.txt")
    out = str(tmp_path / "r")
    assert cli.main(["render", data_dir, scene, "--views", "0,2", "--out", out]) == 0
    names = sorted(os.listdir(out))
    assert "test_000_color.png" in names and "test_002_depth.raw" in names
    assert "test_001_color.png" not in names
    assert cli.main(["render", data_dir, scene, "--views", "99", "--out", str(tmp_path / "bad")]) == 2
    ext = str(tmp_path / "e")
    assert cli.main(["extract", data_dir, scene, "--views", "1", "--out", ext]) == 0
    assert sorted(f for f in os.listdir(ext) if f.endswith("_mask.png")) == \
        ["class1_001_mask.png", "class2_001_mask.png", "class3_001_mask.png"]


def test_outputs_are_byte_identical(data_dir, tmp_path):
    scene = os.path.join(data_dir, "scene.txt")
    outs = []
    for i, threads in enumerate(("1", "2")):
        out = str(tmp_path / f"r{i}")
        assert cli.main(["render", data_dir, scene, "--split", "train", "--views", "3",
                         "--threads", threads, "--out", out]) == 0
        outs.append({f: open(os.path.join(out, f), "rb").read() for f in os.listdir(out)
                     if f != "effective_config.json"})
    assert outs[0] == outs[1]


def test_sweep_csv(data_dir, fast_config, tmp_path):
    out = str(tmp_path / "sw")
    assert cli.main(["sweep", data_dir, os.path.join(data_dir, "init.txt"), "--config", fast_config,
                     "--k-values", "50,2000", "--z-values", "1,20", "--out", out]) == 0
    with open(os.path.join(out, "sweep.csv")) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sweep", "k", "Z", "PSNR", "IoU", "BIoU", "voxel_size"]
    assert [r[:3] for r in rows[1:]] == [["k", "50", "20"], ["k", "2000", "20"], ["Z", "2000", "1"],
                                         ["Z", "2000", "20"]]
    # the (k=2000, Z=20) cell is shared by both sweeps
    assert rows[2][3:] == rows[4][3:]
    assert float(rows[1][6]) < float(rows[2][6])


def test_benchmark_command(data_dir, fast_config, tmp_path):
    out = str(tmp_path / "bm")
    assert cli.main(["benchmark", data_dir, "--config", fast_config, "--out", out]) == 0
    with open(os.path.join(out, "report.json")) as fh:
        rep = json.load(fh)
    assert set(rep["conditions"]) == {"vanilla", "b_only", "full"}
    for name in ("vanilla.txt", "full.txt", "table.txt"):
        assert os.path.exists(os.path.join(out, name))


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_numerical_failure_exit_code(data_dir, tmp_path):
    cfg = write_json(tmp_path / "c.json", {"pretrain_iters": 3, "lr_position": 1e308, "log_every": 0})
    assert cli.main(["pretrain", data_dir, "--config", cfg, "--out", str(tmp_path / "o")]) == 3
