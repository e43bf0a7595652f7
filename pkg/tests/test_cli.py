import json

import numpy as np
import pytest

from volseg3d.cli import main
from volseg3d.config import PipelineConfig, from_dict, load_config
from volseg3d.errors import ConfigError
from volseg3d.volio import read_volume, write_volume

DESK = {
    "seed": 3,
    "synthgen": {"volume_dims": [32, 32, 32], "count_range": [3, 5], "axis_range": [3, 5]},
    "gantrain": {
        "iterations": 3,
        "crop_size": [16, 16, 16],
        "generator": {"base_channels": 2, "n_down": 1, "n_res": 1},
        "discriminator": {"base_channels": 2, "n_layers": 2},
    },
    "segtrain": {"epochs": 2, "block_size": 32, "unet": {"depth": 2, "base_channels": 2}},
    "postproc": {"min_size": 10},
}


@pytest.fixture
def desk_config(tmp_path):
    p = tmp_path / "desk.json"
    p.write_text(json.dumps(DESK))
    return p


def run_pipeline(root, config):
    c = ["--config", str(config)]
    steps = [
        ["synth-labels", "--count", "2", "--out", root / "labels"],
        ["synth-labels", "--count", "1", "--seed", "11", "--out", root / "gt"],
        ["simulate-microscopy", "--labels", root / "gt", "--out", root / "real"],
        ["train-spcyclegan", "--labels", root / "labels", "--real", root / "real", "--out", root / "gan"],
        ["gen-microscopy", "--model", root / "gan" / "model_G.ckpt", "--labels", root / "labels", "--out", root / "syn"],
        ["train-unet", "--labels", root / "labels", "--syn", root / "syn", "--out", root / "unet"],
        ["segment", "--model", root / "unet" / "model_M_final.ckpt", "--input", root / "real" / "orig_0001", "--out", root / "seg"],
        ["postprocess", "--input", root / "seg" / "seg", "--out", root / "post"],
        ["evaluate", "--seg", root / "post" / "seg_clean", "--gt", root / "gt" / "label_0001", "--out", root / "eval"],
        ["overlay", "--gray", root / "real" / "orig_0001", "--labels", root / "post" / "labels", "--out", root / "overlay"],
    ]
    for step in steps:
        assert main([str(a) for a in step] + c) == 0, step


DETERMINISTIC = [
    "labels/label_0001.vol",
    "labels/label_0002.vol",
    "labels/manifest.json",
    "real/orig_0001.vol",
    "gan/loss_log.jsonl",
    "gan/model_G.ckpt",
    "gan/model_H.ckpt",
    "gan/model_D1.ckpt",
    "syn/syn_0001.vol",
    "unet/loss_log.jsonl",
    "unet/model_M_final.ckpt",
    "seg/prob.vol",
    "seg/seg.vol",
    "post/labels.vol",
    "eval/metrics.json",
    "overlay/slice_0001.png",
]


@pytest.mark.slow
def test_full_pipeline_is_byte_deterministic(tmp_path, desk_config):
    run_pipeline(tmp_path / "a", desk_config)
    run_pipeline(tmp_path / "b", desk_config)
    for rel in DETERMINISTIC:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    metrics = json.loads((tmp_path / "a" / "eval" / "metrics.json").read_text())
    assert metrics["n_total"] == 32**3
    assert metrics["accuracy"] + metrics["type1"] + metrics["type2"] == pytest.approx(1.0, abs=1e-12)
    run = json.loads((tmp_path / "a" / "seg" / "run_manifest.json").read_text())
    assert run["command"] == "segment" and run["seed"] == 3 and "wall_time_s" in run


def test_synth_labels_manifest(tmp_path):
    assert main(["synth-labels", "--count", "0", "--out", str(tmp_path / "empty")]) == 0
    assert json.loads((tmp_path / "empty" / "manifest.json").read_text())["volumes"] == []

    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synthgen": {"volume_dims": [20, 20, 20], "count_range": [1, 2], "axis_range": [2, 3]}}))
    for d in ("a", "b"):
        assert main(["synth-labels", "--count", "3", "--seed", "5", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma == mb
    assert [e["seed"] for e in ma["volumes"]] == [5, 6, 7]
    assert set(np.unique(read_volume(tmp_path / "a" / "label_0001").data)) <= {0, 1}


def test_refuses_non_empty_output_without_force(tmp_path, capsys):
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    args = ["synth-labels", "--count", "0", "--out", str(out)]
    assert main(args) == 2
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--force"]) == 0
    assert (out / "keep.txt").exists()


def test_evaluate_identical_volumes(tmp_path, rng):
    gt = (rng.random((10, 10, 10)) < 0.3).astype(np.uint8)
    write_volume(tmp_path / "gt", gt, tag="label")
    assert main(["evaluate", "--seg", str(tmp_path / "gt"), "--gt", str(tmp_path / "gt"), "--out", str(tmp_path / "e")]) == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert m["accuracy"] == 1.0 and m["type1"] == 0.0 and m["type2"] == 0.0


def test_postprocess_keeps_size_100_drops_99(tmp_path):
    seg = np.zeros((30, 30, 30), np.uint8)
    seg[0:9, 0:11, 0] = 1
    seg[0:10, 0:10, 5] = 1
    write_volume(tmp_path / "seg", seg, tag="seg")
    assert main(["postprocess", "--input", str(tmp_path / "seg"), "--min-size", "100", "--out", str(tmp_path / "p")]) == 0
    info = json.loads((tmp_path / "p" / "components.json").read_text())
    assert info["count"] == 1 and info["sizes"] == [100]


def test_wrong_checkpoint_role_is_config_error(tmp_path, rng, capsys):
    from volseg3d.networks import DiscriminatorConfig, build_discriminator3d, save_checkpoint

    save_checkpoint(tmp_path / "d.ckpt", build_discriminator3d(DiscriminatorConfig(base_channels=2), rng))
    write_volume(tmp_path / "v", np.zeros((8, 8, 8), np.uint8))
    code = main(["segment", "--model", str(tmp_path / "d.ckpt"), "--input", str(tmp_path / "v"), "--out", str(tmp_path / "s")])
    assert code == 2
    assert "expected M" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path):
    write_volume(tmp_path / "a", np.zeros((4, 4, 4), np.uint8))
    write_volume(tmp_path / "b", np.zeros((4, 4, 5), np.uint8))
    assert main(["evaluate", "--seg", str(tmp_path / "a"), "--gt", str(tmp_path / "b"), "--out", str(tmp_path / "e")]) == 3
    assert main(["evaluate", "--seg", str(tmp_path / "nope"), "--gt", str(tmp_path / "b"), "--out", str(tmp_path / "f")]) == 3


def test_numerical_failure_exit_code(tmp_path, rng):
    from volseg3d.networks import UNetConfig, build_unet3d, save_checkpoint

    net = build_unet3d(UNetConfig(depth=1, base_channels=2), rng)
    net.params["head.bias"].data[:] = np.nan
    save_checkpoint(tmp_path / "m.ckpt", net)
    write_volume(tmp_path / "v", np.zeros((8, 8, 8), np.uint8))
    assert main(["segment", "--model", str(tmp_path / "m.ckpt"), "--input", str(tmp_path / "v"), "--out", str(tmp_path / "s")]) == 4


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        from_dict(PipelineConfig, {"segtrain": {"mu3": 1}})
    with pytest.raises(ConfigError, match="gantrain.generator"):
        from_dict(PipelineConfig, {"gantrain": {"generator": {"width": 3}}})
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "blue"}))
    assert main(["synth-labels", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_config_seed_propagation(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 9, "segtrain": {"seed": 1}}))
    cfg = load_config(p)
    assert (cfg.synthgen.seed, cfg.gantrain.seed, cfg.segtrain.seed) == (9, 9, 1)
    assert cfg.with_seed(4).segtrain.seed == 4
    nested = from_dict(PipelineConfig, DESK)
    assert nested.gantrain.generator.base_channels == 2 and nested.segtrain.unet.depth == 2
