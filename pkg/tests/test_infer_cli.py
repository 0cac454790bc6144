import json
import shutil

import numpy as np
import pytest
from PIL import Image

from conftest import tiny_values
from mivid.cli import main
from mivid.engine import build_config, dump_config, interpolate, train
from mivid.engine.infer import parse_mask_spec
from mivid.engine.train import CHECKPOINT_NAME
from mivid.errors import ConfigError


@pytest.fixture
def trained(toy_root, tmp_path):
    cfg = build_config(tiny_values(toy_root, tmp_path / "run"))
    train(cfg, max_steps=3)
    return tmp_path / "run" / CHECKPOINT_NAME


def context_dir(toy_root, dest, picks=(0, 6)):
    dest.mkdir()
    frames = sorted((toy_root / "seq_000").glob("*.png"))
    for i, k in enumerate(picks):
        shutil.copyfile(frames[k], dest / f"in_{i}.png")
    return dest


def test_parse_mask_spec():
    assert parse_mask_spec("0010100", 7).indices == [2, 4]
    assert parse_mask_spec("3", 7).indices == [3]
    assert parse_mask_spec("2,4", 7).indices == [2, 4]
    with pytest.raises(ConfigError):
        parse_mask_spec("0", 7)
    with pytest.raises(ConfigError):
        parse_mask_spec("a,b", 7)


def test_interpolate_pair(trained, toy_root, tmp_path):
    src = context_dir(toy_root, tmp_path / "ctx")
    manifest = interpolate(trained, src, tmp_path / "out", seed=0)
    outs = manifest["outputs"]
    assert [o["synthesized"] for o in outs] == [False, True, False]
    assert (tmp_path / "out" / "manifest.json").exists()
    assert open(outs[0]["path"], "rb").read() == (src / "in_0.png").read_bytes()
    assert open(outs[2]["path"], "rb").read() == (src / "in_1.png").read_bytes()
    mid = np.asarray(Image.open(outs[1]["path"]))
    assert mid.shape == (16, 16)


def test_interpolate_is_seeded(trained, toy_root, tmp_path):
    src = context_dir(toy_root, tmp_path / "ctx")
    a = interpolate(trained, src, tmp_path / "a", sigma_mode="posterior", seed=5)
    b = interpolate(trained, src, tmp_path / "b", sigma_mode="posterior", seed=5)
    for oa, ob in zip(a["outputs"], b["outputs"]):
        assert open(oa["path"], "rb").read() == open(ob["path"], "rb").read()


def test_interpolate_with_mask_and_resize(trained, toy_root, tmp_path, caplog):
    src = tmp_path / "seg"
    src.mkdir()
    for p in sorted((toy_root / "seq_001").glob("*.png")):
        Image.open(p).resize((32, 32)).save(src / p.name)
    manifest = interpolate(trained, src, tmp_path / "out", mask="0001000")
    assert manifest["mask"] == [0, 0, 0, 1, 0, 0, 0]
    assert "resizing" in caplog.text
    assert manifest["resolution"] == [16, 16]


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["make-toy-data", "--out", str(data), "--n", "4", "--frames", "7"]) == 0
    cfg_path = tmp_path / "toy.cfg"
    cfg_path.write_text(dump_config(build_config(tiny_values(data, tmp_path / "run", **{"train.epochs": 2}))))
    assert main(["train", "--config", str(cfg_path)]) == 0
    ckpt = tmp_path / "run" / CHECKPOINT_NAME
    assert ckpt.exists()

    ctx = tmp_path / "ctx"
    ctx.mkdir()
    for i, name in enumerate(("frame_00.png", "frame_06.png")):
        shutil.copyfile(data / "seq_000" / name, ctx / f"{i}.png")
    assert main(["interpolate", "--checkpoint", str(ckpt), "--input", str(ctx), "--out", str(tmp_path / "pred" / "seq_000"),
                 "--n-between", "2"]) == 0
    manifest = json.loads((tmp_path / "pred" / "seq_000" / "manifest.json").read_text())
    assert sum(o["synthesized"] for o in manifest["outputs"]) == 2

    gt = tmp_path / "gt" / "seq_000"
    gt.mkdir(parents=True)
    for k, name in enumerate(("frame_00.png", "frame_02.png", "frame_04.png", "frame_06.png")):
        shutil.copyfile(data / "seq_000" / name, gt / f"frame_{k:02d}.png")
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--out", str(tmp_path / "m.csv")]) == 0
    assert (tmp_path / "m.csv").read_text().startswith("sequence,frame,psnr_db,ssim,lpips")

    assert main(["mask-demo", "--config", str(cfg_path), "--out", str(tmp_path / "masks.png")]) == 0
    assert Image.open(tmp_path / "masks.png").size == (7 * 16, 8 * 16)
    assert main(["plot", "--history", str(ckpt), "--out", str(tmp_path / "loss.png")]) == 0
    assert main(["plot", "--history", str(tmp_path / "run" / "train_log.csv"), "--out", str(tmp_path / "loss2.png")]) == 0
    assert (tmp_path / "loss2.png").stat().st_size > 0


def test_cli_reports_errors(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert "config file not found" in capsys.readouterr().err
