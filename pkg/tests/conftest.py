import pytest
import torch

from mivid.videodata import make_toy_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def toy_root(tmp_path):
    root = tmp_path / "toy"
    make_toy_dataset(root, 8, 7, 16, 16, seed=42)
    return root


def tiny_values(root, out_dir, **over):
    values = {
        "data.root": str(root), "data.resize": (16, 16), "data.channels": 1, "data.split": "all",
        "model.base_channels": 4, "model.levels": 2, "model.heads": 2, "model.time_embed_dim": 8,
        "diffusion.T_d": 20, "diffusion.kind": "cosine",
        "train.epochs": 10, "train.batch_size": 4, "train.lr": 1e-3, "train.checkpoint_every": 5,
        "train.out_dir": str(out_dir),
    }
    values.update(over)
    return values


@pytest.fixture
def tiny_cfg(toy_root, tmp_path):
    from mivid.engine.config import build_config

    return build_config(tiny_values(toy_root, tmp_path / "run"))


def pytest_terminal_summary(terminalreporter):
    from _oracles import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
