import numpy as np
import pytest
import torch

from ali.datagen import SceneConfig, make_dataset
from ali.model import ModelConfig
from ali.training import SceneArrays

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture(scope="session")
def tiny_scene_cfg():
    return SceneConfig(height=32, width=32)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory, tiny_scene_cfg):
    root = tmp_path_factory.mktemp("tiny") / "train"
    return make_dataset(4, 4, 1, root, tiny_scene_cfg)


@pytest.fixture(scope="session")
def tiny_arrays(tiny_manifest):
    return SceneArrays.from_manifest(tiny_manifest)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(image_size=32, encoder_channels=(4, 8, 8), code_dim=4, base_decoder_width=8,
                       diffusion_width=8, diffusion_cond_channels=4, T=10, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMOKE_RECIPE = (
    ["gen-data"],
    ["pretrain-prior", "--kind", "recon"],
    ["train", "--stage", "0"],
    ["train", "--stage", "1"],
    ["train", "--stage", "2"],
    ["zoo"],
    ["train", "--stage", "3"],
    ["eval", "--protocol", "in"],
    ["eval", "--protocol", "cross"],
    ["eval", "--protocol", "in", "--model", "stage0"],
    ["relight", "--content", "{img0}", "--lighting", "{img1}", "--steps", "3"],
    ["interp", "--content", "{img0}", "--light-a", "{img1}", "--light-b", "{img2}", "--n-steps", "3", "--steps", "3"],
)


def run_smoke(out, seed=0):
    """Replay the smoke recipe through the CLI; returns {relative path: sha256}
    over every artifact recorded in the run manifests."""
    import json
    from pathlib import Path

    from ali.cli import run

    out = Path(out)
    fill = {f"img{i}": str(out / "data" / "test" / "test-0000" / f"L{i:02d}.png") for i in range(3)}
    for step in SMOKE_RECIPE:
        argv = [a.format(**fill) for a in step] + ["--preset", "smoke", "--seed", str(seed), "--out", str(out)]
        code = run(argv)
        if code != 0:
            raise AssertionError(f"smoke step {step} exited {code}")
    digests = {}
    for manifest in sorted((out / "runs").glob("*/artifacts.json")):
        digests.update(json.loads(manifest.read_text())["artifacts"])
    return digests


@pytest.fixture(scope="session")
def smoke_digests(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke_a")
    return out, run_smoke(out)
