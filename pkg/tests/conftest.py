import numpy as np
import pytest

from wxdiff.datapipe import load_dataset
from wxdiff.procsim import DatasetConfig, SceneSpec, emit_dataset, render_clear
from wxdiff.training import StagePlan, train_stage


@pytest.fixture(scope="session")
def small_scene():
    """One shared 32x32x8 scene; rendering is pure, safe to share."""
    spec = SceneSpec(seed=7, H=32, W=32, L=8)
    video, meta = render_clear(spec)
    return spec, video, meta


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro_data(tmp_path_factory):
    """A small on-disk dataset shared by training/autolabel/cli tests."""
    root = tmp_path_factory.mktemp("micro_data")
    emit_dataset(DatasetConfig(out_dir=str(root), n_scenes=10, n_generation_groups=2,
                               H=32, W=32, L=8, base_seed=77))
    return root


@pytest.fixture(scope="session")
def micro_datasets(micro_data):
    sim = load_dataset(micro_data / "manifest.json", splits=("train", "val"),
                       sources=("simulation",))
    gen = load_dataset(micro_data / "manifest.json", splits=("train", "val"),
                       sources=("generation",))
    return {"simulation": sim, "generation": gen}


def _micro_plan(stage, steps=12, seed=5):
    return StagePlan(stage=stage, steps=steps, lr=1e-3, batch_size=2,
                     frame_lengths=(1, 4), resolutions=(32,),
                     source_weights={"simulation": 0.8, "generation": 0.2},
                     seed=seed, checkpoint_every=0)


@pytest.fixture(scope="session")
def removal_ckpt(tmp_path_factory, micro_datasets):
    """A briefly trained removal checkpoint (plumbing tests, not quality)."""
    out = tmp_path_factory.mktemp("rem_ckpt")
    ck = train_stage(_micro_plan("removal_base"), micro_datasets, out)
    return ck


@pytest.fixture(scope="session")
def synthesis_ckpt(tmp_path_factory, micro_datasets):
    out = tmp_path_factory.mktemp("syn_ckpt")
    ck = train_stage(_micro_plan("synthesis_base"), micro_datasets, out)
    return ck
