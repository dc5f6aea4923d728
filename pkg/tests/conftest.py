import pytest
import torch

from posetransfer.losses import LossWeights
from posetransfer.toy_data import synth_toy_dataset
from posetransfer.trainer import TrainConfig

torch.set_num_threads(1)

# filled in by tests/test_acceptance.py; printed after the run so the
# per-criterion verdict survives pytest's output capture
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, desc = ACCEPTANCE_RESULTS[n]
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{verdict}] criterion {n:02d}: {desc}")


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """Standard toy dataset: 4 identities x 3 poses at 128x88."""
    root = tmp_path_factory.mktemp("toyds")
    synth_toy_dataset(root, n_identities=4, poses_per_identity=3, seed=7,
                      image_size=(128, 88))
    return root


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """Small/fast dataset: 3 identities x 2 poses at 64x48."""
    root = tmp_path_factory.mktemp("toyds_small")
    synth_toy_dataset(root, n_identities=3, poses_per_identity=2, seed=3,
                      image_size=(64, 48))
    return root


def make_tiny_config(data_root, out_dir, **overrides) -> TrainConfig:
    """Smallest networks that still exercise every code path."""
    base = dict(
        data_root=str(data_root), out_dir=str(out_dir),
        epochs=4, decay_start_epoch=1, lr0=2e-4,
        batch_size=2, seed=0, checkpoint_every=100,
        image_size=(64, 48),
        base_channels=8, num_blocks=2,
        code_length=16, stage_channels=(16, 12, 8), num_res_blocks=1,
        style_channels=(8, 12), disc_base_channels=8, disc_layers=2,
        weights=LossWeights(),
        face_stage_channels=(16, 12, 8), face_style_channels=(8, 12),
        face_res_blocks=1, face_code_length=16,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def tiny_config_factory():
    return make_tiny_config
