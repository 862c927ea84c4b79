import numpy as np
import pytest
import torch

from iboot.config import RunConfig
from iboot.dataset import make_synthetic_dataset


def tiny_config(tmp_path, **overrides) -> RunConfig:
    """20-video, 2-epoch setup that trains in a few seconds."""
    cfg = RunConfig()
    cfg.data.num_classes = 5
    cfg.data.videos_per_class = 4
    cfg.data.val_fraction = 0.0
    cfg.optim.batch_size = 10
    cfg.optim.total_epochs = 2
    cfg.optim.warmup_epochs = 1
    cfg.encoder.widths = (8, 8, 16)
    cfg.encoder.proj_hidden = 32
    cfg.encoder.proj_dim = 16
    cfg.encoder.pred_hidden = 32
    cfg.loss.targets[0].output_dim = 16
    cfg.output_dir = str(tmp_path / "run")
    for key, value in overrides.items():
        section, field = key.split("__")
        setattr(getattr(cfg, section), field, value)
    return cfg.validate()


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_config(tmp_path)


@pytest.fixture(scope="session")
def small_videos():
    return make_synthetic_dataset(num_classes=3, videos_per_class=2, raw_frames=64, spatial_size=32, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, text in sorted(RESULTS):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {num:2d}: {text}")
