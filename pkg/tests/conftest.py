from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from gsdistill.camera import focal_from_fov, orbit_camera
from gsdistill.core import GaussianScene
from gsdistill.data import DatasetConfig
from gsdistill.decoder import DecoderConfig
from gsdistill.denoiser import DenoiserConfig
from gsdistill.pipeline import RunConfig, StageConfig

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.use_deterministic_algorithms(True)


def random_scene(rng: np.random.Generator, n: int, spread: float = 0.6) -> GaussianScene:
    return GaussianScene(
        rng.uniform(-spread, spread, (n, 3)),
        rng.uniform(np.log(0.05), np.log(0.3), (n, 3)),
        rng.normal(size=(n, 4)),
        rng.normal(size=n),
        rng.uniform(0, 1, (n, 3)),
    )


def cam_at(res: int, azimuth: float = 0.3, elevation: float = 0.2, radius: float = 3.0):
    return orbit_camera(azimuth, elevation, radius, focal_from_fov(res), res)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(root, **stage_steps):
    """A seconds-scale RunConfig: 4 objects of 6 views at 16px, N=2, one held out."""
    root = Path(root)
    shared = dict(views=2, resolution=16, patch=4, cond_patch=8, cond_dim=8)
    return RunConfig(
        dataset=DatasetConfig(object_count=4, views_per_object=6, input_views=2, resolution=16),
        eval_dataset=DatasetConfig(object_count=1, kind="eval", seed=1, input_views=2, resolution=16),
        decoder=DecoderConfig(trunk_layers=1, trunk_width=16, heads=2, **shared),
        denoiser=DenoiserConfig(layers=1, width=16, heads=2, T=10, **shared),
        stage_one=StageConfig(steps=stage_steps.get("one", 3), batch=2, lr=1e-3),
        denoiser_pretrain=StageConfig(steps=stage_steps.get("pre", 2), batch=2, lr=1e-3),
        stage_two=StageConfig(steps=stage_steps.get("two", 3), batch=2, lr=1e-3),
        holdout=1,
        heldout_draws=1,
        check_every=1,
        sample_steps=2,
        data_dir=str(root / "data"),
        eval_dir=str(root / "eval"),
        output_dir=str(root / "run"),
    )


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
