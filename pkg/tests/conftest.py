import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from unicp.dws import dws_calibrate
from unicp.edcw import SchedulerConfig
from unicp.model import ModelConfig, init_model
from unicp.runner import BaselineExecutor, denoise_run

PRESETS = {"E1": 0.025, "E2": 0.05, "E3": 0.075, "E4": 0.125, "E5": 0.175}

DESK = dict(num_blocks=6, model_dim=64, tokens_per_frame=64, num_frames=8,
            num_steps=30, seed=42)
TINY = dict(num_blocks=2, model_dim=16, tokens_per_frame=16, num_frames=2,
            num_steps=8, seed=7)


@pytest.fixture(scope="session")
def desk_cfg():
    return ModelConfig(**DESK)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture(scope="session")
def desk_model(desk_cfg):
    return init_model(desk_cfg)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return init_model(tiny_cfg)


@pytest.fixture(scope="session")
def desk_baseline(desk_cfg, desk_model):
    state, trace = denoise_run(desk_cfg, BaselineExecutor(desk_model))
    return state, trace


@pytest.fixture(scope="session")
def desk_calibrations(desk_cfg, desk_model):
    """One calibration per threshold preset; the expensive shared fixture."""
    out = {}
    for preset, delta in PRESETS.items():
        sched = SchedulerConfig(delta=delta, search_window=4)
        out[preset] = (sched, dws_calibrate(desk_model, desk_cfg, sched))
    return out


@pytest.fixture(scope="session")
def tiny_calibration(tiny_cfg, tiny_model):
    sched = SchedulerConfig(delta=0.075, search_window=4)
    return sched, dws_calibrate(tiny_model, tiny_cfg, sched)
