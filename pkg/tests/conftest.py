import numpy as np
import pytest

from uasplat.config import OcclusionSettings, NetSettings, RunConfig, SceneSettings
from uasplat.synth import generate_sequence


def tiny_scene(**kw) -> SceneSettings:
    defaults = dict(width=32, height=32, frames=8, gt_per_bone=16, seed=7,
                    camera_distance=3.2, focal=40.0,
                    occlusion=OcclusionSettings(coverage=0.5, affected_fraction=0.75))
    defaults.update(kw)
    return SceneSettings(**defaults)


def tiny_train_config(mode="b", **kw) -> RunConfig:
    cfg = RunConfig()
    cfg.scene = tiny_scene()
    t = cfg.train
    t.mode = mode
    t.n_gaussians = 60
    t.total_iters = 12
    t.warmup_iters = 4
    t.frame_interval = 1
    t.log_interval = 2
    t.net = NetSettings(depth=2, width=32, skip_layers=(1,), l_xyz=3, l_t=2)
    for k, v in kw.items():
        setattr(t, k, v)
    return cfg


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_sequence(tiny_scene())


@pytest.fixture(scope="session")
def clean_dataset():
    return generate_sequence(tiny_scene(occlusion=OcclusionSettings(coverage=0.0), seed=9))


def finite_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function over every coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
