import numpy as np
import pytest

from handpose.data_io import SynthDatasetConfig, make_synth_index
from handpose.geometry import CameraIntrinsics

# Small-frame camera used by most synthetic fixtures: principal point at the
# frame center, same focal as the dataset convention.
SMALL_INTR = CameraIntrinsics(fx=241.42, fy=241.42, cx=56.0, cy=42.0)


def small_synth_cfg(**kw) -> SynthDatasetConfig:
    base = dict(width=112, height=84, depth=780.0, depth_jitter=35.0, noise=0.0)
    base.update(kw)
    return SynthDatasetConfig(**base)


@pytest.fixture(scope="session")
def small_index():
    """20 noise-free hands, at least one stretched finger each."""
    return make_synth_index(20, 11, small_synth_cfg(min_stretched=1), intrinsics=SMALL_INTR)


@pytest.fixture(scope="session")
def noisy_index():
    return make_synth_index(20, 12, small_synth_cfg(noise=1.0, min_stretched=1),
                            intrinsics=SMALL_INTR)


def random_depth_image(rng, w=24, h=18, background=10000.0):
    from handpose.geometry import DepthImage

    depths = np.full((h, w), background, dtype=np.float32)
    fg = rng.random((h, w)) < 0.6
    depths[fg] = rng.uniform(200.0, 900.0, int(fg.sum())).astype(np.float32)
    return DepthImage(depths, background)
