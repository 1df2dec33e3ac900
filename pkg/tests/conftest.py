import numpy as np
import pytest

from hdrvox import oracle
from hdrvox.dataset import Dataset

TINY_SCENE = """\
bounds = -1 -1 -1 1 1 1
resolution = 16 16 16
background_density = 0
primitive = box center=0 0 0.6 size=2 2 0.4 emission=0.05 0.04 0.06 density=40 ramp=x:4
primitive = sphere center=0 0 0 size=0.45 emission=0.4 0.15 0.05 density=6
"""


def make_tiny(root, profile="varying", n_views=6, size=12, seed=0, scale=1.0):
    scene, grid = oracle.build_scene(TINY_SCENE, seed)
    rig = oracle.make_rig(scene, n_views, size, seed)
    prof = oracle.default_profile(n_views, profile)
    if scale != 1.0:
        prof = oracle.GTToneProfile(prof.wb / scale, prof.gamma, prof.ev)
        from hdrvox.field import SH_C0

        em = grid.data[:, 0:27:9] * SH_C0 + grid.color_offset
        grid.data[:, 0:27:9] = (scale * em - grid.color_offset) / SH_C0
    oracle.render_gt_dataset(scene, grid, rig, prof, root, test_views=[1], seed=seed)
    return Dataset.load(root)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    make_tiny(root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)
