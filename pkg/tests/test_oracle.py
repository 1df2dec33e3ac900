import math

import numpy as np
import pytest

from hdrvox import oracle
from hdrvox.dataset import Dataset
from hdrvox.field import SIGMA, read_grid
from hdrvox.imageio import read_png
from hdrvox.metrics import PSNR_CAP
from hdrvox.render import render_hdr
from hdrvox.tonemap import ToneMapParams

BLOB = """\
bounds = -1 -1 -1 1 1 1
resolution = 16 16 16
background_density = 0.5
primitive = sphere center=0 0 0 size=0.5 emission=0.2 0.1 0.05 density=20
"""


def test_sphere_inclusion():
    scene, grid = oracle.build_scene(BLOB)
    assert grid.data[grid.vertex_index(8, 8, 8), SIGMA] == 20.0
    assert grid.data[grid.vertex_index(0, 0, 0), SIGMA] == 0.5


def test_build_scene_is_deterministic():
    a = oracle.build_scene(BLOB, seed=3)[1]
    b = oracle.build_scene(BLOB, seed=3)[1]
    assert a.data.tobytes() == b.data.tobytes()


def test_sphere_volume_count():
    text = BLOB.replace("16 16 16", "64 64 64")
    _, grid = oracle.build_scene(text)
    inside = np.count_nonzero(grid.data[:, SIGMA] == 20.0)
    spacing = 2.0 / 64
    expected = 4 / 3 * math.pi * 0.5 ** 3 / spacing ** 3
    assert abs(inside - expected) / expected < 0.10


def test_last_primitive_wins_and_ramps():
    text = BLOB + "primitive = box center=0 0 0 size=0.2 0.2 0.2 emission=1 1 1 density=7 ramp=x:2\n"
    _, grid = oracle.build_scene(text)
    v = grid.vertex_index(8, 8, 8)
    assert grid.data[v, SIGMA] == 7.0
    from hdrvox.field import SH_C0

    # the ramp gain 2^(stops * s) is 1 at the box center
    assert grid.data[v, 0] * SH_C0 + grid.color_offset == pytest.approx(1.0)


def test_scene_spec_errors():
    with pytest.raises(oracle.SceneSpecError):
        oracle.parse_scene_spec("")
    with pytest.raises(oracle.SceneSpecError):
        oracle.parse_scene_spec("bounds = -1 -1 -1 1 1 1\n")
    with pytest.raises(oracle.SceneSpecError):
        oracle.parse_scene_spec(BLOB + "primitive = cone center=0 0 0 size=1 emission=1 1 1 density=1\n")
    with pytest.raises(oracle.SceneSpecError):
        oracle.parse_scene_spec(BLOB.replace("emission=0.2", "emission=-0.2"))
    with pytest.raises(oracle.SceneSpecError):
        oracle.parse_scene_spec(BLOB + "colour = red\n")


def test_default_scene_exercises_the_mask():
    scene = oracle.parse_scene_spec(oracle.DEFAULT_SCENE)
    em = np.concatenate([p.emission for p in scene.primitives])
    assert em.max() > 1.0 and em.min() < 0.05


def test_gt_tonemap_examples():
    assert oracle.apply_gt_tonemap(np.array([0.25]), [2.0], 3.0)[0] == pytest.approx(0.5 ** (1 / 3))
    assert 0.5 ** (1 / 3) == pytest.approx(0.7937, abs=1e-4)
    hdr = np.random.default_rng(0).uniform(0, 1.5, (4, 4, 3))
    assert np.array_equal(oracle.apply_gt_tonemap(hdr, np.ones(3), 1.0), np.clip(hdr, 0, 1))


def test_default_profile():
    p = oracle.default_profile(20)
    assert sorted(set(p.ev)) == [-3.0, 0.0, 3.0]
    assert np.all(p.wb > 0) and np.all(p.gamma == 3.0)
    # exposure is the wb scale: the +3EV view is 8x its 0EV neighbour up to the channel ratio
    assert p.wb[2].min() == pytest.approx(8.0) and p.wb[1].min() == pytest.approx(1.0)
    s = oracle.default_profile(5, "static")
    assert np.all(s.wb == 1.0)
    with pytest.raises(ValueError):
        oracle.GTToneProfile(np.ones((2, 3)), np.array([3.0, 0.0]), np.zeros(2))
    with pytest.raises(ValueError):
        oracle.default_profile(3, "wild")


def test_three_ev_scaling_is_exact_by_construction():
    p = oracle.default_profile(6)
    hdr = np.random.default_rng(1).uniform(0, 0.01, (3, 3, 3))
    # views 3 (-3EV, red gain) and 4 (0EV, green gain): the neutral blue channel is exactly 8x
    assert (p.wb[4, 2] * hdr[..., 2] == 8 * (p.wb[3, 2] * hdr[..., 2])).all()


def _small_dataset(tmp_path, kind="varying"):
    scene, grid = oracle.build_scene(BLOB)
    rig = oracle.make_rig(scene, 4, 12, seed=0)
    prof = oracle.default_profile(4, kind)
    oracle.render_gt_dataset(scene, grid, rig, prof, tmp_path, test_views=[1], seed=0)
    return scene, grid, rig, prof


def test_render_gt_dataset_layout_and_roundtrip(tmp_path):
    scene, grid, rig, prof = _small_dataset(tmp_path)
    ds = Dataset.load(tmp_path)
    assert [v.role for v in ds.views] == ["train", "test", "train", "train"]
    test = ds.views[1]
    assert test.train_mask[:, :6].all() and not test.train_mask[:, 6:].any()
    assert ds.views[0].train_mask.all()
    back = read_grid(tmp_path / "gt_grid.hvxf")
    for i, cam in enumerate(rig):
        ldr = oracle.apply_gt_tonemap(render_hdr(back, cam), prof.wb[i], prof.gamma[i])
        assert np.max(np.abs(read_png(tmp_path / f"images/v{i:03d}.png") - ldr)) <= 1 / 255 + 1e-6


def test_render_gt_dataset_errors(tmp_path):
    scene, grid = oracle.build_scene(BLOB)
    rig = oracle.make_rig(scene, 2, 8)
    with pytest.raises(ValueError):
        oracle.render_gt_dataset(scene, grid, rig[:1], oracle.default_profile(1), tmp_path)
    with pytest.raises(ValueError):
        oracle.render_gt_dataset(scene, grid, rig, oracle.default_profile(3), tmp_path)


def test_synthesis_is_byte_stable(tmp_path):
    _small_dataset(tmp_path / "a")
    _small_dataset(tmp_path / "b")
    assert oracle.directory_checksum(tmp_path / "a") == oracle.directory_checksum(tmp_path / "b")


def test_gt_compare_self_and_quotient(tmp_path):
    _, grid, _, prof = _small_dataset(tmp_path)
    ds = Dataset.load(tmp_path)
    gt_grid, profile, step = oracle.load_gt(tmp_path)
    gt_params = [ToneMapParams(wb=profile.wb[i], crf=np.tile(profile.crf(i), (3, 1)))
                 for i in range(4)]
    rep = oracle.gt_compare(gt_grid, gt_params, 0, ds, profile, step)
    assert rep.max_wb_error == 0.0 and rep.max_crf_rmse == 0.0
    assert rep.min_hdr_psnr == PSNR_CAP
    # the ambiguity quotient: wb x2 and radiance /2 is the same solution
    doubled = [ToneMapParams(wb=2 * p.wb, crf=p.crf) for p in gt_params]
    scaled = _scaled_radiance(gt_grid, 0.5)
    rep = oracle.gt_compare(scaled, doubled, 0, ds, profile, step)
    assert rep.max_wb_error < 1e-12 and rep.min_hdr_psnr == PSNR_CAP
    with pytest.raises(ValueError):
        oracle.gt_compare(gt_grid, gt_params[:3], 0, ds, profile, step)


def _scaled_radiance(grid, s):
    """DC-only GT grid with every emission multiplied by s."""
    from hdrvox.field import SH_C0

    g = grid.copy()
    em = g.data[:, 0:27:9] * SH_C0 + g.color_offset
    g.data[:, 0:27:9] = (s * em - g.color_offset) / SH_C0
    return g


def test_mask_fraction():
    ldr = np.full((4, 4, 3), 0.5)
    assert oracle.mask_fraction(ldr) == 0.0
    ldr[0] = 1.0
    assert oracle.mask_fraction(ldr) == 0.25


@pytest.mark.slow
def test_default_dataset_mask_band(tmp_path):
    oracle.synthesize(tmp_path)
    ds = Dataset.load(tmp_path)
    fractions = [oracle.mask_fraction(v.ldr) for v in ds.views]
    assert min(fractions) > 0.0 and max(fractions) < 0.5, fractions
