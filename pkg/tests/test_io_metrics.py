import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from hdrvox.dataset import Dataset, DatasetManifest, ViewEntry
from hdrvox.imageio import read_pfm, read_png, write_pfm, write_png
from hdrvox.metrics import (
    PSNR_CAP, crf_rmse, half_masks, masked_psnr, resample_curve, scale_aligned_psnr,
    wb_relative_error,
)
from hdrvox.render import Camera, look_at

FIXTURES = Path(__file__).parent / "fixtures"
# brute force, 40-digit arithmetic: identity vs x^(1/2.2) at 256 knots
CRF_RMSE_GAMMA22 = 0.2053296103592664


def independent_pfm_read(path):
    """Minimal reader written against the format description, not the codec."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    scale = float(parts[2])
    fmt = ("<" if scale < 0 else ">") + f"{w * h * 3}f"
    flat = struct.unpack(fmt, parts[3])
    rows = [flat[r * w * 3:(r + 1) * w * 3] for r in range(h)]
    return np.array(rows[::-1], dtype=np.float32).reshape(h, w, 3)


def test_png_roundtrip_examples(tmp_path):
    p = tmp_path / "a.png"
    img = np.zeros((3, 4, 3))
    img[0, 0] = 1.0
    write_png(p, img)
    back = read_png(p)
    assert np.array_equal(back, img)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_png_quantization_bound(seed):
    import tempfile

    rng = np.random.default_rng(seed)
    img = rng.uniform(-0.2, 1.2, (5, 7, 3))
    with tempfile.TemporaryDirectory() as d:
        write_png(Path(d) / "x.png", img)
        back = read_png(Path(d) / "x.png")
    assert np.max(np.abs(back - np.clip(img, 0, 1))) <= 1 / 510 + 1e-12


def test_png_errors(tmp_path):
    with pytest.raises(OSError):
        read_png(tmp_path / "missing.png")
    Image.fromarray(np.zeros((2, 2), np.uint8), "L").save(tmp_path / "grey.png")
    with pytest.raises(OSError):
        read_png(tmp_path / "grey.png")
    Image.fromarray(np.zeros((2, 2, 3), np.uint16).astype(np.uint8)).save(tmp_path / "ok.png")
    read_png(tmp_path / "ok.png")
    (tmp_path / "junk.png").write_bytes(b"not a png at all, no sir, definitely not")
    with pytest.raises(OSError):
        read_png(tmp_path / "junk.png")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_pfm_roundtrip_bit_exact(seed):
    import tempfile

    rng = np.random.default_rng(seed)
    img = (rng.standard_exponential((4, 3, 3)) * 5).astype(np.float32)
    img[0, 0, 0] = 8.0
    with tempfile.TemporaryDirectory() as d:
        write_pfm(Path(d) / "x.pfm", img)
        back = read_pfm(Path(d) / "x.pfm")
    assert back.dtype == np.float32 and np.array_equal(back, img)


def test_pfm_fixture_cross_implementation(tmp_path):
    expected = np.array([[[0.25, 1.5, 8.0], [0.0, 3.75, 0.125]]], dtype=np.float32)
    fixture = FIXTURES / "tiny_2x1.pfm"
    assert np.array_equal(read_pfm(fixture), expected)
    out = tmp_path / "w.pfm"
    write_pfm(out, expected)
    assert out.read_bytes() == fixture.read_bytes()
    assert np.array_equal(independent_pfm_read(out), expected)


def test_pfm_big_endian_and_row_order():
    img = read_pfm(FIXTURES / "tiny_1x2_be.pfm")
    # file stores the bottom row first
    assert np.array_equal(img[0, 0], [4, 5, 6]) and np.array_equal(img[1, 0], [1, 2, 3])


def test_pfm_errors(tmp_path):
    with pytest.raises(OSError):
        read_pfm(tmp_path / "none.pfm")
    bad = tmp_path / "bad.pfm"
    bad.write_bytes(b"Pf\n1 1\n-1.0\n" + bytes(4))
    with pytest.raises(OSError):
        read_pfm(bad)
    bad.write_bytes(b"PF\n2 2\n-1.0\n" + bytes(10))
    with pytest.raises(OSError):
        read_pfm(bad)
    bad.write_bytes(b"PF\nx y\n-1.0\n")
    with pytest.raises(OSError):
        read_pfm(bad)


def test_psnr_examples():
    rng = np.random.default_rng(0)
    x = rng.random((4, 6, 3))
    assert masked_psnr(x, x) == PSNR_CAP
    assert masked_psnr(x + 0.1, x) == pytest.approx(20.0)
    y = x.copy()
    y[:, :3] += 0.5
    assert masked_psnr(y, x, half_masks(4, 6)[1]) == PSNR_CAP
    with pytest.raises(ValueError):
        masked_psnr(x, x, np.zeros((4, 6), bool))


def test_half_masks_odd_width():
    left, right = half_masks(2, 5)
    assert left[0].tolist() == [True, True, False, False, False]
    assert right[0].tolist() == [False, False, False, True, True]
    left, right = half_masks(2, 4)
    assert (left | right).all() and not (left & right).any()


def test_scale_aligned_psnr():
    rng = np.random.default_rng(1)
    gt = rng.standard_exponential((8, 8, 3))
    psnr, s = scale_aligned_psnr(2 * gt, gt)
    assert psnr == PSNR_CAP and np.allclose(s, 0.5)
    assert scale_aligned_psnr(gt, gt)[0] == PSNR_CAP
    noisy = gt + rng.normal(0, 0.05, gt.shape)
    a = scale_aligned_psnr(noisy, gt)[0]
    b = scale_aligned_psnr(7.5 * noisy, gt)[0]
    assert a == pytest.approx(b, abs=1e-9)
    with pytest.raises(ValueError):
        scale_aligned_psnr(np.zeros_like(gt), gt)


def test_scale_aligned_psnr_noise_oracle():
    rng = np.random.default_rng(2)
    gt = rng.uniform(0.5, 1.5, (200, 200, 3))
    sd = 0.03
    pred = gt + rng.normal(0, sd, gt.shape)
    norm = np.percentile(gt, 99)
    analytic = -10 * np.log10(sd ** 2 / norm ** 2)
    assert scale_aligned_psnr(pred, gt)[0] == pytest.approx(analytic, abs=0.5)


def test_crf_rmse():
    k = np.linspace(0, 1, 256)
    assert crf_rmse(k, k) == 0.0
    off = k.copy()
    off[1:-1] += 0.01
    assert crf_rmse(k, off) == pytest.approx(0.01 * np.sqrt(254 / 256), abs=1e-12)
    assert crf_rmse(k, off) == pytest.approx(0.00996, abs=1e-5)
    assert crf_rmse(k, k ** (1 / 2.2)) == pytest.approx(CRF_RMSE_GAMMA22, abs=1e-12)
    assert np.allclose(resample_curve(np.linspace(0, 1, 11)), k)


def test_wb_relative_error():
    gt = np.array([[1.0, 1, 1], [2, 1, 0.5]])
    assert np.all(wb_relative_error(3 * gt, gt, 0) == 0)
    err = wb_relative_error(np.array([[1.0, 1, 1], [2.2, 1, 0.5]]), gt, 0)
    assert err[1, 0] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        wb_relative_error(gt[:1], gt, 0)


def _tiny_manifest(tmp_path, n=2):
    cam = Camera(4.0, 4.0, 2.0, 2.0, 4, 4, look_at([0, 0, -3], [0, 0, 0]))
    entries = []
    for i in range(n):
        write_png(tmp_path / f"v{i}.png", np.full((4, 4, 3), 0.2 * (i + 1)))
        entries.append(ViewEntry(f"v{i}", f"v{i}.png", cam, "train"))
    return DatasetManifest((np.full(3, -1.0), np.full(3, 1.0)), entries)


def test_manifest_roundtrip_and_load(tmp_path):
    m = _tiny_manifest(tmp_path)
    m.save(tmp_path / "manifest.json")
    d = json.loads((tmp_path / "manifest.json").read_text())
    assert d["schema"] == "hdrvox.manifest/1"
    ds = Dataset.load(tmp_path)
    assert [v.id for v in ds.views] == ["v0", "v1"]
    assert ds.views[1].ldr.shape == (4, 4, 3) and ds.views[1].train_mask.all()


def test_manifest_validation(tmp_path):
    m = _tiny_manifest(tmp_path)
    with pytest.raises(ValueError):
        DatasetManifest(m.bounds, [m.views[0], m.views[0]])
    bad = ViewEntry("x", "x.png", m.views[0].camera, "validation")
    with pytest.raises(ValueError):
        DatasetManifest(m.bounds, [bad])
    m.save(tmp_path / "manifest.json")
    (tmp_path / "v1.png").unlink()
    with pytest.raises(FileNotFoundError):
        Dataset.load(tmp_path)
    d = json.loads((tmp_path / "manifest.json").read_text())
    d["schema"] = "other/9"
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(ValueError):
        Dataset.load(tmp_path)
