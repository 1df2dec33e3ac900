import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hdrvox.tonemap import (
    NUM_KNOTS, ToneMapParams, apply_white_balance, edit_render, eval_crf, export_crf_csv,
    init_crf_identity, monotonicity_report, project_params, tonemap, tonemap_backward,
)

KNOTS = np.linspace(0, 1, NUM_KNOTS)


def random_params(rng, alpha=0.01):
    steps = rng.uniform(0.2, 1.8, (3, NUM_KNOTS - 1))
    crf = np.concatenate([np.zeros((3, 1)), np.cumsum(steps, axis=1)], axis=1)
    return ToneMapParams(wb=rng.uniform(0.3, 2.0, 3), crf=crf / crf[:, -1:], alpha=alpha)


def test_white_balance_examples():
    assert np.allclose(apply_white_balance([0.2, 0.4, 0.1], [2, 1, 0.5]), [0.4, 0.4, 0.05])
    assert np.array_equal(apply_white_balance([0.3, 0.1, 0.7], [1, 1, 1]), [0.3, 0.1, 0.7])
    with pytest.raises(ValueError):
        apply_white_balance([1, 1, 1], [1, 0, 1])


def test_identity_crf():
    c = init_crf_identity()
    assert c[0] == 0.0 and c[-1] == 1.0
    x = np.random.default_rng(0).uniform(0, 1, 500)
    assert np.max(np.abs(eval_crf(x, c) - x)) < 1e-12


def test_leak_branches():
    c = init_crf_identity()
    assert eval_crf(-0.5, c, 0.01) == pytest.approx(-0.005, abs=1e-15)
    assert eval_crf(4.0, c, 0.01) == pytest.approx(1.005, abs=1e-15)


def test_gamma_table_example():
    p = ToneMapParams(crf=np.tile(KNOTS ** (1 / 2.2), (3, 1)))
    out = tonemap(np.full(3, 0.25), p)
    assert np.all(np.abs(out - 0.25 ** (1 / 2.2)) <= 2e-3)
    assert 0.25 ** (1 / 2.2) == pytest.approx(0.5326, abs=1e-4)


def test_boundary_value():
    p = ToneMapParams(wb=np.full(3, 2.0))
    assert np.array_equal(tonemap(np.full(3, 0.5), p), np.ones(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_continuity_at_branch_points(seed):
    p = random_params(np.random.default_rng(seed))
    for c in range(3):
        for x0 in (0.0, 1.0):
            lo = eval_crf(x0 - 1e-12, p.crf[c], p.alpha)
            hi = eval_crf(x0 + 1e-12, p.crf[c], p.alpha)
            assert abs(lo - hi) < 1e-9
            assert eval_crf(x0, p.crf[c], p.alpha) == x0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_monotone_tables_give_monotone_curves(seed):
    p = random_params(np.random.default_rng(seed))
    x = np.linspace(-3, 5, 4001)
    for c in range(3):
        assert np.all(np.diff(eval_crf(x, p.crf[c], p.alpha)) >= 0)


@pytest.mark.parametrize("s", [0.5, 2.0, 10.0])
def test_scale_ambiguity_identity(s):
    rng = np.random.default_rng(int(s * 10))
    p = random_params(rng)
    i_h = rng.uniform(0, 1.5, (200, 3))
    q = ToneMapParams(wb=p.wb / s, crf=p.crf, alpha=p.alpha)
    a, b = tonemap(s * i_h, q), tonemap(i_h, p)
    if s in (0.5, 2.0):
        # power-of-two scaling is exact in binary floating point
        assert np.array_equal(a, b)
    else:
        # wb / s and s * I_h each round once; the product agrees to a few ulps
        assert np.max(np.abs(a - b)) <= 4 * np.finfo(float).eps


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    p = random_params(rng)
    i_h = rng.uniform(-0.2, 1.6, (30, 3))
    up = rng.normal(size=(30, 3))
    d_ih, d_wb, d_crf = tonemap_backward(i_h, p, up)
    h = 1e-7

    def f(ih=i_h, params=p):
        return float(np.sum(tonemap(ih, params) * up))

    for idx in [(0, 0), (5, 1), (17, 2), (29, 0)]:
        e = np.zeros_like(i_h)
        e[idx] = h
        assert (f(i_h + e) - f(i_h - e)) / (2 * h) == pytest.approx(d_ih[idx], rel=1e-4)
    for c in range(3):
        q = p.copy()
        q.wb[c] += h
        r = p.copy()
        r.wb[c] -= h
        assert (f(params=q) - f(params=r)) / (2 * h) == pytest.approx(d_wb[c], rel=1e-4)
    for c, k in [(0, 10), (1, 100), (2, 200), (0, 254)]:
        q = p.copy()
        q.crf[c, k] += h
        r = p.copy()
        r.crf[c, k] -= h
        num = (f(params=q) - f(params=r)) / (2 * h)
        assert num == pytest.approx(d_crf[c, k], rel=1e-4, abs=1e-10)


def test_backward_routing():
    p = ToneMapParams()
    _, _, d_crf = tonemap_backward(np.array([[10 / 255, 0.5, -0.3]]), p, np.ones((1, 3)))
    assert d_crf[0, 10] == 1.0 and d_crf[0].sum() == 1.0
    assert np.all(d_crf[2] == 0.0)
    d_ih, _, _ = tonemap_backward(np.array([[-0.3, -0.3, -0.3]]), p, np.ones((1, 3)))
    assert np.allclose(d_ih, 0.01)


def test_edit_render():
    p = ToneMapParams(wb=np.array([1.0, 2.0, 0.5]))
    same = edit_render(p, exposure_scale=1.0)
    assert np.array_equal(same.wb, p.wb) and np.array_equal(same.crf, p.crf)
    assert np.array_equal(edit_render(p, exposure_scale=2.0).wb, 2 * p.wb)
    assert np.array_equal(edit_render(p, wb_override=[1, 1, 1], exposure_scale=4.0).wb,
                          [4, 4, 4])
    other = np.tile(KNOTS ** 0.5, (3, 1))
    assert np.array_equal(edit_render(p, crf_override=other).crf, other)
    assert p.wb[1] == 2.0  # input untouched
    with pytest.raises(ValueError):
        edit_render(p, exposure_scale=0.0)


def test_params_invariants():
    with pytest.raises(ValueError):
        ToneMapParams(wb=np.array([1.0, -1.0, 1.0]))
    with pytest.raises(ValueError):
        ToneMapParams(alpha=0.0)
    p = ToneMapParams()
    p.wb[:] = [-1.0, 0.5, 2.0]
    p.crf[:, 0] = 0.3
    p.crf[:, -1] = 0.7
    project_params(p)
    assert p.wb[0] == 1e-6
    assert np.all(p.crf[:, 0] == 0.0) and np.all(p.crf[:, -1] == 1.0)


def test_monotonicity_report_and_csv(tmp_path):
    p = ToneMapParams()
    p.crf[1, 50] = 0.0
    assert monotonicity_report([p]) == [[0, 1, 0]]
    path = tmp_path / "crf.csv"
    export_crf_csv(path, [p, ToneMapParams()], ["a", "b"])
    lines = path.read_text().splitlines()
    assert lines[0] == "view,channel,knot,x,value"
    assert len(lines) == 1 + 2 * 3 * 256
