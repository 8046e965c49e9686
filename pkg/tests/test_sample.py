import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import pdist

from rainsplat.core import GridField, GridSpec
from rainsplat.exceptions import DataError
from rainsplat.sample import (RainfallAwareSampler, SamplingConfig, draw_points, gradient_magnitude,
                              mixture_components, points_to_array, read_points, sampling_distribution,
                              support_mask, write_points)


def _field(vals, h=1.0):
    vals = np.asarray(vals, dtype=float)
    return GridField(GridSpec(0, 0, h, *vals.shape), vals)


def test_config_weights_must_sum_to_one():
    with pytest.raises(DataError):
        SamplingConfig(w_grad=0.5, w_uniform=0.5, w_heavy=0.5)
    with pytest.raises(DataError):
        SamplingConfig(temperature=0.0)
    with pytest.raises(DataError):
        SamplingConfig(w_grad=-0.1, w_uniform=0.7, w_heavy=0.4)


# --- support mask -----------------------------------------------------------------


def test_support_mask_example():
    f = _field([[0, 0.05, 0.2, 1.0]])
    assert support_mask(f, 0.1).tolist() == [[False, False, True, True]]
    assert not support_mask(_field(np.zeros((3, 3))), 0.1).any()


def test_support_mask_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    vals = rng.gamma(0.5, 0.5, (9, 7))
    vals[2, 3] = np.nan
    m = support_mask(_field(vals), 0.1)
    for (r, c), v in np.ndenumerate(vals):
        assert m[r, c] == (not np.isnan(v) and v > 0.1)


# --- gradient ---------------------------------------------------------------------------


def _stencil_oracle(f, h):
    # independent per-cell loop
    rows, cols = f.shape
    out = np.zeros_like(f)
    for r in range(rows):
        for c in range(cols):
            if cols == 1:
                gx = 0.0
            elif c == 0:
                gx = (f[r, 1] - f[r, 0]) / h
            elif c == cols - 1:
                gx = (f[r, c] - f[r, c - 1]) / h
            else:
                gx = (f[r, c + 1] - f[r, c - 1]) / (2 * h)
            if rows == 1:
                gy = 0.0
            elif r == 0:
                gy = (f[1, c] - f[0, c]) / h
            elif r == rows - 1:
                gy = (f[r, c] - f[r - 1, c]) / h
            else:
                gy = (f[r + 1, c] - f[r - 1, c]) / (2 * h)
            out[r, c] = np.hypot(gx, gy)
    return out


def test_gradient_constant_and_ramp():
    assert np.all(gradient_magnitude(_field(np.full((5, 6), 3.3))).values == 0)
    h = 0.5
    X = np.arange(8) * h
    ramp = np.tile(3 * X, (6, 1))
    g = gradient_magnitude(_field(ramp, h)).values
    np.testing.assert_allclose(g[1:-1, 1:-1], 3.0, rtol=1e-12)


def test_gradient_matches_stencil_oracle():
    rng = np.random.default_rng(1)
    f = rng.random((8, 8)) * 5
    np.testing.assert_allclose(gradient_magnitude(_field(f, 2.0)).values, _stencil_oracle(f, 2.0), rtol=1e-13)


def test_gradient_missing_neighbour_uses_center():
    f = np.arange(9, dtype=float).reshape(3, 3)
    f[1, 2] = np.nan
    g = gradient_magnitude(_field(f)).values
    assert np.isnan(g[1, 2])
    # cell (1,1): gx = (f[1,1] - f[1,0]) / 2 with the missing right neighbour replaced by f[1,1]
    gx = (4.0 - 3.0) / 2
    gy = (7.0 - 1.0) / 2
    assert g[1, 1] == pytest.approx(np.hypot(gx, gy))


# --- distribution -------------------------------------------------------------------------


def test_uniform_term_example():
    vals = np.zeros((4, 4))
    vals[1:3, 1:3] = 2.0
    cfg = SamplingConfig(w_grad=0, w_uniform=1, w_heavy=0)
    p = sampling_distribution(_field(vals), cfg)
    np.testing.assert_allclose(p[1:3, 1:3], 0.25, rtol=1e-7)
    assert np.all(p[vals == 0] == 0)


def test_heavy_term_constant_field():
    cfg = SamplingConfig(w_grad=0, w_uniform=0, w_heavy=1)
    p = sampling_distribution(_field(np.full((3, 5), 7.0)), cfg)
    np.testing.assert_allclose(p, 1 / 15, rtol=1e-14)


def test_three_by_three_hand_oracle():
    # direct evaluation of the mixture formula, written out cell by cell
    vals = np.array([[0.0, 0.5, 0.05], [2.0, 4.0, 1.0], [0.0, 0.3, 0.2]])
    f = _field(vals)
    tau, T, eps = 0.1, 1.0, 1e-8
    mask = vals > tau
    g = _stencil_oracle(vals, 1.0)
    G = np.where(mask, g, 0) / (np.sum(np.where(mask, g, 0)) + eps)
    U = mask / (mask.sum() + eps)
    e = np.exp(vals / T)
    H = e / e.sum()
    P = 0.3 * G + 0.3 * U + 0.4 * H
    P = P / P.sum()
    cfg = SamplingConfig(tau=tau, temperature=T, epsilon=eps)
    np.testing.assert_allclose(sampling_distribution(f, cfg), P, rtol=0, atol=1e-10)


def test_empty_mask_heavy_carries_mass():
    f = _field(np.full((3, 3), 0.05))
    edge, uni, heavy = mixture_components(f, SamplingConfig())
    assert edge.sum() == 0 and uni.sum() == 0
    np.testing.assert_allclose(sampling_distribution(f, SamplingConfig()), 1 / 9)


def test_heavy_mask_switch():
    vals = np.array([[0.0, 0.0], [5.0, 0.0]])
    _, _, unmasked = mixture_components(_field(vals), SamplingConfig())
    _, _, masked = mixture_components(_field(vals), SamplingConfig(mask_heavy=True))
    assert unmasked[0, 0] > 0
    assert masked.tolist() == [[0.0, 0.0], [1.0, 0.0]]


def test_softmax_overflow_safe():
    p = sampling_distribution(_field([[1e4, 0.0], [5e3, 1.0]]), SamplingConfig())
    assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0, abs=1e-12)


def test_rejects_missing_values():
    with pytest.raises(DataError):
        sampling_distribution(_field([[1.0, np.nan]]), SamplingConfig())


def test_uniform_over_grid_with_negative_infinite_tau():
    cfg = SamplingConfig(tau=-np.inf, w_grad=0, w_uniform=1, w_heavy=0)
    p = sampling_distribution(_field(np.random.default_rng(0).random((4, 6))), cfg)
    np.testing.assert_allclose(p, 1 / 24, rtol=1e-7)


def test_heavy_term_flattens_with_temperature():
    f = _field(np.random.default_rng(2).gamma(1.0, 3.0, (12, 12)))
    tv = []
    for T in (1, 10, 100):
        _, _, h = mixture_components(f, SamplingConfig(temperature=T))
        tv.append(0.5 * np.abs(h - 1 / h.size).sum())
    assert tv[0] > tv[1] > tv[2]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.floats(0, 50, allow_nan=False)),
       st.floats(0, 1), st.floats(0, 1), st.floats(0.05, 20))
def test_distribution_is_probability(vals, a, b, T):
    a, b = min(a, 1.0), min(b, 1.0 - min(a, 1.0))
    cfg = SamplingConfig(w_grad=a, w_uniform=b, w_heavy=1.0 - a - b, temperature=T)
    p = sampling_distribution(_field(vals), cfg)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9
    edge, uni, _ = mixture_components(_field(vals), cfg)
    outside = ~support_mask(_field(vals), cfg.tau)
    assert np.all(edge[outside] == 0) and np.all(uni[outside] == 0)


# --- drawing ---------------------------------------------------------------------------------


def test_single_point_on_concentrated_mass():
    vals = np.arange(12, dtype=float).reshape(3, 4)
    f = GridField(GridSpec(10, 20, 2.0, 3, 4), vals)
    p = np.zeros((3, 4))
    p[2, 1] = 1.0
    pts = draw_points(p, f, SamplingConfig(k_points=1))
    assert len(pts) == 1
    assert (pts[0].x, pts[0].y, pts[0].value, pts[0].prob) == (12.0, 24.0, 9.0, 1.0)


def test_draw_is_deterministic():
    f = _field(np.random.default_rng(3).gamma(1, 2, (32, 32)))
    cfg = SamplingConfig(k_points=100, seed=7)
    p = sampling_distribution(f, cfg)
    a = points_to_array(draw_points(p, f, cfg))
    b = points_to_array(draw_points(p, f, cfg))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("radius", [0.0, 1.0, 1.5, 2.5, 4.0])
def test_nms_spacing(radius):
    f = _field(np.random.default_rng(4).gamma(1, 2, (40, 40)))
    cfg = SamplingConfig(k_points=200, nms_radius=radius, seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pts = draw_points(sampling_distribution(f, cfg), f, cfg)
    xy = points_to_array(pts)[:, :2]
    d = pdist(xy)
    assert d.min() >= max(radius, 1.0)


def test_truncated_draw_warns():
    f = _field(np.ones((4, 4)))
    cfg = SamplingConfig(k_points=50, nms_radius=2.0)
    with pytest.warns(RuntimeWarning, match="only"):
        pts = draw_points(sampling_distribution(f, cfg), f, cfg)
    assert pts.truncated
    assert 0 < len(pts) < 50


def test_points_carry_field_values():
    vals = np.random.default_rng(5).gamma(1, 2, (20, 20))
    f = _field(vals)
    cfg = SamplingConfig(k_points=40)
    for p in draw_points(sampling_distribution(f, cfg), f, cfg):
        assert p.value == vals[int(p.y), int(p.x)]


def test_monte_carlo_frequencies():
    # 10^6 single-point draws should reproduce the probability grid
    rng = np.random.default_rng(6)
    prob = rng.random((16, 16)) ** 2
    prob /= prob.sum()
    f = _field(np.zeros((16, 16)))
    cfg = SamplingConfig(k_points=1, nms_radius=0.0)
    gen = np.random.default_rng(7)
    n = 1_000_000
    counts = np.zeros(256)
    for _ in range(n):
        p = draw_points(prob, f, cfg, rng=gen)[0]
        counts[int(p.y) * 16 + int(p.x)] += 1
    tv = 0.5 * np.abs(counts / n - prob.ravel()).sum()
    assert tv < 0.01


def test_points_file_roundtrip(tmp_path):
    f = _field(np.random.default_rng(8).gamma(1, 2, (10, 10)))
    cfg = SamplingConfig(k_points=15)
    pts = draw_points(sampling_distribution(f, cfg), f, cfg)
    write_points(pts, tmp_path / "p.csv")
    assert read_points(tmp_path / "p.csv") == list(pts)


def test_sampler_estimator():
    f = _field(np.random.default_rng(9).gamma(1, 2, (16, 16)))
    s = RainfallAwareSampler(k_points=10, seed=3)
    assert s.get_params()["k_points"] == 10
    pts = s.fit_sample(f)
    cfg = SamplingConfig(k_points=10, seed=3)
    assert list(pts) == list(draw_points(sampling_distribution(f, cfg), f, cfg))
