import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rainsplat.core import GaussianSet, GridField, GridSpec
from rainsplat.exceptions import DataError
from rainsplat.splat import (RenderConfig, render_dense, render_gradient, render_points,
                             render_selective, support_boxes)


def _one(mx=0.0, my=0.0, sx=1.0, sy=1.0, rho=0.0, alpha=2.0):
    return GaussianSet([mx], [my], [sx], [sy], [rho], [alpha])


def _random_set(rng, n, extent, smin=0.5, smax=4.0, amax=10.0):
    return GaussianSet(rng.uniform(0, extent, n), rng.uniform(0, extent, n), rng.uniform(smin, smax, n),
                       rng.uniform(smin, smax, n), rng.uniform(-0.9, 0.9, n), rng.uniform(0, amax, n))


def _scalar_oracle(g: GaussianSet, x: float, y: float) -> float:
    # textbook form: explicit 2x2 covariance inverse and a Python loop
    total = 0.0
    for i in range(len(g)):
        sx, sy, r = g.sigma_x[i], g.sigma_y[i], g.rho[i]
        cov = [[sx * sx, r * sx * sy], [r * sx * sy, sy * sy]]
        det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0]
        inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]]
        dx, dy = x - g.mu_x[i], y - g.mu_y[i]
        q = dx * (inv[0][0] * dx + inv[0][1] * dy) + dy * (inv[1][0] * dx + inv[1][1] * dy)
        total += g.alpha[i] * math.exp(-0.5 * q)
    return total


# --- point rendering --------------------------------------------------------------


def test_point_examples():
    g = _one()
    np.testing.assert_allclose(render_points(g, [(0, 0), (1, 0)]), [2.0, 2 * math.exp(-0.5)], rtol=1e-15)
    assert render_points(g, [(0, 0)])[0] == 2.0


def test_empty_set_renders_zero():
    assert np.all(render_points(GaussianSet.empty(), [(1, 2), (3, 4)]) == 0)
    f = render_dense(GaussianSet.empty(), GridSpec.unit(5))
    assert np.all(f.values == 0)
    assert np.all(render_selective(GaussianSet.empty(), GridSpec.unit(5)).values == 0)


def test_points_match_scalar_oracle():
    rng = np.random.default_rng(0)
    g = _random_set(rng, 2, 10.0)
    Q = rng.uniform(-2, 12, (10, 2))
    got = render_points(g, Q)
    want = [_scalar_oracle(g, x, y) for x, y in Q]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_linear_in_alpha():
    rng = np.random.default_rng(1)
    g = _random_set(rng, 20, 30.0)
    Q = rng.uniform(0, 30, (50, 2))
    base = render_points(g, Q)
    np.testing.assert_allclose(render_points(g.replace(alpha=3.7 * g.alpha), Q), 3.7 * base, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-500, 500), st.floats(-500, 500), st.integers(0, 2**31 - 1))
def test_translation_equivariance(ox, oy, seed):
    rng = np.random.default_rng(seed)
    g = _random_set(rng, 5, 20.0)
    Q = rng.uniform(0, 20, (12, 2))
    moved = g.replace(mu_x=g.mu_x + ox, mu_y=g.mu_y + oy)
    np.testing.assert_allclose(render_points(moved, Q + [ox, oy]), render_points(g, Q), rtol=1e-9, atol=1e-12)


def test_nonnegative_output():
    rng = np.random.default_rng(2)
    g = _random_set(rng, 30, 40.0)
    assert np.all(render_dense(g, GridSpec.unit(40)).values >= 0)


# --- dense ------------------------------------------------------------------------------


def test_dense_rotation_symmetry():
    spec = GridSpec.unit(21)
    f = render_dense(_one(10, 10, 3.0, 3.0, 0.0, 1.0), spec).values
    np.testing.assert_allclose(np.rot90(f), f, rtol=1e-14)


def test_dense_equals_points():
    rng = np.random.default_rng(3)
    spec = GridSpec(5.0, -3.0, 0.7, 64, 64)
    g = _random_set(rng, 40, 45.0)
    g = g.replace(mu_x=g.mu_x + 5.0, mu_y=g.mu_y - 3.0)
    X, Y = spec.cell_centers()
    pts = render_points(g, np.column_stack([X.ravel(), Y.ravel()]))
    np.testing.assert_array_equal(render_dense(g, spec).values.ravel(), pts)


def test_dense_threads_bitwise():
    rng = np.random.default_rng(4)
    g = _random_set(rng, 100, 64.0)
    a = render_dense(g, GridSpec.unit(64), threads=1).values
    b = render_dense(g, GridSpec.unit(64), threads=4).values
    assert a.tobytes() == b.tobytes()


# --- selective ---------------------------------------------------------------------------


def test_selective_within_tail_bound():
    rng = np.random.default_rng(5)
    g = _random_set(rng, 500, 128.0)
    spec = GridSpec.unit(128)
    d = np.abs(render_selective(g, spec).values - render_dense(g, spec).values)
    assert d.max() <= len(g) * g.alpha.max() * math.exp(-12.5)


def test_selective_infinite_cutoff_is_dense():
    rng = np.random.default_rng(6)
    g = _random_set(rng, 50, 32.0)
    spec = GridSpec.unit(32)
    sel = render_selective(g, spec, RenderConfig(cutoff_k=math.inf))
    assert sel.values.tobytes() == render_dense(g, spec).values.tobytes()


def test_selective_threads_bitwise():
    rng = np.random.default_rng(7)
    g = _random_set(rng, 3000, 256.0, smin=2, smax=8)
    spec = GridSpec.unit(256)
    a = render_selective(g, spec, RenderConfig(threads=1)).values
    b = render_selective(g, spec, RenderConfig(threads=3)).values
    assert a.tobytes() == b.tobytes()


def test_selective_fast_mode_close():
    rng = np.random.default_rng(7)
    g = _random_set(rng, 3000, 256.0, smin=2, smax=8)
    spec = GridSpec.unit(256)
    a = render_selective(g, spec, RenderConfig(threads=1)).values
    b = render_selective(g, spec, RenderConfig(threads=3, deterministic=False)).values
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_tiny_gaussian_touches_few_cells():
    spec = GridSpec.unit(1024)
    stats = {}
    render_selective(_one(500.3, 611.7, 0.5, 0.5, 0.0, 1.0), spec, stats=stats)
    assert stats["touched_cells"] <= (2 * 5 * 0.5 + 2) ** 2
    assert stats["touched_cells"] * 1000 < spec.size


def test_support_box_contains_ellipse():
    # every cell with q <= k^2 lies inside the box
    rng = np.random.default_rng(8)
    g = _random_set(rng, 30, 40.0, smin=0.3, smax=6)
    spec = GridSpec.unit(40)
    k = 2.0
    r0, r1, c0, c1 = support_boxes(g, spec, k)
    X, Y = spec.cell_centers()
    for i in range(len(g)):
        a = (X - g.mu_x[i]) / g.sigma_x[i]
        b = (Y - g.mu_y[i]) / g.sigma_y[i]
        q = (a * a - 2 * g.rho[i] * a * b + b * b) / (1 - g.rho[i] ** 2)
        rr, cc = np.nonzero(q <= k * k)
        assert np.all((rr >= r0[i]) & (rr <= r1[i]) & (cc >= c0[i]) & (cc <= c1[i]))


def test_invalid_scene_rejected():
    with pytest.raises(DataError):
        render_points(GaussianSet([0], [0], [1], [1], [1.0], [1]), [(0, 0)])


# --- gradient -------------------------------------------------------------------------------


def test_exact_fit_has_zero_loss_and_gradient():
    g = _random_set(np.random.default_rng(9), 4, 12.0)
    spec = GridSpec.unit(12)
    target = render_selective(g, spec)
    loss, grad = render_gradient(g, target)
    assert loss == 0.0
    assert np.all(grad.as_matrix() == 0)


def test_alpha_gradient_closed_form():
    spec = GridSpec.unit(3)
    g = _one(1.2, 0.9, 0.8, 1.1, 0.3, 1.5)
    obs = np.array([[0.2, 0.5, 0.1], [0.9, 1.0, 0.4], [0.0, 0.3, 0.6]])
    X, Y = spec.cell_centers()
    e = np.array([_scalar_oracle(g.replace(alpha=[1.0]), x, y) for x, y in zip(X.ravel(), Y.ravel())])
    resid = 1.5 * e - obs.ravel()
    want = 2.0 / 9.0 * np.sum(resid * e)
    loss, grad = render_gradient(g, GridField(spec, obs), RenderConfig(cutoff_k=math.inf))
    assert grad.d_alpha[0] == pytest.approx(want, rel=1e-13)
    assert loss == pytest.approx(np.mean(resid**2), rel=1e-13)


def _fd_check(g, target, cfg, h_rel=1e-5):
    _, grad = render_gradient(g, target, cfg)
    worst = 0.0
    names = ("mu_x", "mu_y", "sigma_x", "sigma_y", "rho", "alpha")
    for j, name in enumerate(names):
        base = getattr(g, name)
        for i in range(len(g)):
            scale = {"rho": 1.0, "mu_x": g.sigma_x[i], "mu_y": g.sigma_y[i]}.get(name, abs(base[i]) or 1.0)
            h = h_rel * scale
            up, dn = base.copy(), base.copy()
            up[i] += h
            dn[i] -= h
            lp, _ = render_gradient(g.replace(**{name: up}), target, cfg)
            lm, _ = render_gradient(g.replace(**{name: dn}), target, cfg)
            fd = (lp - lm) / (2 * h)
            an = grad.as_matrix()[i, j]
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    spec = GridSpec.unit(16)
    target = GridField(spec, rng.gamma(1.0, 2.0, spec.shape))
    g = _random_set(rng, 3, 16.0, smin=1.0, smax=3.0, amax=5.0)
    assert _fd_check(g, target, RenderConfig(cutoff_k=math.inf)) < 1e-4


def test_missing_cells_are_skipped():
    spec = GridSpec.unit(6)
    g = _one(2.5, 2.5, 1.0, 1.5, 0.2, 3.0)
    obs = np.random.default_rng(11).random(spec.shape)
    obs_m = obs.copy()
    obs_m[0, :] = np.nan
    loss, grad = render_gradient(g, GridField(spec, obs_m))
    pred = render_selective(g, spec).values
    assert loss == pytest.approx(np.mean((pred[1:] - obs[1:]) ** 2), rel=1e-12)
    with pytest.raises(DataError):
        render_gradient(g, GridField(spec, np.full(spec.shape, np.nan)))


def test_gradient_zero_outside_support():
    spec = GridSpec.unit(20)
    g = GaussianSet([5.0, 200.0], [5.0, 200.0], [1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 4.0])
    _, grad = render_gradient(g, GridField(spec, np.ones(spec.shape)))
    assert np.all(grad.as_matrix()[1] == 0)
