import math

import numpy as np
import pytest
import torch

from policyflow.gm import X0_SPACE, FactorGM, IsoGM, gm_velocity_discrete
from policyflow.policy import (DXGrid, WindowError, dx_policy, dx_velocity, gm_policy, gm_policy_velocity,
                               smooth_targets, toyfit)
from policyflow.schedule import shift_time

T = lambda v: torch.as_tensor(np.asarray(v, dtype=np.float64))


def const_dx(c, x_src, tau_src=1.0, tau_dst=0.0, N=5, shift=1.0):
    """DX policy whose grid is ``c`` everywhere."""
    B = len(x_src)
    t_src = shift_time(tau_src, shift)
    u = (np.asarray(x_src)[:, None, :] - np.asarray(c)[:, None, :]) / t_src
    return dx_policy(np.repeat(u, N, 1), x_src, np.full(B, tau_src), np.full(B, tau_dst), shift)


def random_gm_policy(r, B=3, L=2, K=4, C=1, tau_src=0.9, tau_dst=0.3, shift=1.0):
    return gm_policy(r.normal(size=(B, L, K)), r.normal(size=(B, L, K, C)), r.normal(-0.5, 0.2, B),
                     r.normal(size=(B, L * C)), np.full(B, tau_src), np.full(B, tau_dst), shift)


def test_dx_grid_point_and_midpoint():
    r = np.random.default_rng(0)
    x0hat = T(r.normal(size=(4, 2)))
    g = DXGrid(x0hat, T(0.8), T(0.2), shift=2.0)
    times = g.grid_times()
    x = T(r.normal(size=2))
    for i in range(4):
        u = dx_velocity(g, x, times[i])
        np.testing.assert_allclose(u.numpy(), ((x - x0hat[i]) / times[i]).numpy(), rtol=1e-12)
    g2 = DXGrid(x0hat[:2], T(0.8), T(0.2))
    np.testing.assert_allclose(g2.x0_at(T(0.5)).numpy(), x0hat[:2].mean(0).numpy(), rtol=1e-12)


def test_dx_clamps_outside_grid():
    x0hat = T([[1.0], [2.0], [3.0]])
    g = DXGrid(x0hat, T(0.8), T(0.2))
    assert float(g.x0_at(T(0.9))) == 1.0
    assert float(g.x0_at(T(0.1))) == 3.0


def test_dx_constant_grid_matches_discrete_gm():
    r = np.random.default_rng(1)
    c, xs = r.normal(size=(2, 2)), r.normal(size=(2, 2))
    pol = const_dx(c, xs)
    fg = FactorGM(IsoGM(T(np.zeros((2, 1, 1))), T(c[:, None, None, :]), T(np.zeros(2)), X0_SPACE),
                  T(xs[:, None, :]), T(np.ones(2)))
    for t in [0.9, 0.5, 0.01]:
        x = r.normal(size=(2, 2))
        u_dx = pol.velocity(T(x), T(np.full(2, t))).numpy()
        u_gm = gm_velocity_discrete(fg, T(x[:, None, :]), T(np.full(2, t))).numpy()[:, 0]
        np.testing.assert_allclose(u_dx, (x - c) / t, rtol=1e-12)
        np.testing.assert_allclose(u_dx, u_gm, rtol=1e-9, atol=1e-9)


def test_gm_k1_small_s_matches_constant_dx():
    r = np.random.default_rng(2)
    c, xs = r.normal(size=(1, 2)), r.normal(size=(1, 2))
    t_src = 1.0
    # u-space mean so that the x0-space mean is c; std s -> 0
    pol_gm = gm_policy(np.zeros((1, 1, 1)), ((xs - c) / t_src)[:, None, None, :], np.array([math.log(1e-9)]),
                       xs, np.ones(1), np.zeros(1))
    pol_dx = const_dx(c, xs)
    for t in [0.95, 0.6, 0.2]:
        x = T(r.normal(size=(1, 2)))
        a = pol_gm.velocity(x, T([t])).numpy()
        b = pol_dx.velocity(x, T([t])).numpy()
        assert np.abs(a - b).max() <= 1e-6 * (1 + np.abs(b).max())


def test_dx_ignores_state_gm_does_not():
    r = np.random.default_rng(3)
    B = 20
    xs = r.normal(size=(B, 2))
    dx = dx_policy(r.normal(size=(B, 6, 2)), xs, np.full(B, 1.0), np.full(B, 0.0))
    gmp = random_gm_policy(r, B=B, L=1, K=3, C=2, tau_src=1.0, tau_dst=0.0)
    t = T(r.uniform(0.1, 0.9, B))
    x = T(r.normal(size=(B, 2)))
    eps = 1e-6
    dxp = lambda p, y: (y - p.velocity(y, t) * t[:, None])  # = x0 estimate
    d = T([eps, 0.0])
    sens_dx = (dxp(dx, x + d) - dxp(dx, x - d)) / (2 * eps)
    sens_gm = (dxp(gmp, x + d) - dxp(gmp, x - d)) / (2 * eps)
    assert sens_dx.abs().max() < 1e-8
    assert (sens_gm.abs().sum(-1) > 1e-6).all()


def test_dx_x0_term_invariant_to_state():
    r = np.random.default_rng(4)
    pol = dx_policy(r.normal(size=(1, 4, 2)), r.normal(size=(1, 2)), np.ones(1), np.zeros(1))
    t = T([0.37])
    vals = [(pol.velocity(T(x), t) * t - T(x)).numpy() for x in r.normal(0, 10, (5, 1, 2))]
    for v in vals[1:]:
        np.testing.assert_allclose(v, vals[0], atol=1e-12)


def test_window_enforced():
    r = np.random.default_rng(5)
    pol = random_gm_policy(r, B=2, tau_src=0.6, tau_dst=0.4)
    pol.velocity(T(r.normal(size=(2, 2))), T([0.5, 0.45]))
    with pytest.raises(WindowError):
        pol.velocity(T(r.normal(size=(2, 2))), T([0.7, 0.5]))
    with pytest.raises(WindowError):
        pol.velocity(T(r.normal(size=(2, 2))), T([0.5, 0.3]))
    # the floor applies even when the window reaches zero
    pol0 = random_gm_policy(r, B=1, tau_src=0.2, tau_dst=0.0)
    with pytest.raises(WindowError):
        pol0.velocity(T(r.normal(size=(1, 2))), T([1e-6]))


def test_gm_policy_at_origin_prior_mean_velocity():
    r = np.random.default_rng(6)
    pol = random_gm_policy(r, B=2, L=1, K=3, C=2, tau_src=0.8)
    t = pol.t_src
    u = pol.velocity(pol.x_src, t).numpy()
    g = pol.gm.gm
    mean = (g.weights.unsqueeze(-1) * g.means).sum(-2)[:, 0].numpy()
    np.testing.assert_allclose(u, (pol.x_src.numpy() - mean) / t.numpy()[:, None], rtol=1e-12)


def test_temperature_override_and_type_check():
    r = np.random.default_rng(7)
    pol = random_gm_policy(r)
    x, t = T(r.normal(size=(3, 2))), T([0.5, 0.5, 0.5])
    np.testing.assert_array_equal(gm_policy_velocity(pol, x, t, 1.0).numpy(), pol.velocity(x, t).numpy())
    assert not np.allclose(gm_policy_velocity(pol, x, t, 0.3).numpy(), pol.velocity(x, t).numpy())
    with pytest.raises(TypeError):
        gm_policy_velocity(const_dx(np.zeros((1, 2)), np.zeros((1, 2))), x[:1], t[:1])


def test_finite_for_large_states():
    r = np.random.default_rng(8)
    pol = random_gm_policy(r, B=50, L=1, K=4, C=2, tau_src=1.0, tau_dst=0.0)
    x = r.normal(size=(50, 2))
    x = 1e3 * x / np.linalg.norm(x, axis=1, keepdims=True)
    for t in [1e-4, 0.01, 0.5, 1.0]:
        assert torch.isfinite(pol.velocity(T(x), T(np.full(50, t)))).all()


def test_dropout_only_touches_gm():
    r = np.random.default_rng(9)
    dx = const_dx(np.zeros((1, 2)), np.zeros((1, 2)))
    assert dx.with_dropout(0.5, r) is dx


# -- toyfit -------------------------------------------------------------------

def test_toyfit_single_target_k1():
    r = np.random.default_rng(0)
    x0 = r.normal(size=2)
    t = 0.6
    x = r.normal(size=2)
    res = toyfit([(t, x, (x - x0) / t)], K=1, C=2, iters=5000, lr=1e-2, seed=0)
    assert res.residual <= 1e-8


def test_toyfit_k8_beats_k1():
    targets = smooth_targets(4, 2, seed=0)
    r8 = toyfit(targets, K=8, C=2, iters=4000, seed=0)
    r1 = toyfit(targets, K=1, C=2, iters=4000, seed=0)
    assert r8.residual < r1.residual
    assert not r8.diverged


def test_toyfit_validation():
    with pytest.raises(ValueError):
        toyfit([(0.5, [0, 0], [0, 0]), (0.5, [1, 1], [0, 0])], K=2, C=2)
    with pytest.raises(ValueError):
        toyfit([(0.5, [0, 0], [0, 0])], K=0, C=2)


def test_toyfit_reports_divergence():
    res = toyfit([(0.5, [float("nan"), 0.0], [0.0, 0.0])], K=1, C=2, iters=10)
    assert res.diverged and math.isnan(res.residual) and res.iterations == 1
