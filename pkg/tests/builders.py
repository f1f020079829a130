"""Small fixtures shared by unit and acceptance tests."""
from __future__ import annotations

import numpy as np

from policyflow import ode
from policyflow import student as st
from policyflow.schedule import shift_time


def small_student(head: str, dim: int = 2, n_classes: int = 1, **kw) -> st.StudentConfig:
    base = dict(hidden=[24, 24], n_freq=4, K=3, N=4)
    base.update(kw)
    return st.StudentConfig(dim=dim, head=head, n_classes=n_classes, **base)


def random_batch(cfg: st.StudentConfig, params, seed: int, window: bool, R: int = 5, S: int = 2,
                 shift: float = 1.0, substep: float = 1 / 128, window_dtau: float = 3 / 128) -> st.MatchBatch:
    """A matching batch with detached query states rolled out by the current policy."""
    r = np.random.default_rng(seed)
    D = cfg.dim
    x_src = r.normal(size=(R, D))
    tau_src = r.uniform(0.5, 1.0, R)
    tau_dst = tau_src - r.uniform(0.2, 0.45, R)
    c = r.integers(0, cfg.n_classes, R)
    pol = st.forward(cfg, params, x_src, tau_src, tau_dst, c, shift).detach()
    prow = np.repeat(np.arange(R), S)
    tau = tau_src[prow] - r.uniform(0, 1, R * S) * (tau_src - tau_dst)[prow]
    x = ode.integrate(pol, x_src[prow], tau_src[prow], tau, substep, prow)
    if window:
        n_win = int(np.ceil(window_dtau / substep - 1e-9))
        tau_end = np.maximum(tau - window_dtau, tau_dst[prow])
        xs, ts, w, _ = ode.window_points(pol, x, tau, tau_end, substep, n_win, prow)
    else:
        xs, ts, w = x[:, None], shift_time(tau, shift)[:, None], np.ones((R * S, 1))
    W = xs.shape[1]
    u_t = r.normal(size=(R, S, D))
    return st.MatchBatch(x_src, tau_src, tau_dst, c, xs.reshape(R, S, W, D), ts.reshape(R, S, W),
                         w.reshape(R, S, W), u_t, r.uniform(0.5, 1.5, (R, S)), float(R), shift)


def fd_check(cfg, params, batch, n_coords: int = 10, eps: float = 1e-5, seed: int = 0):
    """Max relative error of the analytic gradient against central differences on random coordinates."""
    _, g = st.loss_and_grad(cfg, params, batch)
    r = np.random.default_rng(seed)
    big = np.flatnonzero(np.abs(g) > 1e-6 * np.abs(g).max())
    idx = r.choice(big, size=min(n_coords, len(big)), replace=False)
    worst = 0.0
    for i in idx:
        p1, p2 = params.copy(), params.copy()
        p1[i] += eps
        p2[i] -= eps
        fd = (st.loss_value(cfg, p1, batch) - st.loss_value(cfg, p2, batch)) / (2 * eps)
        worst = max(worst, abs(fd - g[i]) / max(abs(g[i]), 1e-12))
    return worst, len(idx)
