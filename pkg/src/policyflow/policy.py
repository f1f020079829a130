"""Network-free policies: DX (interpolated x0 grid) and GMFlow.

A :class:`PolicyHandle` is valid on one segment ``[tau_dst, tau_src]`` of raw
time and answers velocity queries for a batch of states. Handles hold torch
tensors so the learner can differentiate through them; detached rollouts go
through the compiled kernels in :mod:`policyflow.ode`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import gm as gmk
from .schedule import T_FLOOR, shift_time, unshift_time

_TOL = 1e-12


class WindowError(ValueError):
    """A policy was queried outside the segment it describes."""


@dataclass
class DXGrid:
    """``x0hat[..., i, :]`` sits at raw time ``tau_src - i (tau_src - tau_dst) / (N - 1)``."""
    x0hat: torch.Tensor  # (..., N, D)
    tau_src: torch.Tensor  # (...)
    tau_dst: torch.Tensor  # (...)
    shift: float = 1.0

    @property
    def N(self) -> int:
        return self.x0hat.shape[-2]

    def grid_taus(self) -> torch.Tensor:
        frac = torch.linspace(0.0, 1.0, self.N, dtype=torch.float64) if self.N > 1 else torch.zeros(1, dtype=torch.float64)
        return self.tau_src.unsqueeze(-1) - frac * (self.tau_src - self.tau_dst).unsqueeze(-1)

    def grid_times(self) -> torch.Tensor:
        return shift_time(self.grid_taus(), self.shift)

    def x0_at(self, tau) -> torch.Tensor:
        """Piecewise-linear interpolation in raw time, clamped to the end points."""
        tau = gmk.as_tensor(tau)
        N = self.N
        if N == 1:
            return self.x0hat[..., 0, :].expand(tau.shape + self.x0hat.shape[-1:])
        span = (self.tau_src - self.tau_dst).clamp_min(1e-300)
        pos = ((self.tau_src - tau) / span * (N - 1)).clamp(0.0, N - 1)
        lo = pos.floor().long().clamp(max=N - 2)
        frac = (pos - lo).unsqueeze(-1)
        D = self.x0hat.shape[-1]
        idx = lo.unsqueeze(-1).unsqueeze(-1).expand(lo.shape + (1, D))
        grid = self.x0hat.expand(lo.shape + self.x0hat.shape[-2:])
        x_lo = torch.gather(grid, -2, idx).squeeze(-2)
        x_hi = torch.gather(grid, -2, idx + 1).squeeze(-2)
        return x_lo + frac * (x_hi - x_lo)


def dx_velocity(grid: DXGrid, x_t, t) -> torch.Tensor:
    """``(x_t - x0hat(t)) / t``; the interpolated estimate ignores ``x_t``."""
    x_t, t = gmk.as_tensor(x_t), gmk.as_tensor(t)
    tau = unshift_time(t, grid.shift)
    return (x_t - grid.x0_at(tau)) / t.unsqueeze(-1)


@dataclass
class PolicyHandle:
    """One policy per batch row. ``kind`` is ``"gm"`` or ``"dx"``.

    For GM policies ``gm`` holds an x0-space :class:`~policyflow.gm.FactorGM`
    whose chunks tile the data vector as ``(L, C)``.
    """
    kind: str
    x_src: torch.Tensor  # (B, D)
    tau_src: torch.Tensor  # (B,)
    tau_dst: torch.Tensor  # (B,)
    shift: float = 1.0
    gm: gmk.FactorGM | None = None
    dx: DXGrid | None = None

    @property
    def t_src(self) -> torch.Tensor:
        return shift_time(self.tau_src, self.shift)

    @property
    def t_dst(self) -> torch.Tensor:
        return shift_time(self.tau_dst, self.shift)

    @property
    def batch(self) -> int:
        return self.x_src.shape[0]

    def check_window(self, t) -> None:
        """``t`` has shape ``(B, ...)``; every query must lie in ``[max(t_dst, T_FLOOR), t_src]``."""
        t = gmk.as_tensor(t).reshape(self.batch, -1)
        lo = torch.clamp(self.t_dst, min=T_FLOOR).unsqueeze(-1)
        if bool((t < lo - _TOL).any()) or bool((t > self.t_src.unsqueeze(-1) + _TOL).any()):
            raise WindowError("velocity query outside the policy window")

    def velocity(self, x_t, t, check: bool = True) -> torch.Tensor:
        """Velocity for states ``x_t`` of shape ``(B, ..., D)`` at times ``t`` of shape ``(B, ...)``.

        Extra dimensions after the batch axis broadcast against one policy per row.
        """
        x_t, t = gmk.as_tensor(x_t), gmk.as_tensor(t)
        extra = t.dim() - 1
        if check:
            self.check_window(t)
        if self.kind == "dx":
            g = self.dx
            expand = lambda v: v.reshape(v.shape[:1] + (1,) * extra + v.shape[1:])
            grid = DXGrid(expand(g.x0hat), expand(g.tau_src), expand(g.tau_dst), g.shift)
            return dx_velocity(grid, x_t, t)
        p = self.gm
        expand = lambda v: v.reshape(v.shape[:1] + (1,) * extra + v.shape[1:])
        pol = gmk.FactorGM(gmk.IsoGM(expand(p.gm.logits), expand(p.gm.means), expand(p.gm.log_s), p.gm.space),
                           expand(p.x_src), expand(p.t_src))
        L, C = p.L, p.C
        pol = _broadcast_gm(pol, t.shape)
        u = gmk.gm_velocity(pol, x_t.reshape(x_t.shape[:-1] + (L, C)), t)
        return u.reshape(x_t.shape)

    def detach(self) -> "PolicyHandle":
        out = replace(self, x_src=self.x_src.detach())
        if self.gm is not None:
            out.gm = self.gm.detach()
        if self.dx is not None:
            out.dx = replace(self.dx, x0hat=self.dx.x0hat.detach())
        return out

    def take(self, idx) -> "PolicyHandle":
        """Select (or repeat) policy rows; gradients flow through the gather."""
        idx = torch.as_tensor(idx, dtype=torch.long)
        out = replace(self, x_src=self.x_src[idx], tau_src=self.tau_src[idx], tau_dst=self.tau_dst[idx])
        if self.gm is not None:
            out.gm = self.gm.index(idx)
        if self.dx is not None:
            d = self.dx
            out.dx = DXGrid(d.x0hat[idx], d.tau_src[idx], d.tau_dst[idx], d.shift)
        return out

    def with_temperature(self, T: float) -> "PolicyHandle":
        if self.kind != "gm" or T == 1.0:
            return self
        return replace(self, gm=gmk.apply_temperature(self.gm, T))

    def with_dropout(self, rate: float, rng: np.random.Generator) -> "PolicyHandle":
        if self.kind != "gm" or rate == 0.0:
            return self
        return replace(self, gm=gmk.gm_dropout(self.gm, rate, rng))


def _broadcast_gm(pol: gmk.FactorGM, batch_shape) -> gmk.FactorGM:
    g = pol.gm
    bs = tuple(batch_shape)
    return gmk.FactorGM(
        gmk.IsoGM(g.logits.expand(bs + g.logits.shape[-2:]), g.means.expand(bs + g.means.shape[-3:]),
                  g.log_s.expand(bs), g.space),
        pol.x_src.expand(bs + pol.x_src.shape[-2:]), pol.t_src.expand(bs))


def gm_policy(logits, means_u, log_s, x_src, tau_src, tau_dst, shift: float = 1.0) -> PolicyHandle:
    """Build a GM policy from u-space outputs; ``logits (B, L, K)``, ``means_u (B, L, K, C)``."""
    logits, means_u, log_s = gmk.as_tensor(logits), gmk.as_tensor(means_u), gmk.as_tensor(log_s)
    x_src, tau_src, tau_dst = gmk.as_tensor(x_src), gmk.as_tensor(tau_src), gmk.as_tensor(tau_dst)
    L, C = means_u.shape[-3], means_u.shape[-1]
    t_src = shift_time(tau_src, shift)
    fg = gmk.FactorGM(gmk.IsoGM(logits, means_u, log_s, gmk.U_SPACE), x_src.reshape(-1, L, C), t_src)
    return PolicyHandle("gm", x_src, tau_src, tau_dst, shift, gm=gmk.factor_u_to_x0(fg))


def dx_policy(u_grid, x_src, tau_src, tau_dst, shift: float = 1.0) -> PolicyHandle:
    """Build a DX policy from grid velocities ``u_grid (B, N, D)`` predicted at the origin.

    Each velocity is mapped to ``x0hat_i = x_src - sigma_src u_i``.
    """
    u_grid, x_src = gmk.as_tensor(u_grid), gmk.as_tensor(x_src)
    tau_src, tau_dst = gmk.as_tensor(tau_src), gmk.as_tensor(tau_dst)
    t_src = shift_time(tau_src, shift)
    x0hat = x_src.unsqueeze(-2) - t_src[:, None, None] * u_grid
    return PolicyHandle("dx", x_src, tau_src, tau_dst, shift, dx=DXGrid(x0hat, tau_src, tau_dst, shift))


def gm_policy_velocity(policy: PolicyHandle, x_t, t, temperature: float = 1.0) -> torch.Tensor:
    if policy.kind != "gm":
        raise TypeError("not a GM policy")
    return policy.with_temperature(temperature).velocity(x_t, t)


# ---------------------------------------------------------------------------
# direct fitting of a free GM to a handful of trajectory constraints


@dataclass
class ToyFitResult:
    policy: gmk.FactorGM
    residual: float
    history: list
    iterations: int
    diverged: bool = False


def toyfit(targets, K: int, C: int, L: int = 1, iters: int = 20000, lr: float = 1e-2, seed: int = 0,
           tol: float = 0.0, x_src=None) -> ToyFitResult:
    """Fit a free factorized GM anchored at ``t_src = 1`` to velocity targets.

    ``targets`` is a list of ``(t_n, x_n, u_n)`` with ``x_n, u_n`` in ``R^{L*C}``.
    Minimizes the mean squared velocity residual with Adam; a non-finite
    residual stops the run and is reported with ``diverged=True``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    ts = np.array([float(t) for t, _, _ in targets])
    if len(np.unique(ts)) != len(ts):
        raise ValueError("target times must be pairwise distinct")
    xs = torch.as_tensor(np.array([np.ravel(x) for _, x, _ in targets], dtype=np.float64)).reshape(-1, L, C)
    us = torch.as_tensor(np.array([np.ravel(u) for _, _, u in targets], dtype=np.float64)).reshape(-1, L, C)
    tt = torch.as_tensor(ts)
    n = len(ts)
    rng = np.random.default_rng(seed)
    origin = torch.zeros(L, C, dtype=torch.float64) if x_src is None else gmk.as_tensor(x_src).reshape(L, C)
    # Initialise x0-space means around the implied posterior means of the targets.
    implied = (xs - tt[:, None, None] * us).reshape(n, L, C)
    centre = implied.mean(0)
    spread = implied.std(0, unbiased=False).clamp_min(0.1) if n > 1 else torch.ones(L, C, dtype=torch.float64)
    mu0 = centre.unsqueeze(1) + spread.unsqueeze(1) * torch.as_tensor(rng.standard_normal((L, K, C)))
    logits = torch.zeros(L, K, dtype=torch.float64, requires_grad=True)
    means = mu0.clone().requires_grad_(True)
    log_s = torch.tensor(math.log(0.5), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([logits, means, log_s], lr=lr)
    ones = torch.ones(n, dtype=torch.float64)

    def residual():
        fg = gmk.FactorGM(gmk.IsoGM(logits.expand(n, L, K), means.expand(n, L, K, C), log_s.expand(n), gmk.X0_SPACE),
                          origin.expand(n, L, C), ones)
        u = gmk.gm_velocity(fg, xs, tt)
        return ((u - us) ** 2).sum((-1, -2)).mean()

    history = []
    res = float("nan")
    it = 0
    for it in range(1, iters + 1):
        opt.zero_grad()
        loss = residual()
        res = loss.item()
        if not math.isfinite(res):
            return ToyFitResult(_fitted(logits, means, log_s, origin), res, history, it, diverged=True)
        if it % 100 == 1:
            history.append((it, res))
        if res <= tol:
            break
        loss.backward()
        opt.step()
    with torch.no_grad():
        res = float(residual())
    return ToyFitResult(_fitted(logits, means, log_s, origin), res, history, it, diverged=not math.isfinite(res))


def _fitted(logits, means, log_s, origin) -> gmk.FactorGM:
    return gmk.FactorGM(gmk.IsoGM(logits.detach().clone(), means.detach().clone(), log_s.detach().clone(),
                                  gmk.X0_SPACE), origin.clone(), torch.tensor(1.0, dtype=torch.float64))


def smooth_targets(n: int, C: int, seed: int, t_range=(0.2, 0.9)):
    """Random quadratic curves ``x(t)`` sampled with their exact derivatives at ``n`` distinct times."""
    rng = np.random.default_rng(seed)
    ts = np.sort(rng.uniform(*t_range, size=n))[::-1]
    a, b, c = rng.standard_normal((3, C))
    return [(float(t), a + b * t + 0.5 * c * t**2, b + c * t) for t in ts]
