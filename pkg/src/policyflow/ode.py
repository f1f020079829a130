"""Fixed-step Euler machinery for policies.

Substeps are uniform in raw time ``tau`` and mapped through the time shift, so
the shifted step length varies along a segment. Velocities are evaluated at
the left end point of every substep (explicit Euler). Detached rollouts of
:class:`~policyflow.policy.PolicyHandle` objects run in numba kernels; each
row is integrated independently, so batched and one-by-one results agree
bit for bit.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numba
import numpy as np
import torch

from .policy import PolicyHandle
from .schedule import T_FLOOR, StepGrid, shift_time
from .teacher import noise_for

GM_KIND = 0
DX_KIND = 1


class NumericalError(RuntimeError):
    """A rollout produced a non-finite state."""


@dataclass
class RolloutConfig:
    substep: float = 1.0 / 128
    window_dtau: float = 3.0 / 128
    temperature: float = 1.0
    final_temperature: float = 1.0
    record_trajectory: bool = False

    def segment_temperature(self, index: int, nfe: int) -> float:
        return self.final_temperature if index == nfe - 1 else self.temperature


@dataclass
class Trajectory:
    """Batched record; row ``b`` is valid for the first ``lengths[b]`` entries."""
    taus: np.ndarray    # (B, M)
    ts: np.ndarray      # (B, M)
    states: np.ndarray  # (B, M, D)
    lengths: np.ndarray  # (B,)
    tag: str = "policy"

    def row(self, b: int):
        n = int(self.lengths[b])
        return self.taus[b, :n], self.ts[b, :n], self.states[b, :n]

    def to_csv(self, path: str, b: int = 0) -> None:
        taus, ts, xs = self.row(b)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau", "t"] + [f"dim{i}" for i in range(xs.shape[1])])
            for tau, t, x in zip(taus, ts, xs):
                w.writerow([repr(float(tau)), repr(float(t))] + [repr(float(v)) for v in x])


def euler_step(x, t, u, h_t):
    """One explicit Euler step toward smaller ``t``: ``x - h_t u``."""
    if np.any(np.asarray(h_t) <= 0):
        raise ValueError("Euler steps must move toward smaller t (h_t > 0)")
    return x - h_t * u


# ---------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True, inline="always")
def _shift(tau, m):
    if m == 1.0:
        return tau * 1.0
    return m * tau / (1.0 + (m - 1.0) * tau)


@numba.njit(cache=True, inline="always")
def _gm_velocity_row(x, t, p, logits, mx, sx2, xsrc, tsrc, L, C, out, nu, lk):
    a_t = 1.0 - t
    a_s = 1.0 - tsrc[p]
    ts2 = tsrc[p] * tsrc[p]
    zeta = a_t * a_t / (t * t) - a_s * a_s / ts2
    s2 = sx2[p]
    denom = s2 * zeta + 1.0
    K = logits.shape[2]
    for i in range(L):
        for c in range(C):
            nu[c] = a_t * x[i * C + c] / (t * t) - a_s * xsrc[p, i, c] / ts2
        top = -np.inf
        for k in range(K):
            if logits[p, i, k] == -np.inf:
                lk[k] = -np.inf
                continue
            q = 0.0
            for c in range(C):
                m_ = mx[p, i, k, c]
                q += m_ * (nu[c] - 0.5 * zeta * m_)
            lk[k] = logits[p, i, k] + q / denom
            if lk[k] > top:
                top = lk[k]
        tot = 0.0
        for k in range(K):
            lk[k] = math.exp(lk[k] - top)
            tot += lk[k]
        for c in range(C):
            acc = 0.0
            for k in range(K):
                acc += lk[k] * (s2 * nu[c] + mx[p, i, k, c])
            mean = acc / (denom * tot)
            out[i * C + c] = (x[i * C + c] - mean) / t


@numba.njit(cache=True, inline="always")
def _dx_velocity_row(x, t, tau, p, x0hat, g_src, g_dst, out):
    N = x0hat.shape[1]
    D = x0hat.shape[2]
    if N == 1:
        for d in range(D):
            out[d] = (x[d] - x0hat[p, 0, d]) / t
        return
    span = g_src[p] - g_dst[p]
    if span < 1e-300:
        span = 1e-300
    pos = (g_src[p] - tau) / span * (N - 1)
    if pos < 0.0:
        pos = 0.0
    if pos > N - 1:
        pos = N - 1.0
    lo = int(math.floor(pos))
    if lo > N - 2:
        lo = N - 2
    frac = pos - lo
    for d in range(D):
        x0 = x0hat[p, lo, d] + frac * (x0hat[p, lo + 1, d] - x0hat[p, lo, d])
        out[d] = (x[d] - x0) / t


@numba.njit(cache=True, inline="always")
def _velocity_row(kind, x, t, tau, p, logits, mx, sx2, xsrc, tsrc, L, C, x0hat, g_src, g_dst, out, nu, lk):
    if kind == 0:
        _gm_velocity_row(x, t, p, logits, mx, sx2, xsrc, tsrc, L, C, out, nu, lk)
    else:
        _dx_velocity_row(x, t, tau, p, x0hat, g_src, g_dst, out)


@numba.njit(cache=True)
def _rollout_kernel(kind, x, tau_from, tau_to, h, m, t_floor, prow,
                    logits, mx, sx2, xsrc, tsrc, L, C, x0hat, g_src, g_dst, n_rec):
    """Integrate every row from ``tau_from`` to ``tau_to``.

    When ``n_rec > 0`` the first ``n_rec`` substeps of each row are recorded
    (left end state, raw/shifted time, shifted step length, velocity).
    """
    R, D = x.shape
    out = x.copy()
    rec_x = np.zeros((R, n_rec, D))
    rec_u = np.zeros((R, n_rec, D))
    rec_tau = np.zeros((R, n_rec))
    rec_t = np.zeros((R, n_rec))
    rec_h = np.zeros((R, n_rec))
    n_steps = np.zeros(R, dtype=np.int64)
    bad = np.full(R, -1, dtype=np.int64)
    u = np.empty(D)
    nu = np.empty(C)
    lk = np.empty(logits.shape[2])
    for r in range(R):
        span = tau_from[r] - tau_to[r]
        if span <= 0.0:
            continue
        n = int(math.ceil(span / h - 1e-9))
        if n < 1:
            n = 1
        n_steps[r] = n
        xr = out[r]
        p = prow[r]
        for k in range(n):
            tau_a = tau_from[r] - k * h
            tau_b = tau_from[r] - (k + 1) * h
            if k == n - 1 or tau_b < tau_to[r]:
                tau_b = tau_to[r]
            t_a = _shift(tau_a, m)
            t_b = _shift(tau_b, m)
            t_q = t_a if t_a > t_floor else t_floor
            _velocity_row(kind, xr, t_q, tau_a, p, logits, mx, sx2, xsrc, tsrc, L, C, x0hat, g_src, g_dst, u, nu, lk)
            if k < n_rec:
                for d in range(D):
                    rec_x[r, k, d] = xr[d]
                    rec_u[r, k, d] = u[d]
                rec_tau[r, k] = tau_a
                rec_t[r, k] = t_q
                rec_h[r, k] = t_a - t_b
            ok = True
            for d in range(D):
                xr[d] = xr[d] - (t_a - t_b) * u[d]
                if not math.isfinite(xr[d]):
                    ok = False
            if not ok and bad[r] < 0:
                bad[r] = k
    return out, n_steps, bad, rec_x, rec_u, rec_tau, rec_t, rec_h


# ---------------------------------------------------------------------------
# python front end


def pack_policy(policy: PolicyHandle) -> dict:
    """Flatten a (detached) policy into the arrays the kernels expect."""
    empty3 = np.zeros((1, 1, 1))
    z1 = np.zeros(1)
    if policy.kind == "gm":
        g = policy.gm
        with torch.no_grad():
            return dict(
                kind=GM_KIND,
                logits=np.ascontiguousarray(g.gm.logits.detach().numpy(), dtype=np.float64),
                mx=np.ascontiguousarray(g.gm.means.detach().numpy(), dtype=np.float64),
                sx2=np.ascontiguousarray(torch.exp(2.0 * g.gm.log_s).detach().numpy(), dtype=np.float64).reshape(-1),
                xsrc=np.ascontiguousarray(g.x_src.detach().numpy(), dtype=np.float64),
                tsrc=np.ascontiguousarray(g.t_src.detach().numpy(), dtype=np.float64).reshape(-1),
                L=g.L, C=g.C, x0hat=empty3, g_src=z1, g_dst=z1,
            )
    d = policy.dx
    return dict(
        kind=DX_KIND, logits=np.zeros((1, 1, 1)), mx=np.zeros((1, 1, 1, 1)), sx2=z1,
        xsrc=empty3, tsrc=z1, L=1, C=1,
        x0hat=np.ascontiguousarray(d.x0hat.detach().numpy(), dtype=np.float64),
        g_src=np.ascontiguousarray(d.tau_src.detach().numpy(), dtype=np.float64).reshape(-1),
        g_dst=np.ascontiguousarray(d.tau_dst.detach().numpy(), dtype=np.float64).reshape(-1),
    )


def _as_rows(v, R):
    v = np.asarray(v, dtype=np.float64)
    return np.ascontiguousarray(np.broadcast_to(v, (R,)))


def integrate(policy: PolicyHandle, x, tau_from, tau_to, substep: float = 1.0 / 128,
              prow=None, n_rec: int = 0, packed: dict | None = None):
    """Detached Euler rollout of ``policy`` for a batch of states.

    ``prow[r]`` selects the policy row driving state row ``r`` (default: identity).
    Returns the end states and, with ``n_rec > 0``, the recorded substeps.
    """
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    R = x.shape[0]
    tau_from, tau_to = _as_rows(tau_from, R), _as_rows(tau_to, R)
    if np.any(tau_to > tau_from + 1e-15):
        raise ValueError("rollouts run from larger to smaller raw time")
    prow = np.arange(R, dtype=np.int64) if prow is None else np.ascontiguousarray(prow, dtype=np.int64)
    pk = pack_policy(policy) if packed is None else packed
    _check_rollout_window(policy, tau_from, tau_to, prow)
    out, n_steps, bad, rx, ru, rtau, rt, rh = _rollout_kernel(
        pk["kind"], x, tau_from, tau_to, float(substep), float(policy.shift), T_FLOOR, prow,
        pk["logits"], pk["mx"], pk["sx2"], pk["xsrc"], pk["tsrc"], pk["L"], pk["C"],
        pk["x0hat"], pk["g_src"], pk["g_dst"], int(n_rec))
    if (bad >= 0).any():
        r = int(np.argmax(bad >= 0))
        raise NumericalError(f"non-finite state in rollout row {r} at substep {int(bad[r])}")
    if n_rec:
        return out, dict(n_steps=n_steps, x=rx, u=ru, tau=rtau, t=rt, h=rh)
    return out


def _check_rollout_window(policy: PolicyHandle, tau_from, tau_to, prow):
    src = policy.tau_src.detach().numpy()[prow]
    dst = policy.tau_dst.detach().numpy()[prow]
    if np.any(tau_from > src + 1e-12) or np.any(tau_to < dst - 1e-12):
        from .policy import WindowError
        raise WindowError("rollout extends outside the policy window")


def rollout_policy(policy: PolicyHandle, from_tau=None, to_tau=None, cfg: RolloutConfig | None = None,
                   x=None) -> Trajectory:
    """Roll every policy row from its origin (or ``x`` at ``from_tau``) and record the path."""
    cfg = cfg or RolloutConfig()
    R = policy.batch
    from_tau = policy.tau_src.detach().numpy() if from_tau is None else _as_rows(from_tau, R)
    to_tau = policy.tau_dst.detach().numpy() if to_tau is None else _as_rows(to_tau, R)
    x = policy.x_src.detach().numpy() if x is None else x
    n_max = int(math.ceil(float(np.max(from_tau - to_tau)) / cfg.substep - 1e-9)) if np.any(from_tau > to_tau) else 0
    out, rec = integrate(policy, x, from_tau, to_tau, cfg.substep, n_rec=max(n_max, 1))
    n = rec["n_steps"]
    M = n_max + 1
    D = out.shape[1]
    taus = np.zeros((R, M))
    ts = np.zeros((R, M))
    states = np.zeros((R, M, D))
    for r in range(R):
        k = int(n[r])
        taus[r, :k] = rec["tau"][r, :k]
        states[r, :k] = rec["x"][r, :k]
        taus[r, k] = to_tau[r]
        states[r, k] = out[r]
        ts[r, : k + 1] = shift_time(taus[r, : k + 1], policy.shift)
    return Trajectory(taus, ts, states, n + 1, "policy")


def window_points(policy: PolicyHandle, x, tau, tau_end, substep: float, n_window: int, prow=None,
                  packed: dict | None = None):
    """Detached substeps covering ``[tau_end, tau]`` for micro-window averaging.

    Returns states ``(R, W, D)``, query times ``(R, W)``, normalized
    shifted-step weights ``(R, W)`` and the detached velocities. A window of
    zero length degenerates to the instantaneous query at ``(x, tau)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    R = x.shape[0]
    tau, tau_end = _as_rows(tau, R), _as_rows(tau_end, R)
    _, rec = integrate(policy, x, tau, tau_end, substep, prow=prow, n_rec=n_window, packed=packed)
    h = rec["h"]
    tot = h.sum(1)
    flat = tot <= 0.0
    weights = np.where(flat[:, None], 0.0, h / np.where(flat, 1.0, tot)[:, None])
    xs, ts = rec["x"], rec["t"]
    if flat.any():
        pk = pack_policy(policy) if packed is None else packed
        prow_a = np.arange(R) if prow is None else np.asarray(prow)
        t0 = np.maximum(shift_time(tau[flat], policy.shift), T_FLOOR)
        u0 = velocity_np(policy, x[flat], t0, tau[flat], prow_a[flat], pk)
        xs[flat, 0] = x[flat]
        ts[flat, 0] = t0
        rec["u"][flat, 0] = u0
        weights[flat, 0] = 1.0
        ts[flat, 1:] = t0[:, None]
        xs[flat, 1:] = x[flat][:, None, :]
    # padded entries carry zero weight; give them a valid query time
    pad = weights == 0.0
    ts = np.where(pad, ts[:, :1], ts)
    xs = np.where(pad[..., None], xs[:, :1], xs)
    return xs, ts, weights, rec["u"]


@numba.njit(cache=True)
def _velocity_kernel(kind, x, t, tau, prow, logits, mx, sx2, xsrc, tsrc, L, C, x0hat, g_src, g_dst):
    R, D = x.shape
    out = np.empty_like(x)
    u = np.empty(D)
    nu = np.empty(C)
    lk = np.empty(logits.shape[2])
    for r in range(R):
        _velocity_row(kind, x[r], t[r], tau[r], prow[r], logits, mx, sx2, xsrc, tsrc, L, C, x0hat, g_src, g_dst,
                      u, nu, lk)
        out[r] = u
    return out


def velocity_np(policy: PolicyHandle, x, t, tau=None, prow=None, packed=None) -> np.ndarray:
    """Compiled (detached) velocity query; ``tau`` defaults to the unshifted ``t``."""
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    R = x.shape[0]
    t = _as_rows(t, R)
    if tau is None:
        from .schedule import unshift_time
        tau = unshift_time(t, policy.shift)
    tau = _as_rows(tau, R)
    prow = np.arange(R, dtype=np.int64) if prow is None else np.ascontiguousarray(prow, dtype=np.int64)
    pk = pack_policy(policy) if packed is None else packed
    return _velocity_kernel(pk["kind"], x, t, tau, prow, pk["logits"], pk["mx"], pk["sx2"], pk["xsrc"],
                            pk["tsrc"], pk["L"], pk["C"], pk["x0hat"], pk["g_src"], pk["g_dst"])


def micro_window_velocity(policy: PolicyHandle, x_t, tau, window_dtau: float, cfg: RolloutConfig | None = None):
    """Average policy velocity over the raw window ``[tau - window_dtau, tau]``.

    The window is cut at the policy's ``tau_dst``; the average is the
    left-Riemann sum weighted by shifted step lengths.
    """
    cfg = cfg or RolloutConfig()
    R = np.atleast_2d(x_t).shape[0]
    tau = _as_rows(tau, R)
    tau_end = np.maximum(tau - window_dtau, policy.tau_dst.detach().numpy())
    n_window = max(1, int(math.ceil(window_dtau / cfg.substep - 1e-9)))
    _, _, w, u = window_points(policy, x_t, tau, tau_end, cfg.substep, n_window)
    return (w[..., None] * u).sum(1)


def sample(policy_source, grid: StepGrid, cfg: RolloutConfig, seed: int, n: int = 1, dim: int | None = None,
           labels=None, offset: int = 0, x1=None, record: bool = False):
    """Few-step generation: one policy generation per segment, then dense substeps.

    ``policy_source(x, tau_src, tau_dst, labels)`` returns a batched
    :class:`PolicyHandle`. Noise row ``i`` comes from stream ``(seed, offset + i)``.
    Returns the samples and, if ``record``, a list of per-segment trajectories.
    """
    if x1 is None:
        if dim is None:
            raise ValueError("need dim or x1")
        x = noise_for(seed, n, dim, offset)
    else:
        x = np.array(x1, dtype=np.float64)
    trajs = []
    for i, (tau_src, tau_dst) in enumerate(grid.segments()):
        pol = policy_source(x, tau_src, tau_dst, labels)
        pol = pol.with_temperature(cfg.segment_temperature(i, grid.nfe))
        if record or cfg.record_trajectory:
            tr = rollout_policy(pol, tau_src, tau_dst, cfg, x=x)
            trajs.append(tr)
            x = tr.states[np.arange(len(x)), tr.lengths - 1]
        else:
            x = integrate(pol, x, tau_src, tau_dst, cfg.substep)
    return (x, trajs) if (record or cfg.record_trajectory) else x
