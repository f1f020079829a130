"""Linear flow schedule, time shifting and step grids.

All grids live in raw time ``tau``; shifted time ``t`` is derived on demand.
Functions accept python floats, numpy arrays or torch tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# No velocity is ever evaluated below this time; sigma_t = t makes the ODE singular at 0.
T_FLOOR = 1e-4


def _min_max(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=float)
    return float(x.min()), float(x.max())


def alpha(t):
    return 1.0 - t


def sigma(t):
    return t


def shift_time(tau, m: float):
    """Map raw time ``tau`` to shifted time ``m tau / (1 + (m - 1) tau)``."""
    if m <= 0:
        raise ValueError(f"shift must be positive, got {m}")
    lo, hi = _min_max(tau)
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"raw time outside [0, 1]: [{lo}, {hi}]")
    if m == 1.0:
        return tau * 1.0
    return m * tau / (1.0 + (m - 1.0) * tau)


def unshift_time(t, m: float):
    """Inverse of :func:`shift_time`."""
    if m <= 0:
        raise ValueError(f"shift must be positive, got {m}")
    lo, hi = _min_max(t)
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"time outside [0, 1]: [{lo}, {hi}]")
    if m == 1.0:
        return t * 1.0
    return t / (m - (m - 1.0) * t)


@dataclass(frozen=True)
class StepGrid:
    nfe: int
    raw_boundaries: tuple
    final_step_scale: float = 1.0

    def segments(self):
        """Yield ``(tau_src, tau_dst)`` pairs from noise to data."""
        b = self.raw_boundaries
        return [(b[i], b[i + 1]) for i in range(self.nfe)]


def make_step_grid(nfe: int, final_step_scale: float = 1.0) -> StepGrid:
    """Raw-time grid with ``nfe`` segments; the last one is ``final_step_scale`` times shorter.

    The common step ``h`` solves ``(nfe - 1 + f) h = 1``.
    """
    if int(nfe) != nfe or nfe < 1:
        raise ValueError(f"nfe must be a positive integer, got {nfe}")
    if not 0.0 < final_step_scale <= 1.0:
        raise ValueError(f"final_step_scale must lie in (0, 1], got {final_step_scale}")
    nfe = int(nfe)
    h = 1.0 / (nfe - 1 + final_step_scale)
    bounds = [1.0] + [1.0 - k * h for k in range(1, nfe)] + [0.0]
    return StepGrid(nfe=nfe, raw_boundaries=tuple(bounds), final_step_scale=float(final_step_scale))


def forward_diffuse(x0, eps, t):
    """``x_t = alpha_t x0 + sigma_t eps``."""
    if np.shape(x0) != np.shape(eps):
        raise ValueError(f"shape mismatch: x0 {np.shape(x0)} vs eps {np.shape(eps)}")
    lo, hi = _min_max(t)
    if lo < 0.0 or hi > 1.0:
        raise ValueError("t outside [0, 1]")
    return alpha(t) * x0 + sigma(t) * eps


def sample_velocity(x_t, x0, t):
    """Flow-matching regression target ``(x_t - x0) / t``."""
    lo, _ = _min_max(t)
    if lo <= 0.0:
        raise ValueError("sample velocity is undefined at t = 0")
    return (x_t - x0) / t
