"""Gaussian-mixture kernel for the GMFlow policy.

Mixtures are isotropic with one shared std per policy. Leading dimensions are
batch dimensions; a factorized mixture carries an extra chunk axis ``L`` in
front of the component axis ``K``::

    logits  (..., L, K)
    means   (..., L, K, C)
    log_s   (...)
    x_src   (..., L, C)
    t_src   (...)

Everything is torch (float64) so the learner side can backpropagate through
the posterior. Weights are kept as unnormalized logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .schedule import T_FLOOR

U_SPACE = "u"
X0_SPACE = "x0"
_TIME_TOL = 1e-12


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.double()
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass
class IsoGM:
    logits: torch.Tensor
    means: torch.Tensor
    log_s: torch.Tensor
    space: str = U_SPACE

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def var(self) -> torch.Tensor:
        return torch.exp(2.0 * self.log_s)

    def mean(self) -> torch.Tensor:
        return (self.weights.unsqueeze(-1) * self.means).sum(-2)


@dataclass
class FactorGM:
    """A factorized mixture anchored at its origin state ``(x_src, t_src)``.

    ``gm.log_s`` has the batch shape only; it is broadcast over chunks.
    """
    gm: IsoGM
    x_src: torch.Tensor
    t_src: torch.Tensor

    @property
    def K(self) -> int:
        return self.gm.logits.shape[-1]

    @property
    def L(self) -> int:
        return self.gm.logits.shape[-2]

    @property
    def C(self) -> int:
        return self.gm.means.shape[-1]

    def chunk_gm(self) -> IsoGM:
        """Per-chunk view with ``log_s`` broadcast over ``L``."""
        g = self.gm
        return IsoGM(g.logits, g.means, g.log_s.unsqueeze(-1).expand(g.logits.shape[:-1]), g.space)

    def detach(self) -> "FactorGM":
        g = self.gm
        return FactorGM(IsoGM(g.logits.detach(), g.means.detach(), g.log_s.detach(), g.space),
                        self.x_src.detach(), self.t_src.detach())

    def index(self, idx) -> "FactorGM":
        g = self.gm
        return FactorGM(IsoGM(g.logits[idx], g.means[idx], g.log_s[idx], g.space),
                        self.x_src[idx], self.t_src[idx])


@dataclass
class PosteriorGM:
    logits: torch.Tensor
    means: torch.Tensor
    log_s: torch.Tensor
    nu: torch.Tensor
    zeta: torch.Tensor

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    def mean(self) -> torch.Tensor:
        return (self.weights.unsqueeze(-1) * self.means).sum(-2)


def u_to_x0(gm: IsoGM, x_src, t_src) -> IsoGM:
    """Re-express a velocity mixture ``q(u | x_src)`` as a mixture over ``x0``.

    Substituting ``u = (x_src - x0) / sigma_src`` gives means ``x_src - sigma_src mu``
    and std ``sigma_src s``; logits are unchanged.
    """
    if gm.space != U_SPACE:
        raise ValueError(f"expected a u-space mixture, got space={gm.space!r}")
    x_src, t_src = as_tensor(x_src), as_tensor(t_src)
    if float(t_src.min()) <= 0.0 or float(t_src.max()) > 1.0:
        raise ValueError("t_src must lie in (0, 1]")
    sig = t_src.reshape(t_src.shape + (1,) * (gm.means.dim() - t_src.dim()))
    means = x_src.unsqueeze(-2) - sig * gm.means
    log_s = gm.log_s + torch.log(t_src).reshape(t_src.shape + (1,) * (gm.log_s.dim() - t_src.dim()))
    return IsoGM(gm.logits, means, log_s, X0_SPACE)


def factor_u_to_x0(policy: FactorGM) -> FactorGM:
    if policy.gm.space == X0_SPACE:
        return policy
    g = policy.gm
    t = policy.t_src
    means = policy.x_src.unsqueeze(-2) - t[..., None, None, None] * g.means
    return FactorGM(IsoGM(g.logits, means, g.log_s + torch.log(t), X0_SPACE),
                    policy.x_src, policy.t_src)


def _check_times(t, t_src):
    t_min = float(t.min())
    if t_min < T_FLOOR - _TIME_TOL:
        raise ValueError(f"time {t_min} below the floor {T_FLOOR}")
    if bool((t > t_src + _TIME_TOL).any()):
        raise ValueError("policy queried at a time later than its origin (t > t_src)")


def gm_posterior(gm_x0: IsoGM, x_src, t_src, x_t, t, discrete: bool = False) -> PosteriorGM:
    """Denoising posterior ``q(x0 | x_t)`` of an x0-space mixture anchored at ``(x_src, t_src)``.

    Shapes: ``gm_x0`` logits ``(..., K)``, means ``(..., K, C)``, log_s ``(...)``;
    ``x_src, x_t`` are ``(..., C)``; ``t_src, t`` are ``(...)``.
    With ``discrete=True`` the mixture std is taken to be zero.
    """
    if gm_x0.space != X0_SPACE:
        raise ValueError(f"expected an x0-space mixture, got space={gm_x0.space!r}")
    x_src, t_src, x_t, t = (as_tensor(v) for v in (x_src, t_src, x_t, t))
    _check_times(t, t_src)
    a_t, a_s = 1.0 - t, 1.0 - t_src
    nu = (a_t / t**2).unsqueeze(-1) * x_t - (a_s / t_src**2).unsqueeze(-1) * x_src
    zeta = a_t**2 / t**2 - a_s**2 / t_src**2
    if bool((zeta < -1e-9 * (1.0 + zeta.abs())).any()):
        raise AssertionError("negative precision increment; t must not exceed t_src")
    mu_x = gm_x0.means
    if discrete:
        s_x2 = torch.zeros_like(zeta)
        log_s_post = torch.full_like(zeta, -math.inf)
    else:
        s_x2 = torch.exp(2.0 * gm_x0.log_s).expand(zeta.shape)
        log_s_post = gm_x0.log_s - 0.5 * torch.log1p(s_x2 * zeta)
    denom = (s_x2 * zeta + 1.0)[..., None, None]
    means = (s_x2[..., None, None] * nu.unsqueeze(-2) + mu_x) / denom
    quad = (mu_x * (nu.unsqueeze(-2) - 0.5 * zeta[..., None, None] * mu_x)).sum(-1)
    logits = torch.log_softmax(gm_x0.logits, dim=-1) + quad / denom[..., 0]
    return PosteriorGM(logits, means, log_s_post, nu, zeta)


def _factor_posterior(policy: FactorGM, x_t, t, discrete: bool) -> PosteriorGM:
    p = factor_u_to_x0(policy)
    x_t, t = as_tensor(x_t), as_tensor(t)
    L = p.L
    t_src = p.t_src.unsqueeze(-1).expand(p.t_src.shape + (L,))
    t_l = t.unsqueeze(-1).expand(t.shape + (L,))
    return gm_posterior(p.chunk_gm(), p.x_src, t_src, x_t, t_l, discrete=discrete)


def gm_velocity(policy: FactorGM, x_t, t) -> torch.Tensor:
    """Closed-form GMFlow velocity ``(x_t - E[x0 | x_t]) / t`` per chunk.

    ``x_t`` has shape ``(..., L, C)``; ``t`` has the batch shape.
    """
    x_t, t = as_tensor(x_t), as_tensor(t)
    post = _factor_posterior(policy, x_t, t, discrete=False)
    return (x_t - post.mean()) / t[..., None, None]


def gm_velocity_discrete(policy: FactorGM, x_t, t) -> torch.Tensor:
    """Velocity in the zero-std limit, where the mixture is a set of point masses."""
    x_t, t = as_tensor(x_t), as_tensor(t)
    post = _factor_posterior(policy, x_t, t, discrete=True)
    return (x_t - post.mean()) / t[..., None, None]


def apply_temperature(gm, T: float):
    """Approximate tempering: weights ``A^(1/T)`` renormalized, variance times ``T``.

    Accepts an :class:`IsoGM`, :class:`PosteriorGM` or :class:`FactorGM`.
    """
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if T == 1.0:
        return gm
    half_log_t = 0.5 * math.log(T)
    if isinstance(gm, FactorGM):
        return replace(gm, gm=apply_temperature(gm.gm, T))
    if isinstance(gm, PosteriorGM):
        return replace(gm, logits=torch.log_softmax(gm.logits, -1) / T, log_s=gm.log_s + half_log_t)
    return replace(gm, logits=torch.log_softmax(gm.logits, -1) / T, log_s=gm.log_s + half_log_t)


def dropout_mask(batch_shape, K: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(1 - rate) keep-mask of shape ``batch_shape + (K,)``.

    Rows that drop every component are redrawn until one survives.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    shape = tuple(batch_shape) + (K,)
    if rate == 0.0:
        return np.ones(shape, dtype=bool)
    keep = rng.random(shape) >= rate
    dead = ~keep.any(-1)
    while dead.any():
        keep[dead] = rng.random((int(dead.sum()), K)) >= rate
        dead = ~keep.any(-1)
    return keep


def gm_dropout(policy: FactorGM, rate: float, rng: np.random.Generator) -> FactorGM:
    """Drop mixture components with one mask per policy, shared across all chunks."""
    batch_shape = policy.gm.logits.shape[:-2]
    keep = dropout_mask(batch_shape, policy.K, rate, rng)
    if keep.all():
        return policy
    keep_t = torch.as_tensor(keep).unsqueeze(-2)
    logits = policy.gm.logits.masked_fill(~keep_t, -math.inf)
    return replace(policy, gm=replace(policy.gm, logits=logits))
