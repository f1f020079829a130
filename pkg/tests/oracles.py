"""Independent reference computations used by the unit and acceptance tests.

None of these import the kernels they check; they are written directly from
Bayes' rule, textbook conjugate updates and closed-form Gaussian flows.
"""
from __future__ import annotations

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import logsumexp


def quadrature_posterior_mean(weights, means, std, x_src, t_src, x_t, t, n_grid=20001, width=12.0):
    """``E[x0 | x_t]`` for a 1D x0-space mixture ``q(x0 | x_src)`` by trapezoid quadrature.

    The mixture is a belief held at ``(x_src, t_src)``; moving it to ``(x_t, t)``
    multiplies by ``N(x_t; a_t x0, s_t^2) / N(x_src; a_src x0, s_src^2)`` (the
    implied prior ``p(x0)`` times the new likelihood). With ``t_src = 1`` the
    divisor is constant in ``x0`` and this is plain Bayes with the mixture as prior.
    """
    weights, means = np.asarray(weights, float), np.asarray(means, float)
    a_t, a_s = 1.0 - t, 1.0 - t_src

    def log_integrand(x0):
        comp = np.log(weights)[:, None] - 0.5 * ((x0[None] - means[:, None]) / std) ** 2
        log_q = logsumexp(comp, axis=0)
        log_new = -0.5 * (x_t - a_t * x0) ** 2 / t**2
        log_old = -0.5 * (x_src - a_s * x0) ** 2 / t_src**2
        return log_q + log_new - log_old

    # locate the posterior mass with a coarse pass, then integrate finely around it
    coarse = np.linspace(means.min() - 40 * std - 10, means.max() + 40 * std + 10, 200001)
    lc = log_integrand(coarse)
    pc = np.exp(lc - lc.max())
    mu = trapezoid(pc * coarse, coarse) / trapezoid(pc, coarse)
    sd = np.sqrt(trapezoid(pc * (coarse - mu) ** 2, coarse) / trapezoid(pc, coarse))
    keep = coarse[pc > 1e-30]
    lo = min(keep.min(), mu - width * sd)
    hi = max(keep.max(), mu + width * sd)
    grid = np.linspace(lo, hi, n_grid)
    lg = log_integrand(grid)
    p = np.exp(lg - lg.max())
    return trapezoid(p * grid, grid) / trapezoid(p, grid)


def conjugate_posterior_mean(theta, prior_var, x_t, t):
    """Textbook Gaussian conjugate update for ``x_t = a_t x0 + t eps``, ``x0 ~ N(theta, prior_var)``."""
    a = 1.0 - t
    prec = 1.0 / prior_var + a**2 / t**2
    return (theta / prior_var + a * x_t / t**2) / prec


def single_gaussian_flow(x1, theta, rho, t):
    """Exact probability-flow solution for data ``N(theta, rho^2 I)`` started at noise ``x1``.

    The marginal std is ``sqrt(t^2 + (1-t)^2 rho^2)`` and the flow is the affine map
    matching standardized coordinates.
    """
    sd = np.sqrt(t**2 + (1 - t) ** 2 * rho**2)
    return (1 - t) * theta + sd * x1


def gaussian_mixture_velocity_1d(weights, means, stds, x, t):
    """Teacher velocity for a 1D Gaussian-mixture prior via quadrature of Bayes' rule."""
    grid = np.linspace(min(means) - 12 * max(stds) - 5, max(means) + 12 * max(stds) + 5, 200001)
    comp = [np.log(w) - 0.5 * ((grid - m) / s) ** 2 - np.log(s) for w, m, s in zip(weights, means, stds)]
    lp = logsumexp(np.array(comp), axis=0) - 0.5 * (x - (1 - t) * grid) ** 2 / t**2
    p = np.exp(lp - lp.max())
    return (x - trapezoid(p * grid, grid) / trapezoid(p, grid)) / t
