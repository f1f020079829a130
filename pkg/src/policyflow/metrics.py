"""Desk-scale sample metrics: seed-paired endpoint MSE, sliced Wasserstein, diversity."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance

METRICS_VERSION = 1


def _check(x, name):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.size == 0 or len(x) == 0:
        raise ValueError(f"{name}: empty sample set")
    if not np.isfinite(x).all():
        raise ValueError(f"{name}: non-finite samples")
    return x


def endpoint_alignment(student, teacher) -> float:
    """Mean squared distance between samples generated from the same noise."""
    a, b = _check(student, "student"), _check(teacher, "teacher")
    if a.shape != b.shape:
        raise ValueError(f"unpaired inputs: {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).sum(-1).mean())


def projections(dim: int, n_projections: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal((n_projections, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_wasserstein(a, b, n_projections: int = 256, seed: int = 0) -> float:
    """Average 1D Wasserstein-1 between random unit projections of ``a`` and ``b``."""
    a, b = _check(a, "a"), _check(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets differ in dimension")
    v = projections(a.shape[1], n_projections, seed)
    pa, pb = a @ v.T, b @ v.T
    if len(a) == len(b):
        # equal sizes: W1 is the mean gap between sorted projections
        d = np.abs(np.sort(pa, 0) - np.sort(pb, 0)).mean(0)
    else:
        d = np.array([wasserstein_distance(pa[:, j], pb[:, j]) for j in range(n_projections)])
    return float(d.mean())


def diversity(samples) -> float:
    """Mean Euclidean distance over all pairs."""
    x = _check(samples, "samples")
    if len(x) < 2:
        raise ValueError("diversity needs at least two samples")
    n = len(x)
    total = 0.0
    for lo in range(0, n, 512):
        blk = cdist(x[lo: lo + 512], x)
        # strict upper triangle of this block of rows
        mask = np.arange(n)[None, :] > np.arange(lo, min(lo + 512, n))[:, None]
        total += blk[mask].sum()
    return float(total / (n * (n - 1) / 2))


@dataclass
class MetricsReport:
    sliced_wasserstein: float
    diversity_mean_pairwise: float
    endpoint_alignment_mse: float | None = None
    nfe_used: int | None = None
    n_samples: int = 0
    n_reference: int = 0
    seeds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"version": METRICS_VERSION}
        d.update(asdict(self))
        return d


def evaluate(samples, reference, paired: bool = False, n_projections: int = 256, seed: int = 0,
             nfe: int | None = None) -> MetricsReport:
    a, b = _check(samples, "samples"), _check(reference, "reference")
    return MetricsReport(
        sliced_wasserstein=sliced_wasserstein(a, b, n_projections, seed),
        diversity_mean_pairwise=diversity(a) if len(a) > 1 else 0.0,
        endpoint_alignment_mse=endpoint_alignment(a, b) if paired else None,
        nfe_used=nfe, n_samples=len(a), n_reference=len(b), seeds={"projection": seed},
    )
