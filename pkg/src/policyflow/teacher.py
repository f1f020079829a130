"""Analytic Gaussian-mixture teacher and toy datasets.

The teacher's data prior is an isotropic GM per condition class, so the exact
probability-flow velocity is available in closed form. Unconditional
velocities use the pooled mixture of all classes (equal class probability).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .schedule import T_FLOOR, shift_time


@dataclass
class GMPrior:
    weights: np.ndarray  # (J,)
    means: np.ndarray    # (J, D)
    stds: np.ndarray     # (J,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.stds = np.broadcast_to(np.asarray(self.stds, dtype=np.float64), self.weights.shape).copy()
        if self.means.shape[0] != self.weights.shape[0]:
            raise ValueError("weights and means disagree on the number of components")
        if abs(self.weights.sum() - 1.0) > 1e-9 or (self.weights < 0).any():
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if (self.stds <= 0).any():
            raise ValueError("component stds must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[idx] + self.stds[idx, None] * rng.standard_normal((n, self.dim))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "stds": self.stds.tolist()}


def pool_priors(priors: list[GMPrior]) -> GMPrior:
    n = len(priors)
    return GMPrior(
        np.concatenate([p.weights / n for p in priors]),
        np.concatenate([p.means for p in priors]),
        np.concatenate([p.stds for p in priors]),
    )


@dataclass
class TeacherSpec:
    classes: dict
    cfg_scale: float = 1.0
    cfg_interval: tuple = (0.0, 1.0)
    uncond: GMPrior | None = field(default=None)

    def __post_init__(self):
        if not self.classes:
            raise ValueError("teacher needs at least one class")
        self.classes = {int(k): v for k, v in self.classes.items()}
        dims = {p.dim for p in self.classes.values()}
        if len(dims) != 1:
            raise ValueError("all classes must share one data dimension")
        lo, hi = self.cfg_interval
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"bad CFG interval {self.cfg_interval}")
        if self.cfg_scale < 1.0:
            raise ValueError("cfg_scale must be >= 1")
        if self.uncond is None:
            self.uncond = pool_priors([self.classes[k] for k in sorted(self.classes)])

    @property
    def dim(self) -> int:
        return next(iter(self.classes.values())).dim

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.classes)

    def to_dict(self) -> dict:
        return {
            "classes": {str(k): self.classes[k].to_dict() for k in self.class_ids},
            "cfg_scale": self.cfg_scale,
            "cfg_interval": list(self.cfg_interval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherSpec":
        unknown = set(d) - {"classes", "cfg_scale", "cfg_interval", "preset"}
        if unknown:
            raise ValueError(f"unknown teacher keys: {sorted(unknown)}")
        if "preset" in d:
            base = teacher_preset(**d["preset"])
            return cls(base.classes, d.get("cfg_scale", 1.0), tuple(d.get("cfg_interval", (0.0, 1.0))))
        classes = {int(k): GMPrior(**v) for k, v in d["classes"].items()}
        return cls(classes, float(d.get("cfg_scale", 1.0)), tuple(d.get("cfg_interval", (0.0, 1.0))))


def ring_prior(n_modes: int = 8, radius: float = 2.0, std: float = 0.2, phase: float = 0.0) -> GMPrior:
    ang = phase + 2 * np.pi * np.arange(n_modes) / n_modes
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return GMPrior(np.full(n_modes, 1.0 / n_modes), means, np.full(n_modes, std))


def grid_prior(side: int = 3, spacing: float = 1.5, std: float = 0.15) -> GMPrior:
    c = (np.arange(side) - (side - 1) / 2) * spacing
    xx, yy = np.meshgrid(c, c, indexing="ij")
    means = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return GMPrior(np.full(side * side, 1.0 / side**2), means, np.full(side * side, std))


def teacher_preset(name: str, **kw) -> TeacherSpec:
    """Named toy teachers: ``ring8``, ``two_ring`` (two classes) and ``gm_grid``."""
    if name == "ring8":
        return TeacherSpec({0: ring_prior(8, kw.get("radius", 2.0), kw.get("std", 0.2))})
    if name == "two_ring":
        inner = ring_prior(8, kw.get("inner_radius", 1.0), kw.get("std", 0.15))
        outer = ring_prior(8, kw.get("outer_radius", 2.5), kw.get("std", 0.15), phase=np.pi / 8)
        return TeacherSpec({0: inner, 1: outer}, kw.get("cfg_scale", 1.0),
                           tuple(kw.get("cfg_interval", (0.0, 1.0))))
    if name == "gm_grid":
        return TeacherSpec({0: grid_prior(kw.get("side", 3), kw.get("spacing", 1.5), kw.get("std", 0.15))})
    raise ValueError(f"unknown teacher preset {name!r}")


# ---------------------------------------------------------------------------
# velocities


def posterior_terms(prior: GMPrior, x_t: np.ndarray, t):
    """Per-component posterior means ``(n, J, D)`` and log-responsibilities ``(n, J)``."""
    x_t = np.atleast_2d(x_t)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x_t.shape[:1])
    a, s = (1.0 - t)[:, None], t[:, None]
    rho2 = prior.stds**2
    var_t = s**2 + a**2 * rho2  # marginal variance of x_t per component, (n, J)
    # (theta/rho^2 + a x/s^2) / (1/rho^2 + a^2/s^2), multiplied through by rho^2 s^2
    m = (s[..., None] ** 2 * prior.means + (a * rho2)[..., None] * x_t[:, None, :]) / var_t[..., None]
    diff = x_t[:, None, :] - a[..., None] * prior.means
    D = x_t.shape[1]
    r = (np.log(prior.weights) - 0.5 * D * np.log(2 * np.pi * var_t)
         - 0.5 * (diff**2).sum(-1) / var_t)
    return m, r


def posterior_mean(prior: GMPrior, x_t, t) -> np.ndarray:
    m, r = posterior_terms(prior, x_t, t)
    w = softmax(r, axis=-1)
    return (w[..., None] * m).sum(1)


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if t.min() < T_FLOOR - 1e-12 or t.max() > 1.0:
        raise ValueError(f"teacher queried outside [{T_FLOOR}, 1]")
    return t


def prior_velocity(prior: GMPrior, x_t, t) -> np.ndarray:
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    t = np.broadcast_to(_check_t(t), x_t.shape[:1])
    return (x_t - posterior_mean(prior, x_t, t)) / t[:, None]


def _labels(spec: TeacherSpec, c, n: int) -> np.ndarray:
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    bad = set(np.unique(c).tolist()) - set(spec.classes)
    if bad:
        raise ValueError(f"unknown condition ids {sorted(bad)}")
    return c


def teacher_velocity(spec: TeacherSpec, x_t, t, c) -> np.ndarray:
    """Exact conditional ODE velocity ``(x_t - E[x0 | x_t, c]) / t``."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    n = x_t.shape[0]
    t = np.broadcast_to(_check_t(t), (n,))
    c = _labels(spec, c, n)
    out = np.empty_like(x_t)
    for k in np.unique(c):
        sel = c == k
        out[sel] = prior_velocity(spec.classes[int(k)], x_t[sel], t[sel])
    return out


def teacher_velocity_cfg(spec: TeacherSpec, x_t, t, c) -> np.ndarray:
    """Interval classifier-free guidance; outside the interval the conditional velocity is used."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    n = x_t.shape[0]
    t = np.broadcast_to(_check_t(t), (n,))
    u = teacher_velocity(spec, x_t, t, c)
    if spec.cfg_scale == 1.0:
        return u
    lo, hi = spec.cfg_interval
    inside = (t >= lo) & (t <= hi)
    if inside.any():
        u_unc = prior_velocity(spec.uncond, x_t[inside], t[inside])
        u[inside] = u_unc + spec.cfg_scale * (u[inside] - u_unc)
    return u


def noise_for(seed: int, n: int, dim: int, offset: int = 0) -> np.ndarray:
    """Per-sample noise from counter-based streams; row ``i`` depends only on ``(seed, i)``."""
    return np.stack([np.random.default_rng([seed, offset + i]).standard_normal(dim) for i in range(n)])


def teacher_sample_batch(spec: TeacherSpec, c, n: int, substeps: int, seed: int,
                         shift: float = 1.0, offset: int = 0, x1=None, record: bool = False):
    """Euler-integrate the guided teacher ODE from noise at t=1 down to t=0.

    Raw time is split into ``substeps`` uniform steps and mapped through the
    shift; the last update starts from a time >= ``T_FLOOR``. Returns the
    endpoints, plus ``(taus, states)`` when ``record`` is set.
    """
    if substeps < 1:
        raise ValueError("need at least one substep")
    x = noise_for(seed, n, spec.dim, offset) if x1 is None else np.array(x1, dtype=np.float64)
    c = _labels(spec, c, n)
    taus = np.linspace(1.0, 0.0, substeps + 1)
    ts = shift_time(taus, shift)
    states = [x.copy()] if record else None
    for k in range(substeps):
        t_q = max(ts[k], T_FLOOR)
        u = teacher_velocity_cfg(spec, x, np.full(n, t_q), c)
        x = x - (ts[k] - ts[k + 1]) * u
        if record:
            states.append(x.copy())
    if record:
        return x, (taus, np.stack(states))
    return x


def teacher_sample(spec: TeacherSpec, c: int, nfe_substeps: int, seed: int, shift: float = 1.0) -> np.ndarray:
    """One teacher sample in ``R^D`` (sample index 0 of ``seed``)."""
    return teacher_sample_batch(spec, c, 1, nfe_substeps, seed, shift)[0]


# ---------------------------------------------------------------------------
# toy datasets


@dataclass
class ToyDataset:
    name: str
    samples: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if not np.isfinite(self.samples).all():
            raise ValueError("dataset contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.samples),):
                raise ValueError("labels must have one entry per sample")


CHECKER_CELLS = 4
CHECKER_SIZE = 1.0


def in_checkerboard(x: np.ndarray) -> np.ndarray:
    """Membership test for the checkerboard support on ``[-2, 2]^2``."""
    half = CHECKER_CELLS * CHECKER_SIZE / 2
    inside = (np.abs(x) <= half).all(-1)
    ij = np.floor((x + half) / CHECKER_SIZE).astype(np.int64)
    return inside & ((ij.sum(-1) % 2) == 0)


def gen_toy_dataset(name: str, n: int, seed: int, spec: TeacherSpec | None = None,
                    path: str | None = None) -> ToyDataset:
    """Deterministic toy data. ``gm-grid`` draws from the teacher prior itself."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if name == "gm-grid":
        spec = spec or teacher_preset("gm_grid")
        ids = spec.class_ids
        labels = rng.choice(ids, size=n)
        x = np.empty((n, spec.dim))
        for k in ids:
            sel = labels == k
            x[sel] = spec.classes[k].sample(int(sel.sum()), rng)
        return ToyDataset(name, x, labels)
    if name == "rings":
        labels = rng.integers(0, 2, size=n)
        radius = np.where(labels == 0, 1.0, 2.0) + 0.05 * rng.standard_normal(n)
        ang = rng.uniform(0, 2 * np.pi, size=n)
        return ToyDataset(name, np.stack([radius * np.cos(ang), radius * np.sin(ang)], 1), labels)
    if name == "checkerboard":
        half = CHECKER_CELLS * CHECKER_SIZE / 2
        cells = [(i, j) for i in range(CHECKER_CELLS) for j in range(CHECKER_CELLS) if (i + j) % 2 == 0]
        pick = rng.integers(0, len(cells), size=n)
        corner = np.array(cells, dtype=np.float64)[pick] * CHECKER_SIZE - half
        x = corner + rng.uniform(0.0, CHECKER_SIZE, size=(n, 2))
        return ToyDataset(name, x)
    if name == "csv":
        if path is None:
            raise ValueError("csv dataset needs a path")
        ds = read_dataset_csv(path)
        if n < len(ds.samples):
            idx = rng.choice(len(ds.samples), size=n, replace=False)
            return ToyDataset("csv", ds.samples[idx], None if ds.labels is None else ds.labels[idx])
        return ds
    raise ValueError(f"unknown dataset {name!r}")


def read_dataset_csv(path: str) -> ToyDataset:
    """Read ``dim0,...,dim{D-1}[,label]`` with a header row."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    has_label = header[-1] == "label"
    dims = header[:-1] if has_label else header
    if dims != [f"dim{i}" for i in range(len(dims))] or not dims:
        raise ValueError(f"{path}: bad header {header}")
    data = np.array([[float(v) for v in r[: len(dims)]] for r in rows[1:]], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in rows[1:]]) if has_label else None
    if data.size == 0:
        raise ValueError(f"{path}: no samples")
    return ToyDataset("csv", data.reshape(-1, len(dims)), labels)


def write_samples_csv(path: str, x: np.ndarray, labels=None) -> None:
    x = np.atleast_2d(x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"dim{i}" for i in range(x.shape[1])] + (["label"] if labels is not None else []))
        for i, row in enumerate(x):
            w.writerow([repr(float(v)) for v in row] + ([int(labels[i])] if labels is not None else []))

