"""On-policy imitation distillation of a teacher ODE into a few-step policy student.

One training iteration:

1. pick origin states ``x_src`` on a raw-time segment ``[tau_dst, tau_src]``
   (noised data, or a detached sweep from pure noise);
2. generate policies with the current student; the detached copy (optionally
   with GM dropout) is rolled out to sampled intermediate times;
3. the teacher velocity at those states is matched by the learner policy,
   either instantaneously or averaged over a micro window;
4. one Adam step on the accumulated loss, then the EMA update.

Every source of randomness is a counter-based stream
``default_rng([seed, iteration, purpose])`` so runs are reproducible and
independent of batching.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import ode, student as st
from .metrics import sliced_wasserstein
from .schedule import T_FLOOR, StepGrid, forward_diffuse, make_step_grid, shift_time, unshift_time
from .teacher import TeacherSpec, ToyDataset, teacher_sample_batch, teacher_velocity_cfg

MODES = ("simple", "data-dependent", "data-free")
MIXING = ("off", "scheduled", "frozen")
LOG_VERSION = 1

# rng purposes
_DATA, _TIMES, _DROP, _MIX = 0, 1, 2, 3


class TrainingDiverged(ode.NumericalError):
    def __init__(self, iteration: int, msg: str):
        super().__init__(f"iteration {iteration}: {msg}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    nfe: int = 1
    shift: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    iterations: int = 10000
    n_intermediate: int = 2
    window_dtau: float = 3.0 / 128
    substep: float = 1.0 / 128
    dropout_rate: float = 0.05
    mode: str = "data-free"
    mixing: str = "off"
    decay_iterations: int = 2000
    mix_ratio: float = 1.0
    n_teacher_steps: int = 4
    mix_trajectories: int = 1
    bc_warmup: int = 0
    final_step_scale: float = 1.0
    ema_gamma: float = st.EMA_GAMMA
    grad_clip: float = 0.0
    eval_every: int = 0
    eval_samples: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mixing not in MIXING:
            raise ValueError(f"unknown mixing {self.mixing!r}; expected one of {MIXING}")
        if self.n_intermediate < 1 or self.n_teacher_steps < 1 or self.mix_trajectories < 1:
            raise ValueError("n_intermediate, n_teacher_steps and mix_trajectories must be >= 1")
        if self.mixing == "scheduled" and not 0 < self.decay_iterations <= self.iterations:
            raise ValueError("decay_iterations must lie in (0, iterations] when mixing is scheduled")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")
        if self.window_dtau < 0 or self.substep <= 0:
            raise ValueError("window_dtau must be >= 0 and substep > 0")
        if self.batch_size < 1 or self.iterations < 0 or self.lr <= 0 or self.shift <= 0:
            raise ValueError("bad batch_size / iterations / lr / shift")
        make_step_grid(self.nfe, self.final_step_scale)

    @property
    def grid(self) -> StepGrid:
        return make_step_grid(self.nfe, self.final_step_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def mix_ratio(cfg: TrainConfig, iteration: int) -> float | None:
    """Teacher ratio at ``iteration`` (0-based); ``None`` means pure on-policy."""
    if iteration < cfg.bc_warmup:
        return 1.0
    if cfg.mixing == "off":
        return None
    if cfg.mixing == "frozen":
        return cfg.mix_ratio
    return max(0.0, 1.0 - iteration / cfg.decay_iterations)


# ---------------------------------------------------------------------------
# scheduled trajectory mixing plans


@dataclass
class MixPlan:
    teacher_ratio: float
    teacher_steps: list  # [(tau_a, tau_b)], decreasing raw times
    segments: list  # partition of [tau_dst, tau_src]: (start, end, "teacher" | "policy")


def plan_positions(ratio, tau_src, tau_dst, u, v):
    """Teacher-step start/end raw times from uniform draws.

    ``u (..., n)`` places the cut points of the policy-covered length and
    ``v (..., n-1)`` splits the teacher-covered length ``ratio (tau_src - tau_dst)``
    into ``n`` steps. Returns ``a, b`` of shape ``(..., n)`` with
    ``tau_src >= a_1 >= b_1 >= a_2 >= ... >= tau_dst``.
    """
    tau_src = np.asarray(tau_src, dtype=np.float64)[..., None]
    span = tau_src - np.asarray(tau_dst, dtype=np.float64)[..., None]
    n = u.shape[-1]
    pol = np.sort(u, -1) * (1.0 - ratio) * span
    cuts = np.concatenate([np.zeros(u.shape[:-1] + (1,)), np.sort(v, -1), np.ones(u.shape[:-1] + (1,))], -1)
    lengths = np.diff(cuts, axis=-1) * ratio * span
    before = np.concatenate([np.zeros(u.shape[:-1] + (1,)), np.cumsum(lengths, -1)[..., : n - 1]], -1)
    a = tau_src - pol - before
    b = a - lengths
    return a, b


def make_mix_plan(teacher_ratio: float, tau_src: float, tau_dst: float, n_teacher_steps: int = 4,
                  rng: np.random.Generator | None = None) -> MixPlan:
    """Random teacher steps covering ``teacher_ratio`` of the segment, policy elsewhere."""
    if not 0.0 <= teacher_ratio <= 1.0:
        raise ValueError("teacher_ratio must lie in [0, 1]")
    if n_teacher_steps < 1:
        raise ValueError("need at least one teacher step")
    rng = rng or np.random.default_rng()
    u = rng.random(n_teacher_steps)
    v = rng.random(n_teacher_steps - 1)
    a, b = plan_positions(teacher_ratio, tau_src, tau_dst, u, v)
    steps = list(zip(a.tolist(), b.tolist()))
    pieces, pos = [], tau_src
    for sa, sb in steps:
        pieces.append((pos, sa, "policy"))
        pieces.append((sa, sb, "teacher"))
        pos = sb
    pieces.append((pos, tau_dst, "policy"))
    merged = []
    tiny = 1e-12 * max(1.0, tau_src - tau_dst)
    for s, e, tag in pieces:
        if s - e <= tiny:
            # rounding slivers are absorbed by the neighbouring piece
            if merged:
                merged[-1] = (merged[-1][0], e, merged[-1][2])
            continue
        if merged and merged[-1][2] == tag:
            merged[-1] = (merged[-1][0], e, tag)
        else:
            merged.append((s, e, tag))
    if not merged:
        merged = [(tau_src, tau_dst, "policy")]
    merged[0] = (tau_src,) + merged[0][1:]
    merged[-1] = (merged[-1][0], tau_dst, merged[-1][2])
    return MixPlan(float(teacher_ratio), steps, merged)


# ---------------------------------------------------------------------------
# trainer


@dataclass
class Rows:
    """Policy rows of one iteration (one per batch element and segment)."""
    x_src: np.ndarray
    tau_src: np.ndarray
    tau_dst: np.ndarray
    c: np.ndarray
    weight: np.ndarray  # per-row loss weight


@dataclass
class Instrumentation:
    teacher_queries: int = 0
    generations: int = 0
    learner_masked: int = 0
    detached_masked: int = 0
    last_ratio: float | None = None
    history: list = field(default_factory=list)


class Distiller:
    """Owns the teacher, configs and data source; ``step`` performs one training iteration."""

    def __init__(self, teacher: TeacherSpec, scfg: st.StudentConfig, tcfg: TrainConfig,
                 dataset: ToyDataset | None = None):
        if scfg.dim != teacher.dim:
            raise ValueError(f"student dim {scfg.dim} != teacher dim {teacher.dim}")
        self.teacher = teacher
        self.scfg = scfg
        self.cfg = tcfg
        self.dataset = dataset
        self.classes = np.array(teacher.class_ids)
        self.tau_min = float(unshift_time(T_FLOOR, tcfg.shift))
        self.debug = Instrumentation()

    # -- randomness and teacher ------------------------------------------------

    def rng(self, iteration: int, purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, iteration, purpose])

    def teacher_u(self, x, tau, c):
        t = np.maximum(shift_time(tau, self.cfg.shift), T_FLOOR)
        self.debug.teacher_queries += len(x)
        return teacher_velocity_cfg(self.teacher, x, t, c)

    def _draw_data(self, rng, B):
        c = self.classes[rng.integers(0, len(self.classes), B)]
        if self.dataset is not None:
            idx = rng.integers(0, len(self.dataset.samples), B)
            x0 = self.dataset.samples[idx]
            if self.dataset.labels is not None:
                c = self.dataset.labels[idx]
        else:
            x0 = np.empty((B, self.teacher.dim))
            for k in np.unique(c):
                sel = c == k
                x0[sel] = self.teacher.classes[int(k)].sample(int(sel.sum()), rng)
        return x0, c

    # -- policies --------------------------------------------------------------

    def generate(self, params, rows_x, tau_src, tau_dst, c) -> ode.PolicyHandle:
        with torch.no_grad():
            pol = st.forward(self.scfg, params, rows_x, tau_src, tau_dst, c, self.cfg.shift)
        self.debug.generations += len(rows_x)
        return pol

    def detached(self, pol, rng_drop):
        pol_d = pol.detach().with_dropout(self.cfg.dropout_rate, rng_drop)
        if pol.kind == "gm":
            self.debug.learner_masked += int(torch.isinf(pol.gm.gm.logits).sum())
            self.debug.detached_masked += int(torch.isinf(pol_d.gm.gm.logits).sum())
        return pol_d

    # -- origin states ---------------------------------------------------------

    def _rows_from_data(self, iteration, snap: bool) -> Rows:
        cfg = self.cfg
        rng = self.rng(iteration, _DATA)
        B = cfg.batch_size
        x0, c = self._draw_data(rng, B)
        eps = rng.standard_normal(x0.shape)
        bounds = np.array(cfg.grid.raw_boundaries)
        if snap:
            # smallest grid time >= tau'
            tau_p = rng.random(B)
            upper = bounds[:-1][::-1]  # increasing, excludes 0
            idx_up = np.searchsorted(upper, tau_p, side="left")
            seg = cfg.nfe - 1 - idx_up
        else:
            seg = rng.integers(0, cfg.nfe, B)
        tau_src, tau_dst = bounds[seg], bounds[seg + 1]
        t_src = shift_time(tau_src, cfg.shift)
        x_src = forward_diffuse(x0, eps, t_src[:, None])
        return Rows(x_src, tau_src, tau_dst, c, np.ones(B))

    # -- matching targets ------------------------------------------------------

    def _window(self, pol_d, x, tau, tau_end, prow, packed):
        """Query points, times and weights for each matched state."""
        cfg = self.cfg
        if cfg.window_dtau == 0.0:
            t = np.maximum(shift_time(tau, cfg.shift), T_FLOOR)
            return x[:, None], t[:, None], np.ones((len(x), 1))
        n_win = max(1, int(math.ceil(cfg.window_dtau / cfg.substep - 1e-9)))
        xs, ts, w, _ = ode.window_points(pol_d, x, tau, tau_end, cfg.substep, n_win, prow, packed)
        return xs, ts, w

    def onpolicy_targets(self, pol_d, rows: Rows, rng_t) -> st.MatchBatch:
        """Independent detached rollouts from ``x_src`` to ``S`` uniform intermediate times."""
        cfg = self.cfg
        R, S = len(rows.x_src), cfg.n_intermediate
        U = rng_t.random((R, S))
        tau = np.maximum(rows.tau_src[:, None] - U * (rows.tau_src - rows.tau_dst)[:, None], self.tau_min)
        tau = np.minimum(tau, rows.tau_src[:, None]).ravel()
        prow = np.repeat(np.arange(R), S)
        packed = ode.pack_policy(pol_d)
        x = ode.integrate(pol_d, rows.x_src[prow], rows.tau_src[prow], tau, cfg.substep, prow, packed=packed)
        u_t = self.teacher_u(x, tau, rows.c[prow])
        tau_end = np.maximum(tau - cfg.window_dtau, rows.tau_dst[prow])
        xs, ts, w = self._window(pol_d, x, tau, tau_end, prow, packed)
        W = xs.shape[1]
        return st.MatchBatch(rows.x_src, rows.tau_src, rows.tau_dst, rows.c,
                             xs.reshape(R, S, W, -1), ts.reshape(R, S, W), w.reshape(R, S, W),
                             u_t.reshape(R, S, -1), np.repeat(rows.weight[:, None], S, 1),
                             float(self.cfg.batch_size), cfg.shift)

    def mixed_targets(self, pol_d, rows: Rows, ratio: float, rng_t, rng_v) -> st.MatchBatch:
        """Trajectories mixing teacher Euler steps and detached-policy gaps.

        Each teacher step ``[a, b]`` queries the teacher once at ``a`` and
        matches the learner's average velocity over ``[a, b]`` along the detached
        rollout. Policy gaps restart from the end of the last teacher step of
        positive length (or from ``x_src``). Step positions come from ``rng_t``
        (as the on-policy intermediate times do) and the teacher-length splits
        from ``rng_v``, so at ratio 0 both modes see identical randomness.
        """
        cfg = self.cfg
        R, S, n = len(rows.x_src), cfg.mix_trajectories, cfg.n_teacher_steps
        U = rng_t.random((R, S, n))
        V = rng_v.random((R, S, n - 1))
        a, b = plan_positions(ratio, rows.tau_src[:, None], rows.tau_dst[:, None], U, V)
        M = R * S
        a = np.maximum(a.reshape(M, n), self.tau_min)
        b = np.maximum(b.reshape(M, n), self.tau_min)
        b = np.minimum(a, b)
        prow = np.repeat(np.arange(R), S)
        packed = ode.pack_policy(pol_d)
        anchor_x, anchor_tau = rows.x_src[prow].copy(), rows.tau_src[prow].copy()
        pieces = []
        for j in range(n):
            x_a = ode.integrate(pol_d, anchor_x, anchor_tau, a[:, j], cfg.substep, prow, packed=packed)
            u_t = self.teacher_u(x_a, a[:, j], rows.c[prow])
            n_win = max(1, int(math.ceil(float(np.max(a[:, j] - b[:, j])) / cfg.substep - 1e-9)))
            xs, ts, w, _ = ode.window_points(pol_d, x_a, a[:, j], b[:, j], cfg.substep, n_win, prow, packed)
            pieces.append((xs, ts, w, u_t))
            moved = b[:, j] < a[:, j]
            h = shift_time(a[:, j], cfg.shift) - shift_time(b[:, j], cfg.shift)
            x_b = x_a - h[:, None] * u_t
            anchor_x = np.where(moved[:, None], x_b, anchor_x)
            anchor_tau = np.where(moved, b[:, j], anchor_tau)
        W = max(p[0].shape[1] for p in pieces)
        D = rows.x_src.shape[1]
        xq = np.empty((M, n, W, D))
        tq = np.empty((M, n, W))
        wq = np.zeros((M, n, W))
        ut = np.empty((M, n, D))
        for j, (xs, ts, w, u_t) in enumerate(pieces):
            k = xs.shape[1]
            xq[:, j, :k], tq[:, j, :k], wq[:, j, :k] = xs, ts, w
            xq[:, j, k:], tq[:, j, k:] = xs[:, :1], ts[:, :1]
            ut[:, j] = u_t
        return st.MatchBatch(rows.x_src, rows.tau_src, rows.tau_dst, rows.c,
                             xq.reshape(R, S * n, W, D), tq.reshape(R, S * n, W), wq.reshape(R, S * n, W),
                             ut.reshape(R, S * n, D), np.repeat(rows.weight[:, None], S * n, 1),
                             float(cfg.batch_size), cfg.shift)

    def targets(self, params, rows: Rows, iteration: int, ratio, rng_t, rng_d, rng_v=None) -> st.MatchBatch:
        pol = self.generate(params, rows.x_src, rows.tau_src, rows.tau_dst, rows.c)
        pol_d = self.detached(pol, rng_d)
        if ratio is None:
            return self.onpolicy_targets(pol_d, rows, rng_t)
        return self.mixed_targets(pol_d, rows, ratio, rng_t, rng_v or self.rng(iteration, _MIX))

    def build_batch(self, params, iteration: int) -> st.MatchBatch:
        cfg = self.cfg
        ratio = mix_ratio(cfg, iteration)
        self.debug.last_ratio = ratio
        rng_t, rng_d, rng_v = self.rng(iteration, _TIMES), self.rng(iteration, _DROP), self.rng(iteration, _MIX)
        if cfg.mode != "data-free":
            rows = self._rows_from_data(iteration, snap=cfg.mode == "data-dependent")
            return self.targets(params, rows, iteration, ratio, rng_t, rng_d, rng_v)
        # data-free sweep: every segment of one noise draw, handoff by detached rollout
        rng = self.rng(iteration, _DATA)
        B = cfg.batch_size
        c = self.classes[rng.integers(0, len(self.classes), B)]
        x = rng.standard_normal((B, self.teacher.dim))
        batches = []
        for tau_src, tau_dst in cfg.grid.segments():
            rows = Rows(x, np.full(B, tau_src), np.full(B, tau_dst), c, np.full(B, tau_src - tau_dst))
            pol = self.generate(params, rows.x_src, rows.tau_src, rows.tau_dst, c)
            pol_d = self.detached(pol, rng_d)
            if ratio is None:
                batches.append(self.onpolicy_targets(pol_d, rows, rng_t))
            else:
                batches.append(self.mixed_targets(pol_d, rows, ratio, rng_t, rng_v))
            if tau_dst > 0.0:
                x = ode.integrate(pol_d, x, rows.tau_src, rows.tau_dst, cfg.substep)
        return st.MatchBatch.concat(batches)

    def step(self, state: st.TrainState):
        """One optimizer step; returns ``(state', loss)``."""
        it = state.iteration
        try:
            batch = self.build_batch(state.params, it)
            loss, grad = st.loss_and_grad(self.scfg, state.params, batch)
        except (FloatingPointError, ode.NumericalError) as err:
            raise TrainingDiverged(it, str(err)) from err
        if self.cfg.grad_clip > 0:
            norm = float(np.linalg.norm(grad))
            if norm > self.cfg.grad_clip:
                grad = grad * (self.cfg.grad_clip / norm)
        state = st.adam_step(state, grad, self.cfg.lr)
        state = st.ema_update(state, self.cfg.ema_gamma)
        return state, loss

    # -- evaluation ------------------------------------------------------------

    def sample(self, params, n: int, seed: int, rollout: ode.RolloutConfig | None = None, nfe: int | None = None,
               record: bool = False):
        return sample_student(self.scfg, params, self.teacher, n, seed, self.cfg.shift,
                              nfe or self.cfg.nfe, self.cfg.final_step_scale, rollout, record)

    def train(self, state: st.TrainState, iterations: int | None = None, log_path: str | None = None,
              reference: np.ndarray | None = None, eval_seed: int = 1, callback=None) -> st.TrainState:
        cfg = self.cfg
        end = cfg.iterations if iterations is None else state.iteration + iterations
        log = open(log_path, "a") if log_path else None
        try:
            while state.iteration < end:
                state, loss = self.step(state)
                self.debug.history.append(loss)
                if cfg.eval_every and (state.iteration % cfg.eval_every == 0 or state.iteration == end):
                    rec = {"version": LOG_VERSION, "iteration": state.iteration, "loss": loss,
                           "teacher_queries": self.debug.teacher_queries}
                    if reference is not None:
                        xs = self.sample(state.ema_params, cfg.eval_samples, eval_seed)
                        rec["sliced_wasserstein"] = sliced_wasserstein(xs, reference[: cfg.eval_samples])
                    if log:
                        log.write(json.dumps(rec) + "\n")
                        log.flush()
                    if callback:
                        callback(rec)
        finally:
            if log:
                log.close()
        return state


def eval_labels(teacher: TeacherSpec, n: int, offset: int = 0) -> np.ndarray:
    """Deterministic class labels cycling through the teacher classes."""
    ids = np.array(teacher.class_ids)
    return ids[(offset + np.arange(n)) % len(ids)]


def student_source(scfg: st.StudentConfig, params, shift: float):
    def source(x, tau_src, tau_dst, labels):
        with torch.no_grad():
            return st.forward(scfg, params, x, tau_src, tau_dst, labels, shift)
    return source


def sample_student(scfg: st.StudentConfig, params, teacher: TeacherSpec, n: int, seed: int, shift: float = 1.0,
                   nfe: int = 1, final_step_scale: float = 1.0, rollout: ode.RolloutConfig | None = None,
                   record: bool = False, offset: int = 0):
    """Few-step student samples from the seed-paired noise streams ``(seed, offset + i)``."""
    grid = make_step_grid(nfe, final_step_scale)
    labels = eval_labels(teacher, n, offset)
    return ode.sample(student_source(scfg, params, shift), grid, rollout or ode.RolloutConfig(), seed, n,
                      teacher.dim, labels, offset, record=record)


def sample_teacher(teacher: TeacherSpec, n: int, seed: int, substeps: int = 128, shift: float = 1.0,
                   offset: int = 0, record: bool = False):
    return teacher_sample_batch(teacher, eval_labels(teacher, n, offset), n, substeps, seed, shift, offset,
                                record=record)
