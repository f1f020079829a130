"""Student policy generator: a small MLP from ``(x_src, t_src, c)`` to policy parameters.

Parameters live in one flat float64 vector. The network is evaluated with torch
so the matching loss can be differentiated exactly through the closed-form GM
posterior; the optimizer and EMA work on plain numpy vectors.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .policy import PolicyHandle, dx_policy, gm_policy
from .schedule import shift_time

CHECKPOINT_VERSION = 1
EMA_GAMMA = 7.0

_ACTIVATIONS = {"tanh": torch.tanh, "silu": torch.nn.functional.silu}


@dataclass
class StudentConfig:
    dim: int
    hidden: list = field(default_factory=lambda: [256, 256, 256])
    activation: str = "tanh"
    n_freq: int = 16
    n_classes: int = 1
    head: str = "gm"  # "gm" or "dx"
    K: int = 8
    L: int = 1
    C: int | None = None
    N: int = 10
    head_jitter: float = 0.3

    def __post_init__(self):
        self.hidden = [int(h) for h in self.hidden]
        if self.C is None:
            self.C = self.dim // self.L
        if self.head not in ("gm", "dx"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head == "gm" and self.L * self.C != self.dim:
            raise ValueError(f"L*C = {self.L * self.C} does not match dim {self.dim}")
        if min([self.dim, self.n_freq, self.n_classes, self.K, self.N, self.L] + self.hidden) < 1:
            raise ValueError("student sizes must be positive")

    @property
    def cond_dim(self) -> int:
        # a single class needs no embedding
        return self.n_classes if self.n_classes > 1 else 0

    @property
    def in_dim(self) -> int:
        return self.dim + 2 * self.n_freq + self.cond_dim

    @property
    def out_dim(self) -> int:
        if self.head == "dx":
            return self.N * self.dim
        return self.L * (self.K + self.K * self.C) + 1

    def layer_sizes(self):
        sizes = [self.in_dim] + self.hidden + [self.out_dim]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self) -> int:
        return sum(o * i + o for i, o in self.layer_sizes())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StudentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown student keys: {sorted(unknown)}")
        return cls(**d)


def init_params(cfg: StudentConfig, seed: int) -> np.ndarray:
    """LeCun-normal hidden layers, zero biases and a (near) zero output layer.

    With the zero head every GM policy starts with uniform weights, zero
    u-space means and unit std; DX policies start with zero grid velocities.
    An exactly zero GM head keeps all K components identical forever (they
    receive identical gradients), so the logit and mean rows get a small
    LeCun-scaled jitter of relative size ``head_jitter``; the ``log_s`` row
    stays zero. ``head_jitter=0`` gives the exact zero head.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    layers = cfg.layer_sizes()
    for j, (i, o) in enumerate(layers):
        if j == len(layers) - 1:
            w = np.zeros((o, i))
            if cfg.head == "gm" and cfg.head_jitter > 0:
                w[:-1] = cfg.head_jitter * rng.standard_normal((o - 1, i)) / math.sqrt(i)
        else:
            w = rng.standard_normal((o, i)) / math.sqrt(i)
        chunks += [w.ravel(), np.zeros(o)]
    return np.concatenate(chunks)


def _unflatten(cfg: StudentConfig, flat: torch.Tensor):
    out, pos = [], 0
    for i, o in cfg.layer_sizes():
        w = flat[pos: pos + o * i].view(o, i)
        pos += o * i
        b = flat[pos: pos + o]
        pos += o
        out.append((w, b))
    if pos != flat.numel():
        raise ValueError(f"expected {pos} parameters, got {flat.numel()}")
    return out


def time_features(t: torch.Tensor, n_freq: int) -> torch.Tensor:
    freqs = math.pi * torch.exp(torch.linspace(0.0, math.log(256.0), n_freq, dtype=torch.float64))
    ang = t.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], -1)


def network(cfg: StudentConfig, params, x_src, t_src, c=None) -> torch.Tensor:
    """Raw head outputs ``(B, out_dim)``."""
    flat = params if isinstance(params, torch.Tensor) else torch.from_numpy(np.asarray(params, dtype=np.float64))
    x_src = torch.as_tensor(x_src, dtype=torch.float64)
    t_src = torch.as_tensor(t_src, dtype=torch.float64).reshape(-1)
    feats = [x_src, time_features(t_src, cfg.n_freq)]
    if cfg.cond_dim:
        c = torch.as_tensor(np.broadcast_to(np.asarray(c, dtype=np.int64), (x_src.shape[0],)).copy())
        feats.append(torch.nn.functional.one_hot(c, cfg.n_classes).to(torch.float64))
    h = torch.cat(feats, -1)
    act = _ACTIVATIONS[cfg.activation]
    layers = _unflatten(cfg, flat)
    for w, b in layers[:-1]:
        h = act(torch.addmm(b, h, w.t()))
    w, b = layers[-1]
    return torch.addmm(b, h, w.t())


def split_head(cfg: StudentConfig, raw: torch.Tensor):
    """GM head -> ``(logits (B,L,K), means_u (B,L,K,C), log_s (B,))``; DX head -> ``u_grid (B,N,D)``."""
    B = raw.shape[0]
    if cfg.head == "dx":
        return raw.reshape(B, cfg.N, cfg.dim)
    L, K, C = cfg.L, cfg.K, cfg.C
    logits = raw[:, : L * K].reshape(B, L, K)
    means = raw[:, L * K: L * K + L * K * C].reshape(B, L, K, C)
    return logits, means, raw[:, -1]


def forward(cfg: StudentConfig, params, x_src, tau_src, tau_dst, c=None, shift: float = 1.0) -> PolicyHandle:
    """Generate one policy per row for the segment ``[tau_dst, tau_src]``."""
    x_src = torch.as_tensor(np.asarray(x_src, dtype=np.float64)) if not isinstance(x_src, torch.Tensor) else x_src
    B = x_src.shape[0]
    tau_src = torch.as_tensor(np.broadcast_to(np.asarray(tau_src, dtype=np.float64), (B,)).copy())
    tau_dst = torch.as_tensor(np.broadcast_to(np.asarray(tau_dst, dtype=np.float64), (B,)).copy())
    t_src = shift_time(tau_src, shift)
    if float(t_src.min()) <= 0.0:
        raise ValueError("policies need t_src > 0")
    raw = network(cfg, params, x_src, t_src, c)
    if not bool(torch.isfinite(raw).all()):
        raise FloatingPointError("student produced non-finite policy parameters")
    if cfg.head == "dx":
        return dx_policy(split_head(cfg, raw), x_src, tau_src, tau_dst, shift)
    logits, means, log_s = split_head(cfg, raw)
    return gm_policy(logits, means, log_s, x_src, tau_src, tau_dst, shift)


# ---------------------------------------------------------------------------
# matching loss


@dataclass
class MatchBatch:
    """Matching targets for ``R`` policy rows and ``S`` queries per row.

    Each query averages the learner velocity over ``W`` detached window points
    with weights ``wq`` (a single point with weight 1 for instantaneous
    matching). The loss is normalized by ``norm`` (the number of batch
    elements, which can be smaller than ``R`` when one element spans several
    segments).
    """
    x_src: np.ndarray  # (R, D)
    tau_src: np.ndarray  # (R,)
    tau_dst: np.ndarray  # (R,)
    c: np.ndarray  # (R,)
    xq: np.ndarray  # (R, S, W, D)
    tq: np.ndarray  # (R, S, W)
    wq: np.ndarray  # (R, S, W)
    u_teacher: np.ndarray  # (R, S, D)
    seg_w: np.ndarray  # (R, S)
    norm: float
    shift: float = 1.0

    @staticmethod
    def concat(batches: list["MatchBatch"]) -> "MatchBatch":
        if len(batches) == 1:
            return batches[0]
        S = max(b.xq.shape[1] for b in batches)
        W = max(b.xq.shape[2] for b in batches)
        padded = [_pad(b, S, W) for b in batches]
        cat = lambda k: np.concatenate([getattr(b, k) for b in padded])
        return MatchBatch(cat("x_src"), cat("tau_src"), cat("tau_dst"), cat("c"), cat("xq"), cat("tq"),
                          cat("wq"), cat("u_teacher"), cat("seg_w"), batches[0].norm, batches[0].shift)


def _pad(b: MatchBatch, S: int, W: int) -> MatchBatch:
    R, s, w, D = b.xq.shape
    if s == S and w == W:
        return b
    xq = np.repeat(b.xq[:, :1, :1], S, 1).repeat(W, 2)
    tq = np.repeat(b.tq[:, :1, :1], S, 1).repeat(W, 2)
    xq[:, :s, :w], tq[:, :s, :w] = b.xq, b.tq
    wq = np.zeros((R, S, W))
    wq[:, :s, :w] = b.wq
    ut = np.zeros((R, S, D))
    ut[:, :s] = b.u_teacher
    sw = np.zeros((R, S))
    sw[:, :s] = b.seg_w
    return replace(b, xq=xq, tq=tq, wq=wq, u_teacher=ut, seg_w=sw)


def policy_loss(policy: PolicyHandle, batch: MatchBatch) -> torch.Tensor:
    """``sum_rows sum_s seg_w * 0.5 * |u_T - sum_w wq * pi(xq, tq)|^2 / norm``."""
    u = policy.velocity(torch.from_numpy(batch.xq), torch.from_numpy(batch.tq))
    avg = (torch.from_numpy(batch.wq).unsqueeze(-1) * u).sum(2)
    err = ((torch.from_numpy(batch.u_teacher) - avg) ** 2).sum(-1)
    return (torch.from_numpy(batch.seg_w) * 0.5 * err).sum() / batch.norm


def loss_and_grad(cfg: StudentConfig, params: np.ndarray, batch: MatchBatch):
    """Loss and its exact gradient w.r.t. the flat parameter vector.

    Query states are constants; gradients reach the parameters only through
    the learner policy.
    """
    flat = torch.tensor(np.asarray(params, dtype=np.float64), requires_grad=True)
    pol = forward(cfg, flat, batch.x_src, batch.tau_src, batch.tau_dst, batch.c, batch.shift)
    loss = policy_loss(pol, batch)
    loss.backward()
    grad = flat.grad.numpy()
    val = loss.item()
    if not (math.isfinite(val) and np.isfinite(grad).all()):
        raise FloatingPointError("non-finite loss or gradient")
    return val, grad


def loss_value(cfg: StudentConfig, params: np.ndarray, batch: MatchBatch) -> float:
    with torch.no_grad():
        pol = forward(cfg, params, batch.x_src, batch.tau_src, batch.tau_dst, batch.c, batch.shift)
        return policy_loss(pol, batch).item()


# ---------------------------------------------------------------------------
# optimizer state


@dataclass
class TrainState:
    params: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    ema_params: np.ndarray
    iteration: int = 0
    seed: int = 0

    def __post_init__(self):
        n = len(self.params)
        if not (len(self.adam_m) == len(self.adam_v) == len(self.ema_params) == n):
            raise ValueError("train-state vectors must share one length")

    @classmethod
    def fresh(cls, params: np.ndarray, seed: int = 0) -> "TrainState":
        p = np.array(params, dtype=np.float64)
        return cls(p, np.zeros_like(p), np.zeros_like(p), p.copy(), 0, seed)

    def copy(self) -> "TrainState":
        return TrainState(self.params.copy(), self.adam_m.copy(), self.adam_v.copy(), self.ema_params.copy(),
                          self.iteration, self.seed)


def adam_step(state: TrainState, grad: np.ndarray, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> TrainState:
    """Bias-corrected Adam without weight decay; increments the iteration counter."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.params.shape:
        raise ValueError(f"gradient shape {grad.shape} != params {state.params.shape}")
    it = state.iteration + 1
    m = beta1 * state.adam_m + (1 - beta1) * grad
    v = beta2 * state.adam_v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**it)
    v_hat = v / (1 - beta2**it)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return TrainState(params, m, v, state.ema_params, it, state.seed)


def ema_beta(iteration: int, gamma: float = EMA_GAMMA) -> float:
    if iteration < 1:
        raise ValueError("EMA needs iteration >= 1")
    return (1.0 - 1.0 / iteration) ** (gamma + 1.0)


def ema_update(state: TrainState, gamma: float = EMA_GAMMA) -> TrainState:
    """``shadow <- beta shadow + (1 - beta) params`` with the power-function profile."""
    b = ema_beta(state.iteration, gamma)
    ema = b * state.ema_params + (1.0 - b) * state.params
    return replace(state, ema_params=ema)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, cfg: StudentConfig, state: TrainState, run_config: dict | None = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "student_config": cfg.to_dict(),
        "params": state.params.tolist(),
        "ema_params": state.ema_params.tolist(),
        "adam_m": state.adam_m.tolist(),
        "adam_v": state.adam_v.tolist(),
        "iteration": int(state.iteration),
        "seed": int(state.seed),
    }
    if run_config is not None:
        doc["run_config"] = run_config
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path: str):
    """Returns ``(StudentConfig, TrainState, run_config or None)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    cfg = StudentConfig.from_dict(doc["student_config"])
    arr = lambda k: np.array(doc[k], dtype=np.float64)
    state = TrainState(arr("params"), arr("adam_m"), arr("adam_v"), arr("ema_params"),
                       int(doc["iteration"]), int(doc["seed"]))
    if len(state.params) != cfg.n_params:
        raise ValueError(f"{path}: parameter count does not match the student config")
    return cfg, state, doc.get("run_config")
