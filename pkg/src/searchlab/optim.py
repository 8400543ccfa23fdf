"""MuonAdamW: orthogonalized momentum for block matrices, AdamW for the rest."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import HPConfig
from .model import Params, param_kind

NS_COEFFS = (3.4445, -4.7750, 2.0315)
NS_STEPS = 5
MUON_MOMENTUM = 0.95
ADAM_EPS = 1e-8


def newton_schulz_orthogonalize(m: np.ndarray, iters: int = NS_STEPS,
                                coeffs: tuple[float, float, float] = NS_COEFFS) -> np.ndarray:
    """Approximate the orthogonal polar factor of ``m`` with a quintic iteration.

    The input is divided by its Frobenius norm first, so the result does not
    depend on the scale of ``m``. A zero matrix maps to zero.
    """
    m = np.asarray(m, dtype=float)
    norm = np.linalg.norm(m)
    if norm == 0.0:
        return np.zeros_like(m)
    a, b, c = coeffs
    x = m / norm
    tall = x.shape[0] > x.shape[1]
    if tall:
        x = x.T
    for _ in range(iters):
        g = x @ x.T
        x = a * x + (b * g + c * (g @ g)) @ x
    return x.T if tall else x


def ns_scalar_map(s, iters: int = NS_STEPS, coeffs: tuple[float, float, float] = NS_COEFFS):
    """What the iteration does to one (already normalized) singular value."""
    a, b, c = coeffs
    s = np.asarray(s, dtype=float)
    for _ in range(iters):
        s = a * s + b * s ** 3 + c * s ** 5
    return s


def muon_step(param: np.ndarray, grad: np.ndarray, buf: np.ndarray, lr: float,
              momentum_coef: float = MUON_MOMENTUM, weight_decay: float = 0.0,
              ns_steps: int = NS_STEPS) -> tuple[np.ndarray, np.ndarray]:
    """One Muon update. Returns (new_param, new_buf); inputs are not modified."""
    buf = momentum_coef * buf + grad
    rows, cols = param.shape
    update = newton_schulz_orthogonalize(buf, ns_steps) * math.sqrt(max(1.0, rows / cols))
    return param * (1.0 - lr * weight_decay) - lr * update, buf


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
               lr: float, betas: tuple[float, float], weight_decay: float = 0.0,
               eps: float = ADAM_EPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bias-corrected AdamW with decoupled decay; ``t`` is the 1-based step count."""
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    return param * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def lr_at(step: int, total_steps: int, base_lr: float, warmdown_ratio: float) -> float:
    """Constant, then a linear ramp to zero over the last ``warmdown_ratio`` of training."""
    if total_steps <= 0:
        return base_lr
    if step >= total_steps:
        return 0.0
    cooldown_start = (1.0 - warmdown_ratio) * total_steps
    if step < cooldown_start:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - cooldown_start)


def wd_at(step: int, total_steps: int, base_wd: float) -> float:
    if total_steps <= 0:
        return base_wd
    return base_wd * max(0.0, 1.0 - step / total_steps)


def param_group(name: str) -> str:
    """``muon`` for block matrices, ``adamw`` for everything else."""
    return "muon" if param_kind(name) == "matrix" else "adamw"


def base_lr_for(name: str, hp: HPConfig) -> float:
    kind = param_kind(name)
    if kind == "matrix":
        return hp.lr_matrix
    if kind == "embedding":
        return hp.lr_embedding
    if kind == "unembedding":
        return hp.lr_unembedding
    return hp.lr_scalar  # gains, residual scales, value-embedding gates


@dataclass
class OptimState:
    muon_buf: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"optim.muon_buf.{k}": v for k, v in self.muon_buf.items()}
        out.update({f"optim.adam_m.{k}": v for k, v in self.adam_m.items()})
        out.update({f"optim.adam_v.{k}": v for k, v in self.adam_v.items()})
        out["optim.adam_t"] = np.array([float(self.adam_t)])
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "OptimState":
        st = cls()
        for key, val in tensors.items():
            if not key.startswith("optim."):
                continue
            if key == "optim.adam_t":
                st.adam_t = int(val[0])
                continue
            _, bucket, name = key.split(".", 2)
            getattr(st, bucket)[name] = val
        return st


class MuonAdamW:
    """Steps a parameter dict in place under the linear LR and WD schedules.

    Weight decay is applied to the Muon matrices only.
    """

    def __init__(self, params: Params, hp: HPConfig, total_steps: int,
                 momentum: float = MUON_MOMENTUM, ns_steps: int = NS_STEPS):
        self.hp = hp
        self.total_steps = total_steps
        self.momentum = momentum
        self.ns_steps = ns_steps
        self.state = OptimState()
        for name, p in params.items():
            if param_group(name) == "muon":
                if p.ndim != 2:
                    raise ValueError(f"muon parameter {name} is not 2-D")
                self.state.muon_buf[name] = np.zeros_like(p)
            else:
                self.state.adam_m[name] = np.zeros_like(p)
                self.state.adam_v[name] = np.zeros_like(p)

    def step(self, params: Params, grads: Params, step: int,
             frozen: frozenset[str] | set[str] = frozenset()) -> None:
        hp = self.hp
        scale = lr_at(step, self.total_steps, 1.0, hp.warmdown_ratio)
        wd = wd_at(step, self.total_steps, hp.weight_decay)
        self.state.adam_t += 1
        t = self.state.adam_t
        betas = (hp.adam_beta1, hp.adam_beta2)
        for name in params:
            if name in frozen:
                continue
            lr = base_lr_for(name, hp) * scale
            if name in self.state.muon_buf:
                params[name], self.state.muon_buf[name] = muon_step(
                    params[name], grads[name], self.state.muon_buf[name], lr,
                    self.momentum, wd, self.ns_steps)
            else:
                params[name], self.state.adam_m[name], self.state.adam_v[name] = adamw_step(
                    params[name], grads[name], self.state.adam_m[name],
                    self.state.adam_v[name], t, lr, betas)
