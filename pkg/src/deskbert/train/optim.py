"""Learning-rate schedules, gradient clipping and Adam(W)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from ..autodiff import Tensor


def lr_schedule(step: int, total_steps: int, plan) -> float:
    """Linear warmup to the peak, then decay, then a constant floor.

    ``cosine`` decays from the peak at the end of warmup down to
    ``floor_fraction * peak`` at step ``decay_fraction * total_steps`` and
    stays there. ``linear`` decays linearly to zero at ``total_steps``.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    peak, warm = plan.peak_lr, plan.warmup_steps
    if step < warm:
        return peak * step / warm
    if getattr(plan, "schedule", "cosine") == "linear":
        if total_steps <= warm:
            return peak
        return peak * max(0.0, (total_steps - step) / (total_steps - warm))
    floor = plan.floor_fraction * peak
    end = plan.decay_fraction * total_steps
    if step >= end or end <= warm:
        return floor
    progress = (step - warm) / (end - warm)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``max_norm / g`` when their global L2 norm ``g`` exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = global_norm(grads.values())
    if total <= max_norm:
        return dict(grads), total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


NO_DECAY_KINDS = frozenset({"norm", "embedding"})


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    ``decoupled=False`` gives plain Adam (weight decay ignored). Moments are
    stored at 32-bit; each update is computed at 64-bit from the stored values.
    """

    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    decoupled: bool = True
    no_decay: frozenset = frozenset()
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def decays(self, name: str) -> bool:
        return self.decoupled and self.weight_decay > 0 and name not in self.no_decay

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
            g = np.asarray(g, dtype=np.float64)
            m = self.m.get(name)
            v = self.v.get(name)
            m = np.zeros(p.shape) if m is None else m.astype(np.float64)
            v = np.zeros(p.shape) if v is None else v.astype(np.float64)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            theta = p.data.astype(np.float64)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.decays(name):
                update = update + self.weight_decay * theta
            p.data = (theta - lr * update).astype(p.data.dtype)
            self.m[name] = m.astype(np.float32)
            self.v[name] = v.astype(np.float32)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray], step_count: int) -> None:
        self.m = {k[len("adam.m/"):]: np.array(v, dtype=np.float32) for k, v in tensors.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: np.array(v, dtype=np.float32) for k, v in tensors.items() if k.startswith("adam.v/")}
        self.step_count = step_count


def adamw_step(params, grads, state: Optional[AdamW], plan, lr: float) -> AdamW:
    """One optimizer update; creates the state on first use."""
    if state is None:
        state = AdamW(betas=tuple(plan.betas), eps=plan.eps, weight_decay=plan.weight_decay)
    state.step(params, grads, lr)
    return state
