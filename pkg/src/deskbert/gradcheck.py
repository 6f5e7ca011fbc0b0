"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .autodiff import GradTape, Tensor, backward, precision


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, step: float, coords) -> np.ndarray:
    flat = x.data.reshape(-1)
    out = np.empty(len(coords), dtype=np.float64)
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x).item()
        flat[i] = orig - step
        down = f(x).item()
        flat[i] = orig
        out[n] = (up - down) / (2.0 * step)
    return out


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-3,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    dtype=np.float64,
) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    The error per coordinate is ``|a - n| / (|a| + |n| + 1e-8)``. With
    ``max_coords`` only a random subset of coordinates is probed.

    ``f`` runs with tensors stored at ``dtype``. At 32-bit storage the rounding
    of ``f`` itself (~1e-7 relative) swamps central differences of small
    gradient entries, hence the 64-bit default.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    coords = np.arange(x.size)
    if max_coords is not None and max_coords < x.size:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))

    saved, saved_flag = x.data, x.requires_grad
    with precision(dtype):
        x.data = saved.astype(dtype)
        x.requires_grad = True
        try:
            with GradTape():
                y = f(x)
            grads = backward(y)
            analytic = grads[x].data.reshape(-1).astype(np.float64) if x in grads else np.zeros(x.size)
            numeric = numeric_grad(f, x, step, coords)
        finally:
            x.data, x.requires_grad = saved, saved_flag
    a = analytic[coords]
    err = np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0
