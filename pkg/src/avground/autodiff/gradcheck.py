from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def central_difference(f: Callable[[], float], flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    f_plus = f()
    flat[i] = orig - h
    f_minus = f()
    flat[i] = orig
    return (f_plus - f_minus) / (2 * h)


def stable_difference(f: Callable[[], float], flat: np.ndarray, i: int, h: float = 1e-5, h_small: float = 1e-6,
                      agree: float = 1e-4) -> float:
    """Central difference that steps down when a ReLU kink lies within ``h``.

    The large step has the lower round-off error and is used whenever it
    agrees with the small step; disagreement means the function is not
    smooth on ``[x - h, x + h]`` and the small step is returned instead.
    Only numeric estimates take part in the choice.
    """
    big = central_difference(f, flat, i, h)
    small = central_difference(f, flat, i, h_small)
    if abs(big - small) <= agree * max(abs(big), abs(small), 1e-6):
        return big
    return small


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: np.ndarray | None = None,
    h_small: float | None = None,
) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central differences.

    ``coords`` optionally restricts the check to a subset of flat indices
    (large parameter tensors).  With ``h_small`` each coordinate uses
    :func:`stable_difference`.  ``x.data`` is restored afterwards.
    """
    if not x.requires_grad:
        raise ValueError("finite_diff_check needs a requires-grad tensor")
    x.zero_grad()
    f(x).backward()
    analytic = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    numeric = np.empty(idx.size)
    def value() -> float:
        return float(f(x).data)

    with no_grad():
        for n, i in enumerate(idx):
            if h_small is None:
                numeric[n] = central_difference(value, flat, i, h)
            else:
                numeric[n] = stable_difference(value, flat, i, h, h_small)
    return float(relative_error(analytic[idx], numeric).max())
