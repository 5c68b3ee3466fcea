"""Reverse-mode differentiation of scalar losses over flat parameter vectors.

Backed by jax (the forward computations throughout the package are written in
jax.numpy), with an independent central-finite-difference checker. Subgradient
convention: max(x, y) splits the gradient evenly between tied arguments, so
clamps contribute 0 strictly inside the clamped region and 0.5 exactly at the
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import numpy as np
from jax.flatten_util import ravel_pytree


def flatten(params):
    """Flatten a pytree of arrays to (flat 1-D numpy vector, unflatten fn)."""
    flat, unravel = ravel_pytree(params)
    return np.asarray(flat, dtype=np.float64), unravel


def gradient(loss_fn, params_flat) -> np.ndarray:
    """Reverse-mode gradient of a scalar loss at a flat parameter vector."""
    params_flat = np.asarray(params_flat, dtype=np.float64)
    if not np.all(np.isfinite(params_flat)):
        raise ValueError("params must be finite")
    g = jax.grad(loss_fn)(params_flat)
    return np.asarray(g, dtype=np.float64)


def value_and_gradient(loss_fn, params_flat):
    v, g = jax.value_and_grad(loss_fn)(np.asarray(params_flat, np.float64))
    return float(v), np.asarray(g, dtype=np.float64)


@dataclass
class FiniteDiffReport:
    grad: np.ndarray
    fd_grad: np.ndarray
    rel_error: np.ndarray
    kink_flags: np.ndarray = field(repr=False)

    @property
    def max_rel_error(self) -> float:
        """Max relative error over coordinates not adjacent to a kink."""
        smooth = ~self.kink_flags
        if not np.any(smooth):
            return 0.0
        return float(np.max(self.rel_error[smooth]))

    @property
    def n_flagged(self) -> int:
        return int(np.sum(self.kink_flags))


def finite_diff_check(loss_fn, params_flat, h: float = 1e-5,
                      kink_tol: float = 1e-3) -> FiniteDiffReport:
    """Central-difference check of the reverse-mode gradient.

    Each coordinate is differenced at step sizes h and 2h; coordinates where
    the two estimates disagree materially are flagged as kink-adjacent (the
    loss is locally non-smooth there) and excluded from the pass/fail
    summary.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(params_flat, dtype=np.float64).copy()
    g = gradient(loss_fn, x)
    n = x.size
    fd = np.empty(n)
    fd2 = np.empty(n)
    f = jax.jit(loss_fn)
    for i in range(n):
        xi = x[i]
        for step, out in ((h, fd), (2.0 * h, fd2)):
            x[i] = xi + step
            up = float(f(x))
            x[i] = xi - step
            dn = float(f(x))
            out[i] = (up - dn) / (2.0 * step)
        x[i] = xi
    scale = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
    rel_error = np.abs(g - fd) / scale
    fd_scale = np.maximum(np.maximum(np.abs(fd), np.abs(fd2)), 1e-6)
    kink_flags = np.abs(fd - fd2) / fd_scale > kink_tol
    return FiniteDiffReport(grad=g, fd_grad=fd, rel_error=rel_error,
                            kink_flags=kink_flags)
