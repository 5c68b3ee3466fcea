"""Linear-Gaussian latent dynamics with stability penalty and projection."""

from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np


@dataclass
class DynamicsParams:
    """Transition parameters z_t = A z_{t-1} + B a_t + Q_sqrt eps_t."""

    A: np.ndarray            # (D, D)
    B: np.ndarray            # (D, J)
    Q_sqrt: np.ndarray       # (D, D) lower triangular, positive diagonal
    mu0: np.ndarray          # (D,)
    Sigma0_sqrt: np.ndarray  # (D, D) lower triangular, positive diagonal

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        self.Q_sqrt = np.asarray(self.Q_sqrt, dtype=np.float64)
        self.mu0 = np.asarray(self.mu0, dtype=np.float64)
        self.Sigma0_sqrt = np.asarray(self.Sigma0_sqrt, dtype=np.float64)
        D = self.A.shape[0]
        if self.A.shape != (D, D):
            raise ValueError("A must be square")
        if self.B.shape[0] != D or self.Q_sqrt.shape != (D, D):
            raise ValueError("B/Q_sqrt dimensions must match A")
        if self.mu0.shape != (D,) or self.Sigma0_sqrt.shape != (D, D):
            raise ValueError("mu0/Sigma0_sqrt dimensions must match A")
        for name in ("Q_sqrt", "Sigma0_sqrt"):
            L = getattr(self, name)
            if not np.allclose(L, np.tril(L)):
                raise ValueError(f"{name} must be lower triangular")
            if np.any(np.diag(L) <= 0):
                raise ValueError(f"{name} must have a positive diagonal")

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def Q(self) -> np.ndarray:
        return self.Q_sqrt @ self.Q_sqrt.T

    @property
    def Sigma0(self) -> np.ndarray:
        return self.Sigma0_sqrt @ self.Sigma0_sqrt.T


def transition(z_prev, a, eps, p: DynamicsParams):
    """One step of the latent recursion."""
    z_prev = np.asarray(z_prev, float)
    a = np.asarray(a, float)
    eps = np.asarray(eps, float)
    if z_prev.shape != (p.dim,) or eps.shape != (p.dim,):
        raise ValueError("latent vectors must have dimension D")
    if a.shape != (p.B.shape[1],):
        raise ValueError("covariate vector must have dimension J")
    return p.A @ z_prev + p.B @ a + p.Q_sqrt @ eps


def unroll(z0, a_seq, eps_seq, p: DynamicsParams) -> np.ndarray:
    """Deterministic fold of the transition over T steps -> (T, D).

    This is the map from exogenous noise to the latent path used by the
    non-centered variational parameterization.
    """
    a_seq = np.asarray(a_seq, float)
    eps_seq = np.asarray(eps_seq, float)
    if len(a_seq) != len(eps_seq):
        raise ValueError("a_seq and eps_seq must have equal length")
    z = np.asarray(z0, float)
    out = np.empty((len(eps_seq), p.dim))
    for t in range(len(eps_seq)):
        z = transition(z, a_seq[t], eps_seq[t], p)
        out[t] = z
    return out


def unroll_scan(z0, a_seq, eps_seq, A, B, Q_sqrt):
    """jax-traceable unroll used inside jitted objectives."""
    import jax

    def body(z, inp):
        a, eps = inp
        z = A @ z + B @ a + Q_sqrt @ eps
        return z, z

    _, zs = jax.lax.scan(body, z0, (a_seq, eps_seq))
    return zs


def stability_penalty(A, weight: float = 1.0, signed: bool = False):
    """Penalty pulling the average eigenvalue of A toward one.

    The absolute form |trace(A) - D| is the default; the signed variant
    trace(A) - D is available for parity with a literal reading of the
    objective.
    """
    A = jnp.asarray(A)
    D = A.shape[0]
    raw = jnp.trace(A) - D
    return weight * (raw if signed else jnp.abs(raw))


def spectral_radius(A) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(A, float)))))


def spectral_project(A, max_cond: float = 1e12) -> np.ndarray:
    """Rescale eigenvalues with modulus > 1 to the unit circle.

    Eigen-decomposes A, shrinks only the offending eigenvalues (preserving
    their arguments), and reconstructs the real part. Falls back to scaling
    the whole matrix by 1/rho(A) when the eigenbasis is numerically singular.
    """
    A = np.asarray(A, dtype=np.float64)
    w, V = np.linalg.eig(A)
    mod = np.abs(w)
    if not np.any(mod > 1.0):
        return A.copy()
    if np.linalg.cond(V) > max_cond:
        return A / spectral_radius(A)
    w_proj = np.where(mod > 1.0, w / mod, w)
    return np.real(V @ np.diag(w_proj) @ np.linalg.inv(V))


def default_covariates(tod_minutes, energy=None) -> np.ndarray:
    """Covariate features: sin/cos of time of day at 24 h and 12 h periods,
    plus a normalized energy channel (zeros when absent)."""
    tod = np.asarray(tod_minutes, dtype=np.float64)
    w24 = 2.0 * np.pi * tod / 1440.0
    w12 = 2.0 * np.pi * tod / 720.0
    cols = [np.sin(w24), np.cos(w24), np.sin(w12), np.cos(w12)]
    if energy is None:
        cols.append(np.zeros_like(tod))
    else:
        energy = np.asarray(energy, dtype=np.float64)
        scale = np.std(energy)
        cols.append((energy - np.mean(energy)) / (scale if scale > 0 else 1.0))
    return np.stack(cols, axis=1)
