"""Top singular value by power iteration and the fixed-direction estimator.

Within a refresh window the right singular direction ``v`` is held fixed and
the spectral penalty is ``sqrt(||M v||^2 + eps_spec)``; its gradient in ``M``
is ``M v vᵀ / sigma_hat``.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import InvalidInputError, check_unit_vector
from .core_risk import _as_entries

DEFAULT_EPS_SPEC = 1e-8


@dataclass
class PowerState:
    v: np.ndarray
    sigma_est: float
    iterations_used: int


def initial_vector(M):
    """Normalized all-ones vector, or e0 if MᵀM annihilates it."""
    entries, _ = _as_entries(M)
    K = entries.shape[1]
    v = np.full(K, 1.0 / np.sqrt(K))
    if not np.any(entries @ v):
        v = np.zeros(K)
        v[0] = 1.0
    return v


def power_iteration(M, v0=None, t_pi=50, tol=0.0):
    """Run up to ``t_pi`` steps of ``v <- normalize(MᵀM v)``.

    Stops early once the sigma estimate changes by at most
    ``tol * max(sigma, 1e-12)``; convergence is judged on sigma rather than
    on ``v`` because a repeated top singular value leaves ``v`` free to wander.
    """
    entries, _ = _as_entries(M)
    K = entries.shape[1]
    if t_pi < 1:
        raise InvalidInputError(f"t_pi must be >= 1, got {t_pi}")
    v = initial_vector(entries) if v0 is None else check_unit_vector(v0, K, "v0")
    sigma = float(np.linalg.norm(entries @ v))
    if not np.any(entries):
        return PowerState(v.copy(), 0.0, 0)
    used = 0
    for used in range(1, t_pi + 1):
        w = entries.T @ (entries @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # v sits in the null space; restart from the deterministic fallback
            v = initial_vector(entries)
            w = entries.T @ (entries @ v)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
        v = w / norm
        new_sigma = float(np.linalg.norm(entries @ v))
        done = abs(new_sigma - sigma) <= tol * max(new_sigma, 1e-12)
        sigma = new_sigma
        if done:
            break
    return PowerState(v, sigma, used)


def sigma_hat(M, v, eps_spec=DEFAULT_EPS_SPEC):
    """Stabilized Rayleigh estimate ``sqrt(||M v||^2 + eps_spec)``."""
    if eps_spec < 0:
        raise InvalidInputError(f"eps_spec must be >= 0, got {eps_spec!r}")
    entries, _ = _as_entries(M)
    Mv = entries @ np.asarray(v, dtype=float)
    return float(np.sqrt(Mv @ Mv + eps_spec))


def sigma_hat_grad(M, v, eps_spec=DEFAULT_EPS_SPEC):
    """Gradient of :func:`sigma_hat` with respect to ``M``, ``v`` held fixed.

    The diagonal is returned as computed; callers chaining into a
    zero-diagonal matrix drop it.
    """
    entries, _ = _as_entries(M)
    v = np.asarray(v, dtype=float)
    value = sigma_hat(entries, v, eps_spec)
    if value == 0.0:
        raise InvalidInputError("sigma_hat is zero with eps_spec = 0; gradient is singular")
    return np.outer(entries @ v, v) / value
