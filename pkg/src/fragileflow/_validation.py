"""Input checking shared by the numeric modules and the estimators."""

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


def check_scores(scores, name="scores"):
    """Return ``scores`` as a finite 1-D float array with at least two options."""
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional, got shape {s.shape}")
    if s.shape[0] < 2:
        raise InvalidInputError(f"{name} needs at least 2 options, got {s.shape[0]}")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return s


def check_score_matrix(scores, name="scores"):
    """Return an (n, K) finite float array, K >= 2."""
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1:
        s = s[None, :]
    if s.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D (n, K), got shape {s.shape}")
    if s.shape[0] == 0:
        raise InvalidInputError(f"{name} is empty")
    if s.shape[1] < 2:
        raise InvalidInputError(f"{name} needs at least 2 options, got {s.shape[1]}")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return s


def check_labels(labels, n_classes, n_samples=None):
    y = np.asarray(labels)
    if y.ndim != 1:
        raise InvalidInputError(f"labels must be one-dimensional, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise InvalidInputError("labels must be integer class indices")
    y = y.astype(np.int64)
    if n_samples is not None and y.shape[0] != n_samples:
        raise InvalidInputError(
            f"got {y.shape[0]} labels for {n_samples} score vectors"
        )
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InvalidInputError(f"labels must lie in [0, {n_classes})")
    return y


def check_unit_vector(v, size, name="v", atol=1e-9):
    v = np.asarray(v, dtype=float)
    if v.shape != (size,):
        raise InvalidInputError(f"{name} must have shape ({size},), got {v.shape}")
    norm = np.linalg.norm(v)
    if abs(norm - 1.0) > atol:
        raise InvalidInputError(f"{name} must be unit-norm, got norm {norm!r}")
    return v


def check_fraction(value, name, *, open_low=True, open_high=True):
    value = float(value)
    low_ok = value > 0 if open_low else value >= 0
    high_ok = value < 1 if open_high else value <= 1
    if not (low_ok and high_ok and np.isfinite(value)):
        lo = "(" if open_low else "["
        hi = ")" if open_high else "]"
        raise InvalidInputError(f"{name} must lie in {lo}0, 1{hi}, got {value!r}")
    return value
