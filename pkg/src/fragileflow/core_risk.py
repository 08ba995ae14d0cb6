"""Scores, margins, the margin gate, and the error-flow matrix.

All functions are pure. Row-wise helpers (``*_rows``) operate on an
``(n, K)`` score array and are what the training and evaluation code use;
the scalar forms mirror them for single score vectors.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ._validation import (
    InvalidInputError,
    check_labels,
    check_score_matrix,
    check_scores,
)

#: Largest K for which :func:`vsr_exact` runs the dense eigensolver.
EXACT_EIGEN_CAP = 128

KAPPA_FLOOR = 1e-3


def default_kappa(gamma):
    """Gate temperature used when none is given: ``max(gamma / 4, 1e-3)``."""
    return max(float(gamma) / 4.0, KAPPA_FLOOR)


@dataclass(frozen=True)
class GateParams:
    """Safety buffer ``gamma`` and temperature ``kappa`` of the margin gate."""

    gamma: float
    kappa: float = None

    def __post_init__(self):
        gamma = float(self.gamma)
        kappa = default_kappa(gamma) if self.kappa is None else float(self.kappa)
        if not np.isfinite(gamma) or gamma < 0:
            raise InvalidInputError(f"gamma must be finite and >= 0, got {gamma!r}")
        if not np.isfinite(kappa) or kappa <= 0:
            raise InvalidInputError(f"kappa must be finite and > 0, got {kappa!r}")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "kappa", kappa)


@dataclass
class FlowMatrix:
    """K x K error-flow matrix with per-class sample counts.

    ``entries[i, j]`` is the (gated) probability mass sent to wrong option
    ``i`` when the truth is ``j``. Columns of classes absent from the sample
    are zero and flagged False in ``column_mask``.
    """

    entries: np.ndarray
    column_counts: np.ndarray = None
    column_mask: np.ndarray = None
    tie_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        if self.entries.ndim != 2 or self.entries.shape[0] != self.entries.shape[1]:
            raise InvalidInputError(f"entries must be square, got {self.entries.shape}")
        k = self.entries.shape[0]
        if self.column_counts is None:
            self.column_counts = np.ones(k, dtype=np.int64)
        self.column_counts = np.asarray(self.column_counts, dtype=np.int64)
        if self.column_mask is None:
            self.column_mask = self.column_counts > 0
        self.column_mask = np.asarray(self.column_mask, dtype=bool)
        if self.column_counts.shape != (k,) or self.column_mask.shape != (k,):
            raise InvalidInputError("column_counts and column_mask must have length K")

    @property
    def K(self):
        return self.entries.shape[0]

    @property
    def m_min(self):
        """Smallest sample count among present classes."""
        counts = self.column_counts[self.column_mask]
        if counts.size == 0:
            raise InvalidInputError("all columns are masked; m_min is undefined")
        return int(counts.min())

    def validate(self, atol=1e-12):
        """Raise if the structural invariants do not hold."""
        m = self.entries
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("flow matrix has non-finite entries")
        if np.any(np.diag(m) != 0):
            raise InvalidInputError("flow matrix diagonal must be zero")
        if np.any(m < -atol) or np.any(m > 1 + atol):
            raise InvalidInputError("flow matrix entries must lie in [0, 1]")
        if np.any(m.sum(axis=0) > 1 + atol):
            raise InvalidInputError("flow matrix column sums must be <= 1")
        if np.any(m[:, ~self.column_mask] != 0):
            raise InvalidInputError("masked columns must be zero")
        return self

    def to_dict(self):
        return {
            "entries": self.entries.tolist(),
            "column_counts": self.column_counts.tolist(),
            "column_mask": self.column_mask.tolist(),
        }


def _as_entries(M):
    if isinstance(M, FlowMatrix):
        return M.entries, M.column_mask
    entries = np.asarray(M, dtype=float)
    return entries, np.ones(entries.shape[1], dtype=bool)


# ---------------------------------------------------------------------------
# scalar forms


def softmax(s):
    """Softmax of one score vector, max-shifted for overflow safety."""
    s = check_scores(s)
    z = np.exp(s - s.max())
    return z / z.sum()


def margin(s, y):
    """``s[y]`` minus the best competing score; positive iff ``y`` is the strict argmax."""
    s = check_scores(s)
    y = int(y)
    if not 0 <= y < s.shape[0]:
        raise IndexError(f"class index {y} out of range for K={s.shape[0]}")
    return float(s[y] - np.max(np.delete(s, y)))


def gate(delta, gp):
    """Smooth indicator of ``delta <= gamma``: ``sigmoid((gamma - delta) / kappa)``."""
    return expit((gp.gamma - np.asarray(delta, dtype=float)) / gp.kappa)


def gate_grad(delta, gp):
    """Derivative of :func:`gate` with respect to the margin."""
    g = gate(delta, gp)
    return -(g * (1.0 - g)) / gp.kappa


# ---------------------------------------------------------------------------
# row-wise forms


def softmax_rows(S):
    S = np.asarray(S, dtype=float)
    Z = np.exp(S - S.max(axis=1, keepdims=True))
    return Z / Z.sum(axis=1, keepdims=True)


def margins_rows(S, y):
    """Margins and lowest-index top competitors for every row.

    Returns ``(delta, competitor, tied)`` where ``tied`` flags rows in which
    more than one wrong option attains the maximum.
    """
    S = np.asarray(S, dtype=float)
    n = S.shape[0]
    rows = np.arange(n)
    others = S.copy()
    others[rows, y] = -np.inf
    competitor = np.argmax(others, axis=1)
    best = others[rows, competitor]
    delta = S[rows, y] - best
    tied = (others == best[:, None]).sum(axis=1) > 1
    return delta, competitor, tied


def predict_rows(S):
    """Deterministic prediction; ties go to the lowest index."""
    return np.argmax(np.asarray(S, dtype=float), axis=1)


def flow_from_probs(P, y, weights, K):
    """Accumulate per-class means of ``weights[r] * P[r, i]`` into a FlowMatrix.

    Reduction runs class by class in input order so results are
    bit-reproducible.
    """
    entries = np.zeros((K, K))
    counts = np.bincount(y, minlength=K).astype(np.int64)
    W = P * weights[:, None]
    for j in range(K):
        if counts[j] == 0:
            continue
        col = W[y == j].sum(axis=0) / counts[j]
        col[j] = 0.0
        entries[:, j] = col
    return FlowMatrix(entries, counts, counts > 0)


def build_flow_matrix(samples, gp=None, gated=True, labels=None):
    """Empirical (gated or ungated) error-flow matrix.

    ``samples`` is either a sequence of ``(scores, label)`` pairs or, when
    ``labels`` is given, an ``(n, K)`` score array.
    """
    if labels is None:
        samples = list(samples)
        if not samples:
            raise InvalidInputError("cannot build a flow matrix from an empty sample")
        lengths = {len(np.atleast_1d(s)) for s, _ in samples}
        if len(lengths) != 1:
            raise InvalidInputError(f"score vectors disagree on K: {sorted(lengths)}")
        S = np.array([np.asarray(s, dtype=float) for s, _ in samples])
        labels = [lab for _, lab in samples]
    else:
        S = samples
    S = check_score_matrix(S)
    n, K = S.shape
    y = check_labels(labels, K, n)
    P = softmax_rows(S)
    if gated:
        if gp is None:
            raise InvalidInputError("a gated flow matrix needs GateParams")
        delta, _, tied = margins_rows(S, y)
        weights = gate(delta, gp)
    else:
        weights = np.ones(n)
        tied = np.zeros(n, dtype=bool)
    fm = flow_from_probs(P, y, weights, K)
    fm.tie_count = int(tied.sum())
    return fm


def vwr(M):
    """Vulnerable worst-option risk: largest column sum over present classes."""
    entries, mask = _as_entries(M)
    if not mask.any():
        return 0.0
    return float(np.abs(entries[:, mask]).sum(axis=0).max())


def vsr_exact(M, cap=EXACT_EIGEN_CAP):
    """Vulnerable spectral risk: top singular value via the eigenvalues of MᵀM."""
    entries, _ = _as_entries(M)
    K = entries.shape[1]
    if K > cap:
        raise InvalidInputError(
            f"K={K} exceeds the exact eigensolver cap {cap}; use power_iteration"
        )
    gram = entries.T @ entries
    lam = np.linalg.eigvalsh(gram)[-1]
    return float(np.sqrt(max(lam, 0.0)))
