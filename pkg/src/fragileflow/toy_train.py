"""Plug-in spectral safety control on a toy finite-option classifier.

The composite objective is ``CE(clean) + alpha * R_spec + beta * R_stab``:

* ``R_spec`` is the fixed-direction spectral estimate of the gated error-flow
  matrix built on the perturbed half of each paired batch;
* ``R_stab`` is the KL from the (stop-gradient) clean prediction to the
  prediction of a coordinate-noised model on the perturbed input.

Optimization is plain full-step gradient descent.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from ._validation import InvalidInputError
from .core_risk import (
    GateParams,
    flow_from_probs,
    gate,
    gate_grad,
    margins_rows,
    softmax_rows,
)
from .model import ToyModel
from .perturb import (
    PairedBatch,
    PerturbSpec,
    keyed_rng,
    make_paired_batch,
    sample_coordinate_noise,
)
from .spectral import DEFAULT_EPS_SPEC, initial_vector, power_iteration, sigma_hat

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when the objective becomes non-finite; carries the trace so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def _as_batch(batch):
    if isinstance(batch, PairedBatch):
        return batch
    X, y = batch
    return PairedBatch.clean(X, y)


# ---------------------------------------------------------------------------
# objective terms


def ce_loss_and_grad(model, batch):
    """Mean cross-entropy on the clean inputs and its gradient in coordinates."""
    batch = _as_batch(batch)
    X, y = batch.clean_inputs, batch.labels
    n = y.shape[0]
    if n == 0:
        raise InvalidInputError("empty batch")
    S = model.scores(X)
    logp = log_softmax(S, axis=1)
    loss = -float(logp[np.arange(n), y].mean())
    G = np.exp(logp)
    G[np.arange(n), y] -= 1.0
    return loss, model.backward(X, G / n)


def spectral_matrix(model, batch, gp):
    """Gated, masked flow matrix on the perturbed inputs plus the per-row pieces needed for gradients."""
    batch = _as_batch(batch)
    S = model.scores(batch.perturbed_inputs)
    y = batch.labels
    P = softmax_rows(S)
    delta, comp, tied = margins_rows(S, y)
    g = gate(delta, gp)
    fm = flow_from_probs(P, y, g, model.K)
    fm.tie_count = int(tied.sum())
    return fm, (S, P, delta, comp, g)


def r_spec_and_grad(model, batch, gp, v, eps_spec=DEFAULT_EPS_SPEC, _cache=None):
    """Spectral penalty ``sqrt(||M v||^2 + eps_spec)`` with ``v`` fixed, and its coordinate gradient.

    Returns ``(value, grad, flow_matrix)``.
    """
    batch = _as_batch(batch)
    fm, (S, P, delta, comp, g) = _cache or spectral_matrix(model, batch, gp)
    y = batch.labels
    n, K = P.shape
    value = sigma_hat(fm.entries, v, eps_spec)
    if value == 0.0:
        return value, np.zeros(model.d_train), fm
    GM = np.outer(fm.entries @ v, v) / value
    np.fill_diagonal(GM, 0.0)
    counts = np.maximum(fm.column_counts, 1)
    # C[r, i] = dR / dM[i, y_r] / m_{y_r}
    C = GM[:, y].T / counts[y][:, None]
    C[np.arange(n), y] = 0.0
    a = (C * P).sum(axis=1)
    G = g[:, None] * P * (C - a[:, None])
    dg = gate_grad(delta, gp) * a
    rows = np.arange(n)
    G[rows, y] += dg
    G[rows, comp] -= dg
    return value, model.backward(batch.perturbed_inputs, G), fm


def stability_kl_and_grad(model, batch, u, reference=None):
    """Mean ``KL(reference || p_{w+u}(.|x'))`` and its gradient in ``w``.

    ``reference`` defaults to the clean prediction at the current ``w`` and is
    treated as a constant.
    """
    batch = _as_batch(batch)
    n = len(batch)
    if reference is None:
        reference = softmax_rows(model.scores(batch.clean_inputs))
    noisy = model.with_weights(model.weights + u)
    logq = log_softmax(noisy.scores(batch.perturbed_inputs), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(reference > 0, np.log(reference), 0.0)
    value = float((reference * (logp - logq)).sum(axis=1).mean())
    G = (np.exp(logq) - reference) / n
    return max(value, 0.0), noisy.backward(batch.perturbed_inputs, G)


def r_stab_and_grad(model, batch, sigma_q, rng, n_draws=1):
    """Monte Carlo stability penalty over ``n_draws`` coordinate-noise samples."""
    batch = _as_batch(batch)
    reference = softmax_rows(model.scores(batch.clean_inputs))
    value, grad = 0.0, np.zeros(model.d_train)
    for _ in range(n_draws):
        u = sample_coordinate_noise(model.d_train, sigma_q, rng)
        val, gr = stability_kl_and_grad(model, batch, u, reference)
        value += val
        grad += gr
    return value / n_draws, grad / n_draws


def composite_objective(model, batch, gp, v, u, alpha, beta, eps_spec=DEFAULT_EPS_SPEC, reference=None):
    """Full plug-in objective with ``v`` and ``u`` held fixed; returns ``(value, grad)``."""
    batch = _as_batch(batch)
    loss, grad = ce_loss_and_grad(model, batch)
    if alpha:
        r, gr, _ = r_spec_and_grad(model, batch, gp, v, eps_spec)
        loss += alpha * r
        grad = grad + alpha * gr
    if beta:
        r, gr = stability_kl_and_grad(model, batch, u, reference)
        loss += beta * r
        grad = grad + beta * gr
    return loss, grad


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.05
    gate: GateParams = field(default_factory=lambda: GateParams(0.0))
    t_pi: int = 10
    refresh_n: int = 5
    eps_spec: float = DEFAULT_EPS_SPEC
    sigma_q: float = 0.01
    learning_rate: float = 0.5
    batch_size: int = 64
    steps: int = 300
    perturb: PerturbSpec = field(default_factory=PerturbSpec)
    seed: int = 0
    stab_draws: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidInputError("alpha and beta must be >= 0")
        if self.t_pi < 1:
            raise InvalidInputError("t_pi must be >= 1")
        if self.refresh_n < 1:
            raise InvalidInputError("refresh_n must be >= 1")
        if self.eps_spec < 0 or self.sigma_q < 0:
            raise InvalidInputError("eps_spec and sigma_q must be >= 0")
        if self.batch_size < 1 or self.steps < 0 or self.stab_draws < 1:
            raise InvalidInputError("batch_size and stab_draws must be >= 1, steps >= 0")
        if isinstance(self.gate, dict):
            self.gate = GateParams(**self.gate)
        if isinstance(self.perturb, dict):
            self.perturb = PerturbSpec.from_dict(self.perturb)

    def replace(self, **changes):
        d = dict(self.__dict__)
        d.update(changes)
        return TrainConfig(**d)

    def to_dict(self):
        d = dict(self.__dict__)
        d["gate"] = {"gamma": self.gate.gamma, "kappa": self.gate.kappa}
        d["perturb"] = self.perturb.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sample_batch_indices(n, batch_size, seed, step):
    """Mini-batch row indices for one step; the full set when ``batch_size >= n``."""
    if batch_size >= n:
        return np.arange(n)
    return np.sort(keyed_rng(seed, "batch", step).choice(n, size=batch_size, replace=False))


def train(model, data, cfg):
    """Run plain gradient descent on the composite objective.

    Returns ``(trained_model, trace)`` where ``trace`` is a list of per-step
    dicts. The stability branch is skipped entirely when ``beta == 0`` and
    the spectral gradient when ``alpha == 0``.
    """
    X, y = data
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=np.int64)
    n = y.shape[0]
    if n == 0:
        raise InvalidInputError("training data is empty")
    w = model.weights.copy()
    v = None
    sigma_est = float("nan")
    trace = []
    for step in range(cfg.steps):
        current = model.with_weights(w)
        idx = sample_batch_indices(n, cfg.batch_size, cfg.seed, step)
        batch = make_paired_batch(
            X[idx], y[idx], cfg.perturb, current,
            element_ids=step * n + idx, purpose="train_perturb",
        )
        ce, grad = ce_loss_and_grad(current, batch)
        cache = spectral_matrix(current, batch, cfg.gate)
        fm = cache[0]
        if v is None:
            v = initial_vector(fm)
        if step % cfg.refresh_n == 0:
            state = power_iteration(fm, v, cfg.t_pi)
            v, sigma_est = state.v, state.sigma_est
        if cfg.alpha > 0:
            r_spec, g_spec, _ = r_spec_and_grad(current, batch, cfg.gate, v, cfg.eps_spec, _cache=cache)
            grad = grad + cfg.alpha * g_spec
        else:
            r_spec = sigma_hat(fm, v, cfg.eps_spec)
        if cfg.beta > 0:
            rng = keyed_rng(cfg.seed, "coordinate_noise", step)
            r_stab, g_stab = r_stab_and_grad(current, batch, cfg.sigma_q, rng, cfg.stab_draws)
            grad = grad + cfg.beta * g_stab
        else:
            r_stab = 0.0
        total = ce + cfg.alpha * r_spec + cfg.beta * r_stab
        trace.append({
            "step": step,
            "loss": total,
            "ce": ce,
            "r_spec": r_spec,
            "r_stab": r_stab,
            "sigma_est": sigma_est,
            "margin_ties": fm.tie_count,
        })
        if not (np.isfinite(total) and np.all(np.isfinite(grad))):
            raise TrainingDiverged(f"non-finite objective at step {step}", trace)
        w = w - cfg.learning_rate * grad
        if not np.all(np.isfinite(w)):
            raise TrainingDiverged(f"coordinates overflowed at step {step}", trace)
    logger.debug("trained %d steps, final loss %.6g", cfg.steps, trace[-1]["loss"] if trace else float("nan"))
    return model.with_weights(w), trace


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthTaskSpec:
    """Gaussian-mixture task with optionally overlapping class pairs.

    Each ``confusion_pairs`` entry ``(a, b, s)`` moves the means of ``a`` and
    ``b`` toward each other by a fraction ``s / 2`` of their gap each, so
    ``s = 1`` merges them.
    """

    K: int
    feature_dim: int
    class_means: np.ndarray
    class_cov_scale: float = 1.0
    confusion_pairs: list = field(default_factory=list)
    n_train: int = 600
    n_val: int = 300
    n_test: int = 600
    seed: int = 0

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=float)
        if self.class_means.shape != (self.K, self.feature_dim):
            raise InvalidInputError(
                f"class_means must have shape ({self.K}, {self.feature_dim}), got {self.class_means.shape}"
            )
        if self.class_cov_scale <= 0:
            raise InvalidInputError("class_cov_scale must be > 0")
        for a, b, s in self.confusion_pairs:
            if not (0 <= a < self.K and 0 <= b < self.K) or a == b:
                raise InvalidInputError(f"bad confusion pair ({a}, {b})")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise InvalidInputError("split sizes must be >= 1")

    @classmethod
    def random(cls, K=5, feature_dim=8, separation=3.0, confusion_pairs=(), seed=0, **kw):
        rng = keyed_rng(seed, "class_means")
        means = rng.standard_normal((K, feature_dim))
        means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
        return cls(K, feature_dim, means, confusion_pairs=[tuple(p) for p in confusion_pairs], seed=seed, **kw)

    def effective_means(self):
        means = self.class_means.copy()
        for a, b, s in self.confusion_pairs:
            gap = means[b] - means[a]
            means[a] = means[a] + 0.5 * s * gap
            means[b] = means[b] - 0.5 * s * gap
        return means

    def to_dict(self):
        d = dict(self.__dict__)
        d["class_means"] = self.class_means.tolist()
        d["confusion_pairs"] = [list(p) for p in self.confusion_pairs]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["confusion_pairs"] = [tuple(p) for p in d.get("confusion_pairs", [])]
        return cls(**d)


def generate_synth_task(spec):
    """Draw ``(train, val, test)`` splits, each an ``(X, y)`` pair.

    Generation walks classes in a canonical order fixed by their nominal
    means, so relabeling the classes in ``spec`` relabels the output and
    leaves the features untouched.
    """
    means = spec.effective_means()
    canon = np.lexsort(spec.class_means.T[::-1])
    splits = []
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        per_class = np.full(spec.K, n // spec.K)
        per_class[: n % spec.K] += 1
        X, y = [], []
        for rank, k in enumerate(canon):
            for i in range(per_class[rank]):
                z = keyed_rng(spec.seed, f"synth/{name}", rank * 1_000_000_007 + i).standard_normal(spec.feature_dim)
                X.append(means[k] + spec.class_cov_scale * z)
                y.append(k)
        order = keyed_rng(spec.seed, f"synth/{name}/order").permutation(n)
        splits.append((np.array(X)[order], np.array(y, dtype=np.int64)[order]))
    return tuple(splits)
