"""PAC-Bayes bound, deterministic bridge, and posterior stability estimates.

Closed forms evaluated here:

    pac total  = sqrt(K) * vsr + 2 * sqrt(2K (KL + 2K ln 9 + ln(2/delta)) / m_min)
    bridge     = (1 + e^gamma) / eta * vwr_q + rho
    combined   = (1 + e^gamma) / eta * pac_total + rho

With the sigmoid gate, ``eta = 1/2`` is always admissible.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._validation import InvalidInputError, check_fraction
from .core_risk import build_flow_matrix, margins_rows, predict_rows, vwr
from .perturb import keyed_rng

ETA = 0.5


@dataclass
class PosteriorSpec:
    """Gaussian posterior ``N(mu, sigma_q^2 I)`` against prior ``N(0, tau_p^2 I)``."""

    mu: np.ndarray
    sigma_q: float
    tau_p: float
    d_train: int = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).ravel()
        if self.d_train is None:
            self.d_train = self.mu.shape[0]
        if self.mu.shape[0] != self.d_train or self.d_train < 1:
            raise InvalidInputError(f"mu has length {self.mu.shape[0]}, d_train is {self.d_train}")
        if not self.sigma_q > 0 or not self.tau_p > 0:
            raise InvalidInputError("sigma_q and tau_p must be > 0")


@dataclass
class BoundInputs:
    vsr_emp: float
    K: int
    m_min: int
    kl: float
    delta: float

    def __post_init__(self):
        if self.vsr_emp < 0 or self.kl < 0:
            raise InvalidInputError("vsr_emp and kl must be >= 0")
        if int(self.K) < 2:
            raise InvalidInputError("K must be >= 2")
        if self.m_min < 1:
            raise InvalidInputError(f"m_min must be >= 1, got {self.m_min}; the bound is undefined")
        check_fraction(self.delta, "delta")


@dataclass
class BridgeInputs:
    vwr_q: float
    gamma: float
    eta: float = ETA
    rho: float = 0.0

    def __post_init__(self):
        if self.vwr_q < 0 or self.gamma < 0:
            raise InvalidInputError("vwr_q and gamma must be >= 0")
        check_fraction(self.eta, "eta", open_high=False)
        check_fraction(self.rho, "rho", open_low=False, open_high=False)


class PacBound(NamedTuple):
    term_spec: float
    term_complexity: float
    total: float


def gaussian_kl(ps):
    """``KL(N(mu, sigma_q^2 I) || N(0, tau_p^2 I))``."""
    ratio = ps.sigma_q ** 2 / ps.tau_p ** 2
    mean_term = float(ps.mu @ ps.mu) / (2.0 * ps.tau_p ** 2)
    return mean_term + 0.5 * ps.d_train * (ratio - 1.0 - math.log(ratio))


def pac_bound(b):
    K = int(b.K)
    term_spec = math.sqrt(K) * b.vsr_emp
    inner = 2.0 * K * (b.kl + 2.0 * K * math.log(9.0) + math.log(2.0 / b.delta)) / b.m_min
    term_complexity = 2.0 * math.sqrt(inner)
    return PacBound(term_spec, term_complexity, term_spec + term_complexity)


def deterministic_bridge(b):
    """Upper bound on the deterministic worst-class risk of the posterior mean."""
    return (1.0 + math.exp(b.gamma)) / b.eta * b.vwr_q + b.rho


def combined_bound(b, gamma, eta=ETA, rho=0.0):
    total = pac_bound(b).total
    return deterministic_bridge(BridgeInputs(total, gamma, eta, rho))


# ---------------------------------------------------------------------------
# posterior sampling


def posterior_draw(ps, seed, index):
    """Coordinate sample ``index`` of the posterior, keyed for reproducibility."""
    z = keyed_rng(seed, "posterior", index).standard_normal(ps.d_train)
    return ps.mu + ps.sigma_q * z


def estimate_logit_shift(model_mean, model_sample, eval_set):
    """Largest absolute option-score difference over the evaluation inputs.

    This under-estimates the supremum over the perturbed support.
    """
    X = np.atleast_2d(np.asarray(eval_set, dtype=float))
    if X.shape[0] == 0 or X.size == 0:
        raise InvalidInputError("evaluation set is empty")
    if model_mean.K != model_sample.K or model_mean.d_train != model_sample.d_train:
        raise InvalidInputError("models must share architecture and K")
    return float(np.abs(model_sample.scores(X) - model_mean.scores(X)).max())


def estimate_rho(ps, model_factory, eval_set, gamma, n_samples, seed=0):
    """Fraction of posterior draws whose logit shift exceeds ``gamma / 2``."""
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    mean_model = model_factory(ps.mu)
    exceed = 0
    for i in range(n_samples):
        sample = model_factory(posterior_draw(ps, seed, i))
        if estimate_logit_shift(mean_model, sample, eval_set) > gamma / 2.0:
            exceed += 1
    return exceed / n_samples


def score_sensitivity(model, eval_set):
    """``max_{x, k} ||d s_k(x) / d w||_2`` over the evaluation inputs.

    For linear models this is the exact Lipschitz constant of the score shift
    in the coordinates, since scores are affine in ``w``.
    """
    X = np.atleast_2d(np.asarray(eval_set, dtype=float))
    return max(float(np.linalg.norm(model.score_jacobian(x), axis=1).max()) for x in X)


def stability_certificate(sensitivity, ps, rho, gamma):
    """Gaussian norm-concentration certificate for ``(gamma, rho)``-stability.

    Returns ``(holds, max_sigma_q)``: the condition
    ``sensitivity * sigma_q * (sqrt(d) + sqrt(2 ln(1/rho))) <= gamma / 2``
    and the largest ``sigma_q`` meeting it.
    """
    rho = check_fraction(rho, "rho")
    if sensitivity < 0:
        raise InvalidInputError("sensitivity must be >= 0")
    radius = math.sqrt(ps.d_train) + math.sqrt(2.0 * math.log(1.0 / rho))
    if sensitivity == 0:
        return True, math.inf
    max_sigma_q = (gamma / 2.0) / (sensitivity * radius)
    holds = sensitivity * ps.sigma_q * radius <= gamma / 2.0
    return holds, max_sigma_q


def bridge_check(ps, model_factory, X_ptb, y, gp, n_samples, seed=0, eta=ETA):
    """Empirical check of the deterministic bridge on a finite perturbed set.

    Averages gated flow matrices over ``n_samples`` posterior draws, measures
    the mean model's worst-class error, the stability failure rate, and the
    stability-event case-1 violations (a stable draw whose margin exceeds
    ``gamma`` on an example the mean model gets wrong).
    """
    X_ptb = np.atleast_2d(np.asarray(X_ptb, dtype=float))
    y = np.asarray(y, dtype=np.int64)
    mean_model = model_factory(ps.mu)
    K = mean_model.K
    S_mean = mean_model.scores(X_ptb)
    wrong = predict_rows(S_mean) != y
    counts = np.bincount(y, minlength=K)
    present = counts > 0
    class_err = np.bincount(y[wrong], minlength=K)[present] / counts[present]
    wcr_det = float(class_err.max())

    acc = np.zeros((K, K))
    col_sums = np.empty((n_samples, K))
    unstable = 0
    violations = 0
    for i in range(n_samples):
        S = model_factory(posterior_draw(ps, seed, i)).scores(X_ptb)
        fm = build_flow_matrix(S, gp, gated=True, labels=y)
        acc += fm.entries
        col_sums[i] = fm.entries.sum(axis=0)
        shift = float(np.abs(S - S_mean).max())
        if shift > gp.gamma / 2.0:
            unstable += 1
        elif wrong.any():
            delta, _, _ = margins_rows(S[wrong], y[wrong])
            violations += int((delta > gp.gamma).sum())
    mean_m = acc / n_samples
    vwr_q = vwr(mean_m)
    rho_hat = unstable / n_samples
    scale = (1.0 + math.exp(gp.gamma)) / eta
    j_star = int(np.argmax(np.where(present, mean_m.sum(axis=0), -np.inf)))
    se_vwr = float(col_sums[:, j_star].std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    se_rho = math.sqrt(rho_hat * (1.0 - rho_hat) / n_samples)
    stderr = math.sqrt((scale * se_vwr) ** 2 + se_rho ** 2)
    return {
        "wcr_det": wcr_det,
        "vwr_q": vwr_q,
        "rho_hat": rho_hat,
        "bound": scale * vwr_q + rho_hat,
        "stderr": stderr,
        "case1_violations": violations,
        "n_samples": n_samples,
    }
