"""Safety-buffer calibration and the risk readout."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import InvalidInputError, check_fraction, check_labels, check_score_matrix
from .core_risk import GateParams, build_flow_matrix, margins_rows, predict_rows, vsr_exact, vwr


@dataclass
class RiskReport:
    clean_acc: float
    ptb_acc: float
    clean_wc_acc: float
    ptb_wc_acc: float
    vwr_hat: float
    vsr_hat: float
    gamma_used: float
    kappa_used: float
    per_class_acc: list
    m_per_class: list
    perturbation_label: str = "perturbed"
    clean_per_class_acc: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["per_class_acc"] = [None if math.isnan(a) else a for a in self.per_class_acc]
        d["clean_per_class_acc"] = [None if math.isnan(a) else a for a in self.clean_per_class_acc]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("per_class_acc", "clean_per_class_acc"):
            d[key] = [math.nan if a is None else a for a in d.get(key, [])]
        return cls(**d)


def calibrate_gamma(margins, q):
    """Nearest-rank ``q``-quantile: the ``ceil(q * m)``-th smallest margin."""
    m = np.sort(np.asarray(margins, dtype=float).ravel())
    if m.size == 0:
        raise InvalidInputError("cannot calibrate on an empty margin set")
    q = check_fraction(q, "q")
    rank = max(1, math.ceil(q * m.size))
    return float(m[rank - 1])


def buffer_from_quantile(gamma_q, kappa=None):
    """GateParams for a calibrated quantile; negative quantiles clamp to 0."""
    return GateParams(max(gamma_q, 0.0), kappa)


def _per_class_accuracy(pred, y, K):
    counts = np.bincount(y, minlength=K)
    hits = np.bincount(y[pred == y], minlength=K)
    acc = np.full(K, np.nan)
    present = counts > 0
    acc[present] = hits[present] / counts[present]
    return acc, counts


def evaluate_scores(clean_scores, ptb_scores, labels, gp, perturbation_label="perturbed"):
    """RiskReport from precomputed clean and perturbed score matrices.

    Deterministic predictions break ties toward the lowest option index;
    classes without samples are left out of worst-class minima.
    """
    C = check_score_matrix(clean_scores, "clean scores")
    P = check_score_matrix(ptb_scores, "perturbed scores")
    if C.shape != P.shape:
        raise InvalidInputError(f"clean and perturbed sets are misaligned: {C.shape} vs {P.shape}")
    n, K = C.shape
    y = check_labels(labels, K, n)
    clean_pc, counts = _per_class_accuracy(predict_rows(C), y, K)
    ptb_pc, _ = _per_class_accuracy(predict_rows(P), y, K)
    fm = build_flow_matrix(P, gp, gated=True, labels=y)
    report = RiskReport(
        clean_acc=float((predict_rows(C) == y).mean()),
        ptb_acc=float((predict_rows(P) == y).mean()),
        clean_wc_acc=float(np.nanmin(clean_pc)),
        ptb_wc_acc=float(np.nanmin(ptb_pc)),
        vwr_hat=vwr(fm),
        vsr_hat=vsr_exact(fm),
        gamma_used=gp.gamma,
        kappa_used=gp.kappa,
        per_class_acc=ptb_pc.tolist(),
        m_per_class=counts.tolist(),
        perturbation_label=perturbation_label,
        clean_per_class_acc=clean_pc.tolist(),
    )
    return report, fm


def evaluate(model, clean_set, perturbed_set, gp, perturbation_label="perturbed"):
    """Full metric readout of ``model`` on index-aligned clean/perturbed sets.

    Each set is an ``(X, y)`` pair; labels must agree row by row.
    """
    Xc, yc = clean_set
    Xp, yp = perturbed_set
    if np.shape(Xc) != np.shape(Xp) or not np.array_equal(yc, yp):
        raise InvalidInputError("clean and perturbed sets must be aligned with identical labels")
    report, _ = evaluate_scores(model.scores(Xc), model.scores(Xp), yc, gp, perturbation_label)
    return report


def perturbed_margins(model, perturbed_set):
    X, y = perturbed_set
    delta, _, _ = margins_rows(model.scores(X), np.asarray(y, dtype=np.int64))
    return delta


def calibration_sweep(model, val_sets, q_list, gp_base=None, eval_sets=None):
    """One ``(q, gamma_q, RiskReport)`` row per quantile.

    ``val_sets`` is ``(clean_val, perturbed_val)``; gamma is calibrated on the
    perturbed validation margins. Reports are computed on ``eval_sets``
    (defaults to the validation pair). A fixed ``kappa`` in ``gp_base`` is
    kept across rows; otherwise each row uses the default for its gamma.
    """
    q_list = list(q_list)
    if not q_list:
        raise InvalidInputError("q_list is empty")
    clean_val, ptb_val = val_sets
    clean_eval, ptb_eval = eval_sets if eval_sets is not None else val_sets
    margins = perturbed_margins(model, ptb_val)
    kappa = None if gp_base is None else gp_base.kappa
    rows = []
    for q in q_list:
        gamma_q = calibrate_gamma(margins, q)
        gp = buffer_from_quantile(gamma_q, kappa)
        rows.append((q, gamma_q, evaluate(model, clean_eval, ptb_eval, gp)))
    return rows
