"""scikit-learn style wrappers around the toy trainer and the buffer calibration."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .calibrate_eval import buffer_from_quantile, calibrate_gamma, evaluate_scores
from .core_risk import GateParams, build_flow_matrix, gate, margins_rows, softmax_rows, vsr_exact, vwr
from .model import ToyModel
from .perturb import PerturbSpec, keyed_rng, make_paired_batch
from .toy_train import TrainConfig, train


class FragileFlowClassifier(ClassifierMixin, BaseEstimator):
    """Finite-option classifier trained with the plug-in spectral objective.

    With ``gamma=None`` the buffer is calibrated as in the paired protocol: a
    cross-entropy-only model is fitted first and ``gamma`` is the ``q``
    quantile of its margins on perturbed copies of the training inputs.
    ``alpha = beta = 0`` gives plain cross-entropy training.
    """

    def __init__(self, kind="linear", hidden=8, alpha=0.1, beta=0.05, gamma=None, q=0.25,
                 kappa=None, perturbation="gaussian_noise", magnitude=0.0, direction=None,
                 pgd_steps=10, t_pi=10, refresh_n=5, eps_spec=1e-8, sigma_q=0.01,
                 learning_rate=0.5, batch_size=64, max_iter=300, init_scale=0.01,
                 random_state=0):
        self.kind = kind
        self.hidden = hidden
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.q = q
        self.kappa = kappa
        self.perturbation = perturbation
        self.magnitude = magnitude
        self.direction = direction
        self.pgd_steps = pgd_steps
        self.t_pi = t_pi
        self.refresh_n = refresh_n
        self.eps_spec = eps_spec
        self.sigma_q = sigma_q
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.init_scale = init_scale
        self.random_state = random_state

    def _perturb_spec(self):
        direction = None if self.direction is None else np.asarray(self.direction, dtype=float)
        return PerturbSpec(self.perturbation, self.magnitude, direction=direction,
                           pgd_steps=self.pgd_steps, seed=self.random_state)

    def _config(self, gp, alpha, beta):
        return TrainConfig(
            alpha=alpha, beta=beta, gate=gp, t_pi=self.t_pi, refresh_n=self.refresh_n,
            eps_spec=self.eps_spec, sigma_q=self.sigma_q, learning_rate=self.learning_rate,
            batch_size=self.batch_size, steps=self.max_iter, perturb=self._perturb_spec(),
            seed=self.random_state,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        K = self.classes_.shape[0]
        hidden = self.hidden if self.kind == "mlp1" else 0
        init = ToyModel.random(self.kind, X.shape[1], K, hidden, scale=self.init_scale,
                               rng=keyed_rng(self.random_state, "init"))
        if self.gamma is None:
            base, _ = train(init, (X, y_idx), self._config(GateParams(0.0), 0.0, 0.0))
            ptb = make_paired_batch(X, y_idx, self._perturb_spec(), base, purpose="val_perturb")
            delta, _, _ = margins_rows(base.scores(ptb.perturbed_inputs), y_idx)
            self.gamma_quantile_ = calibrate_gamma(delta, self.q)
            gp = buffer_from_quantile(self.gamma_quantile_, self.kappa)
        else:
            self.gamma_quantile_ = float(self.gamma)
            gp = GateParams(self.gamma, self.kappa)
        self.gate_params_ = gp
        self.model_, self.trace_ = train(init, (X, y_idx), self._config(gp, self.alpha, self.beta))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        return self.model_.scores(X)

    def predict_proba(self, X):
        return softmax_rows(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def risk_report(self, X, y, X_perturbed=None):
        """RiskReport on ``X`` (clean) and ``X_perturbed`` (defaults to the fitted perturbation)."""
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=float)
        y_idx = np.searchsorted(self.classes_, y)
        if X_perturbed is None:
            X_perturbed = make_paired_batch(X, y_idx, self._perturb_spec(), self.model_,
                                            purpose="eval_perturb").perturbed_inputs
        X_perturbed = check_array(X_perturbed, dtype=float)
        report, _ = evaluate_scores(self.model_.scores(X), self.model_.scores(X_perturbed),
                                    y_idx, self.gate_params_, self._perturb_spec().label)
        return report


class MarginBufferCalibrator(BaseEstimator):
    """Calibrates the safety buffer from held-out score vectors.

    ``fit(scores, y)`` sets ``gamma_`` to the nearest-rank ``q`` quantile of
    the margins (clamped at 0) and ``kappa_`` to the fixed or default
    temperature. ``transform(scores, y)`` returns per-row gate values.
    """

    def __init__(self, q=0.25, kappa=None):
        self.q = q
        self.kappa = kappa

    def fit(self, scores, y):
        S = check_array(scores, dtype=float)
        y = np.asarray(y, dtype=np.int64)
        delta, _, _ = margins_rows(S, y)
        self.gamma_quantile_ = calibrate_gamma(delta, self.q)
        self.gate_params_ = buffer_from_quantile(self.gamma_quantile_, self.kappa)
        self.gamma_ = self.gate_params_.gamma
        self.kappa_ = self.gate_params_.kappa
        self.n_features_in_ = S.shape[1]
        return self

    def transform(self, scores, y):
        check_is_fitted(self, "gate_params_")
        S = check_array(scores, dtype=float)
        delta, _, _ = margins_rows(S, np.asarray(y, dtype=np.int64))
        return gate(delta, self.gate_params_)

    def fit_transform(self, scores, y):
        return self.fit(scores, y).transform(scores, y)

    def flow_matrix(self, scores, y):
        check_is_fitted(self, "gate_params_")
        return build_flow_matrix(check_array(scores, dtype=float), self.gate_params_,
                                 gated=True, labels=y)

    def risks(self, scores, y):
        """``(vwr, vsr)`` of the gated flow matrix."""
        fm = self.flow_matrix(scores, y)
        return vwr(fm), vsr_exact(fm)
