"""Margin-aware error-flow risks, bounds, and plug-in spectral training."""

from .calibrate_eval import RiskReport, calibrate_gamma, calibration_sweep, evaluate
from .core_risk import (
    FlowMatrix,
    GateParams,
    build_flow_matrix,
    gate,
    gate_grad,
    margin,
    softmax,
    vsr_exact,
    vwr,
)
from .estimators import FragileFlowClassifier, MarginBufferCalibrator
from .model import ToyModel, forward
from .pac_bayes import (
    BoundInputs,
    BridgeInputs,
    PosteriorSpec,
    combined_bound,
    deterministic_bridge,
    estimate_logit_shift,
    estimate_rho,
    gaussian_kl,
    pac_bound,
    stability_certificate,
)
from .perturb import PairedBatch, PerturbSpec, apply_perturbation, make_paired_batch
from .spectral import PowerState, power_iteration, sigma_hat, sigma_hat_grad
from .toy_train import SynthTaskSpec, TrainConfig, generate_synth_task, train

__version__ = "0.1.0"
