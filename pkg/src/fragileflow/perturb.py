"""Feature-space perturbation rules and keyed random streams.

Every random draw comes from a Philox generator keyed by
``(seed, purpose tag, element id)``, so a perturbation depends only on that
key and not on batch composition or scheduling.
"""

import zlib
from dataclasses import asdict, dataclass

import numpy as np

from ._validation import InvalidInputError

KINDS = ("gaussian_noise", "directional_shift", "pgd")


def purpose_code(purpose):
    return zlib.crc32(str(purpose).encode("utf-8"))


def keyed_rng(seed, purpose, element_id=0):
    """Counter-based generator for one ``(seed, purpose, element_id)`` key."""
    ss = np.random.SeedSequence([int(seed), purpose_code(purpose), int(element_id)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class PerturbSpec:
    kind: str = "gaussian_noise"
    magnitude: float = 0.0
    direction: list = None
    pgd_steps: int = 10
    pgd_step_size: float = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        self.magnitude = float(self.magnitude)
        if not np.isfinite(self.magnitude) or self.magnitude < 0:
            raise InvalidInputError(f"magnitude must be >= 0, got {self.magnitude!r}")
        if self.direction is not None:
            d = np.asarray(self.direction, dtype=float)
            if d.ndim != 1 or abs(np.linalg.norm(d) - 1.0) > 1e-9:
                raise InvalidInputError("direction must be a unit-norm vector")
            self.direction = d
        if self.kind == "directional_shift" and self.direction is None:
            raise InvalidInputError("directional_shift needs a direction")
        if self.pgd_step_size is None:
            self.pgd_step_size = self.magnitude / 4.0
        if int(self.pgd_steps) < 1:
            raise InvalidInputError("pgd_steps must be >= 1")
        self.pgd_steps = int(self.pgd_steps)
        if self.kind == "pgd" and self.magnitude > 0 and self.pgd_step_size <= 0:
            raise InvalidInputError("pgd_step_size must be > 0")

    @property
    def label(self):
        return f"{self.kind}@{self.magnitude:g}"

    def to_dict(self):
        d = asdict(self)
        if self.direction is not None:
            d["direction"] = np.asarray(self.direction).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PairedBatch:
    clean_inputs: np.ndarray
    perturbed_inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.clean_inputs = np.atleast_2d(np.asarray(self.clean_inputs, dtype=float))
        self.perturbed_inputs = np.atleast_2d(np.asarray(self.perturbed_inputs, dtype=float))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        if self.clean_inputs.shape != self.perturbed_inputs.shape or self.clean_inputs.shape[0] != n:
            raise InvalidInputError(
                "clean inputs, perturbed inputs and labels must align: "
                f"{self.clean_inputs.shape}, {self.perturbed_inputs.shape}, {n}"
            )

    def __len__(self):
        return self.labels.shape[0]

    @classmethod
    def clean(cls, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return cls(X, X.copy(), y)


def pgd_attack(X, y, model, magnitude, steps, step_size):
    """Sign-gradient ascent on cross-entropy with L-inf projection, row-wise."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if magnitude == 0:
        return X.copy()
    lo, hi = X - magnitude, X + magnitude
    Xp = X.copy()
    for _ in range(steps):
        g = model.input_gradient(Xp, y)
        Xp = np.clip(Xp + step_size * np.sign(g), lo, hi)
    return Xp


def apply_perturbation(x, y, spec, model=None, rng=None):
    """Perturb one feature vector under ``spec``."""
    x = np.asarray(x, dtype=float)
    if spec.kind == "pgd":
        if model is None:
            raise InvalidInputError("pgd perturbation needs a model")
        return pgd_attack(x[None, :], [y], model, spec.magnitude, spec.pgd_steps, spec.pgd_step_size)[0]
    if spec.kind == "directional_shift":
        return x + spec.magnitude * spec.direction
    if rng is None:
        rng = keyed_rng(spec.seed, "perturb", 0)
    return x + spec.magnitude * rng.standard_normal(x.shape[0])


def make_paired_batch(X, y, spec, model=None, element_ids=None, purpose="perturb"):
    """Perturb every row of ``X``; row ``r`` draws from key ``(spec.seed, purpose, element_ids[r])``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise InvalidInputError("cannot perturb an empty batch")
    if element_ids is None:
        element_ids = range(X.shape[0])
    if spec.kind == "pgd":
        if model is None:
            raise InvalidInputError("pgd perturbation needs a model")
        Xp = pgd_attack(X, y, model, spec.magnitude, spec.pgd_steps, spec.pgd_step_size)
    elif spec.kind == "directional_shift":
        Xp = X + spec.magnitude * spec.direction[None, :]
    else:
        noise = np.array(
            [keyed_rng(spec.seed, purpose, e).standard_normal(X.shape[1]) for e in element_ids]
        )
        Xp = X + spec.magnitude * noise
    return PairedBatch(X, Xp, y)


def sample_coordinate_noise(d, sigma_q, rng):
    """Isotropic Gaussian coordinate noise ``u ~ N(0, sigma_q^2 I_d)``."""
    if sigma_q < 0:
        raise InvalidInputError(f"sigma_q must be >= 0, got {sigma_q!r}")
    if sigma_q == 0:
        return np.zeros(d)
    return sigma_q * rng.standard_normal(d)
