import zlib

import numpy as np
import pytest

from fragileflow._validation import InvalidInputError
from fragileflow.model import ToyModel
from fragileflow.perturb import (
    PairedBatch,
    PerturbSpec,
    apply_perturbation,
    keyed_rng,
    make_paired_batch,
    pgd_attack,
    sample_coordinate_noise,
)


def ce(model, X, y):
    S = model.scores(X)
    S = S - S.max(axis=1, keepdims=True)
    logp = S - np.log(np.exp(S).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y]


@pytest.fixture
def linear():
    return ToyModel.random("linear", 4, 3, rng=np.random.default_rng(30), scale=1.0)


class TestApply:
    @pytest.mark.parametrize("kind", ["gaussian_noise", "directional_shift", "pgd"])
    def test_zero_magnitude_identity(self, kind, linear):
        x = np.array([0.3, -1.0, 2.0, 0.5])
        spec = PerturbSpec(kind, 0.0, direction=[1.0, 0, 0, 0], seed=4)
        assert np.array_equal(apply_perturbation(x, 1, spec, linear), x)
        batch = make_paired_batch(np.tile(x, (5, 1)), [0, 1, 2, 0, 1], spec, linear)
        assert np.array_equal(batch.perturbed_inputs, batch.clean_inputs)

    def test_directional(self):
        spec = PerturbSpec("directional_shift", 1.0, direction=[1.0, 0.0, 0.0])
        np.testing.assert_array_equal(apply_perturbation(np.array([1.0, 2.0, 3.0]), 0, spec), [2.0, 2.0, 3.0])

    def test_pgd_one_step_sign_oracle(self, linear):
        W, b = linear.unpack()
        x, y = np.array([0.2, -0.4, 1.1, 0.0]), 2
        s = W @ x + b
        p = np.exp(s - s.max())
        p /= p.sum()
        # dCE/dx for a linear model is W^T (p - e_y)
        grad = sum((p[k] - (k == y)) * W[k] for k in range(3))
        spec = PerturbSpec("pgd", 0.4, pgd_steps=1, pgd_step_size=0.1)
        out = apply_perturbation(x, y, spec, linear)
        np.testing.assert_allclose(out, x + 0.1 * np.sign(grad), atol=1e-15)

    def test_pgd_needs_model(self):
        with pytest.raises(InvalidInputError):
            apply_perturbation(np.zeros(2), 0, PerturbSpec("pgd", 0.1))
        with pytest.raises(InvalidInputError):
            make_paired_batch(np.zeros((2, 2)), [0, 1], PerturbSpec("pgd", 0.1))

    def test_spec_validation(self):
        with pytest.raises(InvalidInputError):
            PerturbSpec("typo", 0.1)
        with pytest.raises(InvalidInputError):
            PerturbSpec("gaussian_noise", -0.1)
        with pytest.raises(InvalidInputError):
            PerturbSpec("directional_shift", 1.0, direction=[1.0, 1.0])
        with pytest.raises(InvalidInputError):
            PerturbSpec("directional_shift", 1.0)

    def test_spec_roundtrip(self):
        spec = PerturbSpec("directional_shift", 0.5, direction=[0.6, 0.8], seed=3)
        back = PerturbSpec.from_dict(spec.to_dict())
        assert back.label == "directional_shift@0.5"
        np.testing.assert_array_equal(back.direction, spec.direction)
        assert PerturbSpec("pgd", 0.8).pgd_step_size == 0.2


class TestPGD:
    def test_ascent_and_projection(self, linear):
        rng = np.random.default_rng(31)
        X = rng.normal(size=(40, 4))
        y = rng.integers(0, 3, 40)
        eps = 0.3
        prev = ce(linear, X, y)
        for steps in range(1, 13):
            Xp = pgd_attack(X, y, linear, eps, steps, 0.08)
            cur = ce(linear, Xp, y)
            assert np.all(cur >= prev - 1e-9)
            assert np.abs(Xp - X).max() <= eps + 1e-12
            prev = cur

    def test_mlp_projection(self):
        m = ToyModel.random("mlp1", 5, 4, 6, rng=np.random.default_rng(32), scale=1.0)
        rng = np.random.default_rng(33)
        X = rng.normal(size=(30, 5))
        Xp = pgd_attack(X, rng.integers(0, 4, 30), m, 0.05, 20, 0.04)
        assert np.abs(Xp - X).max() <= 0.05 + 1e-12


class TestPairedBatch:
    def test_determinism(self):
        X = np.random.default_rng(34).normal(size=(64, 6))
        y = np.arange(64) % 3
        spec = PerturbSpec("gaussian_noise", 0.7, seed=11)
        a = make_paired_batch(X, y, spec)
        b = make_paired_batch(X.copy(), y.copy(), spec)
        assert np.array_equal(a.perturbed_inputs, b.perturbed_inputs)

    def test_reference_replay(self):
        X = np.random.default_rng(35).normal(size=(64, 6))
        spec = PerturbSpec("gaussian_noise", 0.7, seed=11)
        ids = np.arange(100, 164)
        batch = make_paired_batch(X, np.zeros(64, dtype=int), spec, element_ids=ids, purpose="eval")
        tag = zlib.crc32(b"eval")
        for r, e in enumerate(ids):
            bitgen = np.random.Philox(np.random.SeedSequence([11, tag, int(e)]))
            draw = np.random.Generator(bitgen).standard_normal(6)
            np.testing.assert_array_equal(batch.perturbed_inputs[r], X[r] + 0.7 * draw)

    def test_independent_of_batch_composition(self):
        X = np.random.default_rng(36).normal(size=(20, 3))
        y = np.zeros(20, dtype=int)
        spec = PerturbSpec("gaussian_noise", 1.0, seed=2)
        full = make_paired_batch(X, y, spec).perturbed_inputs
        sub = [3, 17, 8]
        part = make_paired_batch(X[sub], y[sub], spec, element_ids=sub).perturbed_inputs
        assert np.array_equal(part, full[sub])

    def test_purpose_separates_streams(self):
        assert keyed_rng(0, "train_perturb", 5).random() != keyed_rng(0, "eval_perturb", 5).random()

    def test_alignment_checked(self):
        with pytest.raises(InvalidInputError):
            PairedBatch(np.zeros((3, 2)), np.zeros((2, 2)), [0, 1, 0])
        with pytest.raises(InvalidInputError):
            make_paired_batch(np.zeros((0, 2)), [], PerturbSpec())


class TestCoordinateNoise:
    def test_zero(self):
        assert np.array_equal(sample_coordinate_noise(7, 0.0, keyed_rng(0, "u")), np.zeros(7))

    def test_negative(self):
        with pytest.raises(InvalidInputError):
            sample_coordinate_noise(3, -1.0, keyed_rng(0, "u"))

    def test_moments(self):
        rng = keyed_rng(5, "coordinate_noise")
        sigma, n, d = 0.3, 100_000, 4
        U = np.array([sample_coordinate_noise(d, sigma, rng) for _ in range(n)])
        se = sigma / np.sqrt(n)
        assert np.all(np.abs(U.mean(axis=0)) <= 4 * se)
        np.testing.assert_allclose(U.var(axis=0), sigma ** 2, rtol=0.05)
