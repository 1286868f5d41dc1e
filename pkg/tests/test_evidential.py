import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evpan.evidential import (
    DirichletField,
    class_probabilities,
    dirichlet_from_logits,
    entropy_confidence,
    evidence,
    fit_temperature,
    normalized_entropy,
    predictive_uncertainty,
    softmax_probabilities,
    temperature_nll,
    temperature_scale,
)
from evpan.grid import VOID, channel_argmax

mpmath.mp.dps = 50


def mp_softplus(x):
    return float(mpmath.log(1 + mpmath.exp(mpmath.mpf(x))))


class TestEvidence:
    def test_softplus_zero(self):
        assert evidence(np.array(0.0)) == pytest.approx(np.log(2), rel=1e-15)

    def test_relu(self):
        np.testing.assert_array_equal(evidence(np.array([-3.0, 3.0]), "relu"), [0.0, 3.0])

    @pytest.mark.parametrize("x", [-20.0, -5.0, 0.3, 50.0, 700.0, 1000.0])
    def test_softplus_against_high_precision(self, x):
        assert evidence(np.array(x)) == pytest.approx(mp_softplus(x), rel=1e-14)

    def test_softplus_reference_values(self):
        assert evidence(np.array(-20.0)) == pytest.approx(2.061153620314381e-09, rel=1e-12)
        assert evidence(np.array(50.0)) == pytest.approx(50.0, rel=1e-15)

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            evidence(np.zeros(2), "tanh")

    @given(arrays(np.float64, 20, elements=st.floats(-50, 50)))
    def test_positivity(self, x):
        assert (evidence(x) > 0).all()
        r = evidence(x, "relu")
        assert ((r == 0) == (x <= 0)).all()


class TestDirichlet:
    def test_zero_logits(self):
        f = dirichlet_from_logits(np.zeros((1, 1, 2)))
        np.testing.assert_allclose(f.alpha[0, 0], [1 + np.log(2)] * 2, rtol=1e-15)
        assert f.strength[0, 0, 0] == pytest.approx(2 + 2 * np.log(2), rel=1e-15)
        assert f.strength[0, 0, 0] == pytest.approx(3.3863, abs=1e-4)

    def test_negative_limit(self):
        f = dirichlet_from_logits(np.full((1, 1, 3), -800.0))
        np.testing.assert_array_equal(f.alpha, 1.0)
        assert f.strength[0, 0, 0] == 3.0

    def test_solved_logit(self):
        x = float(mpmath.log(mpmath.e**2 - 1))
        assert x == pytest.approx(1.8546, abs=1e-4)
        f = dirichlet_from_logits(np.array([[[x, -40.0]]]))
        np.testing.assert_allclose(f.alpha[0, 0], [3.0, 1.0], rtol=1e-14)
        assert f.strength[0, 0, 0] == pytest.approx(4.0, rel=1e-14)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            dirichlet_from_logits(np.zeros((2, 2, 1)))


def field(alpha):
    alpha = np.asarray(alpha, dtype=float)[None, None]
    return DirichletField(alpha, alpha.sum(-1, keepdims=True))


class TestProbabilities:
    @pytest.mark.parametrize("c", [2, 5, 19])
    def test_uniform(self, c):
        np.testing.assert_allclose(class_probabilities(field([4.0] * c)), 1 / c, rtol=1e-15)

    def test_direct(self):
        np.testing.assert_allclose(class_probabilities(field([3, 1]))[0, 0], [0.75, 0.25])
        np.testing.assert_allclose(class_probabilities(field([2, 3, 5]))[0, 0], [0.2, 0.3, 0.5])


class TestUncertainty:
    def test_zero_evidence(self):
        assert predictive_uncertainty(field([1, 1, 1]))[0, 0, 0] == 1.0

    def test_zero_logits(self):
        u = predictive_uncertainty(dirichlet_from_logits(np.zeros((1, 1, 2))))
        assert u[0, 0, 0] == pytest.approx(1 / (1 + np.log(2)), rel=1e-15)
        assert u[0, 0, 0] == pytest.approx(0.5906, abs=1e-4)

    def test_direct(self):
        assert predictive_uncertainty(field([2.0] * 10))[0, 0, 0] == 0.5

    @given(arrays(np.float64, (3, 3, 4), elements=st.floats(-30, 30)))
    def test_joint_identities(self, logits):
        f = dirichlet_from_logits(logits)
        p = class_probabilities(f)
        u = predictive_uncertainty(f)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(u, 4 / f.strength, rtol=1e-12)
        assert ((u > 0) & (u <= 1)).all()


class TestEntropy:
    def test_uniform(self):
        assert normalized_entropy(np.full((1, 1, 4), 0.25))[0, 0, 0] == pytest.approx(1.0, rel=1e-15)

    def test_one_hot(self):
        assert normalized_entropy(np.array([[[0.0, 1.0, 0.0]]]))[0, 0, 0] == 0.0
        assert entropy_confidence(np.array([[[0.0, 1.0, 0.0]]]))[0, 0, 0] == 1.0

    def test_reference(self):
        ref = float(-(mpmath.mpf(0.75) * mpmath.log(0.75) + mpmath.mpf(0.25) * mpmath.log(0.25)) / mpmath.log(2))
        assert ref == pytest.approx(0.8113, abs=1e-4)
        assert normalized_entropy(np.array([[[0.75, 0.25]]]))[0, 0, 0] == pytest.approx(ref, rel=1e-14)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            normalized_entropy(np.array([[[1.1, -0.1]]]))


class TestTemperature:
    def test_identity(self, rng):
        x = rng.normal(size=(2, 2, 3))
        np.testing.assert_array_equal(temperature_scale(x, 1.0), x)

    def test_division(self):
        np.testing.assert_array_equal(temperature_scale(np.array([[[2.0, 0.0]]]), 2.0), [[[1.0, 0.0]]])

    def test_large_temperature_uniform(self, rng):
        p = softmax_probabilities(temperature_scale(rng.normal(size=(2, 2, 5)), 1e9))
        np.testing.assert_allclose(p, 0.2, atol=1e-8)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_invalid(self, t):
        with pytest.raises(ValueError):
            temperature_scale(np.zeros((1, 1, 2)), t)

    @given(st.floats(0.01, 100))
    def test_argmax_invariant(self, t):
        x = np.random.default_rng(3).normal(size=(4, 4, 5))
        np.testing.assert_array_equal(channel_argmax(temperature_scale(x, t))[0], channel_argmax(x)[0])


def calibrated_set(seed, scale=1.0, n=(120, 120), c=4):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 2.0, size=n + (c,))
    p = softmax_probabilities(logits)
    cdf = p.cumsum(-1)
    labels = (rng.random(n)[..., None] > cdf).sum(-1)
    return logits * scale, np.minimum(labels, c - 1)


def grid_search_temperature(logits, labels):
    keep = labels != VOID
    x, y = logits[keep], labels[keep]
    temps = np.exp(np.linspace(np.log(0.05), np.log(20), 4001))
    nll = [temperature_nll(x, y, t) for t in temps]
    return temps[int(np.argmin(nll))]


class TestFitTemperature:
    def test_calibrated_near_one(self):
        logits, labels = calibrated_set(0)
        t = fit_temperature([logits], [labels])
        assert t == pytest.approx(1.0, abs=0.05)
        assert t == pytest.approx(grid_search_temperature(logits, labels), rel=2e-3)

    def test_scaled_logits(self):
        logits, labels = calibrated_set(1, scale=3.0)
        t = fit_temperature([logits[:60], logits[60:]], [labels[:60], labels[60:]])
        assert t == pytest.approx(3.0, abs=0.15)
        assert t == pytest.approx(grid_search_temperature(logits, labels), rel=2e-3)

    def test_single_confident_pixel_hits_lower_bound(self):
        logits = np.array([[[2.0, 0.0, -1.0]]])
        labels = np.array([[0]])
        t = fit_temperature([logits], [labels])
        assert grid_search_temperature(logits, labels) == pytest.approx(0.05)
        assert 0.05 <= t < 0.0502

    def test_void_ignored(self):
        logits, labels = calibrated_set(2, n=(40, 40))
        noisy = labels.copy()
        noisy[:10] = VOID
        t_void = fit_temperature([logits], [noisy])
        t_cut = fit_temperature([logits[10:]], [labels[10:]])
        assert t_void == pytest.approx(t_cut, rel=1e-3)

    def test_all_void(self):
        with pytest.raises(ValueError):
            fit_temperature([np.zeros((2, 2, 3))], [np.full((2, 2), VOID)])
