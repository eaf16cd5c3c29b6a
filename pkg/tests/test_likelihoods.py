"""Likelihood fixtures, normalization invariants, and gradient checks."""

import math

import numpy as np
import pytest

from vaem import autodiff as ad
from vaem import data as dm
from vaem.autodiff import ParamSet, Tensor
from vaem.data import ColumnSpec, DataError
from vaem.likelihoods import LikelihoodHead, head_for


def _cont(noise=0.02):
    return head_for(ColumnSpec(name="x", kind=dm.CONTINUOUS), noise_variance=noise)


def _cat(v=4):
    labels = tuple(f"k{i}" for i in range(v))
    return head_for(ColumnSpec(name="g", kind=dm.CATEGORICAL, class_labels=labels))


def _ord(levels=4):
    return head_for(ColumnSpec(name="o", kind=dm.ORDINAL, level_count=levels))


def _disc(grid=(0.0, 0.5, 1.0), noise=0.02):
    return head_for(ColumnSpec(name="d", kind=dm.DISCRETE, min=0.0, max=1.0, grid=grid),
                    noise_variance=noise)


class TestLogProbFixtures:
    def test_gaussian_at_mean(self):
        lp = _cont().log_prob(Tensor([[0.4]]), np.array([0.4])).data[0, 0]
        assert lp == pytest.approx(-0.5 * math.log(2 * math.pi * 0.02), abs=1e-12)
        assert lp == pytest.approx(1.0371, abs=1e-4)

    def test_categorical_uniform(self):
        lp = _cat(4).log_prob(Tensor([[0.0, 0.0, 0.0, 0.0]]), np.array([2])).data[0, 0]
        assert lp == pytest.approx(math.log(0.25), abs=1e-12)

    def test_binary_ordinal_symmetric_link(self):
        head = _ord(levels=2)
        for level in (0, 1):
            lp = head.log_prob(Tensor([[0.0, 0.0]]), np.array([level])).data[0, 0]
            assert lp == pytest.approx(math.log(0.5), abs=1e-12)

    def test_invalid_observed_rejected(self):
        with pytest.raises(DataError, match="outside"):
            _cat(3).log_prob(Tensor([[0.0, 0.0, 0.0]]), np.array([3]))
        with pytest.raises(DataError, match="non-finite"):
            _cont().log_prob(Tensor([[0.0]]), np.array([np.nan]))


class TestNormalization:
    def test_categorical_probs_sum_to_one(self):
        rng = np.random.default_rng(0)
        head = _cat(5)
        logits = Tensor(rng.normal(scale=4.0, size=(30, 5)))
        total = np.zeros(30)
        for k in range(5):
            total += np.exp(head.log_prob(logits, np.full(30, k)).data[:, 0])
        np.testing.assert_allclose(total, 1.0, atol=1e-10)

    def test_ordinal_masses_nonneg_sum_to_one(self):
        rng = np.random.default_rng(1)
        head = _ord(6)
        out = Tensor(rng.normal(scale=3.0, size=(50, 6)))
        masses = head.ordinal_masses(out).data
        assert np.all(masses >= 0.0)
        np.testing.assert_allclose(masses.sum(axis=1), 1.0, atol=1e-10)

    def test_ordinal_cutpoints_strictly_increase(self):
        # masses of interior levels are positive only if cutpoints increase
        rng = np.random.default_rng(2)
        head = _ord(5)
        out = Tensor(rng.normal(scale=2.0, size=(40, 5)))
        masses = head.ordinal_masses(out).data
        assert np.all(masses[:, 1:-1] > 0.0)


class TestGradients:
    @pytest.mark.parametrize("factory,width,observed", [
        (_cont, 1, np.array([0.3, 0.8, 0.1])),
        (_cat, 4, np.array([0, 3, 1])),
        (_ord, 4, np.array([0, 2, 3])),
    ])
    def test_log_prob_matches_finite_differences(self, factory, width, observed):
        rng = np.random.default_rng(3)
        head = factory()
        p = ParamSet()
        out = p.add("out", rng.normal(scale=0.8, size=(3, width)))
        err = ad.gradient_check(p, lambda: ad.tsum(head.log_prob(out, observed)))
        assert err < 1e-5

    def test_gaussian_maximized_at_mean(self):
        head = _cont()
        mean = Tensor([[0.6]])
        at = head.log_prob(mean, np.array([0.6])).data[0, 0]
        for eps in (1e-3, -1e-3):
            off = head.log_prob(mean, np.array([0.6 + eps])).data[0, 0]
            assert off < at


class TestNumpyTwin:
    def test_matches_tape_path(self):
        rng = np.random.default_rng(4)
        cases = [
            (_cont(), rng.normal(size=(20, 1)), rng.uniform(size=20)),
            (_cat(4), rng.normal(size=(20, 4)), rng.integers(0, 4, 20).astype(float)),
            (_ord(5), rng.normal(size=(20, 5)), rng.integers(0, 5, 20).astype(float)),
        ]
        for head, out, obs in cases:
            tape_lp = head.log_prob(Tensor(out), obs).data[:, 0]
            np_lp = head.log_prob_np(out, obs)
            np.testing.assert_allclose(np_lp, tape_lp, atol=1e-12)

    def test_numpy_twin_broadcasts_leading_axes(self):
        rng = np.random.default_rng(5)
        head = _cat(3)
        out = rng.normal(size=(4, 6, 3))
        obs = rng.integers(0, 3, size=(4, 6)).astype(float)
        got = head.log_prob_np(out, obs)
        for i in range(4):
            row = head.log_prob(Tensor(out[i]), obs[i]).data[:, 0]
            np.testing.assert_allclose(got[i], row, atol=1e-12)


class TestSampling:
    def test_degenerate_logits_pick_first_class(self):
        rng = np.random.default_rng(6)
        draws = _cat(3).sample(np.tile([50.0, 0.0, 0.0], (10000, 1)), rng)
        assert (draws == 0).mean() > 0.999

    def test_gaussian_sample_mean_clt(self):
        rng = np.random.default_rng(7)
        draws = _cont().sample(np.full((10000, 1), 0.5), rng)
        bound = 3 * math.sqrt(0.02 / 10000)
        assert abs(draws.mean() - 0.5) < bound

    def test_discrete_snaps_to_nearest(self):
        rng = np.random.default_rng(8)
        head = _disc(noise=1e-8)
        draws = head.sample(np.full((200, 1), 0.49), rng)
        assert np.all(draws == 0.5)

    def test_ordinal_sample_frequencies(self):
        rng = np.random.default_rng(9)
        head = _ord(3)
        out = np.tile([0.0, -1.0, 0.5], (20000, 1))
        masses = head.ordinal_masses_np(out[:1])[0]
        draws = head.sample(out, rng)
        freqs = np.bincount(draws.astype(int), minlength=3) / draws.size
        np.testing.assert_allclose(freqs, masses, atol=0.01)


class TestMode:
    def test_categorical_argmax(self):
        assert _cat(3).mode(np.array([[0.0, 3.0, 1.0]]))[0] == 1

    def test_gaussian_identity(self):
        assert _cont().mode(np.array([[0.42]]))[0] == 0.42

    def test_ordinal_limit_low_location(self):
        # location far below the first cutpoint puts all mass on level 0
        assert _ord(4).mode(np.array([[-30.0, 0.0, 0.0, 0.0]]))[0] == 0

    def test_discrete_mode_snaps(self):
        assert _disc().mode(np.array([[0.49]]))[0] == 0.5
