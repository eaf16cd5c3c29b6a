"""Single-column VAE training, encoding, and likelihood-estimate checks."""

import numpy as np
import pytest

from vaem import autodiff as ad
from vaem import data as dm
from vaem import marginal as mg
from vaem.autodiff import ParamSet, Tensor
from vaem.data import ColumnSpec, DataError


def _cont_col(name="x", target=True):
    return ColumnSpec(name=name, kind=dm.CONTINUOUS, min=0.0, max=1.0, is_target=target)


def _cat_col(probs_width=2):
    labels = tuple(f"c{i}" for i in range(probs_width))
    return ColumnSpec(name="g", kind=dm.CATEGORICAL, class_labels=labels)


@pytest.fixture(scope="module")
def trained_cat():
    rng = np.random.default_rng(100)
    values = (rng.uniform(size=2000) < 0.1).astype(float)  # P(class1) = 0.1
    return mg.train_marginal(_cat_col(2), values, np.random.default_rng(7),
                             epochs=300), values


@pytest.fixture(scope="module")
def trained_cont():
    rng = np.random.default_rng(101)
    values = np.clip(rng.normal(0.5, 0.05, size=2000), 0, 1)
    return mg.train_marginal(_cont_col(), values, np.random.default_rng(8),
                             epochs=300, noise_variance=4e-4), values


class TestInitialState:
    def test_untrained_encoder_is_standard_normal(self):
        vae = mg.MarginalVAE.initialized(_cont_col(), np.random.default_rng(0))
        for x in (0.0, 0.37, 1.0):
            mean, var = vae.encode(np.array([x]))
            assert mean[0] == 0.0 and var[0] == 1.0

    def test_untrained_kl_to_prior_is_zero(self):
        vae = mg.MarginalVAE.initialized(_cont_col(), np.random.default_rng(0))
        mean, var = vae.encode(np.array([0.7]))
        kl = ad.gaussian_kl(Tensor(mean), Tensor(np.log(var)),
                            Tensor([0.0]), Tensor([0.0])).data
        assert kl[0] == 0.0

    def test_untrained_continuous_decoder_mean_half(self):
        vae = mg.MarginalVAE.initialized(_cont_col(), np.random.default_rng(0))
        np.testing.assert_allclose(vae.decode(np.array([-2.0, 0.0, 3.0]))[:, 0], 0.5)

    def test_encode_pure(self):
        vae = mg.MarginalVAE.initialized(_cat_col(3), np.random.default_rng(1))
        a = vae.encode(np.array([2.0]))
        b = vae.encode(np.array([2.0]))
        assert a[0][0] == b[0][0] and a[1][0] == b[1][0]


class TestTraining:
    def test_two_point_categorical_frequencies(self, trained_cat):
        vae, values = trained_cat
        rng = np.random.default_rng(9)
        draws = mg.generate_from_marginal(vae, 8000, rng)
        p1 = (draws == 1).mean()
        assert abs(p1 - 0.1) < 0.03

    def test_concentrated_continuous_mean(self, trained_cont):
        vae, _ = trained_cont
        draws = mg.generate_from_marginal(vae, 5000, np.random.default_rng(10))
        assert abs(draws.mean() - 0.5) < 0.02

    def test_elbo_trend_upward(self, trained_cat, trained_cont):
        for vae, _ in (trained_cat, trained_cont):
            assert vae.history[-1] >= vae.history[0]

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(102)
        values = rng.uniform(0.2, 0.8, size=300)
        one = mg.train_marginal(_cont_col(), values, np.random.default_rng(3), epochs=40)
        two = mg.train_marginal(_cont_col(), values, np.random.default_rng(3), epochs=40)
        for name, t in one.params.items():
            assert t.data.tobytes() == two.params[name].data.tobytes()

    def test_no_observed_cells_rejected(self):
        with pytest.raises(DataError, match="no observed cells"):
            mg.train_marginal(_cont_col(), np.array([]), np.random.default_rng(0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_diagnostic(self):
        # a value this large overflows the Gaussian quadratic term
        with pytest.raises(ad.NumericsError, match="epoch 0"):
            mg.train_marginal(_cont_col(), np.full(50, 1e300),
                              np.random.default_rng(0), epochs=5)

    def test_early_stop_before_epoch_cap(self, trained_cont):
        vae, _ = trained_cont
        assert len(vae.history) < 300


class TestPosteriorGeometry:
    def test_aggregated_posterior_near_standard(self, trained_cont, trained_cat):
        for vae, values in (trained_cont, trained_cat):
            mean, var = vae.encode(values)
            agg_mean = mean.mean()
            second = (mean ** 2 + var).mean()
            assert -0.5 < agg_mean < 0.5
            assert 0.5 < second < 1.5

    def test_decode_marginalized_matches_frequencies(self, trained_cat):
        vae, values = trained_cat
        z = np.random.default_rng(11).standard_normal(1000)
        logits = vae.decode(z)
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        avg = probs.mean(axis=0)
        emp = np.bincount(values.astype(int), minlength=2) / values.size
        np.testing.assert_allclose(avg, emp, atol=0.05)


class TestReparameterizedGradient:
    def test_single_sample_elbo_gradcheck(self):
        rng = np.random.default_rng(12)
        vae = mg.MarginalVAE.initialized(_cont_col(), rng)
        # nudge final layers off zero so gradients are non-trivial
        vae.params["enc.W1"].data[...] = rng.normal(scale=0.1, size=(mg.HIDDEN, 2))
        vae.params["dec.W1"].data[...] = rng.normal(scale=0.1, size=(mg.HIDDEN, 1))
        values = np.array([0.3, 0.6, 0.8])
        blocks = dm.encoder_input(vae.col, values)
        eps = rng.standard_normal((3, 1))

        def forward():
            mean, logvar = vae.encode_t(Tensor(blocks))
            z = ad.add(mean, ad.mul(ad.exp(ad.scale(logvar, 0.5)), Tensor(eps)))
            recon = vae.head.log_prob(vae.decode_t(z), values)
            kl = ad.gaussian_kl(mean, logvar, Tensor([0.0]), Tensor([0.0]))
            return ad.neg(ad.tmean(ad.sub(recon, kl)))

        assert ad.gradient_check(vae.params, forward) < 1e-4


class TestLikelihoodEstimates:
    def test_is_ll_close_to_elbo_on_trained_column(self, trained_cont):
        vae, values = trained_cont
        elbo, is_ll = mg.marginal_elbo_and_is_ll(vae, values[:400],
                                                 importance_samples=2000,
                                                 rng=np.random.default_rng(13))
        assert abs(is_ll - elbo) < 0.1
        assert is_ll >= elbo - 0.02  # bound up to Monte Carlo noise

    def test_single_sample_is_matches_elbo_in_expectation(self, trained_cont):
        vae, values = trained_cont
        sub = values[:60]
        elbo, _ = mg.marginal_elbo_and_is_ll(vae, sub, importance_samples=200,
                                             rng=np.random.default_rng(14))
        singles = [
            mg.marginal_elbo_and_is_ll(vae, sub, importance_samples=1,
                                       rng=np.random.default_rng(500 + r))[1]
            for r in range(200)
        ]
        spread = np.std(singles) / np.sqrt(len(singles))
        assert abs(np.mean(singles) - elbo) < max(4 * spread, 0.02)

    def test_more_samples_never_worse_in_expectation(self, trained_cont):
        vae, values = trained_cont
        sub = values[:60]
        small, big = [], []
        for seed in range(20):
            small.append(mg.marginal_elbo_and_is_ll(
                vae, sub, importance_samples=10,
                rng=np.random.default_rng(900 + seed))[1])
            big.append(mg.marginal_elbo_and_is_ll(
                vae, sub, importance_samples=100,
                rng=np.random.default_rng(900 + seed))[1])
        assert np.mean(big) >= np.mean(small) - 0.01
