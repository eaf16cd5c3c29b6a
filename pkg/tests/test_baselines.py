"""Single-stage baselines: balance weights, set encoder, training, prediction."""

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from vaem.autodiff import NumericsError
from vaem.baselines import (FlatVAE, flat_from_payload, solve_balance_weights,
                            train_flat_discriminator, train_flat_vae)
from vaem.data import ColumnSpec, Dataset
from vaem.datasets import make_correlated_pair, make_mixed8
from vaem.model import canonical_json, load_checkpoint, save_checkpoint

TINY = (ColumnSpec(name="a", kind="continuous", min=0.0, max=1.0),
        ColumnSpec(name="c", kind="categorical", class_labels=("p", "q", "r")),
        ColumnSpec(name="y", kind="continuous", min=0.0, max=1.0,
                   is_target=True))


def fresh_model(variant="plain", schema=TINY, seed=0, perturb=False):
    rng = np.random.default_rng(seed)
    k, d = 4, len(schema)
    px = rng.uniform(0.1, 0.9, size=(k, d))
    for i, col in enumerate(schema):
        if col.kind in ("categorical", "ordinal"):
            px[:, i] = rng.integers(0, col.class_count, size=k)
    model = FlatVAE.initialized(schema, px, np.ones((k, d), dtype=bool),
                                np.arange(k), rng, variant=variant)
    if perturb:
        # a zero output layer hides masking bugs; give it life
        w2 = model.params["pin.head.W2"]
        w2.data[:] = rng.normal(scale=0.05, size=w2.data.shape)
    return model


def random_rows(schema, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, len(schema)))
    for i, col in enumerate(schema):
        if col.kind in ("categorical", "ordinal"):
            x[:, i] = rng.integers(0, col.class_count, size=n)
    mask = rng.random((n, len(schema))) < 0.6
    return x, mask


def shifted_pair(seed=11, n=400):
    """Copycat pair with conditioning values kept away from zero, where a
    value-scaled element embedding degenerates toward the missing case."""
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(0.35, 0.95, n)
    cells = np.column_stack([x1, x1])
    schema = (ColumnSpec(name="a", kind="continuous", min=0.0, max=1.0),
              ColumnSpec(name="y", kind="continuous", min=0.0, max=1.0,
                         is_target=True))
    return Dataset(schema, cells, np.ones_like(cells, dtype=bool))


@pytest.fixture(scope="module")
def flat_pair():
    data = make_correlated_pair(seed=21, n=500, noise=0.05)
    model = train_flat_vae(data, master_seed=5, epochs=150, lr=1e-3,
                           noise_variance=4e-4, k_prior=30)
    return data, model


@pytest.fixture(scope="module")
def balanced_mixed():
    data = make_mixed8(seed=4, n=220)
    model = train_flat_vae(data, variant="balanced", master_seed=6, epochs=40,
                           noise_variance=4e-4, k_prior=20)
    return data, model


@pytest.fixture(scope="module")
def disc_pair():
    data = shifted_pair()
    model = train_flat_vae(data, master_seed=5, epochs=150, lr=1e-3,
                           noise_variance=4e-4, k_prior=30)
    miss = np.column_stack([np.ones(100, bool), np.zeros(100, bool)])
    before = {
        "params": {k: t.data.copy() for k, t in model.params.items()},
        "impute": model.impute(data.cells[:100], miss),
    }
    train_flat_discriminator(model, data, epochs=300, lr=1e-3,
                             rng=np.random.default_rng(7))
    return data, model, before


class TestSolveBalanceWeights:
    def test_inverse_magnitude_weighting(self):
        res = solve_balance_weights({"continuous": -10.0, "categorical": -40.0})
        np.testing.assert_allclose(res.betas["continuous"], 0.8)
        np.testing.assert_allclose(res.betas["categorical"], 0.2)
        assert res.solved_from == {"continuous": -10.0, "categorical": -40.0}

    def test_weighted_sums_are_equalized(self):
        lls = {"continuous": -3.7, "categorical": -41.0, "ordinal": -0.9}
        res = solve_balance_weights(lls)
        prods = [res.betas[k] * lls[k] for k in lls]
        np.testing.assert_allclose(prods, prods[0])

    def test_weights_sum_to_one(self):
        res = solve_balance_weights({"a": -1.5, "b": -220.0, "c": -0.04})
        np.testing.assert_allclose(sum(res.betas.values()), 1.0, atol=1e-12)

    def test_equal_sums_give_uniform_weights(self):
        res = solve_balance_weights({"a": -5.0, "b": -5.0, "c": -5.0})
        np.testing.assert_allclose(list(res.betas.values()), 1 / 3)

    def test_single_type_takes_full_weight(self):
        assert solve_balance_weights({"continuous": -7.0}).betas == \
            {"continuous": 1.0}

    def test_mixed_signs_keep_previous_weights(self, caplog):
        previous = solve_balance_weights({"a": -10.0, "b": -40.0})
        with caplog.at_level("WARNING", logger="vaem.baselines"):
            res = solve_balance_weights({"a": 2.0, "b": -1.0}, previous)
        assert res is previous
        assert "balance weights undefined" in caplog.text

    def test_zero_sum_without_previous_falls_back_to_uniform(self, caplog):
        with caplog.at_level("WARNING", logger="vaem.baselines"):
            res = solve_balance_weights({"a": 0.0, "b": -2.0})
        np.testing.assert_allclose(list(res.betas.values()), 0.5)
        assert res.solved_from is None


class TestInitialized:
    def test_plain_latent_width(self):
        assert fresh_model("plain").latent_dim == 20

    def test_extended_adds_one_dimension_per_column(self):
        assert fresh_model("extended").latent_dim == 20 + len(TINY)

    def test_extended_parameter_count_delta(self):
        # widening the latent by D touches the encoder output layer
        # (2 units per dimension, 200 inputs) and the first decoder layer
        # (50 outputs per dimension)
        plain = sum(t.data.size for _, t in fresh_model("plain").params.items())
        ext = sum(t.data.size for _, t in fresh_model("extended").params.items())
        assert ext - plain == (2 * 200 + 2 + 50) * len(TINY)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="unknown variant"):
            fresh_model("wide")
        data = make_correlated_pair(seed=1, n=60, noise=0.05)
        with pytest.raises(ValueError, match="unknown variant"):
            train_flat_vae(data, variant="wide", epochs=1)

    def test_fresh_posterior_is_standard_normal(self):
        model = fresh_model()
        x, mask = random_rows(TINY, 40, seed=2)
        mu, lv = model.encode_x(x, mask)
        np.testing.assert_array_equal(mu, 0.0)
        np.testing.assert_array_equal(lv, 0.0)

    def test_fresh_prior_matches_standard_normal_at_origin(self):
        # every mixture component is N(0, I), so the mixture is too
        val = fresh_model().prior_log_prob(np.zeros(20))
        np.testing.assert_allclose(val, -10 * np.log(2 * np.pi), rtol=1e-12)


class TestSetEncoder:
    def test_unobserved_values_are_ignored(self):
        model = fresh_model(perturb=True)
        x, mask = random_rows(TINY, 50, seed=3)
        scrambled = x.copy()
        noise, _ = random_rows(TINY, 50, seed=4)
        scrambled[~mask] = noise[~mask]
        for a, b in zip(model.encode_x(x, mask),
                        model.encode_x(scrambled, mask)):
            np.testing.assert_array_equal(a, b)

    def test_numpy_matches_tape(self):
        model = fresh_model(perturb=True)
        x, mask = random_rows(TINY, 30, seed=5)
        mu_t, lv_t = model.encode_x_t(x, mask)
        mu, lv = model.encode_x(x, mask)
        np.testing.assert_allclose(mu, mu_t.data, atol=1e-12)
        np.testing.assert_allclose(lv, lv_t.data, atol=1e-12)

    def test_leading_shapes_agree(self):
        model = fresh_model(perturb=True)
        x, mask = random_rows(TINY, 35, seed=6)
        xs = x.reshape(5, 7, -1)
        ms = mask.reshape(5, 7, -1)
        mu_flat, _ = model.encode_x(x, mask)
        mu_cube, _ = model.encode_x(xs, ms)
        assert mu_cube.shape == (5, 7, model.latent_dim)
        np.testing.assert_array_equal(mu_cube.reshape(35, -1), mu_flat)

    def test_fully_masked_rows_share_one_posterior(self):
        model = fresh_model(perturb=True)
        x, _ = random_rows(TINY, 20, seed=7)
        mu, lv = model.encode_x(x, np.zeros_like(x, dtype=bool))
        np.testing.assert_array_equal(mu, np.broadcast_to(mu[0], mu.shape))
        np.testing.assert_array_equal(lv, np.broadcast_to(lv[0], lv.shape))


class TestPrior:
    def test_matches_direct_mixture_formula(self):
        model = fresh_model(perturb=True)
        mu, lv = model.prior_components()
        h = np.random.default_rng(8).normal(size=(6, model.latent_dim))
        comp = stats.norm.logpdf(h[:, None, :], loc=mu[None],
                                 scale=np.exp(0.5 * lv)[None]).sum(axis=2)
        oracle = logsumexp(comp, axis=1) - np.log(mu.shape[0])
        np.testing.assert_allclose(model.prior_log_prob(h), oracle, atol=1e-9)


class TestTraining:
    def test_probe_bound_improves(self, flat_pair):
        data, model = flat_pair
        fresh = FlatVAE.initialized(data.schema, model.pseudo_x,
                                    model.pseudo_mask, model.pseudo_rows,
                                    np.random.default_rng(1),
                                    noise_variance=4e-4)
        eps = np.random.default_rng(2).standard_normal((3, 200, 20))
        x = data.cells[:200]
        mask = data.mask[:200]
        assert model.elbo_rows_np(x, mask, eps).mean() > \
            fresh.elbo_rows_np(x, mask, eps).mean()

    def test_history_records_each_epoch(self, flat_pair):
        _, model = flat_pair
        assert len(model.history) == 150
        assert all(np.isfinite(v) for v in model.history)

    def test_samples_recover_column_correlation(self, flat_pair):
        _, model = flat_pair
        rows = model.sample(4000, np.random.default_rng(3))
        assert np.corrcoef(rows[:, 0], rows[:, 1])[0, 1] > 0.5

    def test_training_is_deterministic(self):
        data = make_correlated_pair(seed=30, n=120, noise=0.05)
        texts = []
        for _ in range(2):
            m = train_flat_vae(data, master_seed=9, epochs=15,
                               noise_variance=4e-4, k_prior=10)
            texts.append(canonical_json(m.checkpoint_payload()))
        assert texts[0] == texts[1]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_diagnostic(self):
        data = make_correlated_pair(seed=31, n=120, noise=0.05)
        # a step this large overflows the encoder on the next minibatch
        with pytest.raises(NumericsError, match="flat model.*epoch 0"):
            train_flat_vae(data, epochs=2, batch_size=50, lr=1e12)

    def test_extended_variant_trains(self):
        data = make_correlated_pair(seed=32, n=120, noise=0.05)
        model = train_flat_vae(data, variant="extended", master_seed=2,
                               epochs=10, noise_variance=4e-4, k_prior=10)
        assert model.latent_dim == 22
        assert np.isfinite(model.history[-1])

    def test_balanced_variant_solves_equalizing_weights(self, balanced_mixed):
        _, model = balanced_mixed
        assert set(model.balance.betas) == \
            {c.kind for c in model.schema}
        np.testing.assert_allclose(sum(model.balance.betas.values()), 1.0,
                                   atol=1e-12)
        lls = model.balance.solved_from
        prods = [model.balance.betas[k] * lls[k] for k in lls]
        np.testing.assert_allclose(prods, prods[0])

    def test_plain_variant_keeps_no_balance(self, flat_pair):
        _, model = flat_pair
        assert model.balance is None


class TestSurface:
    def test_conditional_sampling_respects_observed(self, flat_pair):
        data, model = flat_pair
        x = data.cells[:40]
        mask = np.zeros_like(x, dtype=bool)
        mask[:, 0] = True
        draws = model.conditional_sample(x, mask, 8, np.random.default_rng(4))
        assert draws.shape == (40, 8, 2)
        np.testing.assert_array_equal(draws[:, :, 0],
                                      np.broadcast_to(x[:, :1], (40, 8)))

    def test_imputation_fills_only_missing_and_is_deterministic(self, flat_pair):
        data, model = flat_pair
        x = data.cells[:60]
        mask = np.zeros_like(x, dtype=bool)
        mask[:, 0] = True
        filled = model.impute(x, mask)
        np.testing.assert_array_equal(filled[:, 0], x[:, 0])
        np.testing.assert_array_equal(filled, model.impute(x, mask))

    def test_imputation_tracks_correlated_column(self, flat_pair):
        data, model = flat_pair
        x = data.cells[:200]
        mask = np.zeros_like(x, dtype=bool)
        mask[:, 0] = True
        filled = model.impute(x, mask)
        rmse = np.sqrt(np.mean((filled[:, 1] - x[:, 1]) ** 2))
        assert rmse < 0.1

    def test_unknown_nll_mode_rejected(self, flat_pair):
        data, model = flat_pair
        with pytest.raises(ValueError, match="unknown nll mode"):
            model.is_nll(data.cells[:5], data.mask[:5], mode="joint")

    def test_nll_with_nothing_to_score_rejected(self, flat_pair):
        data, model = flat_pair
        empty = np.zeros((5, 2), dtype=bool)
        with pytest.raises(ValueError, match="no cells to score"):
            model.is_nll(data.cells[:5], empty, mode="generation")

    def test_generation_nll_is_finite(self, flat_pair):
        data, model = flat_pair
        val = model.is_nll(data.cells[:50], data.mask[:50],
                           importance_samples=300,
                           rng=np.random.default_rng(5))
        assert np.isfinite(val)

    def test_predict_target_never_reads_the_target(self, flat_pair):
        data, model = flat_pair
        x = data.cells[:30]
        leak = np.ones_like(x, dtype=bool)
        honest = leak.copy()
        honest[:, 1] = False
        p1, d1 = model.predict_target(x, leak, mc_samples=5, master_seed=6)
        p2, d2 = model.predict_target(x, honest, mc_samples=5, master_seed=6)
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_array_equal(d1, d2)

    def test_predict_target_is_reproducible(self, flat_pair):
        data, model = flat_pair
        x = data.cells[:30]
        mask = np.zeros_like(x, dtype=bool)
        mask[:, 0] = True
        p1, d1 = model.predict_target(x, mask, mc_samples=5, master_seed=7)
        p2, d2 = model.predict_target(x, mask, mc_samples=5, master_seed=7)
        assert d1.shape == (30, 5)
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_array_equal(d1, d2)


class TestDiscriminator:
    def test_attachment_preserves_generative_model(self, disc_pair):
        data, model, before = disc_pair
        for name, tensor in model.params.items():
            np.testing.assert_array_equal(tensor.data, before["params"][name])
        miss = np.column_stack([np.ones(100, bool), np.zeros(100, bool)])
        np.testing.assert_array_equal(model.impute(data.cells[:100], miss),
                                      before["impute"])

    def test_prediction_tracks_target(self, disc_pair):
        # measured 0.09 against a 0.17 predict-the-mean floor
        data, model, _ = disc_pair
        x = data.cells[:150]
        mask = np.zeros_like(x, dtype=bool)
        mask[:, 0] = True
        points, _ = model.predict_target(x, mask, mc_samples=10, master_seed=2)
        rmse = np.sqrt(np.mean((points - x[:, 1]) ** 2))
        assert rmse < 0.12

    def test_prediction_is_reproducible(self, disc_pair):
        data, model, _ = disc_pair
        x = data.cells[:50]
        mask = np.zeros_like(x, dtype=bool)
        mask[:, 0] = True
        p1, d1 = model.predict_target(x, mask, mc_samples=10, master_seed=2)
        p2, d2 = model.predict_target(x, mask, mc_samples=10, master_seed=2)
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_array_equal(d1, d2)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_diagnostic(self):
        data = shifted_pair(seed=12, n=120)
        model = train_flat_vae(data, epochs=2, noise_variance=4e-4, k_prior=10)
        model.params["pin.head.W2"].data[:] = 1e300
        with pytest.raises(NumericsError, match="flat discriminator.*epoch 0"):
            train_flat_discriminator(model, data, epochs=1)


class TestCheckpoint:
    def test_round_trip_is_byte_identical(self, disc_pair, tmp_path):
        _, model, _ = disc_pair
        path = tmp_path / "flat.npz"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert isinstance(loaded, FlatVAE)
        assert canonical_json(loaded.checkpoint_payload()) == \
            canonical_json(model.checkpoint_payload())

    def test_loaded_model_behaves_identically(self, disc_pair, tmp_path):
        data, model, _ = disc_pair
        path = tmp_path / "flat.npz"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(loaded.sample(60, np.random.default_rng(9)),
                                      model.sample(60, np.random.default_rng(9)))
        x = data.cells[:40]
        mask = np.zeros_like(x, dtype=bool)
        mask[:, 0] = True
        np.testing.assert_array_equal(
            loaded.predict_target(x, mask, master_seed=3)[0],
            model.predict_target(x, mask, master_seed=3)[0])

    def test_balance_block_round_trips(self, balanced_mixed, tmp_path):
        _, model = balanced_mixed
        path = tmp_path / "balanced.npz"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.variant == "balanced"
        assert loaded.balance.betas == model.balance.betas
        assert loaded.balance.solved_from == model.balance.solved_from

    def test_payload_from_dict_round_trip(self, flat_pair):
        _, model = flat_pair
        clone = flat_from_payload(model.checkpoint_payload())
        assert canonical_json(clone.checkpoint_payload()) == \
            canonical_json(model.checkpoint_payload())
