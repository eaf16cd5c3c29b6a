"""Full generative model: per-column marginals composed with the dependency
stage, plus conditional generation, importance-sampled likelihoods, an
optional target discriminator, and a canonical checkpoint format.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamSet, Tape, Tensor, adam_step
from .data import (Dataset, MissingnessSampler, schema_from_json, schema_to_json,
                   target_index, unit_scale)
from .dependency import (DependencyVAE, LATENT_DIM, encode_dataset_latents,
                         train_stage_two)
from .likelihoods import DEFAULT_NOISE_VARIANCE, LikelihoodHead
from .marginal import MarginalVAE, train_marginal

log = logging.getLogger("vaem.model")

CHECKPOINT_VERSION = 1
LOG_2PI = float(np.log(2.0 * np.pi))
_SCALAR_KINDS = ("continuous", "discrete_continuous")


@dataclass
class VAEMModel:
    """Trained two-stage model over one schema.

    ``discriminator`` is absent until :func:`train_discriminator` runs; the
    target-prediction path falls back to conditional generation without it.
    """

    schema: tuple
    marginals: list
    dependency: DependencyVAE
    config: dict = field(default_factory=dict)
    discriminator: ParamSet = None
    disc_head: LikelihoodHead = None
    elbo_before: float = None
    elbo_after: float = None

    # ------------------------------------------------------------- basics

    @property
    def n_features(self) -> int:
        return len(self.schema)

    @property
    def target(self) -> int:
        return target_index(self.schema)

    def encode_latents(self, x: np.ndarray) -> tuple:
        """Marginal posterior (means, standard deviations), each (B, D)."""
        x = np.asarray(x, dtype=np.float64)
        mu = np.empty_like(x)
        sd = np.empty_like(x)
        for d, m in enumerate(self.marginals):
            mean, var = m.encode(x[:, d])
            mu[:, d] = mean
            sd[:, d] = np.sqrt(var)
        return mu, sd

    # ----------------------------------------------------------- sampling

    def _latents_to_rows(self, h: np.ndarray, rng: np.random.Generator) -> tuple:
        """Shared h -> z -> x stage of every generation path."""
        dec_mean, dec_lv = self.dependency.decode_z(h)
        z = dec_mean + np.exp(0.5 * dec_lv) * rng.standard_normal(dec_mean.shape)
        x = np.empty_like(z)
        for d, m in enumerate(self.marginals):
            x[:, d] = m.head.sample(m.decode(z[:, d]), rng)
        return z, x

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n unconditional rows (normalized cells, (n, D))."""
        comp_mu, comp_lv = self.dependency.prior_components()
        pick = rng.integers(comp_mu.shape[0], size=n)
        h = comp_mu[pick] + np.exp(0.5 * comp_lv[pick]) \
            * rng.standard_normal((n, LATENT_DIM))
        return self._latents_to_rows(h, rng)[1]

    def conditional_sample(self, x: np.ndarray, mask: np.ndarray, n_samples: int,
                           rng: np.random.Generator) -> np.ndarray:
        """(B, n_samples, D) rows with unobserved cells drawn given observed.

        Fully observed rows come back unchanged.  Rows with an empty
        observed set draw their latent from the prior mixture: conditioning
        on nothing is the unconditional distribution, and the amortized
        empty-set posterior is badly overconfident.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        b, d_all = x.shape
        mu, sd = self.encode_latents(x)
        shape = (n_samples, b, d_all)
        xr = np.broadcast_to(x, shape).reshape(-1, d_all)
        mr = np.broadcast_to(mask, shape).reshape(-1, d_all)
        z_obs = (mu + sd * rng.standard_normal(shape)).reshape(-1, d_all)
        h_mu, h_lv = self.dependency.partial_encode(xr, z_obs, mr)
        h = h_mu + np.exp(0.5 * h_lv) * rng.standard_normal(h_mu.shape)
        blank = ~mr.any(axis=1)
        if blank.any():
            comp_mu, comp_lv = self.dependency.prior_components()
            k = int(blank.sum())
            pick = rng.integers(comp_mu.shape[0], size=k)
            h[blank] = comp_mu[pick] + np.exp(0.5 * comp_lv[pick]) \
                * rng.standard_normal((k, LATENT_DIM))
        filled = self._latents_to_rows(h, rng)[1]
        out = np.where(mr, xr, filled).reshape(shape)
        return out.transpose(1, 0, 2)

    def impute(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Deterministic cell fill: likelihood modes at posterior-mean latents."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        mu, _ = self.encode_latents(x)
        h_mu, _ = self.dependency.partial_encode(x, mu, mask)
        dec_mean, _ = self.dependency.decode_z(h_mu)
        filled = np.empty_like(x)
        for d, m in enumerate(self.marginals):
            filled[:, d] = m.head.mode(m.decode(dec_mean[:, d]))
        return np.where(mask, x, filled)

    # ------------------------------------------------------ evidence bound

    def combined_elbo_rows(self, x: np.ndarray, mask: np.ndarray,
                           eps_z: np.ndarray, eps_h: np.ndarray) -> np.ndarray:
        """Single-draw bound on log p(x_O) per row, both stages included."""
        x = np.asarray(x, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        mu, sd = self.encode_latents(x)
        z = mu + sd * eps_z
        marg = np.zeros(x.shape[0])
        for d, m in enumerate(self.marginals):
            lp = m.head.log_prob_np(m.decode(z[:, d]), x[:, d])
            lq = -0.5 * (LOG_2PI + 2.0 * np.log(sd[:, d])
                         + (z[:, d] - mu[:, d]) ** 2 / sd[:, d] ** 2)
            marg += mask[:, d] * (lp - lq)
        dep = self.dependency.partial_elbo_rows_np(z, x, mask, eps_h)
        return marg + dep

    def combined_elbo(self, dataset: Dataset, eval_seed: int = 0) -> float:
        ss = np.random.SeedSequence([eval_seed, 17])
        rng = np.random.default_rng(ss)
        eps_z = rng.standard_normal(dataset.cells.shape)
        eps_h = rng.standard_normal((1, dataset.n_rows, LATENT_DIM))
        return float(np.mean(self.combined_elbo_rows(
            dataset.cells, dataset.mask, eps_z, eps_h)))

    # ------------------------------------------------- importance sampling

    def is_nll(self, x: np.ndarray, mask: np.ndarray, *,
               importance_samples: int = 10000, mode: str = "generation",
               rng: np.random.Generator = None) -> float:
        """Per-variable negative log-likelihood in nats.

        generation: mask flags the cells that exist; all of them are scored
        jointly.  conditional: mask flags the conditioning cells; every
        remaining cell is scored given them.
        """
        if mode not in ("generation", "conditional"):
            raise ValueError(f"unknown nll mode {mode!r}")
        rng = rng or np.random.default_rng(0)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        scored = mask if mode == "generation" else ~mask
        if scored.sum() == 0:
            raise ValueError("no cells to score")
        s = importance_samples
        rows_per_chunk = max(1, 200_000 // max(s, 1))
        total_logp = 0.0
        for at in range(0, x.shape[0], rows_per_chunk):
            sl = slice(at, at + rows_per_chunk)
            total_logp += self._is_chunk(x[sl], mask[sl], scored[sl], s, mode, rng)
        return -total_logp / scored.sum()

    def _is_chunk(self, x, mask, scored, s, mode, rng) -> float:
        b, d_all = x.shape
        mu, sd = self.encode_latents(x)
        shape = (s, b, d_all)
        xb = np.broadcast_to(x, shape)
        if mode == "generation":
            z = mu + sd * rng.standard_normal(shape)
            h_mu, h_lv = self.dependency.partial_encode(
                xb, z, np.broadcast_to(mask, shape))
            h = h_mu + np.exp(0.5 * h_lv) * rng.standard_normal(h_mu.shape)
            z_scored = z
        else:
            z_obs = mu + sd * rng.standard_normal(shape)
            h_mu, h_lv = self.dependency.partial_encode(
                xb, z_obs, np.broadcast_to(mask, shape))
            h = h_mu + np.exp(0.5 * h_lv) * rng.standard_normal(h_mu.shape)
            z_scored = mu + sd * rng.standard_normal(shape)
        dec_mean, dec_lv = self.dependency.decode_z(h)
        logw = np.zeros((s, b))
        for d in np.flatnonzero(scored.any(axis=0)):
            zd = z_scored[..., d]
            m = self.marginals[d]
            lp_x = m.head.log_prob_np(m.decode(zd.ravel()).reshape(s, b, -1),
                                      xb[..., d])
            lp_z = -0.5 * (LOG_2PI + dec_lv[..., d]
                           + (zd - dec_mean[..., d]) ** 2 * np.exp(-dec_lv[..., d]))
            lq_z = -0.5 * (LOG_2PI + 2.0 * np.log(sd[:, d])
                           + (zd - mu[:, d]) ** 2 / sd[:, d] ** 2)
            logw += scored[:, d] * (lp_x + lp_z - lq_z)
        if mode == "generation":
            log_q_h = (-0.5 * (LOG_2PI + h_lv + (h - h_mu) ** 2
                               * np.exp(-h_lv))).sum(axis=-1)
            logw += self.dependency.prior_log_prob(h) - log_q_h
        peak = logw.max(axis=0)
        logp_rows = peak + np.log(np.exp(logw - peak).sum(axis=0)) - np.log(s)
        return float(logp_rows.sum())

    # -------------------------------------------------- target prediction

    def predict_target(self, x: np.ndarray, mask: np.ndarray, *,
                       mc_samples: int = 10, rng: np.random.Generator = None,
                       master_seed: int = 0) -> tuple:
        """(point estimates (B,), predictive draws (B, mc_samples)).

        Without an rng, each row gets its own stream derived from
        ``master_seed`` and the row's observed feature set, so re-running
        with an unchanged observed set reproduces the prediction bit for
        bit.  The target column is always treated as unobserved.
        """
        return predict_target_rows(self, x, mask, mc_samples=mc_samples,
                                   rng=rng, master_seed=master_seed)

    def _discriminate_row(self, x_row, mask_row, mc_samples, rng) -> tuple:
        x = np.broadcast_to(x_row, (mc_samples, x_row.size)).copy()
        mask = np.broadcast_to(mask_row, x.shape)
        mu, sd = self.encode_latents(x)
        z_obs = mu + sd * rng.standard_normal(x.shape)
        h_mu, h_lv = self.dependency.partial_encode(x, z_obs, mask)
        h = h_mu + np.exp(0.5 * h_lv) * rng.standard_normal(h_mu.shape)
        _, imputed = self._latents_to_rows(h, rng)
        out = disc_forward_np(self, disc_slots(self, x, mask, imputed), h)
        return disc_point_and_draws(self, out, rng)


# ------------------------------------------- shared target-prediction path

def predict_target_rows(model, x, mask, *, mc_samples, rng, master_seed):
    """Row loop behind ``predict_target``; model-agnostic.

    The model supplies schema, target, conditional_sample, an optional
    discriminator, and a _discriminate_row hook for the predictor path.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool)).copy()
    t = model.target
    mask[:, t] = False
    col = model.schema[t]
    points = np.empty(x.shape[0])
    draws = np.empty((x.shape[0], mc_samples))
    for r in range(x.shape[0]):
        if rng is None:
            obs = [int(i) + 1 for i in np.flatnonzero(mask[r])]
            row_rng = np.random.default_rng(
                np.random.SeedSequence([master_seed] + obs))
        else:
            row_rng = rng
        if model.discriminator is None:
            cs = model.conditional_sample(x[r:r + 1], mask[r:r + 1],
                                          mc_samples, row_rng)
            draws[r] = cs[0, :, t]
            points[r] = pool_point(col, draws[r], None)
        else:
            points[r], draws[r] = model._discriminate_row(
                x[r], mask[r], mc_samples, row_rng)
    return points, draws


def pool_point(col, draws, probs) -> float:
    if col.kind in _SCALAR_KINDS:
        return float(np.mean(draws))
    if probs is not None:
        return float(np.argmax(probs))
    counts = np.bincount(np.rint(draws).astype(int),
                         minlength=col.class_count)
    return float(np.argmax(counts))


def disc_forward_np(model, slots: np.ndarray, h: np.ndarray) -> np.ndarray:
    p = model.discriminator
    inp = np.concatenate([slots, h], axis=-1)
    a = np.maximum(inp @ p["disc.W0"].data + p["disc.b0"].data, 0.0)
    a = np.maximum(a @ p["disc.W1"].data + p["disc.b1"].data, 0.0)
    out = a @ p["disc.W2"].data + p["disc.b2"].data
    if model.schema[model.target].kind in _SCALAR_KINDS:
        out = np.concatenate([1.0 / (1.0 + np.exp(-out[..., :1])),
                              out[..., 1:]], axis=-1)
    return out


def disc_slots(model, x: np.ndarray, mask: np.ndarray,
               imputed: np.ndarray) -> np.ndarray:
    """(…, D-1) unit-interval feature slots, observed cells kept."""
    t = model.target
    merged = np.where(mask, x, imputed)
    cols = [unit_scale(model.schema[d], merged[..., d])
            for d in range(model.n_features) if d != t]
    return np.stack(cols, axis=-1)


def disc_point_and_draws(model, out: np.ndarray,
                         rng: np.random.Generator) -> tuple:
    """Pool discriminator outputs over mc samples into (point, draws)."""
    col = model.schema[model.target]
    draws = model.disc_head.sample(out, rng)
    if col.kind in _SCALAR_KINDS:
        point = float(out[..., 0].mean())
    else:
        if col.kind == "categorical":
            e = out - out.max(axis=-1, keepdims=True)
            probs = np.exp(e) / np.exp(e).sum(axis=-1, keepdims=True)
        else:
            probs = model.disc_head.ordinal_masses_np(out)
        point = pool_point(col, None, probs.mean(axis=0))
    return point, draws


# --------------------------------------------------------------- training

def train_two_stage(dataset: Dataset, *, master_seed: int = 0,
                    epochs_stage1: int = 1000, epochs_stage2: int = 1000,
                    batch_size: int = 100, lr: float = 1e-3,
                    lr_stage2: float = None,
                    noise_variance: float = DEFAULT_NOISE_VARIANCE,
                    k_prior: int = 50, mc_samples: int = 1,
                    conv_window: int = 50, conv_tol: float = 1e-4) -> VAEMModel:
    """Fit marginals column by column, then the dependency stage on top.

    Column trainings draw from per-column seed streams, so column order
    cannot leak randomness between marginals.  Early stopping applies to
    the marginals only; the dependency stage always runs its full epoch
    budget.  The combined bound is evaluated on shared noise draws at the
    zero-init stage-two state and again after training and stored on the
    model.
    """
    if lr_stage2 is None:
        lr_stage2 = lr
    config = dict(master_seed=master_seed, epochs_stage1=epochs_stage1,
                  epochs_stage2=epochs_stage2, batch_size=batch_size, lr=lr,
                  lr_stage2=lr_stage2,
                  noise_variance=noise_variance, k_prior=k_prior,
                  mc_samples=mc_samples, conv_window=conv_window,
                  conv_tol=conv_tol)
    marginals = []
    for d, col in enumerate(dataset.schema):
        rng_d = np.random.default_rng(np.random.SeedSequence([master_seed, 1000 + d]))
        values = dataset.cells[dataset.mask[:, d], d]
        marginals.append(train_marginal(
            col, values, rng_d, epochs=epochs_stage1, batch_size=batch_size,
            lr=lr, noise_variance=noise_variance, conv_window=conv_window,
            conv_tol=conv_tol))
    rng2 = np.random.default_rng(np.random.SeedSequence([master_seed, 2]))
    dependency = train_stage_two(
        marginals, dataset, rng2, epochs=epochs_stage2, batch_size=batch_size,
        lr=lr_stage2, k_prior=k_prior, mc_samples=mc_samples)
    model = VAEMModel(dataset.schema, marginals, dependency, config)
    frozen = DependencyVAE.from_state_dict(dependency.state_dict()).zero_init()
    baseline = VAEMModel(dataset.schema, marginals, frozen, config)
    model.elbo_before = baseline.combined_elbo(dataset, master_seed)
    model.elbo_after = model.combined_elbo(dataset, master_seed)
    log.info("combined bound %.4f -> %.4f", model.elbo_before, model.elbo_after)
    return model


def train_discriminator(model: VAEMModel, dataset: Dataset, *,
                        epochs: int = 200, batch_size: int = 100,
                        lr: float = 1e-3, rng: np.random.Generator = None,
                        missingness: MissingnessSampler = None) -> VAEMModel:
    """Attach and fit a target predictor; refines the set encoder with it.

    Alternates, per minibatch: (a) a set-encoder update on the bound with
    the target adjoined through an identity code plus the expected target
    log-likelihood, imputations treated as constants; (b) a predictor
    update maximizing target log-likelihood on freshly imputed inputs.
    The target column never appears in the conditioning set.
    """
    rng = rng or np.random.default_rng(0)
    t = model.target
    d_all = model.n_features
    col = model.schema[t]
    head = LikelihoodHead(col, noise_variance=model.config.get(
        "noise_variance", DEFAULT_NOISE_VARIANCE))
    disc = ParamSet()
    sizes = (d_all - 1 + LATENT_DIM, 100, 100, head.output_dim)
    ad.init_mlp(disc, "disc", sizes, rng)
    model.discriminator = disc
    model.disc_head = head

    dep = model.dependency
    mu, sd = encode_dataset_latents(model.marginals, dataset)
    base = dataset.mask.copy()
    base[:, t] = False
    sampler = missingness or MissingnessSampler(int(rng.integers(2 ** 31)))
    opt_lambda = AdamState(dep.params, lr=lr)
    opt_gamma = AdamState(disc, lr=lr)
    n = dataset.n_rows
    for epoch in range(epochs):
        epoch_mask = sampler.sample_epoch_mask(base, epoch) & base
        order = rng.permutation(n)
        for at in range(0, n, batch_size):
            idx = order[at:at + batch_size]
            x = dataset.cells[idx]
            obs = epoch_mask[idx]
            _lambda_step(model, dep, head, x, obs, mu[idx], sd[idx], rng,
                         opt_lambda)
            _gamma_step(model, dep, head, x, obs, mu[idx], sd[idx], rng,
                        opt_gamma)
    dep.params.check_finite("discriminator refinement")
    disc.check_finite("discriminator")
    return model


def disc_forward_t(model, slots: np.ndarray, h: Tensor) -> Tensor:
    p = model.discriminator
    inp = ad.concat_cols([Tensor(slots), h])
    out = ad.mlp_forward(p, "disc", inp, 3)
    if model.schema[model.target].kind in _SCALAR_KINDS:
        mean = ad.sigmoid(ad.slice_cols(out, 0, 1))
        rest = out.data.shape[1] - 1
        if rest:
            out = ad.concat_cols([mean, ad.slice_cols(out, 1, 1 + rest)])
        else:
            out = mean
    return out


def _lambda_step(model, dep, head, x, obs, mu, sd, rng, opt):
    t = model.target
    b = x.shape[0]
    z = mu + sd * rng.standard_normal(mu.shape)
    z[:, t] = x[:, t]                       # identity code for the target
    enc_mask = obs.copy()
    enc_mask[:, t] = True
    eps_h = rng.standard_normal((b, LATENT_DIM))
    with Tape() as tape:
        h_mu, h_lv = dep.partial_encode_t(x, z, enc_mask)
        h = ad.add(h_mu, ad.mul(ad.exp(ad.scale(h_lv, 0.5)), Tensor(eps_h)))
        comp_mu, comp_lv = dep.partial_encode_t(dep.pseudo_x, dep.pseudo_z,
                                                dep.pseudo_mask)
        dec_mean, dec_lv = dep.decode_z_t(h)
        rec = ad.tsum(ad.mul(ad.gaussian_log_density(Tensor(z), dec_mean, dec_lv),
                             Tensor(obs.astype(np.float64))),
                      axis=1, keepdims=True)
        log_p = dep._prior_log_prob_t(h, comp_mu, comp_lv)
        log_q = ad.tsum(ad.gaussian_log_density(h, h_mu, h_lv),
                        axis=1, keepdims=True)
        _, imputed = model._latents_to_rows(h.data, rng)   # constants for λ
        slots = disc_slots(model, x, obs, imputed)
        disc_out = disc_forward_t(model, slots, h)
        lp_target = head.log_prob(disc_out, x[:, t])
        bound = ad.add(ad.add(rec, ad.sub(log_p, log_q)), lp_target)
        loss = ad.neg(ad.tmean(bound))
    ad.backward(tape, loss)
    for name, tensor in dep.params.items():
        if name.startswith("dec."):
            tensor.grad[...] = 0.0          # only the set encoder moves here
    model.discriminator.zero_grads()
    adam_step(dep.params, opt)


def _gamma_step(model, dep, head, x, obs, mu, sd, rng, opt):
    t = model.target
    z_obs = mu + sd * rng.standard_normal(mu.shape)
    h_mu, h_lv = dep.partial_encode(x, z_obs, obs)
    h = h_mu + np.exp(0.5 * h_lv) * rng.standard_normal(h_mu.shape)
    _, imputed = model._latents_to_rows(h, rng)
    slots = disc_slots(model, x, obs, imputed)
    with Tape() as tape:
        out = disc_forward_t(model, slots, Tensor(h))
        loss = ad.neg(ad.tmean(head.log_prob(out, x[:, t])))
    ad.backward(tape, loss)
    adam_step(model.discriminator, opt)


# ------------------------------------------------------------- checkpoint

def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, %.17g floats, no whitespace drift."""
    parts = []
    _write_json(obj, parts)
    return "".join(parts)


def _write_json(obj, parts):
    if obj is None:
        parts.append("null")
    elif obj is True:
        parts.append("true")
    elif obj is False:
        parts.append("false")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        if not np.isfinite(obj):
            raise ValueError("non-finite float in checkpoint payload")
        parts.append(f"{float(obj):.17g}")
    elif isinstance(obj, str):
        import json
        parts.append(json.dumps(obj))
    elif isinstance(obj, dict):
        parts.append("{")
        for i, key in enumerate(sorted(obj)):
            if i:
                parts.append(",")
            _write_json(str(key), parts)
            parts.append(":")
            _write_json(obj[key], parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, item in enumerate(obj):
            if i:
                parts.append(",")
            _write_json(item, parts)
        parts.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def checkpoint_payload(model: VAEMModel) -> dict:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_kind": "two_stage",
        "schema": schema_to_json(model.schema),
        "stage1": [{"noise_variance": m.head.noise_variance,
                    "params": m.params.state_dict()} for m in model.marginals],
        "stage2": model.dependency.state_dict(),
        "config": model.config,
        "seeds": {"master": model.config.get("master_seed", 0)},
        "elbo_before": model.elbo_before,
        "elbo_after": model.elbo_after,
    }
    if model.discriminator is not None:
        payload["discriminator"] = {
            "noise_variance": model.disc_head.noise_variance,
            "params": model.discriminator.state_dict(),
        }
    return payload


def save_checkpoint(model, path) -> None:
    payload = checkpoint_payload(model) if isinstance(model, VAEMModel) \
        else model.checkpoint_payload()
    with open(path, "w") as fh:
        fh.write(canonical_json(payload))


def model_from_payload(payload: dict) -> VAEMModel:
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('format_version')!r}")
    schema = schema_from_json(payload["schema"])
    marginals = []
    for col, entry in zip(schema, payload["stage1"]):
        m = MarginalVAE.initialized(col, np.random.default_rng(0),
                                    noise_variance=entry["noise_variance"])
        m.params.load_state_dict(entry["params"])
        marginals.append(m)
    dependency = DependencyVAE.from_state_dict(payload["stage2"])
    model = VAEMModel(schema, marginals, dependency,
                      config=dict(payload.get("config", {})),
                      elbo_before=payload.get("elbo_before"),
                      elbo_after=payload.get("elbo_after"))
    disc = payload.get("discriminator")
    if disc is not None:
        t = target_index(schema)
        head = LikelihoodHead(schema[t], noise_variance=disc["noise_variance"])
        params = ParamSet()
        params.load_state_dict(disc["params"])
        model.discriminator = params
        model.disc_head = head
    return model


def load_checkpoint(path):
    import json
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("model_kind", "two_stage") == "flat":
        from .baselines import flat_from_payload
        return flat_from_payload(payload)
    return model_from_payload(payload)
