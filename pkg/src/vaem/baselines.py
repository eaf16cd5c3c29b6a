"""Single-stage comparison models over the normalized columns directly.

Three variants share one architecture: "plain" carries a 20-dimensional
latent, "extended" widens it by one dimension per column, and "balanced"
trains with per-type likelihood weights recomputed every minibatch so no
variable type dominates the bound.  All variants encode partial rows with
the same permutation-invariant element construction as the dependency
model, mix their prior from encoder posteriors anchored at training rows,
and expose the same generation / scoring / prediction surface as the
two-stage model, so downstream evaluation code treats both alike.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import (AdamState, NumericsError, ParamSet, Tape, Tensor,
                       adam_step, glorot)
from .data import (CONTINUOUS_KINDS, Dataset, MissingnessSampler,
                   schema_from_json, schema_to_json, target_index)
from .dependency import (DEC_HIDDEN, EMBED_DIM, HEAD_HIDDEN, LATENT_DIM,
                         LOG_2PI, SET_DIM, mixture_log_prob,
                         mixture_log_prob_t)
from .likelihoods import DEFAULT_NOISE_VARIANCE, LikelihoodHead
from .model import (CHECKPOINT_VERSION, disc_forward_np, disc_forward_t,
                    disc_point_and_draws, disc_slots, predict_target_rows)

log = logging.getLogger(__name__)

VARIANTS = ("plain", "extended", "balanced")


@dataclass
class BalanceWeights:
    """Per-type likelihood weights; non-negative, summing to one.

    ``solved_from`` keeps the per-type log-likelihood sums the weights
    were computed from, so the equalization identity stays checkable.
    """

    betas: dict
    solved_from: dict = None


def solve_balance_weights(lls: dict, previous: BalanceWeights = None) -> BalanceWeights:
    """Weights equalizing the magnitude of per-type likelihood sums.

    Solves beta_s * L_s constant across types with the betas summing to
    one: beta_s proportional to 1 / L_s.  Defined only when every sum
    shares one sign; a zero or mixed-sign input falls back to ``previous``
    (uniform weights if there is none) with a logged warning.
    """
    kinds = sorted(lls)
    vals = np.array([float(lls[k]) for k in kinds])
    if np.any(vals == 0.0) or (np.any(vals > 0.0) and np.any(vals < 0.0)):
        log.warning("balance weights undefined for sums %s; keeping previous",
                    lls)
        if previous is not None:
            return previous
        return BalanceWeights({k: 1.0 / len(kinds) for k in kinds}, None)
    inv = 1.0 / vals
    betas = inv / inv.sum()
    return BalanceWeights({k: float(b) for k, b in zip(kinds, betas)},
                          {k: float(lls[k]) for k in kinds})


@dataclass
class FlatVAE:
    """One-stage VAE over mixed-type rows with a set encoder.

    The encoder embeds each observed cell, maps the embeddings through a
    shared layer, and sums, so any conditioning subset is encodable.  The
    decoder is a shared trunk with one output layer per column feeding
    that column's likelihood head.
    """

    schema: tuple
    variant: str
    params: ParamSet
    pseudo_x: np.ndarray            # (K_prior, D) normalized cells
    pseudo_mask: np.ndarray         # (K_prior, D) observed flags
    pseudo_rows: np.ndarray         # source row indices in the training set
    latent_dim: int
    noise_variance: float = DEFAULT_NOISE_VARIANCE
    config: dict = field(default_factory=dict)
    discriminator: ParamSet = None
    disc_head: LikelihoodHead = None
    balance: BalanceWeights = None
    history: list = field(default_factory=list)
    heads: list = None

    def __post_init__(self):
        if self.heads is None:
            self.heads = [LikelihoodHead(c, noise_variance=self.noise_variance)
                          for c in self.schema]

    # ------------------------------------------------------------- basics

    @property
    def n_features(self) -> int:
        return len(self.schema)

    @property
    def target(self) -> int:
        return target_index(self.schema)

    def _scalar(self, d: int) -> bool:
        return self.schema[d].kind in CONTINUOUS_KINDS

    @classmethod
    def initialized(cls, schema, pseudo_x, pseudo_mask, pseudo_rows,
                    rng: np.random.Generator, *, variant: str = "plain",
                    noise_variance: float = DEFAULT_NOISE_VARIANCE,
                    latent_dim: int = None) -> "FlatVAE":
        """Fresh parameters; the encoder head's output layer starts at zero
        so the initial posterior is N(0, I) everywhere and matches the
        fresh mixture prior pointwise."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        d_all = len(schema)
        if latent_dim is None:
            latent_dim = LATENT_DIM + (d_all if variant == "extended" else 0)
        p = ParamSet()
        m = EMBED_DIM
        heads = [LikelihoodHead(c, noise_variance=noise_variance) for c in schema]
        for d, col in enumerate(schema):
            if col.kind in CONTINUOUS_KINDS:
                p.add(f"pin.x{d}", rng.normal(scale=m ** -0.5, size=(m,)))
            else:
                p.add(f"pin.x{d}",
                      rng.normal(scale=m ** -0.5, size=(col.class_count, m)))
        p.add("pin.l.W", glorot(rng, m, SET_DIM))
        p.add("pin.l.b", np.zeros(SET_DIM))
        head_sizes = (SET_DIM,) + HEAD_HIDDEN + (2 * latent_dim,)
        for i in range(3):
            w = np.zeros((head_sizes[i], head_sizes[i + 1])) if i == 2 \
                else glorot(rng, head_sizes[i], head_sizes[i + 1])
            p.add(f"pin.head.W{i}", w)
            p.add(f"pin.head.b{i}", np.zeros(head_sizes[i + 1]))
        dec_sizes = (latent_dim,) + DEC_HIDDEN
        for i in range(2):
            p.add(f"dec.W{i}", glorot(rng, dec_sizes[i], dec_sizes[i + 1]))
            p.add(f"dec.b{i}", np.zeros(dec_sizes[i + 1]))
        for d, head in enumerate(heads):
            # scaled down but live: a zero output layer would feed no
            # reconstruction gradient back through the trunk
            p.add(f"out{d}.W", glorot(rng, DEC_HIDDEN[-1], head.output_dim) * 0.1)
            p.add(f"out{d}.b", np.zeros(head.output_dim))
        return cls(tuple(schema), variant, p,
                   np.asarray(pseudo_x, dtype=np.float64),
                   np.asarray(pseudo_mask, dtype=bool),
                   np.asarray(pseudo_rows, dtype=np.int64),
                   int(latent_dim), noise_variance=float(noise_variance),
                   heads=heads)

    # ----------------------------------------------------- set encoder

    def _class_index(self, d: int, values: np.ndarray) -> np.ndarray:
        count = self.schema[d].class_count
        return np.clip(np.rint(values).astype(np.int64), 0, count - 1)

    def encode_x_t(self, x: np.ndarray, mask: np.ndarray) -> tuple:
        """Posterior (mean, log-variance) tensors for a (B, D) batch."""
        p = self.params
        b, d_all = x.shape
        elems = []
        for d in range(d_all):
            if self._scalar(d):
                elems.append(ad.mul(Tensor(x[:, d:d + 1]), p[f"pin.x{d}"]))
            else:
                elems.append(ad.take_rows(p[f"pin.x{d}"],
                                          self._class_index(d, x[:, d])))
        stack = ad.concat_rows(elems)                       # (D*B, M)
        h = ad.relu(ad.add(ad.matmul(stack, p["pin.l.W"]), p["pin.l.b"]))
        m = mask.astype(np.float64)
        h = ad.mul(h, Tensor(m.T.reshape(-1, 1)))
        agg = ad.sum_segments(h, d_all)                     # (B, K)
        out = ad.mlp_forward(p, "pin.head", agg, 3)
        return (ad.slice_cols(out, 0, self.latent_dim),
                ad.slice_cols(out, self.latent_dim, 2 * self.latent_dim))

    def encode_x(self, x: np.ndarray, mask: np.ndarray) -> tuple:
        """Numpy twin of :meth:`encode_x_t` for any leading shape."""
        x = np.asarray(x, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        lead = x.shape[:-1]
        d_all = x.shape[-1]
        xf = x.reshape(-1, d_all)
        mf = mask.reshape(-1, d_all)
        out = np.empty((xf.shape[0], 2 * self.latent_dim))
        for at in range(0, xf.shape[0], 8192):
            sl = slice(at, at + 8192)
            out[sl] = self._encode_block(xf[sl], mf[sl])
        return (out[..., :self.latent_dim].reshape(lead + (self.latent_dim,)),
                out[..., self.latent_dim:].reshape(lead + (self.latent_dim,)))

    def _encode_block(self, x, mask) -> np.ndarray:
        p = self.params
        b, d_all = x.shape
        elems = np.empty((b, d_all, EMBED_DIM))
        for d in range(d_all):
            xe = p[f"pin.x{d}"].data
            if self._scalar(d):
                elems[:, d] = x[:, d, None] * xe
            else:
                elems[:, d] = xe[self._class_index(d, x[:, d])]
        h = np.maximum(elems.reshape(-1, EMBED_DIM) @ p["pin.l.W"].data
                       + p["pin.l.b"].data, 0.0)
        h = h.reshape(b, d_all, SET_DIM)
        agg = (h * mask[:, :, None]).sum(axis=1)
        h0 = np.maximum(agg @ p["pin.head.W0"].data + p["pin.head.b0"].data, 0.0)
        h1 = np.maximum(h0 @ p["pin.head.W1"].data + p["pin.head.b1"].data, 0.0)
        return h1 @ p["pin.head.W2"].data + p["pin.head.b2"].data

    # --------------------------------------------------------- decoder

    def _trunk_t(self, h: Tensor) -> Tensor:
        p = self.params
        a = ad.relu(ad.add(ad.matmul(h, p["dec.W0"]), p["dec.b0"]))
        return ad.relu(ad.add(ad.matmul(a, p["dec.W1"]), p["dec.b1"]))

    def _column_out_t(self, trunk: Tensor, d: int) -> Tensor:
        p = self.params
        out = ad.add(ad.matmul(trunk, p[f"out{d}.W"]), p[f"out{d}.b"])
        if self._scalar(d):
            out = ad.sigmoid(out)  # normalized means live in [0,1]
        return out

    def column_outputs(self, h: np.ndarray) -> list:
        """Per-column head inputs for latents of any leading shape."""
        h = np.asarray(h, dtype=np.float64)
        lead = h.shape[:-1]
        flat = h.reshape(-1, self.latent_dim)
        p = self.params
        a = np.maximum(flat @ p["dec.W0"].data + p["dec.b0"].data, 0.0)
        a = np.maximum(a @ p["dec.W1"].data + p["dec.b1"].data, 0.0)
        outs = []
        for d, head in enumerate(self.heads):
            out = a @ p[f"out{d}.W"].data + p[f"out{d}.b"].data
            if self._scalar(d):
                out = 1.0 / (1.0 + np.exp(-np.clip(out, -500, 500)))
            outs.append(out.reshape(lead + (head.output_dim,)))
        return outs

    # ----------------------------------------------------------- prior

    def prior_components(self) -> tuple:
        """Mixture component (means, log-variances), each (K_prior, latent)."""
        return self.encode_x(self.pseudo_x, self.pseudo_mask)

    def prior_log_prob(self, h: np.ndarray) -> np.ndarray:
        mu, lv = self.prior_components()
        return mixture_log_prob(h, mu, lv)

    # ------------------------------------------------------- objective

    def elbo_rows_t(self, x: np.ndarray, mask: np.ndarray, eps: np.ndarray,
                    mc_samples: int = 1,
                    previous_balance: BalanceWeights = None) -> tuple:
        """Per-row bound tensor (B, 1) plus the balance weights applied.

        The weights are None except for the balanced variant, where they
        are re-solved from this batch's per-type likelihood sums.
        """
        mu_t, lv_t = self.encode_x_t(x, mask)
        comp_mu, comp_lv = self.encode_x_t(self.pseudo_x, self.pseudo_mask)
        m = mask.astype(np.float64)
        rec_by_kind = {}
        kl = None
        for s in range(mc_samples):
            h = ad.add(mu_t, ad.mul(ad.exp(ad.scale(lv_t, 0.5)), Tensor(eps[s])))
            trunk = self._trunk_t(h)
            for d, col in enumerate(self.schema):
                lp = ad.mul(self.heads[d].log_prob(self._column_out_t(trunk, d),
                                                   x[:, d]),
                            Tensor(m[:, d:d + 1]))
                prev = rec_by_kind.get(col.kind)
                rec_by_kind[col.kind] = lp if prev is None else ad.add(prev, lp)
            log_p = mixture_log_prob_t(h, comp_mu, comp_lv)
            log_q = ad.tsum(ad.gaussian_log_density(h, mu_t, lv_t),
                            axis=1, keepdims=True)
            term = ad.sub(log_p, log_q)
            kl = term if kl is None else ad.add(kl, term)
        inv_s = 1.0 / mc_samples
        rec_by_kind = {k: ad.scale(t, inv_s) for k, t in rec_by_kind.items()}
        kl = ad.scale(kl, inv_s)
        if self.variant == "balanced":
            lls = {k: float(np.sum(t.data)) for k, t in rec_by_kind.items()}
            balance = solve_balance_weights(lls, previous_balance)
            rec = None
            for k, t in rec_by_kind.items():
                piece = ad.scale(t, float(balance.betas[k]))
                rec = piece if rec is None else ad.add(rec, piece)
        else:
            balance = None
            rec = None
            for t in rec_by_kind.values():
                rec = t if rec is None else ad.add(rec, t)
        return ad.add(rec, kl), balance

    def elbo_rows_np(self, x: np.ndarray, mask: np.ndarray,
                     eps: np.ndarray) -> np.ndarray:
        """Tape-free unweighted bound per row; eps is (S, B, latent)."""
        x = np.asarray(x, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        mu, lv = self.encode_x(x, mask)
        total = np.zeros(x.shape[0])
        for s in range(eps.shape[0]):
            h = mu + np.exp(0.5 * lv) * eps[s]
            outs = self.column_outputs(h)
            rec = np.zeros(x.shape[0])
            for d, head in enumerate(self.heads):
                rec += mask[:, d] * head.log_prob_np(outs[d], x[:, d])
            log_q = (-0.5 * (LOG_2PI + lv + (h - mu) ** 2
                             * np.exp(-lv))).sum(axis=1)
            total += rec + self.prior_log_prob(h) - log_q
        return total / eps.shape[0]

    # ----------------------------------------------------------- sampling

    def _fill_from_h(self, h: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Rows drawn from the per-column likelihoods at latents h."""
        outs = self.column_outputs(h)
        x = np.empty(h.shape[:-1] + (self.n_features,))
        for d, head in enumerate(self.heads):
            x[..., d] = head.sample(outs[d], rng)
        return x

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n unconditional rows (normalized cells, (n, D))."""
        mu, lv = self.prior_components()
        pick = rng.integers(mu.shape[0], size=n)
        h = mu[pick] + np.exp(0.5 * lv[pick]) \
            * rng.standard_normal((n, self.latent_dim))
        return self._fill_from_h(h, rng)

    def conditional_sample(self, x: np.ndarray, mask: np.ndarray,
                           n_samples: int, rng: np.random.Generator) -> np.ndarray:
        """(B, n_samples, D) rows with unobserved cells drawn given observed.

        Rows with an empty observed set draw their latent from the prior
        mixture: conditioning on nothing is the unconditional distribution,
        and the amortized empty-set posterior is badly overconfident.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        b, d_all = x.shape
        shape = (n_samples, b, d_all)
        xr = np.broadcast_to(x, shape).reshape(-1, d_all)
        mr = np.broadcast_to(mask, shape).reshape(-1, d_all)
        h_mu, h_lv = self.encode_x(xr, mr)
        h = h_mu + np.exp(0.5 * h_lv) * rng.standard_normal(h_mu.shape)
        blank = ~mr.any(axis=1)
        if blank.any():
            comp_mu, comp_lv = self.prior_components()
            k = int(blank.sum())
            pick = rng.integers(comp_mu.shape[0], size=k)
            h[blank] = comp_mu[pick] + np.exp(0.5 * comp_lv[pick]) \
                * rng.standard_normal((k, self.latent_dim))
        filled = self._fill_from_h(h, rng)
        return np.where(mr, xr, filled).reshape(shape).transpose(1, 0, 2)

    def impute(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Deterministic cell fill: likelihood modes at the posterior mean."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        h_mu, _ = self.encode_x(x, mask)
        outs = self.column_outputs(h_mu)
        filled = np.empty_like(x)
        for d, head in enumerate(self.heads):
            filled[:, d] = head.mode(outs[d])
        return np.where(mask, x, filled)

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
        shape = (s, b, d_all)
        xb = np.broadcast_to(x, shape)
        h_mu, h_lv = self.encode_x(xb, np.broadcast_to(mask, shape))
        h = h_mu + np.exp(0.5 * h_lv) * rng.standard_normal(h_mu.shape)
        outs = self.column_outputs(h)
        logw = np.zeros((s, b))
        for d in np.flatnonzero(scored.any(axis=0)):
            logw += scored[:, d] * self.heads[d].log_prob_np(outs[d], xb[..., d])
        if mode == "generation":
            log_q_h = (-0.5 * (LOG_2PI + h_lv + (h - h_mu) ** 2
                               * np.exp(-h_lv))).sum(axis=-1)
            logw += self.prior_log_prob(h) - log_q_h
        peak = logw.max(axis=0)
        logp_rows = peak + np.log(np.exp(logw - peak).sum(axis=0)) - np.log(s)
        return float(logp_rows.sum())

    # -------------------------------------------------- target prediction

    def predict_target(self, x: np.ndarray, mask: np.ndarray, *,
                       mc_samples: int = 10, rng: np.random.Generator = None,
                       master_seed: int = 0) -> tuple:
        """(point estimates (B,), predictive draws (B, mc_samples)).

        Same stream semantics as the two-stage model: without an rng, each
        row's stream derives from ``master_seed`` and its observed feature
        set, and the target column is always treated as unobserved.
        """
        return predict_target_rows(self, x, mask, mc_samples=mc_samples,
                                   rng=rng, master_seed=master_seed)

    def _discriminate_row(self, x_row, mask_row, mc_samples, rng) -> tuple:
        x = np.broadcast_to(x_row, (mc_samples, x_row.size)).copy()
        mask = np.broadcast_to(mask_row, x.shape)
        h_mu, h_lv = self.encode_x(x, mask)
        h = h_mu + np.exp(0.5 * h_lv) * rng.standard_normal(h_mu.shape)
        imputed = self._fill_from_h(h, rng)
        out = disc_forward_np(self, disc_slots(self, x, mask, imputed), h)
        return disc_point_and_draws(self, out, rng)

    # --------------------------------------------------- serialization

    def checkpoint_payload(self) -> dict:
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "model_kind": "flat",
            "variant": self.variant,
            "schema": schema_to_json(self.schema),
            "latent_dim": int(self.latent_dim),
            "noise_variance": self.noise_variance,
            "params": self.params.state_dict(),
            "pseudo_x": self.pseudo_x.tolist(),
            "pseudo_mask": self.pseudo_mask.astype(int).tolist(),
            "pseudo_rows": self.pseudo_rows.tolist(),
            "config": self.config,
            "seeds": {"master": self.config.get("master_seed", 0)},
        }
        if self.balance is not None:
            payload["balance"] = {"betas": self.balance.betas,
                                  "solved_from": self.balance.solved_from}
        if self.discriminator is not None:
            payload["discriminator"] = {
                "noise_variance": self.disc_head.noise_variance,
                "params": self.discriminator.state_dict(),
            }
        return payload


def flat_from_payload(payload: dict) -> FlatVAE:
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('format_version')!r}")
    schema = schema_from_json(payload["schema"])
    model = FlatVAE.initialized(
        schema, np.asarray(payload["pseudo_x"], dtype=np.float64),
        np.asarray(payload["pseudo_mask"], dtype=bool),
        np.asarray(payload["pseudo_rows"], dtype=np.int64),
        np.random.default_rng(0), variant=payload["variant"],
        noise_variance=payload["noise_variance"],
        latent_dim=payload["latent_dim"])
    model.params.load_state_dict(payload["params"])
    model.config = dict(payload.get("config", {}))
    bal = payload.get("balance")
    if bal is not None:
        model.balance = BalanceWeights(dict(bal["betas"]),
                                       bal.get("solved_from"))
    disc = payload.get("discriminator")
    if disc is not None:
        t = target_index(schema)
        head = LikelihoodHead(schema[t], noise_variance=disc["noise_variance"])
        params = ParamSet()
        params.load_state_dict(disc["params"])
        model.discriminator = params
        model.disc_head = head
    return model


# --------------------------------------------------------------- training

def train_flat_vae(dataset: Dataset, variant: str = "plain", *,
                   master_seed: int = 0, epochs: int = 1000,
                   batch_size: int = 100, lr: float = 1e-3,
                   noise_variance: float = DEFAULT_NOISE_VARIANCE,
                   k_prior: int = 50, mc_samples: int = 1,
                   missingness: MissingnessSampler = None) -> FlatVAE:
    """Single-stage bound maximization under artificial missingness.

    Mirrors the dependency stage's regime: a fresh missingness pattern per
    epoch, a mixture prior anchored at fully observed rows when enough
    exist, and a full epoch budget (no early stopping).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 4]))
    n, d_all = dataset.cells.shape
    k = max(1, min(k_prior, n // 10))
    full = np.flatnonzero(dataset.mask.all(axis=1))
    pool = full if full.size >= k else np.arange(n)
    rows = np.sort(rng.choice(pool, size=k, replace=False))
    model = FlatVAE.initialized(dataset.schema, dataset.cells[rows],
                                dataset.mask[rows], rows, rng, variant=variant,
                                noise_variance=noise_variance)
    model.config = dict(variant=variant, master_seed=master_seed, epochs=epochs,
                        batch_size=batch_size, lr=lr,
                        noise_variance=noise_variance, k_prior=k,
                        mc_samples=mc_samples)
    sampler = missingness or MissingnessSampler(int(rng.integers(2 ** 31)))
    adam = AdamState(model.params, lr=lr)
    for epoch in range(epochs):
        epoch_mask = sampler.sample_epoch_mask(dataset.mask, epoch)
        total, seen = 0.0, 0
        order = rng.permutation(n)
        for at in range(0, n, batch_size):
            idx = order[at:at + batch_size]
            eps = rng.standard_normal((mc_samples, idx.size, model.latent_dim))
            with Tape() as tape:
                rows_t, balance = model.elbo_rows_t(
                    dataset.cells[idx], epoch_mask[idx], eps, mc_samples,
                    previous_balance=model.balance)
                loss = ad.neg(ad.tmean(rows_t))
            if not np.isfinite(loss.data):
                raise NumericsError(
                    f"flat model: non-finite loss at epoch {epoch}")
            ad.backward(tape, loss)
            adam_step(model.params, adam)
            if balance is not None:
                model.balance = balance
            total += float(-loss.data) * idx.size
            seen += idx.size
        model.history.append(total / seen)
    model.params.check_finite("flat model")
    return model


def train_flat_discriminator(model: FlatVAE, dataset: Dataset, *,
                             epochs: int = 200, batch_size: int = 100,
                             lr: float = 1e-3, rng: np.random.Generator = None,
                             missingness: MissingnessSampler = None) -> FlatVAE:
    """Attach and fit a target predictor; the generative model stays frozen.

    Each minibatch draws a conditioning set under artificial missingness
    (never containing the target), encodes it, imputes the remaining
    features, and updates the predictor on the target's log-likelihood
    given the imputed row and the latent draw.  Freezing the encoder keeps
    generation and imputation bit-identical to the pre-attachment model.
    """
    rng = rng or np.random.default_rng(0)
    t = model.target
    head = LikelihoodHead(model.schema[t], noise_variance=model.noise_variance)
    disc = ParamSet()
    sizes = (model.n_features - 1 + model.latent_dim, 100, 100, head.output_dim)
    ad.init_mlp(disc, "disc", sizes, rng)
    model.discriminator = disc
    model.disc_head = head

    base = dataset.mask.copy()
    base[:, t] = False
    sampler = missingness or MissingnessSampler(int(rng.integers(2 ** 31)))
    opt = AdamState(disc, lr=lr)
    n = dataset.n_rows
    for epoch in range(epochs):
        epoch_mask = sampler.sample_epoch_mask(base, epoch) & base
        order = rng.permutation(n)
        for at in range(0, n, batch_size):
            idx = order[at:at + batch_size]
            x = dataset.cells[idx]
            obs = epoch_mask[idx]
            h_mu, h_lv = model.encode_x(x, obs)
            h = h_mu + np.exp(0.5 * h_lv) * rng.standard_normal(h_mu.shape)
            imputed = model._fill_from_h(h, rng)
            slots = disc_slots(model, x, obs, imputed)
            with Tape() as tape:
                out = disc_forward_t(model, slots, Tensor(h))
                loss = ad.neg(ad.tmean(head.log_prob(out, x[:, t])))
            if not np.isfinite(loss.data):
                raise NumericsError(
                    f"flat discriminator: non-finite loss at epoch {epoch}")
            ad.backward(tape, loss)
            adam_step(disc, opt)
    disc.check_finite("flat discriminator")
    return model
