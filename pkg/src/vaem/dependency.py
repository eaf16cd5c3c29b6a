"""Dependency model over the unified latent codes of the marginal models.

Stage two of the pipeline.  Observations are the scalar codes z_d produced
by the per-column marginal models; inference is a permutation-invariant set
encoder over (feature, value) elements, so any subset of columns can be
encoded without retraining.  The prior is a mixture of encoder posteriors
anchored at a fixed subset of training rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericsError, ParamSet, Tape, Tensor, adam_step, glorot
from .data import Dataset, MissingnessSampler

log = logging.getLogger(__name__)

LATENT_DIM = 20          # h
EMBED_DIM = 10           # per-element embedding width
SET_DIM = 100            # shared element map output width
HEAD_HIDDEN = (500, 200)
DEC_HIDDEN = (50, 100)
LOG_2PI = float(np.log(2.0 * np.pi))

# x-elements for these kinds select an embedding row by class index;
# scalar kinds multiply the value into a single embedding vector
_INDEXED = ("categorical", "ordinal")


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def mixture_log_prob(h: np.ndarray, mu: np.ndarray, lv: np.ndarray) -> np.ndarray:
    """log density of h under an equal-weight diagonal-Gaussian mixture.

    ``mu`` and ``lv`` are (K, L) component means and log-variances; ``h``
    may have any leading shape ending in L.
    """
    h = np.asarray(h, dtype=np.float64)
    dim = h.shape[-1]
    inv = np.exp(-lv)                                   # (K, L)
    quad = ((h ** 2) @ inv.T - 2.0 * (h @ (mu * inv).T)
            + ((mu ** 2) * inv + lv).sum(axis=1))
    comp = -0.5 * (dim * LOG_2PI + quad)                # (..., K)
    return _logsumexp(comp, axis=-1) - np.log(mu.shape[0])


def mixture_log_prob_t(h: Tensor, comp_mu: Tensor, comp_lv: Tensor) -> Tensor:
    """Tape twin of :func:`mixture_log_prob`; h is (B, L), returns (B, 1)."""
    k = comp_mu.data.shape[0]
    dim = h.data.shape[-1]
    inv = ad.exp(ad.neg(comp_lv))
    a = ad.matmul(ad.square(h), ad.transpose(inv))
    b = ad.matmul(h, ad.transpose(ad.mul(comp_mu, inv)))
    c = ad.tsum(ad.add(ad.mul(ad.square(comp_mu), inv), comp_lv),
                axis=1, keepdims=True)
    quad = ad.add(ad.sub(a, ad.scale(b, 2.0)), ad.transpose(c))
    comp = ad.scale(ad.add(quad, Tensor(np.float64(dim * LOG_2PI))), -0.5)
    return ad.sub(ad.logsumexp_rows(comp), Tensor(np.float64(np.log(k))))


@dataclass
class DependencyVAE:
    """Set-encoded VAE tying the per-column latent codes together.

    ``class_counts[d]`` is None for scalar-valued columns and the number of
    classes (or ordinal levels) otherwise.  Pseudo rows anchor the mixture
    prior; their latent coordinates are the marginal posterior means.
    """

    class_counts: list
    params: ParamSet
    pseudo_x: np.ndarray            # (K_prior, D) normalized cells
    pseudo_z: np.ndarray            # (K_prior, D) marginal posterior means
    pseudo_mask: np.ndarray         # (K_prior, D) observed flags
    pseudo_rows: np.ndarray         # source row indices in the training set
    history: list = field(default_factory=list)
    latent_dim: int = LATENT_DIM

    # ------------------------------------------------------------ set-up

    @property
    def n_features(self) -> int:
        return len(self.class_counts)

    @classmethod
    def initialized(cls, class_counts, pseudo_x, pseudo_z, pseudo_mask,
                    pseudo_rows, rng: np.random.Generator) -> "DependencyVAE":
        """Practical starting point.

        The encoder head's output layer starts at zero so the fresh
        posterior is N(0, I) for every input and matches the fresh prior
        pointwise.  The decoder output layer starts live (scaled down);
        a zero decoder would pass no reconstruction gradient back to the
        set encoder and stall the first phase of training.
        """
        p = ParamSet()
        m = EMBED_DIM
        for d, count in enumerate(class_counts):
            if count is None:
                p.add(f"pin.x{d}", rng.normal(scale=m ** -0.5, size=(m,)))
            else:
                p.add(f"pin.x{d}", rng.normal(scale=m ** -0.5, size=(count, m)))
            p.add(f"pin.z{d}", rng.normal(scale=m ** -0.5, size=(m,)))
            # additive identity vectors: a scalar element near zero still
            # announces which feature it is, and relu units get an affine
            # rather than through-origin response in the value
            p.add(f"pin.cx{d}", rng.normal(scale=m ** -0.5, size=(m,)))
            p.add(f"pin.cz{d}", rng.normal(scale=m ** -0.5, size=(m,)))
        p.add("pin.l.W", glorot(rng, m, SET_DIM))
        p.add("pin.l.b", np.zeros(SET_DIM))
        head_sizes = (SET_DIM,) + HEAD_HIDDEN + (2 * LATENT_DIM,)
        for i in range(3):
            zero = i == 2
            w = np.zeros((head_sizes[i], head_sizes[i + 1])) if zero \
                else glorot(rng, head_sizes[i], head_sizes[i + 1])
            p.add(f"pin.head.W{i}", w)
            p.add(f"pin.head.b{i}", np.zeros(head_sizes[i + 1]))
        # decoder emits per-dimension mean and a log-variance refinement
        # around a global per-column level, so confident rows can price
        # tightly while ambiguous rows keep a wide band
        dec_sizes = (LATENT_DIM,) + DEC_HIDDEN + (2 * len(class_counts),)
        for i in range(3):
            w = glorot(rng, dec_sizes[i], dec_sizes[i + 1])
            if i == 2:
                w *= 0.1
            p.add(f"dec.W{i}", w)
            p.add(f"dec.b{i}", np.zeros(dec_sizes[i + 1]))
        p.add("dec.lv0", np.zeros(len(class_counts)))
        return cls(list(class_counts), p, np.asarray(pseudo_x, dtype=np.float64),
                   np.asarray(pseudo_z, dtype=np.float64),
                   np.asarray(pseudo_mask, dtype=bool),
                   np.asarray(pseudo_rows, dtype=np.int64))

    def zero_init(self) -> "DependencyVAE":
        """Flatten every weight and bias to zero, in place.

        In this state the decoder emits N(0, I) regardless of h, the
        encoder emits N(0, I) for any input, and prior and posterior agree
        pointwise, so the evidence bound reduces to the reconstruction term
        under a standard normal.
        """
        for _, t in self.params.items():
            t.data[...] = 0.0
        return self

    # ----------------------------------------------------- set encoder

    def _class_index(self, d: int, values: np.ndarray) -> np.ndarray:
        count = self.class_counts[d]
        return np.clip(np.rint(values).astype(np.int64), 0, count - 1)

    def partial_encode_t(self, x: np.ndarray, z: np.ndarray,
                         mask: np.ndarray) -> tuple:
        """Posterior (mean, log-variance) tensors for a (B, D) batch."""
        p = self.params
        b, d_all = x.shape
        elems = []
        for d in range(d_all):
            if self.class_counts[d] is None:
                ex = ad.add(ad.mul(Tensor(x[:, d:d + 1]), p[f"pin.x{d}"]),
                            p[f"pin.cx{d}"])
            else:
                ex = ad.take_rows(p[f"pin.x{d}"], self._class_index(d, x[:, d]))
            elems.append(ex)
            elems.append(ad.add(ad.mul(Tensor(z[:, d:d + 1]), p[f"pin.z{d}"]),
                                p[f"pin.cz{d}"]))
        stack = ad.concat_rows(elems)                       # (2D*B, M)
        h = ad.relu(ad.add(ad.matmul(stack, p["pin.l.W"]), p["pin.l.b"]))
        m2 = np.repeat(mask.astype(np.float64), 2, axis=1)  # x, z share the flag
        h = ad.mul(h, Tensor(m2.T.reshape(-1, 1)))
        agg = ad.sum_segments(h, 2 * d_all)                 # (B, K)
        out = ad.mlp_forward(p, "pin.head", agg, 3)
        return (ad.slice_cols(out, 0, LATENT_DIM),
                ad.slice_cols(out, LATENT_DIM, 2 * LATENT_DIM))

    def partial_encode(self, x: np.ndarray, z: np.ndarray,
                       mask: np.ndarray) -> tuple:
        """Numpy twin of :meth:`partial_encode_t` for any leading shape."""
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        lead = x.shape[:-1]
        d_all = x.shape[-1]
        xf = x.reshape(-1, d_all)
        zf = z.reshape(-1, d_all)
        mf = mask.reshape(-1, d_all)
        p = self.params
        out = np.empty((xf.shape[0], 2 * LATENT_DIM))
        for at in range(0, xf.shape[0], 8192):
            sl = slice(at, at + 8192)
            out[sl] = self._encode_block(xf[sl], zf[sl], mf[sl], p)
        return (out[..., :LATENT_DIM].reshape(lead + (LATENT_DIM,)),
                out[..., LATENT_DIM:].reshape(lead + (LATENT_DIM,)))

    def _encode_block(self, x, z, mask, p) -> np.ndarray:
        b, d_all = x.shape
        elems = np.empty((b, 2 * d_all, EMBED_DIM))
        for d in range(d_all):
            xe = p[f"pin.x{d}"].data
            if self.class_counts[d] is None:
                elems[:, 2 * d] = x[:, d, None] * xe + p[f"pin.cx{d}"].data
            else:
                elems[:, 2 * d] = xe[self._class_index(d, x[:, d])]
            elems[:, 2 * d + 1] = (z[:, d, None] * p[f"pin.z{d}"].data
                                   + p[f"pin.cz{d}"].data)
        h = np.maximum(elems.reshape(-1, EMBED_DIM) @ p["pin.l.W"].data
                       + p["pin.l.b"].data, 0.0)
        h = h.reshape(b, 2 * d_all, SET_DIM)
        agg = (h * np.repeat(mask, 2, axis=1)[:, :, None]).sum(axis=1)
        h0 = np.maximum(agg @ p["pin.head.W0"].data + p["pin.head.b0"].data, 0.0)
        h1 = np.maximum(h0 @ p["pin.head.W1"].data + p["pin.head.b1"].data, 0.0)
        return h1 @ p["pin.head.W2"].data + p["pin.head.b2"].data

    def encode_element_multiset(self, elements) -> tuple:
        """Posterior from an explicit element list [(role, feature, value)].

        ``role`` is "x" or "z".  Elements are aggregated in the order given,
        which exposes the underlying multiset semantics: duplicates count
        twice and ordering only perturbs floating-point round-off.
        """
        p = self.params
        agg = np.zeros(SET_DIM)
        for role, d, value in elements:
            if role == "x":
                xe = p[f"pin.x{d}"].data
                if self.class_counts[d] is None:
                    e = float(value) * xe + p[f"pin.cx{d}"].data
                else:
                    e = xe[int(value)]
            elif role == "z":
                e = float(value) * p[f"pin.z{d}"].data + p[f"pin.cz{d}"].data
            else:
                raise ValueError(f"unknown element role {role!r}")
            agg = agg + np.maximum(e @ p["pin.l.W"].data + p["pin.l.b"].data, 0.0)
        h0 = np.maximum(agg @ p["pin.head.W0"].data + p["pin.head.b0"].data, 0.0)
        h1 = np.maximum(h0 @ p["pin.head.W1"].data + p["pin.head.b1"].data, 0.0)
        out = h1 @ p["pin.head.W2"].data + p["pin.head.b2"].data
        return out[:LATENT_DIM], out[LATENT_DIM:]

    # --------------------------------------------------------- decoder

    def decode_z_t(self, h: Tensor, lv_gate: float = 1.0) -> tuple:
        """Per-dimension (mean, log-variance) tensors; no squashing.

        The log-variance is a global per-column level plus an h-dependent
        refinement. Training gates the refinement off at first: the
        global level shrinking as the mean map forms is what amplifies
        the mean gradients, and a free per-row variance would instead
        inflate on badly predicted rows and mute them.
        """
        out = ad.mlp_forward(self.params, "dec", h, 3)
        d = self.n_features
        lv = ad.slice_cols(out, d, 2 * d)
        if lv_gate != 1.0:
            lv = ad.scale(lv, lv_gate)
        return (ad.slice_cols(out, 0, d),
                ad.add(lv, self.params["dec.lv0"]))

    def decode_z(self, h: np.ndarray) -> tuple:
        h = np.asarray(h, dtype=np.float64)
        lead = h.shape[:-1]
        flat = h.reshape(-1, LATENT_DIM)
        p = self.params
        h0 = np.maximum(flat @ p["dec.W0"].data + p["dec.b0"].data, 0.0)
        h1 = np.maximum(h0 @ p["dec.W1"].data + p["dec.b1"].data, 0.0)
        out = h1 @ p["dec.W2"].data + p["dec.b2"].data
        d = self.n_features
        return (out[:, :d].reshape(lead + (d,)),
                (out[:, d:] + p["dec.lv0"].data).reshape(lead + (d,)))

    # ----------------------------------------------------------- prior

    def prior_components(self) -> tuple:
        """Mixture component (means, log-variances), each (K_prior, latent)."""
        mu, lv = self.partial_encode(self.pseudo_x, self.pseudo_z, self.pseudo_mask)
        return mu, lv

    def prior_log_prob(self, h: np.ndarray) -> np.ndarray:
        """log p(h) under the mixture prior, any leading shape."""
        mu, lv = self.prior_components()
        return mixture_log_prob(h, mu, lv)

    def _prior_log_prob_t(self, h: Tensor, comp_mu: Tensor,
                          comp_lv: Tensor) -> Tensor:
        return mixture_log_prob_t(h, comp_mu, comp_lv)

    # ------------------------------------------------------- objective

    def partial_elbo_rows(self, z: np.ndarray, x: np.ndarray, mask: np.ndarray,
                          eps: np.ndarray, mc_samples: int = 1,
                          dec_lv_gate: float = 1.0,
                          kl_scale: float = 1.0) -> Tensor:
        """Per-row evidence bound, (B, 1) tensor; eps is (S, B, latent).

        ``dec_lv_gate`` scales the per-row part of the decoder
        log-variance; a zero gate leaves only the global per-column
        level while the mean map forms.  ``kl_scale`` weights the latent
        regularizer (log prior minus log posterior); a reduced weight is
        the usual warm-up device that lets the autoencoding path form
        before the prior starts pulling the posterior flat.
        """
        mu_t, lv_t = self.partial_encode_t(x, z, mask)
        comp_mu, comp_lv = self.partial_encode_t(self.pseudo_x, self.pseudo_z,
                                                 self.pseudo_mask)
        z_c = Tensor(np.asarray(z, dtype=np.float64))
        m_c = Tensor(mask.astype(np.float64))
        total = None
        for s in range(mc_samples):
            h = ad.add(mu_t, ad.mul(ad.exp(ad.scale(lv_t, 0.5)), Tensor(eps[s])))
            dec_mean, dec_lv = self.decode_z_t(h, lv_gate=dec_lv_gate)
            rec = ad.tsum(ad.mul(ad.gaussian_log_density(z_c, dec_mean, dec_lv), m_c),
                          axis=1, keepdims=True)
            log_p = self._prior_log_prob_t(h, comp_mu, comp_lv)
            log_q = ad.tsum(ad.gaussian_log_density(h, mu_t, lv_t),
                            axis=1, keepdims=True)
            reg = ad.sub(log_p, log_q)
            if kl_scale != 1.0:
                reg = ad.scale(reg, kl_scale)
            term = ad.add(rec, reg)
            total = term if total is None else ad.add(total, term)
        return ad.scale(total, 1.0 / mc_samples)

    def partial_elbo_rows_np(self, z: np.ndarray, x: np.ndarray,
                             mask: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """Tape-free twin of :meth:`partial_elbo_rows`; returns (B,)."""
        z = np.asarray(z, dtype=np.float64)
        mu, lv = self.partial_encode(x, z, mask)
        total = np.zeros(z.shape[0])
        for s in range(eps.shape[0]):
            h = mu + np.exp(0.5 * lv) * eps[s]
            dec_mean, lv_dec = self.decode_z(h)
            rec = (-0.5 * (LOG_2PI + lv_dec + (z - dec_mean) ** 2
                           * np.exp(-lv_dec)) * mask).sum(axis=1)
            log_q = (-0.5 * (LOG_2PI + lv + (h - mu) ** 2
                             * np.exp(-lv))).sum(axis=1)
            total += rec + self.prior_log_prob(h) - log_q
        return total / eps.shape[0]

    def partial_elbo(self, z: np.ndarray, x: np.ndarray, mask: np.ndarray,
                     rng: np.random.Generator = None, eps: np.ndarray = None,
                     mc_samples: int = 1, dec_lv_gate: float = 1.0,
                     kl_scale: float = 1.0) -> Tensor:
        """Mean evidence bound over a batch of partially observed rows."""
        if eps is None:
            eps = rng.standard_normal((mc_samples, x.shape[0], LATENT_DIM))
        rows = self.partial_elbo_rows(z, x, mask, np.asarray(eps), mc_samples,
                                      dec_lv_gate, kl_scale)
        return ad.tmean(rows)

    # --------------------------------------------------- serialization

    def state_dict(self) -> dict:
        return {
            "class_counts": [c if c is None else int(c) for c in self.class_counts],
            "params": self.params.state_dict(),
            "pseudo_x": self.pseudo_x.tolist(),
            "pseudo_z": self.pseudo_z.tolist(),
            "pseudo_mask": self.pseudo_mask.astype(int).tolist(),
            "pseudo_rows": self.pseudo_rows.tolist(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "DependencyVAE":
        counts = [c if c is None else int(c) for c in state["class_counts"]]
        model = cls.initialized(counts,
                                np.asarray(state["pseudo_x"], dtype=np.float64),
                                np.asarray(state["pseudo_z"], dtype=np.float64),
                                np.asarray(state["pseudo_mask"], dtype=bool),
                                np.asarray(state["pseudo_rows"], dtype=np.int64),
                                np.random.default_rng(0))
        model.params.load_state_dict(state["params"])
        return model


def _counts_for(schema) -> list:
    return [col.class_count if col.kind in _INDEXED else None for col in schema]


def encode_dataset_latents(marginals, dataset: Dataset) -> tuple:
    """Marginal posterior (means, standard deviations), each (N, D)."""
    n, d_all = dataset.cells.shape
    mu = np.empty((n, d_all))
    sd = np.empty((n, d_all))
    for d in range(d_all):
        mean, var = marginals[d].encode(dataset.cells[:, d])
        mu[:, d] = mean
        sd[:, d] = np.sqrt(var)
    return mu, sd


def train_stage_two(marginals, dataset: Dataset, rng: np.random.Generator, *,
                    epochs: int = 1000, batch_size: int = 100, lr: float = 1e-3,
                    k_prior: int = 50, mc_samples: int = 1,
                    missingness: MissingnessSampler = None,
                    conv_window: int = 50, conv_tol: float = 0.0,
                    lv_warmup: float = 1 / 3,
                    kl_warmup: float = 1 / 3) -> DependencyVAE:
    """Fit the dependency model; the marginal models stay frozen.

    Latent coordinates are resampled from the marginal posteriors every
    minibatch, and each epoch trains against a fresh artificial
    missingness pattern so the set encoder sees every conditioning regime.
    A positive conv_tol turns on early stopping, judged on a fixed-draw
    probe bound; the default runs every epoch, because the bound can
    plateau for long stretches before the coupling between columns forms.
    Two warm-up schedules steer the early epochs: the decoder variance
    head stays gated shut for the first ``lv_warmup`` fraction of the
    budget while the mean map forms, and the weight on the latent
    regularizer ramps linearly from zero over the first ``kl_warmup``
    fraction, so posteriors become input-dependent before the prior can
    pull them flat.  On narrow tables the full-strength regularizer
    otherwise wins outright and the decoder just prices each coordinate's
    marginal spread.
    """
    n, d_all = dataset.cells.shape
    if len(marginals) != d_all:
        raise ValueError(f"need {d_all} marginal models, got {len(marginals)}")
    mu, sd = encode_dataset_latents(marginals, dataset)

    k = max(1, min(k_prior, n // 10))
    full = np.flatnonzero(dataset.mask.all(axis=1))
    pool = full if full.size >= k else np.arange(n)
    rows = np.sort(rng.choice(pool, size=k, replace=False))
    model = DependencyVAE.initialized(
        _counts_for(dataset.schema), dataset.cells[rows], mu[rows],
        dataset.mask[rows], rows, rng)

    sampler = missingness or MissingnessSampler(int(rng.integers(2 ** 31)))
    adam = AdamState(model.params, lr=lr)
    history = model.history
    # fixed draws for the convergence probe: epoch bounds stay comparable
    # even though each epoch trains under a different missingness rate
    probe_rng = np.random.default_rng(int(rng.integers(2 ** 31)))
    probe_z = mu + sd * probe_rng.standard_normal(mu.shape)
    probe_eps = probe_rng.standard_normal((1, n, LATENT_DIM))
    probe = []
    warmup_until = int(epochs * lv_warmup)
    ramp_until = max(1, int(epochs * kl_warmup))
    for epoch in range(epochs):
        epoch_mask = sampler.sample_epoch_mask(dataset.mask, epoch)
        gate = 0.0 if epoch < warmup_until else 1.0
        beta = min(1.0, epoch / ramp_until)
        total, seen = 0.0, 0
        order = rng.permutation(n)
        for at in range(0, n, batch_size):
            idx = order[at:at + batch_size]
            z = mu[idx] + sd[idx] * rng.standard_normal((idx.size, d_all))
            eps = rng.standard_normal((mc_samples, idx.size, LATENT_DIM))
            with Tape() as tape:
                elbo = model.partial_elbo(z, dataset.cells[idx], epoch_mask[idx],
                                          eps=eps, mc_samples=mc_samples,
                                          dec_lv_gate=gate, kl_scale=beta)
                loss = ad.neg(elbo)
            if not np.isfinite(loss.data):
                raise NumericsError(
                    f"dependency model: non-finite loss at epoch {epoch}")
            ad.backward(tape, loss)
            adam_step(model.params, adam)
            total += float(elbo.data) * idx.size
            seen += idx.size
        history.append(total / seen)
        probe.append(float(np.mean(model.partial_elbo_rows_np(
            probe_z, dataset.cells, dataset.mask, probe_eps))))
        if conv_tol > 0.0 and epoch >= conv_window:
            gain = probe[-1] - probe[-1 - conv_window]
            if gain / (abs(probe[-1 - conv_window]) + 1e-8) < conv_tol:
                log.info("stage two converged at epoch %d", epoch)
                break
    model.params.check_finite("stage two")
    return model
