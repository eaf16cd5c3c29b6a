"""Stage one: an independent VAE per column with a scalar latent.

Each marginal VAE fits one column's distribution on the observed cells of
that column alone. Encoder V-50-2 emits (mean, log-variance) of a scalar
Gaussian posterior; decoder 1-50-V feeds the column's likelihood head.
Final layers start at zero so an untrained encoder is exactly N(0,1) and
an untrained continuous decoder mean is exactly 0.5.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamSet, Tape, Tensor, adam_step, backward
from .data import ColumnSpec, DataError, encoder_input
from .likelihoods import DEFAULT_NOISE_VARIANCE, LikelihoodHead

log = logging.getLogger("vaem.marginal")

HIDDEN = 50


@dataclass
class MarginalVAE:
    """Trained (or initialized) single-column VAE."""

    col: ColumnSpec
    head: LikelihoodHead
    params: ParamSet
    history: list = field(default_factory=list)  # per-epoch training ELBO

    @classmethod
    def initialized(cls, col: ColumnSpec, rng: np.random.Generator,
                    noise_variance: float = DEFAULT_NOISE_VARIANCE) -> "MarginalVAE":
        head = LikelihoodHead(col, noise_variance=noise_variance)
        v = col.one_hot_width
        p = ParamSet()
        p.add("enc.W0", ad.glorot(rng, v, HIDDEN))
        p.add("enc.b0", np.zeros(HIDDEN))
        p.add("enc.W1", np.zeros((HIDDEN, 2)))
        p.add("enc.b1", np.zeros(2))
        p.add("dec.W0", ad.glorot(rng, 1, HIDDEN))
        p.add("dec.b0", np.zeros(HIDDEN))
        p.add("dec.W1", np.zeros((HIDDEN, head.output_dim)))
        p.add("dec.b1", np.zeros(head.output_dim))
        return cls(col=col, head=head, params=p)

    # ------------------------------------------------------------ tape path

    def encode_t(self, x_block: Tensor) -> tuple[Tensor, Tensor]:
        """(mean, log-variance) tensors from a (N, V) input block."""
        h = ad.relu(ad.add(ad.matmul(x_block, self.params["enc.W0"]),
                           self.params["enc.b0"]))
        out = ad.add(ad.matmul(h, self.params["enc.W1"]), self.params["enc.b1"])
        return ad.slice_cols(out, 0, 1), ad.slice_cols(out, 1, 2)

    def decode_t(self, z: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(z, self.params["dec.W0"]),
                           self.params["dec.b0"]))
        out = ad.add(ad.matmul(h, self.params["dec.W1"]), self.params["dec.b1"])
        if self.col.kind in ("continuous", "discrete_continuous"):
            out = ad.sigmoid(out)  # normalized means live in [0,1]
        return out

    # ----------------------------------------------------------- numpy path

    def encode(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(mean, variance) arrays over scalar z for normalized values (N,)."""
        block = encoder_input(self.col, np.atleast_1d(values))
        h = np.maximum(block @ self.params["enc.W0"].data + self.params["enc.b0"].data, 0.0)
        out = h @ self.params["enc.W1"].data + self.params["enc.b1"].data
        return out[:, 0], np.exp(out[:, 1])

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Decoder output (N, output_dim) for scalar latents (N,)."""
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        h = np.maximum(z[:, None] @ self.params["dec.W0"].data + self.params["dec.b0"].data, 0.0)
        out = h @ self.params["dec.W1"].data + self.params["dec.b1"].data
        if self.col.kind in ("continuous", "discrete_continuous"):
            out = 1.0 / (1.0 + np.exp(-np.clip(out, -500, 500)))
        return out

    def decode_many(self, z: np.ndarray) -> np.ndarray:
        """Decoder output for any leading shape of scalar latents."""
        flat = self.decode(np.asarray(z).ravel())
        return flat.reshape(np.asarray(z).shape + (self.head.output_dim,))


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for at in range(0, n, batch_size):
        yield order[at:at + batch_size]


def _fit_failed(vae: MarginalVAE, values: np.ndarray) -> bool:
    """Detect a fit stuck in a bad basin.

    Scalar columns: posterior-mean round trips should land within a few
    noise widths for nearly every training point; a double-digit miss
    rate means the decoder never learned the column's shape.  Class
    columns: the ELBO optimum is the empirical class entropy (with an
    unused latent), so landing far below that bar is a failed run, not a
    hard column.
    """
    mean, _ = vae.encode(values)
    point = vae.head.mode(vae.decode(mean))
    if vae.col.kind in ("categorical", "ordinal"):
        _, counts = np.unique(values, return_counts=True)
        freq = counts / counts.sum()
        return vae.history[-1] < float(freq @ np.log(freq)) - 0.5
    tol = 3.0 * math.sqrt(vae.head.noise_variance)
    return float(np.mean(np.abs(point - values) > tol)) > 0.1


def train_marginal(col: ColumnSpec, values: np.ndarray, rng: np.random.Generator,
                   epochs: int = 1000, batch_size: int = 100, lr: float = 0.001,
                   noise_variance: float = DEFAULT_NOISE_VARIANCE,
                   conv_window: int = 50, conv_tol: float = 1e-4,
                   max_restarts: int = 2) -> MarginalVAE:
    """Fit one marginal VAE on a column's observed normalized values.

    Zero-started final layers make the first optimizer steps a saddle
    escape, and on sharply shaped columns (point masses, steps) a run
    occasionally settles into a decoder that never recovers.  Such runs
    are detected against the column's own reachable bar and refit from
    the next draws of the same generator, keeping the best ELBO, so
    well-behaved fits are byte-identical to a single attempt.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError(f"column {col.name!r}: no observed cells to train on")
    best = None
    for attempt in range(1 + max_restarts):
        vae = _fit_one(col, values, rng, epochs, batch_size, lr,
                       noise_variance, conv_window, conv_tol)
        if best is None or vae.history[-1] > best.history[-1]:
            best = vae
        if not _fit_failed(vae, values):
            break
        log.info("column %r: bad basin on attempt %d (elbo %.3f), refitting",
                 col.name, attempt + 1, vae.history[-1])
    return best


def _fit_one(col: ColumnSpec, values: np.ndarray, rng: np.random.Generator,
             epochs: int, batch_size: int, lr: float, noise_variance: float,
             conv_window: int, conv_tol: float) -> MarginalVAE:
    vae = MarginalVAE.initialized(col, rng, noise_variance=noise_variance)
    blocks = encoder_input(col, values)
    opt = AdamState(vae.params, lr=lr)

    for epoch in range(epochs):
        epoch_elbo, seen = 0.0, 0
        for idx in _epoch_batches(values.shape[0], batch_size, rng):
            xb = Tensor(blocks[idx])
            eps = rng.standard_normal((idx.size, 1))
            with Tape() as tape:
                mean, logvar = vae.encode_t(xb)
                z = ad.add(mean, ad.mul(ad.exp(ad.scale(logvar, 0.5)), Tensor(eps)))
                recon = vae.head.log_prob(vae.decode_t(z), values[idx])
                kl = ad.gaussian_kl(mean, logvar, Tensor(np.zeros(1)), Tensor(np.zeros(1)))
                elbo = ad.tmean(ad.sub(recon, kl))
                loss = ad.neg(elbo)
                if not np.isfinite(loss.data):
                    raise ad.NumericsError(
                        f"column {col.name!r}: non-finite loss at epoch {epoch}")
                backward(tape, loss)
            adam_step(vae.params, opt)
            epoch_elbo += float(elbo.data) * idx.size
            seen += idx.size
        vae.history.append(epoch_elbo / seen)
        if len(vae.history) > conv_window:
            prev = vae.history[-conv_window - 1]
            gain = vae.history[-1] - prev
            if gain / (abs(prev) + 1e-8) < conv_tol:
                break
    vae.params.check_finite(f"after training column {col.name!r}")
    return vae


def marginal_elbo_and_is_ll(vae: MarginalVAE, values: np.ndarray,
                            importance_samples: int = 10000,
                            rng: np.random.Generator | None = None,
                            elbo_samples: int = 50,
                            chunk_rows: int = 64) -> tuple[float, float]:
    """Per-point training ELBO and importance-sampled log-likelihood (nats).

    The ELBO uses the analytic KL plus Monte Carlo reconstruction; the
    IS estimate uses the encoder as proposal. With one importance sample
    and a shared rng draw the two estimators coincide exactly.
    """
    rng = rng or np.random.default_rng(0)
    values = np.asarray(values, dtype=np.float64)
    mean, var = vae.encode(values)
    sd = np.sqrt(var)
    logvar = np.log(var)

    kl = 0.5 * (var + mean ** 2 - 1.0 - logvar)
    recon = np.zeros_like(values)
    for _ in range(elbo_samples):
        z = mean + sd * rng.standard_normal(values.shape[0])
        recon += vae.head.log_prob_np(vae.decode_many(z), values)
    elbo = float((recon / elbo_samples - kl).mean())

    total = np.full(values.shape[0], -np.inf)
    log_s = math.log(importance_samples)
    done = 0
    while done < importance_samples:
        take = min(1024, importance_samples - done)
        for at in range(0, values.shape[0], chunk_rows):
            sl = slice(at, min(at + chunk_rows, values.shape[0]))
            m, s = mean[sl][:, None], sd[sl][:, None]
            z = m + s * rng.standard_normal((sl.stop - sl.start, take))
            log_q = -0.5 * (math.log(2 * math.pi) + logvar[sl][:, None]
                            + (z - m) ** 2 / var[sl][:, None])
            log_prior = -0.5 * (math.log(2 * math.pi) + z ** 2)
            log_px = vae.head.log_prob_np(vae.decode_many(z),
                                          values[sl][:, None])
            w = log_px + log_prior - log_q
            chunk_max = np.maximum(total[sl], w.max(axis=1))
            total[sl] = chunk_max + np.log(
                np.exp(total[sl] - chunk_max)
                + np.exp(w - chunk_max[:, None]).sum(axis=1))
        done += take
    is_ll = float((total - log_s).mean())
    return elbo, is_ll


def generate_from_marginal(vae: MarginalVAE, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n values from the fitted marginal: z ~ N(0,1), x ~ head."""
    z = rng.standard_normal(n)
    return vae.head.sample(vae.decode(z), rng)
