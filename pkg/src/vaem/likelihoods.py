"""Per-column observation likelihoods.

Continuous and discrete-continuous columns use a fixed-variance Gaussian
on the normalized scale (the discrete grid only matters when sampling or
taking modes, where values snap to the nearest representable point).
Categorical columns use a softmax over decoder logits. Ordinal columns use
a cumulative-logistic link whose cutpoints are kept strictly increasing by
a softplus-increment parameterization.

`log_prob` runs on tape tensors (differentiable); `log_prob_np`, `sample`,
and `mode` are plain-numpy twins for inference paths. The twins are tested
against each other to 1e-12.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CATEGORICAL, CONTINUOUS_KINDS, DISCRETE, ORDINAL, ColumnSpec, DataError

_LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_NOISE_VARIANCE = 0.02
_MASS_FLOOR = 1e-300  # keeps log() finite when a level mass underflows


class LikelihoodHead:
    """Distribution family plus fixed hyperparameters for one column."""

    def __init__(self, col: ColumnSpec, noise_variance: float = DEFAULT_NOISE_VARIANCE):
        self.col = col
        self.kind = col.kind
        self.noise_variance = float(noise_variance)
        if self.kind in CONTINUOUS_KINDS:
            self.output_dim = 1
        elif self.kind == CATEGORICAL:
            self.output_dim = col.class_count
        else:
            self.output_dim = col.level_count  # location + (levels-1) raw cutpoints

    # ---------------------------------------------------------- tape path

    def log_prob(self, decoder_output: Tensor, observed: np.ndarray) -> Tensor:
        """Log density/mass per row, shape (B, 1); differentiable."""
        observed = np.asarray(observed, dtype=np.float64)
        self._validate_observed(observed)
        if self.kind in CONTINUOUS_KINDS:
            x = Tensor(observed[:, None])
            quad = ad.scale(ad.square(ad.sub(x, decoder_output)), 1.0 / self.noise_variance)
            const = _LOG_2PI + math.log(self.noise_variance)
            return ad.scale(ad.add(quad, Tensor(np.full(1, const))), -0.5)
        if self.kind == CATEGORICAL:
            idx = observed.astype(np.int64)
            return ad.sub(ad.take_per_row(decoder_output, idx),
                          ad.logsumexp_rows(decoder_output))
        masses = self.ordinal_masses(decoder_output)
        idx = observed.astype(np.int64)
        return ad.take_per_row(ad.log(ad.add(masses, Tensor(np.full(1, _MASS_FLOOR)))), idx)

    def ordinal_masses(self, decoder_output: Tensor) -> Tensor:
        """Level masses (B, L) from [location, raw cutpoints]; sums to 1."""
        levels = self.col.level_count
        loc = ad.slice_cols(decoder_output, 0, 1)
        cut = ad.slice_cols(decoder_output, 1, 2)
        cdfs = [ad.sigmoid(ad.sub(cut, loc))]
        for k in range(2, levels):
            cut = ad.add(cut, ad.softplus(ad.slice_cols(decoder_output, k, k + 1)))
            cdfs.append(ad.sigmoid(ad.sub(cut, loc)))
        pieces = [cdfs[0]]
        for k in range(1, levels - 1):
            pieces.append(ad.sub(cdfs[k], cdfs[k - 1]))
        one = Tensor(np.full(1, 1.0))
        pieces.append(ad.sub(one, cdfs[-1]))
        return ad.concat_cols(pieces)

    # --------------------------------------------------------- numpy path

    def log_prob_np(self, decoder_output: np.ndarray, observed: np.ndarray) -> np.ndarray:
        """Same result as log_prob, arbitrary leading batch shape, no tape."""
        out = np.asarray(decoder_output, dtype=np.float64)
        observed = np.asarray(observed, dtype=np.float64)
        if self.kind in CONTINUOUS_KINDS:
            mean = out[..., 0]
            return -0.5 * (_LOG_2PI + math.log(self.noise_variance)
                           + (observed - mean) ** 2 / self.noise_variance)
        if self.kind == CATEGORICAL:
            shifted = out - out.max(axis=-1, keepdims=True)
            logz = np.log(np.exp(shifted).sum(axis=-1)) + out.max(axis=-1)
            picked = np.take_along_axis(
                out, observed.astype(np.int64)[..., None], axis=-1)[..., 0]
            return picked - logz
        masses = self.ordinal_masses_np(out)
        picked = np.take_along_axis(
            masses, observed.astype(np.int64)[..., None], axis=-1)[..., 0]
        return np.log(picked + _MASS_FLOOR)

    def ordinal_masses_np(self, out: np.ndarray) -> np.ndarray:
        levels = self.col.level_count
        loc = out[..., 0]
        cut = out[..., 1].copy()
        cdfs = [_expit(cut - loc)]
        for k in range(2, levels):
            cut = cut + _softplus_np(out[..., k])
            cdfs.append(_expit(cut - loc))
        cdf = np.stack(cdfs, axis=-1)
        first = cdf[..., :1]
        mids = cdf[..., 1:] - cdf[..., :-1]
        last = 1.0 - cdf[..., -1:]
        return np.concatenate([first, mids, last], axis=-1)

    def sample(self, decoder_output, rng: np.random.Generator) -> np.ndarray:
        out = decoder_output.data if isinstance(decoder_output, Tensor) else np.asarray(decoder_output)
        if self.kind in CONTINUOUS_KINDS:
            draw = out[..., 0] + math.sqrt(self.noise_variance) * rng.standard_normal(out.shape[:-1])
            return self._snap(draw)
        if self.kind == CATEGORICAL:
            probs = _softmax_np(out)
        else:
            probs = self.ordinal_masses_np(out)
        cum = probs.cumsum(axis=-1)
        u = rng.uniform(size=out.shape[:-1] + (1,))
        return (u > cum).sum(axis=-1).astype(np.float64)

    def mode(self, decoder_output) -> np.ndarray:
        out = decoder_output.data if isinstance(decoder_output, Tensor) else np.asarray(decoder_output)
        if self.kind in CONTINUOUS_KINDS:
            return self._snap(out[..., 0])
        if self.kind == CATEGORICAL:
            return out.argmax(axis=-1).astype(np.float64)
        return self.ordinal_masses_np(out).argmax(axis=-1).astype(np.float64)

    def _snap(self, values: np.ndarray) -> np.ndarray:
        if self.kind == DISCRETE and self.col.grid:
            grid = self.col.normalized_grid()
            idx = np.abs(values[..., None] - grid).argmin(axis=-1)
            return grid[idx]
        return values

    def _validate_observed(self, observed: np.ndarray):
        if self.kind in CONTINUOUS_KINDS:
            if not np.all(np.isfinite(observed)):
                raise DataError(f"column {self.col.name!r}: non-finite observed value")
            return
        count = self.col.class_count
        if np.any(observed != np.round(observed)) or np.any(observed < 0) or np.any(observed >= count):
            raise DataError(f"column {self.col.name!r}: observed value outside "
                            f"0..{count - 1}")


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def head_for(col: ColumnSpec, noise_variance: float = DEFAULT_NOISE_VARIANCE) -> LikelihoodHead:
    return LikelihoodHead(col, noise_variance=noise_variance)


def log_prob(head: LikelihoodHead, decoder_output: Tensor, observed) -> Tensor:
    return head.log_prob(decoder_output, np.atleast_1d(observed))


def sample(head: LikelihoodHead, decoder_output, rng) -> np.ndarray:
    return head.sample(decoder_output, rng)


def mode(head: LikelihoodHead, decoder_output) -> np.ndarray:
    return head.mode(decoder_output)
