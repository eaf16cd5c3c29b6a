"""Active feature acquisition: information rewards, greedy ordering, curves.

The reward for acquiring a feature is the expected shift it causes in the
model's latent belief, minus the part of that shift the target would
explain anyway.  Both terms are closed-form Gaussian divergences between
set-encoder posteriors, sampled over model-generated feature and target
values, so reward estimation needs no gradients and works with any model
exposing ``conditional_sample`` and a partial-set posterior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CONTINUOUS_KINDS


@dataclass(frozen=True)
class RewardEstimate:
    """Estimated value of acquiring one feature, in nats."""

    candidate: int
    reward: float
    outer_samples: int
    inner_samples: int
    seed: int


@dataclass
class InformationCurve:
    """Prediction error on the target after each acquisition step.

    Step 0 is the no-features baseline; ``acquired`` holds None there and
    the revealed feature index for every later step.  Errors are RMSE in
    the target column's raw units.
    """

    steps: list
    rmse: list
    acquired: list
    seed: int

    def to_json(self) -> dict:
        return {"steps": [int(s) for s in self.steps],
                "rmse": [float(v) for v in self.rmse],
                "order": [int(c) for c in self.acquired[1:]],
                "auic": auic(self),
                "seed": int(self.seed)}


def gaussian_kl(mu1, lv1, mu0, lv0) -> np.ndarray:
    """KL(N(mu1, e^lv1) || N(mu0, e^lv0)) summed over the last axis."""
    return 0.5 * np.sum(np.exp(lv1 - lv0) + (mu1 - mu0) ** 2 * np.exp(-lv0)
                        - 1.0 + lv0 - lv1, axis=-1)


def _draw_codes(model, x, rng):
    """Per-cell latent codes for the set encoder; None for one-stage models."""
    if not hasattr(model, "dependency"):
        return None
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    mu, sd = model.encode_latents(flat)
    z = mu + sd * rng.standard_normal(mu.shape)
    return z.reshape(lead + (x.shape[-1],))


def _code_col(model, d, values, rng):
    mean, var = model.marginals[d].encode(values.ravel())
    z = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
    return z.reshape(values.shape)


def _posterior(model, x, codes, mask):
    """Latent-summary posterior (mean, log-variance) given the masked cells.

    The same ``codes`` array must back both sides of a divergence so the
    conditioning sets differ only by the cells under comparison.
    """
    if codes is not None:
        return model.dependency.partial_encode(x, codes, mask)
    return model.encode_x(x, mask)


def estimate_reward(model, x, mask, candidate: int, *, outer_samples: int = 10,
                    inner_samples: int = 10, seed: int = 0) -> RewardEstimate:
    """Mean acquisition reward for one candidate over the given rows.

    Outer samples draw the candidate's value given each row's observed
    set; inner samples then draw the target given the observed set plus
    the candidate.  The reward is the belief shift from adding the
    candidate minus the average residual shift once the target is known.
    Negative estimates are reported as-is.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool)).copy()
    t = model.target
    if candidate == t:
        raise ValueError(f"candidate {candidate} is the prediction target")
    if mask[:, candidate].any():
        raise ValueError(f"candidate {candidate} is already observed")
    mask[:, t] = False
    b, d_all = x.shape
    so, si = int(outer_samples), int(inner_samples)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 29, candidate]))

    draws = model.conditional_sample(x, mask, so, rng)
    x_out = np.broadcast_to(x[:, None, :], (b, so, d_all)).copy()
    x_out[..., candidate] = draws[..., candidate]
    m_small = np.broadcast_to(mask[:, None, :], (b, so, d_all))
    m_big = m_small.copy()
    m_big[..., candidate] = True

    codes = _draw_codes(model, x_out, rng)
    mu0, lv0 = _posterior(model, x_out, codes, m_small)
    mu1, lv1 = _posterior(model, x_out, codes, m_big)
    gain = gaussian_kl(mu1, lv1, mu0, lv0)                      # (B, so)

    tgt = model.conditional_sample(x_out.reshape(-1, d_all),
                                   m_big.reshape(-1, d_all), si, rng)[..., t]
    shape = (b, so, si, d_all)
    x_in = np.broadcast_to(x_out[:, :, None, :], shape).copy()
    x_in[..., t] = tgt.reshape(b, so, si)
    codes_in = None
    if codes is not None:
        codes_in = np.broadcast_to(codes[:, :, None, :], shape).copy()
        codes_in[..., t] = _code_col(model, t, x_in[..., t], rng)
    mi_small = np.broadcast_to(m_small[:, :, None, :], shape).copy()
    mi_small[..., t] = True
    mi_big = np.broadcast_to(m_big[:, :, None, :], shape).copy()
    mi_big[..., t] = True
    mu2, lv2 = _posterior(model, x_in, codes_in, mi_big)
    mu3, lv3 = _posterior(model, x_in, codes_in, mi_small)
    explained = gaussian_kl(mu2, lv2, mu3, lv3).mean(axis=2)    # (B, so)

    reward = float((gain - explained).mean())
    return RewardEstimate(int(candidate), reward, so, si, int(seed))


def sing_ordering(model, x, mask=None, *, outer_samples: int = 10,
                  inner_samples: int = 10, seed: int = 0) -> list:
    """Greedy global acquisition order over the not-yet-observed features.

    At each step the candidate with the largest reward averaged over all
    rows is acquired for every row at once; exact ties fall to the lowest
    feature index.  Columns already observed in any row are not candidates.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = model.target
    if mask is None:
        mask = np.zeros_like(x, dtype=bool)
    mask = np.atleast_2d(np.asarray(mask, dtype=bool)).copy()
    mask[:, t] = False
    remaining = [d for d in range(model.n_features)
                 if d != t and not mask[:, d].any()]
    order = []
    step = 0
    while remaining:
        if len(remaining) == 1:
            pick = remaining[0]         # no reward needed for a forced move
        else:
            step_seed = int(np.random.SeedSequence(
                [seed, 31, step]).generate_state(1)[0])
            rewards = [estimate_reward(model, x, mask, c,
                                       outer_samples=outer_samples,
                                       inner_samples=inner_samples,
                                       seed=step_seed).reward
                       for c in remaining]
            pick = remaining[int(np.argmax(rewards))]
        order.append(pick)
        mask[:, pick] = True
        remaining.remove(pick)
        step += 1
    return order


def _denormalize_column(col, values: np.ndarray) -> np.ndarray:
    if col.kind in CONTINUOUS_KINDS:
        return values * col.span + col.min
    return values


def information_curve(model, x, order, *, mask=None, mc_samples: int = 10,
                      seed: int = 0) -> InformationCurve:
    """Target RMSE as the features in ``order`` are revealed one by one.

    Revealed values are the rows' true cells.  Re-revealing an already
    observed feature changes nothing: the observed set, and with it the
    per-row prediction stream, is identical.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = model.target
    col = model.schema[t]
    if mask is None:
        mask = np.zeros_like(x, dtype=bool)
    mask = np.atleast_2d(np.asarray(mask, dtype=bool)).copy()
    mask[:, t] = False
    truth = _denormalize_column(col, x[:, t])

    def step_rmse():
        points, _ = model.predict_target(x, mask, mc_samples=mc_samples,
                                         master_seed=seed)
        est = _denormalize_column(col, points)
        return float(np.sqrt(np.mean((est - truth) ** 2)))

    steps, errs, acquired = [0], [step_rmse()], [None]
    for k, c in enumerate(order, start=1):
        c = int(c)
        if c == t:
            raise ValueError("the prediction target cannot be acquired")
        mask[:, c] = True
        steps.append(k)
        errs.append(step_rmse())
        acquired.append(c)
    return InformationCurve(steps, errs, acquired, int(seed))


def auic(curve) -> float:
    """Area under the error curve, trapezoidal with unit step spacing."""
    vals = curve.rmse if isinstance(curve, InformationCurve) else curve
    vals = np.asarray(vals, dtype=np.float64)
    if vals.size < 2:
        raise ValueError("curve needs at least 2 steps")
    return float(np.trapezoid(vals))


def normalize_auics(values: dict) -> dict:
    """Divide each area by the group mean so the results average to one."""
    mean = float(np.mean(list(values.values())))
    return {k: float(v) / mean for k, v in values.items()}
