"""Deterministic bundled datasets.

All tables are synthesized from seeded low-rank factor models with
heterogeneous mixed-type marginals, sized to run on a desktop CPU:

- ``housing``: 506 rows, 13 continuous + 1 categorical, continuous target.
- ``efficiency``: 768 rows, 6 continuous + 3 categorical, continuous target;
  smooth near-Gaussian marginals and simple dependencies.
- ``mixed8``: 1500 rows, one column per marginal shape of interest across
  all four column kinds.
- ``determined``: the target column is an exact copy of one feature and the
  remaining features are independent noise.
- ``binary_toy``: three binary features with strong / weak / no dependence
  on a binary target; small enough to cross-check rewards by enumeration.

When real CSVs with the same layouts are placed under ``data/`` the
evaluation suite prefers them; see README.
"""

from __future__ import annotations

import numpy as np

from .data import (
    CATEGORICAL,
    CONTINUOUS,
    DISCRETE,
    ORDINAL,
    ColumnSpec,
    Dataset,
)


def _rng(tag: int, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([990000 + tag, seed]))


def _rescale(u: np.ndarray, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    umin, umax = u.min(), u.max()
    return lo + (hi - lo) * (u - umin) / (umax - umin)


def _sample_classes(rng, probs: np.ndarray) -> np.ndarray:
    """Vectorized draw from per-row class probabilities (n, V)."""
    cum = probs.cumsum(axis=1)
    u = rng.uniform(size=(probs.shape[0], 1))
    return (u > cum).sum(axis=1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def make_housing(seed: int = 0, n: int = 506) -> Dataset:
    """Rank-3 mixed table in the style of a small urban survey.

    Marginals cover the awkward shapes real tabular data shows: exact-zero
    inflation, mass piled on range caps, values quantized onto a few
    levels, concentration near one end, and smooth unimodal spreads.  All
    columns share three latent factors with little independent noise, so
    tight cross-column structure is there to be found."""
    rng = _rng(1, seed)
    f = rng.normal(size=(n, 3))

    def mix(*w):
        v = np.asarray(w, dtype=np.float64)
        return f @ (v / np.linalg.norm(v))

    def levels(u, edges, values):
        idx = np.searchsorted(edges, u)
        return np.asarray(values, dtype=np.float64)[idx]

    cols = [
        # concentrated near zero with a long right tail
        np.minimum(np.exp(1.6 * mix(0.9, 0.3, -0.2) - 2.8)
                   + 0.002 * np.abs(rng.normal(size=n)), 1.0),
        # mostly exact zeros; the active minority sits mid-range
        np.where(mix(0.2, 1.0, 0.1) < 0.6, 0.0,
                 np.clip(0.35 + 0.3 * np.tanh(mix(0.2, 1.0, 0.1) - 1.0)
                         + rng.normal(scale=0.006, size=n), 0.05, 1.0)),
        # two tight bands
        np.clip(np.where(mix(-0.4, 0.7, 0.6) > 0.15, 0.55, 0.08)
                + rng.normal(scale=0.008, size=n), 0.0, 1.0),
        # smooth, mildly squashed
        np.clip(0.5 + 0.22 * np.tanh(1.2 * mix(1.0, -0.3, 0.4))
                + rng.normal(scale=0.008, size=n), 0.0, 1.0),
        # near-Gaussian spread
        np.clip(0.5 + 0.11 * mix(0.5, 0.5, -0.7)
                + rng.normal(scale=0.008, size=n), 0.0, 1.0),
        # reverse-J with a thick pile on the top cap
        np.clip(np.minimum(0.05 + 1.1 * _phi(1.2 * mix(-0.8, 0.4, 0.5) + 0.4)
                           + rng.normal(scale=0.006, size=n), 1.0), 0.0, 1.0),
        # right-skewed
        np.clip(0.08 + 0.8 * _phi(mix(0.7, -0.6, 0.2)) ** 2
                + rng.normal(scale=0.008, size=n), 0.0, 1.0),
        # quantized onto five levels, heavy top level
        np.clip(levels(mix(0.3, 0.2, 1.0), (-0.85, -0.1, 0.55, 1.15),
                       (0.0, 0.13, 0.26, 0.39, 1.0))
                + rng.normal(scale=0.003, size=n), 0.0, 1.0),
        # quantized onto four levels
        np.clip(levels(mix(-0.2, 1.0, -0.5), (-0.5, 0.25, 0.75),
                       (0.09, 0.21, 0.33, 0.78))
                + rng.normal(scale=0.003, size=n), 0.0, 1.0),
        # packed against the top with a left tail and exact-cap mass
        np.clip(np.minimum(1.02 - 0.55 * _phi(-1.1 * mix(0.6, 0.6, 0.4)) ** 1.7
                           + rng.normal(scale=0.006, size=n), 1.0), 0.0, 1.0),
        # skewed smooth spread
        np.clip(0.05 + 0.75 * _phi(0.9 * mix(-0.7, -0.2, 0.7) + 0.2) ** 1.8
                + rng.normal(scale=0.008, size=n), 0.0, 1.0),
        # plateau: a fifth of the rows snap to one shelf value
        np.clip(np.where(mix(0.1, -0.9, 0.5) > 0.85, 0.88,
                         0.35 + 0.4 * _phi(1.5 * mix(0.1, -0.9, 0.5)))
                + rng.normal(scale=0.006, size=n), 0.0, 1.0),
    ]
    specs = [ColumnSpec(name=f"c{j:02d}", kind=CONTINUOUS, min=0.0, max=1.0)
             for j in range(12)]

    value = np.clip(np.minimum(0.45 + 0.27 * np.tanh(1.1 * mix(0.8, 0.5, 0.3))
                               + 0.06 * f[:, 0]
                               + rng.normal(scale=0.012, size=n), 1.0), 0.0, 1.0)
    cols.append(value)
    specs.append(ColumnSpec(name="value", kind=CONTINUOUS, min=0.0, max=50.0,
                            is_target=True))

    # rare factor-linked flag, roughly a twelfth of the rows
    p_west = 1.0 / (1.0 + np.exp(-(2.4 * mix(0.4, -0.5, 0.8) - 3.8)))
    group = (rng.uniform(size=n) < p_west).astype(np.float64)
    cols.append(group)
    specs.append(ColumnSpec(name="group", kind=CATEGORICAL,
                            class_labels=("east", "west")))

    cells = np.column_stack(cols)
    return Dataset(tuple(specs), cells, np.ones_like(cells, dtype=bool))


def make_efficiency(seed: int = 0, n: int = 768) -> Dataset:
    """Smooth low-rank table where a flat VAE should do as well as the
    two-stage model: near-Gaussian marginals, mild dependencies."""
    rng = _rng(2, seed)
    f = rng.normal(size=(n, 2))

    cols, specs = [], []
    for j in range(5):
        w = rng.normal(size=2)
        w /= np.linalg.norm(w)
        u = (f @ w) + 0.25 * np.tanh(f[:, j % 2])
        x = np.clip(_rescale(u, 0.08, 0.92) + rng.normal(scale=0.02, size=n), 0.0, 1.0)
        cols.append(x)
        specs.append(ColumnSpec(name=f"e{j}", kind=CONTINUOUS, min=0.0, max=1.0))

    w = rng.normal(size=2)
    w /= np.linalg.norm(w)
    load = np.clip(0.5 + 0.27 * np.tanh(1.1 * (f @ w)) + rng.normal(scale=0.02, size=n),
                   0.0, 1.0)
    cols.append(load)
    specs.append(ColumnSpec(name="load", kind=CONTINUOUS, min=0.0, max=45.0,
                            is_target=True))

    orient = rng.integers(0, 4, size=n)
    cols.append(orient.astype(float))
    specs.append(ColumnSpec(name="orient", kind=CATEGORICAL,
                            class_labels=("e", "n", "s", "w")))

    shape_logits = 1.2 * (f @ rng.normal(size=(2, 4)))
    shape = _sample_classes(rng, _softmax(shape_logits))
    cols.append(shape.astype(float))
    specs.append(ColumnSpec(name="shape", kind=CATEGORICAL,
                            class_labels=("l", "t", "u", "x")))

    glaze_logits = 0.8 * (f @ rng.normal(size=(2, 3)))
    glaze = _sample_classes(rng, _softmax(glaze_logits))
    cols.append(glaze.astype(float))
    specs.append(ColumnSpec(name="glazing", kind=CATEGORICAL,
                            class_labels=("high", "low", "mid")))

    cells = np.column_stack(cols)
    return Dataset(tuple(specs), cells, np.ones_like(cells, dtype=bool))


def make_mixed8(seed: int = 0, n: int = 1500) -> Dataset:
    """Independent columns covering all four kinds and awkward marginal
    shapes (skew, bimodal, heavy tail, concentration)."""
    rng = _rng(3, seed)
    cols, specs = [], []

    u = rng.normal(size=n)
    cols.append(np.clip(_phi(u) ** 2.2, 0.0, 1.0))
    specs.append(ColumnSpec(name="skew", kind=CONTINUOUS, min=0.0, max=1.0))

    side = rng.uniform(size=n) < 0.45
    bim = np.where(side, rng.normal(0.30, 0.07, size=n), rng.normal(0.72, 0.06, size=n))
    cols.append(np.clip(bim, 0.0, 1.0))
    specs.append(ColumnSpec(name="bimodal", kind=CONTINUOUS, min=0.0, max=1.0))

    cols.append(np.minimum(rng.exponential(0.18, size=n), 0.999))
    specs.append(ColumnSpec(name="tail", kind=CONTINUOUS, min=0.0, max=1.0))

    cols.append(np.clip(rng.normal(0.5, 0.05, size=n), 0.0, 1.0))
    specs.append(ColumnSpec(name="tight", kind=CONTINUOUS, min=0.0, max=1.0,
                            is_target=True))

    cols.append(rng.choice(3, size=n, p=[0.6, 0.3, 0.1]).astype(float))
    specs.append(ColumnSpec(name="cat3", kind=CATEGORICAL, class_labels=("a", "b", "c")))

    cols.append(rng.choice(4, size=n, p=[0.4, 0.3, 0.2, 0.1]).astype(float))
    specs.append(ColumnSpec(name="cat4", kind=CATEGORICAL,
                            class_labels=("p", "q", "r", "s")))

    grid = np.arange(11) / 10.0
    weights = np.array([_binom_pmf(10, k, 0.35) for k in range(11)])
    cols.append(rng.choice(grid, size=n, p=weights / weights.sum()))
    specs.append(ColumnSpec(name="grid11", kind=DISCRETE, min=0.0, max=1.0,
                            grid=tuple(grid)))

    cols.append(rng.choice(5, size=n, p=[0.15, 0.2, 0.3, 0.25, 0.1]).astype(float))
    specs.append(ColumnSpec(name="ord5", kind=ORDINAL, level_count=5))

    cells = np.column_stack(cols)
    return Dataset(tuple(specs), cells, np.ones_like(cells, dtype=bool))


def make_determined(seed: int = 0, n: int = 700) -> Dataset:
    """The target equals feature ``key`` exactly; everything else is noise."""
    rng = _rng(4, seed)
    key = rng.uniform(0.05, 0.95, size=n)
    cols = [key]
    specs = [ColumnSpec(name="key", kind=CONTINUOUS, min=0.0, max=1.0)]
    for j in range(3):
        cols.append(np.clip(rng.normal(0.5, 0.18, size=n), 0.0, 1.0))
        specs.append(ColumnSpec(name=f"n{j + 1}", kind=CONTINUOUS, min=0.0, max=1.0))
    cols.append(rng.integers(0, 3, size=n).astype(float))
    specs.append(ColumnSpec(name="n4", kind=CATEGORICAL, class_labels=("x", "y", "z")))
    cols.append(key.copy())
    specs.append(ColumnSpec(name="resp", kind=CONTINUOUS, min=0.0, max=10.0,
                            is_target=True))
    cells = np.column_stack(cols)
    return Dataset(tuple(specs), cells, np.ones_like(cells, dtype=bool))


def make_binary_toy(seed: int = 0, n: int = 900) -> Dataset:
    """Binary target with strongly / weakly / un-related binary features."""
    rng = _rng(5, seed)
    flag = rng.integers(0, 2, size=n)
    strong = np.where(rng.uniform(size=n) < 0.05, 1 - flag, flag)
    med = np.where(rng.uniform(size=n) < 0.25, 1 - flag, flag)
    noise = rng.integers(0, 2, size=n)
    cells = np.column_stack([strong, med, noise, flag]).astype(float)
    two = ("no", "yes")
    specs = (
        ColumnSpec(name="b_strong", kind=CATEGORICAL, class_labels=two),
        ColumnSpec(name="b_med", kind=CATEGORICAL, class_labels=two),
        ColumnSpec(name="b_noise", kind=CATEGORICAL, class_labels=two),
        ColumnSpec(name="flag", kind=CATEGORICAL, class_labels=two, is_target=True),
    )
    return Dataset(specs, cells, np.ones_like(cells, dtype=bool))


def make_correlated_pair(seed: int = 0, n: int = 1200, noise: float = 0.05) -> Dataset:
    """Two continuous columns with x2 = x1 + small noise."""
    rng = _rng(6, seed)
    x1 = rng.uniform(0.08, 0.92, size=n)
    x2 = np.clip(x1 + rng.normal(scale=noise, size=n), 0.0, 1.0)
    specs = (
        ColumnSpec(name="x1", kind=CONTINUOUS, min=0.0, max=1.0),
        ColumnSpec(name="x2", kind=CONTINUOUS, min=0.0, max=1.0, is_target=True),
    )
    cells = np.column_stack([x1, x2])
    return Dataset(specs, cells, np.ones_like(cells, dtype=bool))


def _phi(u: np.ndarray) -> np.ndarray:
    """Standard normal CDF."""
    from math import erf, sqrt
    return 0.5 * (1.0 + np.vectorize(erf)(u / sqrt(2.0)))


def _binom_pmf(n: int, k: int, p: float) -> float:
    from math import comb
    return comb(n, k) * p ** k * (1 - p) ** (n - k)


BUNDLED = {
    "housing": make_housing,
    "efficiency": make_efficiency,
    "mixed8": make_mixed8,
    "determined": make_determined,
    "binary_toy": make_binary_toy,
}


def load_bundled(name: str, seed: int = 0) -> Dataset:
    try:
        builder = BUNDLED[name]
    except KeyError:
        raise KeyError(f"unknown bundled dataset {name!r}; "
                       f"available: {sorted(BUNDLED)}") from None
    return builder(seed=seed)
