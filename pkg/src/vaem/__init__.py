"""Two-stage VAE toolkit for heterogeneous tabular data.

Pipeline: per-column marginal VAEs fit each dimension's distribution on its
own scale; a dependency VAE over the stacked marginal latents captures the
joint structure behind a permutation-invariant partial inference network.
On top of the generative model sit missing-data imputation, conditional
generation, and sequential active information acquisition with an
information-theoretic reward.
"""

__version__ = "0.1.0"
