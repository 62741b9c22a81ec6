# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Embedding-free token projection
#
# Each token is hashed into 2N pseudo-random bits, and consecutive bit
# pairs map onto {-1, 0, +1}: {00, 01, 10, 11} -> {-1, 0, 0, +1}. No
# vocabulary, no embedding table — the representation is computed on the
# fly and is identical on every platform.
#
# Three properties make this usable as a feature space:
# 1. symmetric value distribution: P(0)=1/2, P(-1)=P(+1)=1/4,
# 2. projections of distinct tokens are near-orthogonal,
# 3. squared norms concentrate at N/2.

# %%
import numpy as np

from pqrnn.projection import ProjectionConfig, fingerprint, project_token, ternary_map

config = ProjectionConfig(feature_dim=1024)
vec = project_token("flight", config)
print("feature vector:", vec.shape, "values:", np.unique(vec))

# %% [markdown]
# Similar tokens get completely different fingerprints (avalanche):

# %%
a = fingerprint("flight", nbits=2048)
b = fingerprint("flights", nbits=2048)
print(f"differing bits between 'flight' and 'flights': {np.mean(a != b):.1%}")

# %% [markdown]
# The balanced surjection and its ablation variant:

# %%
bits = np.array([0, 0, 0, 1, 1, 0, 1, 1], dtype=np.uint8)
print("pairs 00 01 10 11, balanced:  ", ternary_map(bits, "balanced"))
print("pairs 00 01 10 11, unbalanced:", ternary_map(bits, "unbalanced"))

# %% [markdown]
# Empirical check of the three distribution properties over random tokens:

# %%
rng = np.random.default_rng(0)
letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
tokens = ["".join(rng.choice(letters, size=rng.integers(2, 12))) for _ in range(4000)]
vectors = np.stack([project_token(t, config) for t in tokens]).astype(np.float64)

values = vectors.ravel()
print(f"P(0)  = {np.mean(values == 0):.4f}   (expect 0.50)")
print(f"P(+1) = {np.mean(values == 1):.4f}   (expect 0.25)")
print(f"P(-1) = {np.mean(values == -1):.4f}  (expect 0.25)")

dots = np.einsum("ij,ij->i", vectors[:2000], vectors[2000:])
print(f"mean normalized dot of random pairs = {np.mean(dots) / config.feature_dim:+.5f} (expect ~0)")
print(f"mean squared norm = {np.mean((vectors ** 2).sum(axis=1)):.1f} (expect N/2 = {config.feature_dim / 2})")

# %% [markdown]
# Prefix/suffix segments: tokens sharing a prefix share that segment of
# the feature vector exactly, which is what lets the encoder generalize
# across inflections.

# %%
whole, prefix, suffix = config.segment_dims()
va = project_token("unhappy", config)
vb = project_token("unhelpful", config)
agreement = np.mean(va[whole : whole + prefix] == vb[whole : whole + prefix])
print(f"prefix-segment agreement between 'unhappy' and 'unhelpful': {agreement:.1%}")
