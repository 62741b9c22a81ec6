# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Inside the encoder: fo-pooling, masked batch norm, zoneout, quantization
#
# A QRNN layer computes its Z/F/O gates with a causal convolution (no
# recurrence in the gate computation) and only the cheap elementwise
# fo-pooling scan runs sequentially:
#
#     c_t = f_t * c_{t-1} + (1 - f_t) * z_t,    h_t = o_t * c_t

# %%
import numpy as np

from pqrnn.encoder import (
    BatchNormState,
    QuantRange,
    fake_quantize,
    fo_pool,
    masked_batch_norm,
    zoneout_schedule,
)
from pqrnn.tensor import Tensor

z = Tensor(np.array([[1.0], [1.0], [1.0], [1.0]]))
for f0 in (0.0, 0.5, 0.9):
    f = Tensor(np.full((4, 1), f0))
    c = fo_pool(z, f, np.ones(4))
    print(f"f={f0}: c = {np.round(c.data[:, 0], 4)}")

# %% [markdown]
# The forget gate interpolates between memoryless (f=0 gives c=z) and
# frozen (f=1 keeps the initial state).
#
# ## Batch statistics that ignore padding
#
# Padded batches would otherwise pull every channel's mean toward zero.
# Statistics here come from the valid positions only; the padded run of a
# short sequence stays exactly zero:

# %%
rng = np.random.default_rng(0)
x = np.zeros((2, 5, 3), dtype=np.float32)
x[0, :3] = rng.normal(size=(3, 3)) + 5.0  # length 3
x[1, :5] = rng.normal(size=(5, 3)) + 5.0  # length 5
mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=np.float32)

state = BatchNormState(3, momentum=0.0)
out = masked_batch_norm(Tensor(x), mask, state, training=True)
print("batch mean seen by the normalizer:", np.round(state.running_mean, 3))
print("output at a padded position:", out.data[0, 3])

rows = np.concatenate([x[0, :3], x[1, :5]])
print("oracle mean over unpadded rows:  ", np.round(rows.mean(axis=0), 3))

# %% [markdown]
# ## Layer-decaying zoneout
#
# Regularization pressure is highest where the network has the most
# capacity to compensate — the schedule b^l halves it (for b=0.5) at
# each layer:

# %%
for layer in range(1, 5):
    print(f"layer {layer}: zoneout p = {zoneout_schedule(0.5, layer, 4):.4f}")

# %% [markdown]
# ## Simulated 8-bit quantization
#
# Training runs with the deployment-time rounding in the forward pass
# (straight-through gradients), so the weights learn to live on the 8-bit
# grid. The error is bounded by half a quantization step:

# %%
qr = QuantRange()
qr.observe(np.array([-1.0, 1.0]))
x = np.linspace(-1, 1, 9)
q = fake_quantize(Tensor(x), qr)
step = (qr.max - qr.min) / 255
print("x:", np.round(x, 3))
print("q:", np.round(q.data, 3))
print(f"max |q - x| = {np.abs(q.data - x).max():.5f} <= step/2 = {step / 2:.5f}")
