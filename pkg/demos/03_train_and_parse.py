# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Train a joint intent/slot parser on the synthetic grammar
#
# End-to-end walkthrough with the library API: generate data, train a
# reduced-size model, inspect the dev curve, and parse queries. The same
# flow is available from the command line:
#
#     pqrnn synth --out-dir data
#     pqrnn train --config config.json --out-dir run
#     pqrnn eval --checkpoint run/model.ckpt --data data/test.tsv
#     echo "book a flight" | pqrnn predict --checkpoint run/model.ckpt

# %%
import tempfile
from pathlib import Path

import numpy as np

from pqrnn.data import LabelSchema, load_dataset, make_synthetic_grammar
from pqrnn.encoder import EncoderConfig
from pqrnn.model import PqrnnModel
from pqrnn.projection import ProjectionConfig
from pqrnn.training import TrainConfig, evaluate, train_loop

workdir = Path(tempfile.mkdtemp())
paths = make_synthetic_grammar(seed=7, n_examples=200, n_intents=5, n_slot_types=8, out_dir=workdir)
schema = LabelSchema.load(paths["schema"])
train, _ = load_dataset(paths["train"], schema)
dev, _ = load_dataset(paths["dev"], schema)
print(f"{len(train)} train / {len(dev)} dev examples, {schema.num_intents} intents, {schema.num_args} BIO labels")
print("sample:", " ".join(train[0].tokens), "->", train[0].intent, train[0].slots)

# %% [markdown]
# A reduced configuration (N=256, B=64, S=32, L=2) trains in about a
# minute on one core; the full-size model (N=1024, B=256, S=128, L=4)
# uses the same code paths.

# %%
encoder = EncoderConfig(
    feature_dim=256,
    bottleneck_dim=64,
    state_size=32,
    num_layers=2,
    zoneout_base=0.1,
    projection_dropout=0.2,
    quantize=True,
)
model = PqrnnModel(ProjectionConfig(feature_dim=256), encoder, schema, seed=0)
config = TrainConfig(steps=800, batch_size=64, eval_every=200, seed=0)
best_state, history = train_loop(train, dev, model, config)
for row in history:
    print(f"step {row['step']:4d}  loss {row['train_loss']:.4f}  dev EM {row['dev_exact_match']:.3f}")

# %% [markdown]
# The loop keeps the checkpoint with the best dev exact match. Scores on
# the held-out test split:

# %%
test, _ = load_dataset(paths["test"], schema)
print(evaluate(model, test))

# %% [markdown]
# Greedy joint parse: the intent comes from attention pooling; the slots
# are decoded conditioned on that intent (chain rule).

# %%
query = train[3].tokens
parse = model.predict(query)
print("query: ", " ".join(query))
print("intent:", schema.intents[parse.intent], f"(p={parse.intent_probs[parse.intent]:.3f})")
for token, label in zip(query, parse.slots):
    print(f"  {token:12s} {label}")
print("joint probability:", f"{parse.joint_probability():.4f}")
