# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Distillation from file-supplied teacher logits
#
# The student never talks to a live teacher: any model that can emit
# per-example intent logits and per-token slot logits into the JSONL
# format can teach. Here the teacher is a larger encoder of the same
# family, trained on the supervised split; its logits label both the
# supervised queries and an unlabeled augmented pool.
#
# Scaling the teacher logits by s before the softmax reshapes only the
# teacher's distribution (s<1 softens, s>1 sharpens); the student always
# trains at temperature 1, and the teacher's argmax never moves.

# %%
import tempfile
from pathlib import Path

import numpy as np

from pqrnn.data import (
    LabelSchema,
    load_augmented,
    load_dataset,
    make_synthetic_grammar,
    merge_augmented,
    write_teacher_logits,
)
from pqrnn.encoder import EncoderConfig
from pqrnn.model import PqrnnModel, export_teacher_logits
from pqrnn.projection import ProjectionConfig
from pqrnn.training import TrainConfig, entropy, evaluate, scale_teacher_logits, train_loop

workdir = Path(tempfile.mkdtemp())
paths = make_synthetic_grammar(seed=77, n_examples=400, n_intents=5, n_slot_types=8,
                               out_dir=workdir, augmented_factor=2)
schema = LabelSchema.load(paths["schema"])
train, _ = load_dataset(paths["train"], schema)
dev, _ = load_dataset(paths["dev"], schema)
aug = load_augmented(paths["augmented"])

# %% [markdown]
# Scaling in isolation: argmax is invariant, entropy decreases with s.

# %%
logits = np.array([2.0, 0.5, -1.0])
for s in (0.25, 0.5, 1.0, 2.0):
    d = scale_teacher_logits(logits, s)
    print(f"s={s:<5}: dist={np.round(d, 3)}  argmax={d.argmax()}  entropy={entropy(d):.3f}")

# %% [markdown]
# Teacher: a bigger encoder trained on the 400 supervised examples.

# %%
teacher = PqrnnModel(
    ProjectionConfig(feature_dim=512),
    EncoderConfig(feature_dim=512, bottleneck_dim=128, state_size=64, num_layers=2,
                  zoneout_base=0.1, projection_dropout=0.2, quantize=False),
    schema,
    seed=1,
)
train_loop(train, dev, teacher, TrainConfig(steps=600, batch_size=64, eval_every=300, seed=1))
print("teacher dev:", evaluate(teacher, dev))

# %% [markdown]
# Export logits for the supervised queries, the augmented pool, and the
# dev set (dev logits feed the soft-loss curve), then distill a student
# at augment ratio 1.

# %%
records = {r.id: r for r in export_teacher_logits(teacher, train + aug + dev)}
write_teacher_logits(records.values(), workdir / "teacher_logits.jsonl")
print(f"wrote {len(records)} teacher records")

student = PqrnnModel(
    ProjectionConfig(feature_dim=256),
    EncoderConfig(feature_dim=256, bottleneck_dim=64, state_size=32, num_layers=2,
                  zoneout_base=0.1, projection_dropout=0.2, quantize=True),
    schema,
    seed=2,
)
merged = merge_augmented(train, aug, ratio=1, seed=2)
config = TrainConfig(steps=800, batch_size=64, eval_every=200, seed=2,
                     distill_mode="soft_only", teacher_logit_scale=1.0)
_, history = train_loop(merged, dev, student, config,
                        teacher_records=records, dev_teacher_records=records)
for row in history:
    print(f"step {row['step']:4d}  dev EM {row['dev_exact_match']:.3f}  dev soft loss {row['dev_soft_loss']:.4f}")
print("student dev:", evaluate(student, dev))
print(f"student/teacher EM ratio: "
      f"{evaluate(student, dev)['exact_match'] / evaluate(teacher, dev)['exact_match']:.3f}")
