"""Losses, optimizer, schedules, teacher-logit scaling, and the train loop.

Training minimizes cross-entropy on the intent and the arguments (teacher
forced on the gold intent) plus L2 decay on the trainable parameters
excluding batch-norm scale/shift. Distillation replaces the hard targets
with softmax(s * teacher_logits): the scale s reshapes only the teacher's
distribution, the student always trains at temperature 1. The loop
evaluates the development set continuously and keeps the checkpoint with
the best exact match, ties resolved toward the earlier step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .data import LabeledBatch, make_batch, metrics
from .errors import ConfigError, InputError
from .model import PqrnnModel
from .tensor import GradientTape, Tensor, cross_entropy

DISTILL_MODES = ("off", "soft_only", "soft_plus_hard")


@dataclass
class TrainConfig:
    """Optimizer and loop settings.

    The defaults are the full-scale recipe (60k steps at batch 4096);
    desk-scale runs override steps/batch_size/eval_every, typically
    5000/64/100.
    """

    base_lr: float = 1e-3
    lr_decay_rate: float = 0.9
    lr_decay_steps: int = 1000
    l2_scale: float = 1e-5
    steps: int = 60000
    batch_size: int = 4096
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-7
    eval_every: int = 1000
    teacher_logit_scale: float = 1.0
    distill_mode: str = "off"
    seed: int = 0

    def __post_init__(self):
        for name in ("base_lr", "lr_decay_rate", "adam_epsilon", "teacher_logit_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_decay_steps", "steps", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.l2_scale < 0:
            raise ConfigError(f"l2_scale must be >= 0, got {self.l2_scale}")
        if self.distill_mode not in DISTILL_MODES:
            raise ConfigError(f"distill_mode must be one of {DISTILL_MODES}")


def lr_at(config: TrainConfig, step: int) -> float:
    """Continuous exponential decay: base * rate^(step / decay_steps)."""
    return config.base_lr * config.lr_decay_rate ** (step / config.lr_decay_steps)


class AdamState:
    """First/second moment accumulators, keyed by parameter name."""

    def __init__(self):
        self.m: dict = {}
        self.v: dict = {}
        self.step = 0


def adam_step(params: dict, state: AdamState, lr: float, config: TrainConfig) -> None:
    """One bias-corrected Adam update; NaN gradients abort loudly."""
    state.step += 1
    t = state.step
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name} at optimizer step {t}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def scale_teacher_logits(logits, s: float) -> np.ndarray:
    """softmax(s * logits) along the last axis, numerically stable.

    s < 1 softens the teacher's distribution, s > 1 sharpens it; the
    argmax never moves.
    """
    if s <= 0:
        raise ConfigError(f"teacher logit scale must be positive, got {s}")
    scaled = s * np.asarray(logits, dtype=np.float64)
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(dist: np.ndarray) -> np.ndarray:
    """Shannon entropy along the last axis (natural log)."""
    d = np.asarray(dist, dtype=np.float64)
    return -(d * np.log(np.clip(d, 1e-300, None))).sum(axis=-1)


def _l2_term(model: PqrnnModel, scale: float) -> Tensor:
    total = Tensor(np.zeros(()))
    for p in model.l2_parameters().values():
        total = tc.add(total, tc.reduce_sum(tc.mul(p, p)))
    return tc.mul(scale, total)


def _gold_slot_targets(batch: LabeledBatch) -> np.ndarray:
    # padded/unlabeled positions carry -1; they are masked out of the CE
    # mean but the index gather still needs a valid class id
    return np.where(batch.slot_ids >= 0, batch.slot_ids, 0)


def supervised_loss(batch: LabeledBatch, model: PqrnnModel, config: TrainConfig, training: bool = True, rng=None):
    """Intent CE + teacher-forced argument CE + L2 decay.

    Returns (loss tensor, forward outputs).
    """
    if not batch.has_gold.all():
        missing = [ex.id for ex, gold in zip(batch.examples, batch.has_gold) if not gold]
        raise InputError(f"supervised loss needs gold labels; missing on: {', '.join(missing[:10])}")
    out = model.forward_batch(
        batch.features, batch.mask, force_intents=batch.intent_ids, training=training, rng=rng
    )
    loss = cross_entropy(out["intent_logits"], batch.intent_ids)
    loss = tc.add(loss, cross_entropy(out["arg_logits"], _gold_slot_targets(batch), batch.mask))
    loss = tc.add(loss, _l2_term(model, config.l2_scale))
    return loss, out


def distill_loss(batch: LabeledBatch, model: PqrnnModel, config: TrainConfig, training: bool = True, rng=None):
    """Soft cross-entropy against scaled teacher targets (+ optional hard loss).

    Teacher forcing uses the gold intent where an example has one and the
    teacher's argmax intent otherwise. In soft_plus_hard mode the
    supervised loss is added with weight 1.0 on the gold-labeled examples.
    """
    if config.distill_mode == "off":
        raise ConfigError("distill_loss called with distill_mode 'off'")
    if batch.teacher_intent_logits is None or batch.teacher_slot_logits is None:
        raise InputError("distillation batch carries no teacher targets")
    s = config.teacher_logit_scale
    soft_intent = scale_teacher_logits(batch.teacher_intent_logits, s)
    soft_slots = scale_teacher_logits(batch.teacher_slot_logits, s)

    teacher_argmax = batch.teacher_intent_logits.argmax(axis=-1)
    force = np.where(batch.has_gold, batch.intent_ids, teacher_argmax)
    out = model.forward_batch(batch.features, batch.mask, force_intents=force, training=training, rng=rng)

    loss = cross_entropy(out["intent_logits"], soft_intent)
    loss = tc.add(loss, cross_entropy(out["arg_logits"], soft_slots, batch.mask))
    if config.distill_mode == "soft_plus_hard" and batch.has_gold.any():
        gold_mask = batch.has_gold.astype(batch.mask.dtype)
        loss = tc.add(loss, cross_entropy(out["intent_logits"], np.where(batch.intent_ids >= 0, batch.intent_ids, 0), gold_mask))
        loss = tc.add(
            loss,
            cross_entropy(out["arg_logits"], _gold_slot_targets(batch), batch.mask * gold_mask[:, None]),
        )
    loss = tc.add(loss, _l2_term(model, config.l2_scale))
    return loss, out


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: PqrnnModel, examples, batch_size: int = 256) -> dict:
    """Greedy-decode a labeled set and score it."""
    predictions = []
    gold = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        parses = model.predict_batch([ex.tokens for ex in chunk])
        for ex, parse in zip(chunk, parses):
            predictions.append((model.schema.intents[parse.intent], parse.slots))
            gold.append((ex.intent, ex.slots))
    return metrics(predictions, gold)


def soft_eval_loss(model: PqrnnModel, examples, records: dict, s: float, batch_size: int = 256) -> float:
    """Mean soft cross-entropy of the student against scaled teacher targets."""
    total = 0.0
    count = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = make_batch(chunk, model.schema, model.projection_config, records)
        soft_intent = scale_teacher_logits(batch.teacher_intent_logits, s)
        soft_slots = scale_teacher_logits(batch.teacher_slot_logits, s)
        force = batch.teacher_intent_logits.argmax(axis=-1)
        out = model.forward_batch(batch.features, batch.mask, force_intents=force)
        part = cross_entropy(out["intent_logits"], soft_intent).item()
        part += cross_entropy(out["arg_logits"], soft_slots, batch.mask).item()
        total += part * len(chunk)
        count += len(chunk)
    return total / count


class _BatchSampler:
    """Seeded shuffling batch source; reshuffles whenever a pass ends."""

    def __init__(self, examples, batch_size: int, rng: np.random.Generator):
        self.examples = list(examples)
        self.batch_size = min(batch_size, len(self.examples))
        self.rng = rng
        self._order = rng.permutation(len(self.examples))
        self._cursor = 0

    def next_batch(self) -> list:
        if self._cursor + self.batch_size > len(self.examples):
            self._order = self.rng.permutation(len(self.examples))
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return [self.examples[i] for i in idx]


def train_loop(
    train_examples,
    dev_examples,
    model: PqrnnModel,
    config: TrainConfig,
    teacher_records: dict | None = None,
    dev_teacher_records: dict | None = None,
    log_fn=None,
) -> tuple:
    """Run the training schedule, tracking the best dev exact match.

    Returns (best_state_arrays, history). The model is left loaded with the
    best checkpoint. ``log_fn`` (optional) receives each history row as it
    is produced. Distillation modes require ``teacher_records``; dev soft
    loss is reported when ``dev_teacher_records`` covers the dev set.
    """
    if not train_examples:
        raise InputError("train_loop: empty training set")
    if not dev_examples:
        raise InputError("train_loop: empty development set")
    distilling = config.distill_mode != "off"
    if distilling and teacher_records is None:
        raise InputError("distillation requires teacher records")

    shuffle_rng = np.random.default_rng([config.seed, 1])
    model_rng = np.random.default_rng([config.seed, 2])
    sampler = _BatchSampler(train_examples, config.batch_size, shuffle_rng)
    opt = AdamState()
    history = []
    best = {"exact_match": -1.0, "step": -1, "state": None}

    for step in range(1, config.steps + 1):
        examples = sampler.next_batch()
        batch = make_batch(examples, model.schema, model.projection_config, teacher_records if distilling else None)
        lr = lr_at(config, step - 1)
        with GradientTape() as tape:
            if distilling:
                loss, _ = distill_loss(batch, model, config, training=True, rng=model_rng)
            else:
                loss, _ = supervised_loss(batch, model, config, training=True, rng=model_rng)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise FloatingPointError(f"non-finite loss {loss_value} at step {step}")
        tape.backward(loss)
        adam_step(model.named_parameters(), opt, lr, config)
        model.zero_grads()

        if step % config.eval_every == 0 or step == config.steps:
            dev = evaluate(model, dev_examples)
            row = {
                "step": step,
                "train_loss": loss_value,
                "lr": lr,
                "dev_exact_match": dev["exact_match"],
                "dev_intent_acc": dev["intent_accuracy"],
                "dev_slot_f1": dev["slot_f1"],
            }
            if dev_teacher_records is not None:
                row["dev_soft_loss"] = soft_eval_loss(
                    model, dev_examples, dev_teacher_records, config.teacher_logit_scale
                )
            history.append(row)
            if log_fn is not None:
                log_fn(row)
            if dev["exact_match"] > best["exact_match"]:
                best = {
                    "exact_match": dev["exact_match"],
                    "step": step,
                    "state": model.state_arrays(),
                }

    model.load_state_arrays(best["state"])
    return best["state"], history
