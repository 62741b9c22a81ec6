"""Joint intent/argument heads over the encoder output, and the full model.

The joint probability decomposes by chain rule:
P(intent, args | query) = P(args | intent, query) * P(intent | query).
The intent distribution comes from attention pooling of the encoder output
followed by a linear classifier; the argument head adds an
intent-conditioned bias column to every token's logits. Training uses
teacher forcing (the gold intent selects the bias); inference conditions
on the argmax intent.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .data import LabelSchema
from .encoder import EncoderConfig, EncoderParams, QuantRange, encode_features, _maybe_quantize
from .errors import CheckpointError, ConfigError, InputError, ShapeError
from .projection import ProjectionConfig, project_token
from .tensor import Tensor

CHECKPOINT_FORMAT = "pqrnn-ckpt-v1"


@dataclass
class ParseOutput:
    """Greedy parse of one query."""

    intent_probs: np.ndarray  # [I]
    arg_probs: np.ndarray  # [T, A]
    intent: int
    slots: list  # T BIO labels after transition repair

    def joint_probability(self) -> float:
        """P(argmax intent, argmax slots | query) under the chain rule."""
        slot_ids = self.arg_probs.argmax(axis=-1)
        p = float(self.intent_probs[self.intent])
        for t, s in enumerate(slot_ids):
            p *= float(self.arg_probs[t, s])
        return p


class HeadParams:
    """Attention pooling vector, intent classifier, and argument projection."""

    def __init__(self, two_s: int, n_intents: int, n_args: int, rng: np.random.Generator):
        def glorot(shape, fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)

        self.w_pool = glorot((two_s,), two_s, 1)
        self.w_intent = glorot((two_s, n_intents), two_s, n_intents)
        self.w_arg = glorot((two_s, n_args), two_s, n_args)
        self.b_arg = Tensor(np.zeros(n_args), requires_grad=True)
        # intent-conditioned argument bias, [A, I]; zero start = no coupling
        self.intent_arg_bias = Tensor(np.zeros((n_args, n_intents)), requires_grad=True)
        self.qranges = {name: QuantRange() for name in ("w_pool", "w_intent", "w_arg", "intent_arg_bias")}

    def named_parameters(self) -> dict:
        return {
            "head.w_pool": self.w_pool,
            "head.w_intent": self.w_intent,
            "head.w_arg": self.w_arg,
            "head.b_arg": self.b_arg,
            "head.intent_arg_bias": self.intent_arg_bias,
        }


def intent_head(O, mask, params: HeadParams, config: EncoderConfig | None = None, training: bool = False):
    """Attention-pooled intent distribution.

    Pooling weights are a softmax over valid timesteps of w_pool . O_t; the
    pooled vector feeds a linear classifier. Returns (probs, logits), both
    [batch, I] (or [I] for a single sequence).
    """
    O = tc.as_tensor(O)
    squeeze = O.ndim == 2
    if squeeze:
        O = tc.reshape(O, (1,) + O.shape)
        mask = np.asarray(mask)[None]
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(O.data.dtype)
    batch, T, two_s = O.shape
    if mask.shape != (batch, T):
        raise ShapeError(f"intent_head: mask {mask.shape} does not match output {O.shape}")
    if (mask.sum(axis=1) == 0).any():
        raise InputError("intent_head: a sequence has no valid timesteps")

    w_pool = params.w_pool
    w_intent = params.w_intent
    if config is not None and config.quantize:
        w_pool = _maybe_quantize(w_pool, params.qranges["w_pool"], config, training)
        w_intent = _maybe_quantize(w_intent, params.qranges["w_intent"], config, training)

    scores = tc.reshape(tc.matmul(tc.reshape(O, (batch * T, two_s)), tc.reshape(w_pool, (two_s, 1))), (batch, T))
    # additive mask: exp(-1e9 - max) underflows to exactly zero weight
    scores = tc.add(scores, Tensor((mask - 1.0) * 1e9))
    alpha = tc.softmax(scores, axis=-1)
    weighted = tc.mul(tc.expand(tc.reshape(alpha, (batch, T, 1)), (batch, T, two_s)), O)
    pooled = tc.reduce_sum(weighted, axis=1)
    logits = tc.matmul(pooled, w_intent)
    probs = tc.softmax(logits, axis=-1)
    if squeeze:
        return tc.reshape(probs, probs.shape[1:]), tc.reshape(logits, logits.shape[1:])
    return probs, logits


def argument_head(O, delta, params: HeadParams, config: EncoderConfig | None = None, training: bool = False):
    """Per-token argument distributions conditioned on an intent.

    ``delta`` is a distribution over intents ([batch, I] or [I]); its
    product with the bias matrix shifts every timestep's logits the same
    way. Returns (probs, logits) of shape [batch, T, A] (or [T, A]).
    """
    O = tc.as_tensor(O)
    delta = tc.as_tensor(delta)
    squeeze = O.ndim == 2
    if squeeze:
        O = tc.reshape(O, (1,) + O.shape)
        delta = tc.reshape(delta, (1,) + delta.shape)
    batch, T, two_s = O.shape
    n_args, n_intents = params.intent_arg_bias.shape
    if delta.shape != (batch, n_intents):
        raise ShapeError(
            f"argument_head: delta {delta.shape} does not match intent count {n_intents}"
        )
    if not np.allclose(delta.data.sum(axis=-1), 1.0, atol=1e-3):
        raise InputError("argument_head: delta must sum to 1")

    w_arg = params.w_arg
    bias_matrix = params.intent_arg_bias
    if config is not None and config.quantize:
        w_arg = _maybe_quantize(w_arg, params.qranges["w_arg"], config, training)
        bias_matrix = _maybe_quantize(bias_matrix, params.qranges["intent_arg_bias"], config, training)

    token_logits = tc.matmul(tc.reshape(O, (batch * T, two_s)), w_arg)
    token_logits = tc.add(token_logits, tc.expand(tc.reshape(params.b_arg, (1, n_args)), (batch * T, n_args)))
    intent_bias = tc.matmul(delta, tc.transpose(bias_matrix))  # [batch, A]
    full = tc.add(
        tc.reshape(token_logits, (batch, T, n_args)),
        tc.expand(tc.reshape(intent_bias, (batch, 1, n_args)), (batch, T, n_args)),
    )
    probs = tc.softmax(full, axis=-1)
    if squeeze:
        return tc.reshape(probs, probs.shape[1:]), tc.reshape(full, full.shape[1:])
    return probs, full


class PqrnnModel:
    """Projection config + encoder stack + heads + label schema."""

    def __init__(
        self,
        projection_config: ProjectionConfig,
        encoder_config: EncoderConfig,
        schema: LabelSchema,
        seed: int = 0,
    ):
        if projection_config.feature_dim != encoder_config.feature_dim:
            raise ConfigError(
                f"projection feature_dim {projection_config.feature_dim} != "
                f"encoder feature_dim {encoder_config.feature_dim}"
            )
        self.projection_config = projection_config
        self.encoder_config = encoder_config
        self.schema = schema
        self.seed = seed
        rng = np.random.default_rng([seed, 0x5EED])
        self.encoder_params = EncoderParams(encoder_config, rng)
        self.heads = HeadParams(
            2 * encoder_config.state_size, schema.num_intents, schema.num_args, rng
        )

    # -- parameter plumbing --------------------------------------------------

    def named_parameters(self) -> dict:
        params = self.encoder_params.named_parameters()
        params.update(self.heads.named_parameters())
        return params

    def l2_parameters(self) -> dict:
        """Weight-decay set: trainable parameters minus BN scale/shift."""
        return {k: v for k, v in self.named_parameters().items() if ".bn." not in k}

    def named_quant_ranges(self) -> dict:
        ranges = self.encoder_params.named_quant_ranges()
        ranges.update({f"head.{k}": v for k, v in self.heads.qranges.items()})
        return ranges

    def zero_grads(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def count_trainable(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    # -- forward passes --------------------------------------------------------

    def forward_batch(self, features, mask, force_intents=None, training: bool = False, rng=None) -> dict:
        """Run encoder + both heads on a padded feature batch.

        ``force_intents`` (int array, -1 for "no forcing") selects the
        argument head's conditioning intent per example; unforced examples
        condition on the argmax of the predicted intent distribution, as at
        inference. Returns intent/argument probs and logits.
        """
        x = tc.as_tensor(features)
        O = encode_features(x, mask, self.encoder_params, training=training, rng=rng)
        intent_probs, intent_logits = intent_head(O, mask, self.heads, self.encoder_config, training)
        n_intents = self.schema.num_intents
        chosen = intent_probs.data.argmax(axis=-1)
        if force_intents is not None:
            force = np.asarray(force_intents)
            chosen = np.where(force >= 0, force, chosen)
        delta = np.zeros((x.shape[0], n_intents), dtype=x.data.dtype)
        delta[np.arange(x.shape[0]), chosen] = 1.0
        arg_probs, arg_logits = argument_head(O, Tensor(delta), self.heads, self.encoder_config, training)
        return {
            "encoder_output": O,
            "intent_probs": intent_probs,
            "intent_logits": intent_logits,
            "arg_probs": arg_probs,
            "arg_logits": arg_logits,
            "delta": delta,
        }

    def features_for(self, examples_tokens, dtype=np.float32):
        """Project and pad raw token lists into (features, mask)."""
        batch = len(examples_tokens)
        T = max(len(t) for t in examples_tokens)
        features = np.zeros((batch, T, self.projection_config.feature_dim), dtype=dtype)
        mask = np.zeros((batch, T), dtype=dtype)
        for b, tokens in enumerate(examples_tokens):
            for t, token in enumerate(tokens):
                features[b, t] = project_token(token, self.projection_config)
            mask[b, : len(tokens)] = 1.0
        return features, mask

    def predict(self, tokens) -> ParseOutput:
        """Greedy joint parse of one token list (inference mode)."""
        features, mask = self.features_for([list(tokens)])
        out = self.forward_batch(features, mask)
        return self._decode(out, 0, len(tokens))

    def predict_batch(self, token_lists) -> list:
        if not token_lists:
            return []
        features, mask = self.features_for([list(t) for t in token_lists])
        out = self.forward_batch(features, mask)
        return [self._decode(out, b, len(tokens)) for b, tokens in enumerate(token_lists)]

    def _decode(self, out: dict, b: int, n_tokens: int) -> ParseOutput:
        intent_probs = out["intent_probs"].data[b]
        arg_probs = out["arg_probs"].data[b, :n_tokens]
        # ties break toward the lowest index (argmax returns the first max)
        labels = [self.schema.arg_labels[i] for i in arg_probs.argmax(axis=-1)]
        from .data import normalize_bio

        return ParseOutput(
            intent_probs=intent_probs,
            arg_probs=arg_probs,
            intent=int(intent_probs.argmax()),
            slots=normalize_bio(labels),
        )

    # -- checkpoints -----------------------------------------------------------

    def _config_blob(self) -> dict:
        proj = self.projection_config
        enc = self.encoder_config
        return {
            "format": CHECKPOINT_FORMAT,
            "seed": self.seed,
            "projection": {
                "feature_dim": proj.feature_dim,
                "map_mode": proj.map_mode,
                "prefix_len": proj.prefix_len,
                "suffix_len": proj.suffix_len,
                "feature_split": list(proj.feature_split),
                "seed": proj.seed,
            },
            "encoder": {
                "feature_dim": enc.feature_dim,
                "bottleneck_dim": enc.bottleneck_dim,
                "state_size": enc.state_size,
                "num_layers": enc.num_layers,
                "kernel_width": enc.kernel_width,
                "zoneout_base": enc.zoneout_base,
                "projection_dropout": enc.projection_dropout,
                "quantize": enc.quantize,
                "batch_norm": enc.batch_norm,
                "bn_epsilon": enc.bn_epsilon,
                "bn_momentum": enc.bn_momentum,
            },
            "schema": self.schema.to_json(),
        }

    def state_arrays(self) -> dict:
        arrays = {"format": np.frombuffer(CHECKPOINT_FORMAT.encode(), dtype=np.uint8).copy()}
        arrays["config"] = np.frombuffer(json.dumps(self._config_blob()).encode(), dtype=np.uint8).copy()
        for name, p in self.named_parameters().items():
            arrays[f"param:{name}"] = p.data.astype(np.float32)
        for name, bn in self.encoder_params.named_bn_states().items():
            arrays[f"bn:{name}:mean"] = bn.running_mean.astype(np.float32)
            arrays[f"bn:{name}:var"] = bn.running_var.astype(np.float32)
        for name, qr in self.named_quant_ranges().items():
            arrays[f"qrange:{name}"] = qr.state().astype(np.float64)
        return arrays

    def load_state_arrays(self, arrays: dict) -> None:
        for name, p in self.named_parameters().items():
            key = f"param:{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint is missing parameter {name}")
            value = np.asarray(arrays[key])
            if value.shape != p.shape:
                raise CheckpointError(
                    f"parameter {name}: checkpoint shape {value.shape} != model shape {p.shape}"
                )
            p.data = value.astype(p.data.dtype)
            p.grad = np.zeros_like(p.data)
        for name, bn in self.encoder_params.named_bn_states().items():
            bn.running_mean = np.asarray(arrays[f"bn:{name}:mean"]).astype(bn.running_mean.dtype)
            bn.running_var = np.asarray(arrays[f"bn:{name}:var"]).astype(bn.running_var.dtype)
        for name, qr in self.named_quant_ranges().items():
            key = f"qrange:{name}"
            if key in arrays:
                qr.load(np.asarray(arrays[key]))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.state_arrays())

    @classmethod
    def load(cls, path) -> "PqrnnModel":
        try:
            with np.load(path, allow_pickle=False) as npz:
                arrays = {k: npz[k] for k in npz.files}
        except (OSError, ValueError, KeyError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        try:
            tag = bytes(arrays["format"]).decode()
            blob = json.loads(bytes(arrays["config"]).decode())
        except (KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"checkpoint {path} has no readable header: {exc}") from exc
        if tag != CHECKPOINT_FORMAT or blob.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {tag!r}")
        proj_cfg = blob["projection"]
        proj_cfg["feature_split"] = tuple(proj_cfg["feature_split"])
        model = cls(
            ProjectionConfig(**proj_cfg),
            EncoderConfig(**blob["encoder"]),
            LabelSchema.from_json(blob["schema"]),
            seed=blob.get("seed", 0),
        )
        model.load_state_arrays(arrays)
        return model


def joint_forward(tokens, model: PqrnnModel, intent_label=None, training: bool = False, rng=None) -> ParseOutput:
    """Chain-rule joint parse of one token list.

    Training mode requires the gold intent label (teacher forcing);
    inference conditions the argument head on the argmax intent.
    """
    if training and intent_label is None:
        raise InputError("joint_forward: training mode requires intent_label for teacher forcing")
    features, mask = model.features_for([list(tokens)])
    force = None
    if intent_label is not None:
        force = np.array([model.schema.intent_index(intent_label)])
    out = model.forward_batch(features, mask, force_intents=force, training=training, rng=rng)
    return model._decode(out, 0, len(list(tokens)))


def export_teacher_logits(model: PqrnnModel, examples, batch_size: int = 256) -> list:
    """Forward-pass logits for a set of queries, in teacher-record form.

    The argument logits are produced under the model's own argmax intent,
    exactly as its inference chain would condition them.
    """
    from .data import TeacherRecord

    records = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        features, mask = model.features_for([ex.tokens for ex in chunk])
        out = model.forward_batch(features, mask)
        for b, ex in enumerate(chunk):
            n = len(ex.tokens)
            records.append(
                TeacherRecord(
                    id=ex.id,
                    tokens=list(ex.tokens),
                    intent_logits=out["intent_logits"].data[b].astype(np.float32),
                    slot_logits=out["arg_logits"].data[b, :n].astype(np.float32),
                )
            )
    return records


def param_count(config: EncoderConfig, n_intents: int, n_args: int) -> int:
    """Closed-form count of trainable scalars for a model configuration."""
    n, b, s = config.feature_dim, config.bottleneck_dim, config.state_size
    k, L = config.kernel_width, config.num_layers
    bn = 2 if config.batch_norm else 0
    total = n * b + b + bn * b  # bottleneck W, bias, BN gamma/beta
    for layer in range(L):
        c_in = b if layer == 0 else 2 * s
        per_direction = 3 * (k * c_in * s + bn * s)
        total += 2 * per_direction
    two_s = 2 * s
    total += two_s  # pooling vector
    total += two_s * n_intents  # intent classifier
    total += two_s * n_args + n_args  # argument projection + bias
    total += n_args * n_intents  # intent-conditioned argument bias
    return total
