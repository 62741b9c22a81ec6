"""The pQRNN encoder stack.

Ternary projections go through a bottleneck (fully connected + batch norm
+ ReLU) and then a stack of bidirectional QRNN layers. Each QRNN layer
computes Z/F/O gates with a causal width-k convolution, normalizes each
gate's pre-activation with batch statistics that exclude padded positions,
applies tanh/sigmoid, regularizes the forget gate with zoneout at a
layer-decaying probability b^l, and runs the fo-pooling recurrence
c_t = f_t * c_{t-1} + (1 - f_t) * z_t, h_t = o_t * c_t.

Quantization-aware training simulates 8-bit affine quantization of weights
and layer outputs with straight-through gradients; observed ranges are
tracked as moving averages and frozen for inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .projection import ProjectionConfig, project_sequence
from . import tensor as tc
from .tensor import Tensor, record_op


@dataclass
class EncoderConfig:
    feature_dim: int = 1024  # N, matches the projection
    bottleneck_dim: int = 256  # B
    state_size: int = 128  # S per direction
    num_layers: int = 4  # L
    kernel_width: int = 2  # k
    zoneout_base: float = 0.5  # b in the b^l schedule
    projection_dropout: float = 0.8  # drop probability on projection features
    quantize: bool = True
    batch_norm: bool = True
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99

    def __post_init__(self):
        for name in ("feature_dim", "bottleneck_dim", "state_size", "num_layers", "kernel_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("zoneout_base", "projection_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {p}")


class BatchNormState:
    """Per-channel scale/shift with running statistics."""

    def __init__(self, channels: int, eps: float = 1e-3, momentum: float = 0.99):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=self.gamma.data.dtype)
        self.running_var = np.ones(channels, dtype=self.gamma.data.dtype)
        self.eps = eps
        self.momentum = momentum


class QuantRange:
    """Moving-average min/max observer for per-tensor 8-bit quantization.

    The asymmetric scheme needs a representable zero, so observed bounds
    are clamped to cover 0.
    """

    def __init__(self, momentum: float = 0.99):
        self.momentum = momentum
        self.min = 0.0
        self.max = 0.0
        self.initialized = False

    def observe(self, values: np.ndarray) -> None:
        lo = min(float(values.min()), 0.0)
        hi = max(float(values.max()), 0.0)
        if not self.initialized:
            self.min, self.max = lo, hi
            self.initialized = True
        else:
            m = self.momentum
            self.min = m * self.min + (1.0 - m) * lo
            self.max = m * self.max + (1.0 - m) * hi

    def state(self) -> np.ndarray:
        return np.array([self.min, self.max, float(self.initialized)])

    def load(self, state: np.ndarray) -> None:
        self.min, self.max = float(state[0]), float(state[1])
        self.initialized = bool(state[2])


def fake_quantize(x, qrange: QuantRange) -> Tensor:
    """Simulated 8-bit affine quantization with straight-through gradients.

    scale = (max - min) / 255, zero_point = round(-min/scale) clamped to
    [0, 255]; values are rounded onto the grid and clamped. The backward
    pass is identity inside [min, max] and zero outside.
    """
    x = tc.as_tensor(x)
    lo, hi = qrange.min, qrange.max
    if lo > hi:
        raise ConfigError(f"quant range inverted: min {lo} > max {hi}")
    scale = (hi - lo) / 255.0
    if scale == 0.0:
        scale = 1.0
    zero_point = float(np.clip(round(-lo / scale), 0, 255))
    xd = x.data
    q = np.clip(np.round(xd / scale) + zero_point, 0.0, 255.0)
    out = ((q - zero_point) * scale).astype(xd.dtype)

    def backward(g):
        return (g * ((xd >= lo) & (xd <= hi)),)

    return record_op(out, (x,), backward)


def masked_batch_norm(x, mask, state: BatchNormState, training: bool) -> Tensor:
    """Batch norm over valid timesteps only; padded positions stay zero.

    In training mode the per-channel mean/variance are computed over
    positions where ``mask`` is set, the running statistics are updated
    with momentum, and the batch statistics normalize. Inference mode uses
    the running statistics. Output rank matches the input ([T, C] or
    [batch, T, C]).
    """
    x = tc.as_tensor(x)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    md = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    md = (md[None] if squeeze else md).astype(xd.dtype)
    if xd.ndim != 3 or md.shape != xd.shape[:2]:
        raise ShapeError(f"masked_batch_norm: input {x.shape} and mask {md.shape} disagree")
    n_valid = md.sum()
    if n_valid == 0:
        raise InputError("masked_batch_norm: no valid positions")

    gamma, beta = state.gamma, state.beta
    gd, bd = gamma.data, beta.data
    m3 = md[..., None]
    channels = xd.shape[-1]
    flat_mask = md.reshape(1, -1)

    if training:
        mean = (flat_mask @ xd.reshape(-1, channels))[0] / n_valid
        centered = (xd - mean) * m3
        flat_centered = centered.reshape(-1, channels)
        var = (flat_centered * flat_centered).sum(axis=0) / n_valid
        mom = state.momentum
        state.running_mean = mom * state.running_mean + (1.0 - mom) * mean.astype(state.running_mean.dtype)
        state.running_var = mom * state.running_var + (1.0 - mom) * var.astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)

    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean) * inv * m3
    out = (gd * xhat + bd) * m3

    def backward(g):
        gm = g * m3
        flat_gm = gm.reshape(-1, channels)
        dgamma = (flat_gm * xhat.reshape(-1, channels)).sum(axis=0)
        dbeta = flat_gm.sum(axis=0)
        if training:
            # sums over padded positions vanish since gm is masked
            dx = gd * inv * (gm - dbeta / n_valid - xhat * (dgamma / n_valid)) * m3
        else:
            dx = gd * inv * gm
        return (dx[0] if squeeze else dx), dgamma, dbeta

    return record_op(out[0] if squeeze else out, (x, gamma, beta), backward)


def zoneout_schedule(base: float, layer: int, num_layers: int) -> float:
    """Zoneout probability for layer l in [1..L]: base**l."""
    if not 0.0 <= base < 1.0:
        raise ConfigError(f"zoneout base must be in [0, 1), got {base}")
    if not 1 <= layer <= num_layers:
        raise ConfigError(f"layer index {layer} outside [1, {num_layers}]")
    return base**layer


def fo_pool(z, f, mask) -> Tensor:
    """fo-pooling recurrence c_t = f_t*c_{t-1} + (1-f_t)*z_t with c_0 = 0.

    Masked timesteps carry the state through unchanged; the emitted value
    at a masked step is the carried state (callers zero their outputs via
    the mask when forming h = o * c).
    """
    z, f = tc.as_tensor(z), tc.as_tensor(f)
    if z.shape != f.shape:
        raise ShapeError(f"fo_pool: z {z.shape} and f {f.shape} differ")
    squeeze = z.ndim == 2
    zd = z.data[None] if squeeze else z.data
    fd = f.data[None] if squeeze else f.data
    md = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    md = (md[None] if squeeze else md).astype(zd.dtype)
    if md.shape != zd.shape[:2]:
        raise ShapeError(f"fo_pool: mask {md.shape} does not cover {zd.shape[:2]}")

    batch, T, channels = zd.shape
    m3 = md[..., None]
    eff_f = m3 * fd + (1.0 - m3)  # masked steps keep the previous state
    update = m3 * (1.0 - fd) * zd
    c = np.empty_like(zd)
    prev = np.zeros((batch, channels), dtype=zd.dtype)
    for t in range(T):
        prev = eff_f[:, t] * prev + update[:, t]
        c[:, t] = prev
    c_prev = np.concatenate([np.zeros((batch, 1, channels), dtype=zd.dtype), c[:, :-1]], axis=1)

    def backward(g):
        g = g[None] if squeeze else g
        dz = np.zeros_like(zd)
        df = np.zeros_like(fd)
        carry = np.zeros((batch, channels), dtype=zd.dtype)
        for t in range(T - 1, -1, -1):
            total = g[:, t] + carry
            dz[:, t] = total * md[:, t, None] * (1.0 - fd[:, t])
            df[:, t] = total * md[:, t, None] * (c_prev[:, t] - zd[:, t])
            carry = total * eff_f[:, t]
        return (dz[0] if squeeze else dz), (df[0] if squeeze else df)

    return record_op(c[0] if squeeze else c, (z, f), backward)


# ---------------------------------------------------------------------------
# parameters


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


@dataclass
class GateParams:
    weight: Tensor  # [k, C_in, S]
    bn: BatchNormState
    wrange: QuantRange


@dataclass
class QrnnLayerParams:
    """Z/F/O gates per direction. Z squashes with tanh, F and O with sigmoid."""

    directions: dict  # {"fwd"|"bwd": {"z"|"f"|"o": GateParams}}
    out_range: QuantRange = field(default_factory=QuantRange)


class EncoderParams:
    """Bottleneck + QRNN stack parameters, batch-norm state, quant ranges."""

    GATES = ("z", "f", "o")

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        n, b, s = config.feature_dim, config.bottleneck_dim, config.state_size
        k = config.kernel_width
        self.config = config
        self.bottleneck_w = glorot(rng, (n, b), n, b)
        self.bottleneck_b = Tensor(np.zeros(b), requires_grad=True)
        self.bottleneck_bn = BatchNormState(b, config.bn_epsilon, config.bn_momentum)
        self.bottleneck_wrange = QuantRange(config.bn_momentum)
        self.bottleneck_out_range = QuantRange(config.bn_momentum)
        self.layers = []
        for layer in range(config.num_layers):
            c_in = b if layer == 0 else 2 * s
            directions = {}
            for direction in ("fwd", "bwd"):
                gates = {}
                for gate in self.GATES:
                    gates[gate] = GateParams(
                        weight=glorot(rng, (k, c_in, s), k * c_in, s),
                        bn=BatchNormState(s, config.bn_epsilon, config.bn_momentum),
                        wrange=QuantRange(config.bn_momentum),
                    )
                directions[direction] = gates
            self.layers.append(QrnnLayerParams(directions=directions, out_range=QuantRange(config.bn_momentum)))

    def named_parameters(self) -> dict:
        params = {
            "bottleneck.w": self.bottleneck_w,
            "bottleneck.b": self.bottleneck_b,
            "bottleneck.bn.gamma": self.bottleneck_bn.gamma,
            "bottleneck.bn.beta": self.bottleneck_bn.beta,
        }
        for i, layer in enumerate(self.layers):
            for direction, gates in layer.directions.items():
                for gate, gp in gates.items():
                    prefix = f"layer{i}.{direction}.{gate}"
                    params[f"{prefix}.weight"] = gp.weight
                    params[f"{prefix}.bn.gamma"] = gp.bn.gamma
                    params[f"{prefix}.bn.beta"] = gp.bn.beta
        return params

    def named_bn_states(self) -> dict:
        states = {"bottleneck.bn": self.bottleneck_bn}
        for i, layer in enumerate(self.layers):
            for direction, gates in layer.directions.items():
                for gate, gp in gates.items():
                    states[f"layer{i}.{direction}.{gate}.bn"] = gp.bn
        return states

    def named_quant_ranges(self) -> dict:
        ranges = {
            "bottleneck.w": self.bottleneck_wrange,
            "bottleneck.out": self.bottleneck_out_range,
        }
        for i, layer in enumerate(self.layers):
            ranges[f"layer{i}.out"] = layer.out_range
            for direction, gates in layer.directions.items():
                for gate, gp in gates.items():
                    ranges[f"layer{i}.{direction}.{gate}.w"] = gp.wrange
        return ranges


def _maybe_quantize(x: Tensor, qrange: QuantRange, config: EncoderConfig, training: bool) -> Tensor:
    """Observe (training) then fake-quantize; identity until a range exists."""
    if not config.quantize:
        return x
    if training:
        qrange.observe(x.data)
    if not qrange.initialized:
        return x
    return fake_quantize(x, qrange)


def _mask3(mask: np.ndarray, channels: int, dtype) -> Tensor:
    return Tensor(np.broadcast_to(mask[..., None], mask.shape + (channels,)).astype(dtype))


def bottleneck_forward(x, params: EncoderParams, mask, training: bool, rng=None) -> Tensor:
    """ReLU(masked batch norm(XW + b)) on [batch, T, N] or [T, N] input.

    Projection dropout runs first in training mode: entries drop with the
    configured probability and survivors scale by 1/(1-p).
    """
    config = params.config
    x = tc.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = tc.reshape(x, (1,) + x.shape)
        mask = np.asarray(mask)[None]
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(x.data.dtype)
    batch, T, n = x.shape
    if params.bottleneck_w.shape != (n, config.bottleneck_dim):
        raise ShapeError(
            f"bottleneck weight {params.bottleneck_w.shape} does not match input dim {n}"
        )

    if training and config.projection_dropout > 0.0:
        if rng is None:
            raise ConfigError("training-mode bottleneck needs an rng for dropout")
        p = config.projection_dropout
        keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
        x = tc.mul(x, Tensor(keep))

    w = _maybe_quantize(params.bottleneck_w, params.bottleneck_wrange, config, training)
    flat = tc.reshape(x, (batch * T, n))
    pre = tc.add(tc.matmul(flat, w), tc.expand(tc.reshape(params.bottleneck_b, (1, -1)), (batch * T, config.bottleneck_dim)))
    pre = tc.reshape(pre, (batch, T, config.bottleneck_dim))
    if config.batch_norm:
        pre = masked_batch_norm(pre, mask, params.bottleneck_bn, training)
    out = tc.relu(pre)
    out = tc.mul(out, _mask3(mask, config.bottleneck_dim, out.data.dtype))
    out = _maybe_quantize(out, params.bottleneck_out_range, config, training)
    return tc.reshape(out, out.shape[1:]) if squeeze else out


def qrnn_layer_forward(
    h,
    params: QrnnLayerParams,
    mask,
    zoneout_p: float,
    training: bool,
    direction: str,
    config: EncoderConfig,
    rng=None,
) -> Tensor:
    """One QRNN direction: gated convolution, fo-pooling, zoneout.

    The backward direction reverses each sequence within its valid length,
    runs the same causal computation, and reverses its output back.
    """
    if direction not in ("forward", "backward"):
        raise ConfigError(f"direction must be forward or backward, got {direction!r}")
    h = tc.as_tensor(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = tc.reshape(h, (1,) + h.shape)
        mask = np.asarray(mask)[None]
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(h.data.dtype)
    lengths = mask.sum(axis=1).astype(np.int64)
    gates_p = params.directions["fwd" if direction == "forward" else "bwd"]

    if direction == "backward":
        h = tc.reverse_sequence(h, lengths)

    acts = {}
    for gate in ("z", "f", "o"):
        gp = gates_p[gate]
        w = _maybe_quantize(gp.weight, gp.wrange, config, training)
        pre = tc.conv1d_time(h, w, mask)
        if config.batch_norm:
            pre = masked_batch_norm(pre, mask, gp.bn, training)
        acts[gate] = tc.tanh(pre) if gate == "z" else tc.sigmoid(pre)

    f = acts["f"]
    if zoneout_p > 0.0:
        if training:
            if rng is None:
                raise ConfigError("training-mode zoneout needs an rng")
            # non-inverted dropout on (1 - f): with probability p the mask
            # zeroes the update term, so the cell copies its previous state;
            # the inference correction below matches this in expectation
            keep = (rng.random(f.shape) >= zoneout_p).astype(f.data.dtype)
            f = tc.sub(1.0, tc.mul(Tensor(keep), tc.sub(1.0, f)))
        else:
            f = tc.add(zoneout_p, tc.mul(1.0 - zoneout_p, f))

    c = fo_pool(acts["z"], f, mask)
    out = tc.mul(acts["o"], c)
    out = tc.mul(out, _mask3(mask, out.shape[-1], out.data.dtype))
    if direction == "backward":
        out = tc.reverse_sequence(out, lengths)
    return tc.reshape(out, out.shape[1:]) if squeeze else out


def encode_features(x, mask, params: EncoderParams, training: bool = False, rng=None) -> Tensor:
    """Bottleneck + stacked bidirectional QRNN layers on projected features.

    ``x`` is [batch, T, N] float features, ``mask`` [batch, T]. Returns the
    final layer's concatenated forward/backward output [batch, T, 2S].
    """
    config = params.config
    h = bottleneck_forward(x, params, mask, training, rng)
    for index, layer in enumerate(params.layers):
        p = zoneout_schedule(config.zoneout_base, index + 1, config.num_layers)
        fwd = qrnn_layer_forward(h, layer, mask, p, training, "forward", config, rng)
        bwd = qrnn_layer_forward(h, layer, mask, p, training, "backward", config, rng)
        h = tc.concat([fwd, bwd], axis=-1)
        h = _maybe_quantize(h, layer.out_range, config, training)
    return h


def pqrnn_encode(tokens, model, training: bool = False, rng=None) -> Tensor:
    """Encode one token sequence to its [T, 2S] contextual representation."""
    seq = project_sequence(tokens, model.projection_config)
    x = Tensor(seq.values.astype(tc.default_dtype())[None])
    mask = seq.mask.astype(np.float64)[None]
    out = encode_features(x, mask, model.encoder_params, training=training, rng=rng)
    return tc.reshape(out, out.shape[1:])
