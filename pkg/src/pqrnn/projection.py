"""Embedding-free token features: hashed fingerprints mapped to ternary vectors.

Each token is fingerprinted into 2N pseudo-random bits, and consecutive
bit pairs are mapped surjectively onto {-1, 0, +1}. The balanced map sends
{00, 01, 10, 11} -> {-1, 0, 0, +1}, giving P(0)=1/2 and P(-1)=P(+1)=1/4,
so projections of distinct tokens are near-orthogonal with squared norm
concentrating at N/2. Prefix and suffix information is preserved by
fingerprinting three segments (whole token, prefix, suffix) under distinct
derived seeds and concatenating their features.

Everything here is deterministic in (token, config): same inputs give
bit-identical vectors across runs and platforms.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, InputError, ShapeError

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
DEFAULT_SEED = 0x9E3779B97F4A7C15

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_BALANCED_LUT = np.array([-1, 0, 0, 1], dtype=np.int8)
_UNBALANCED_LUT = np.array([-1, 1, 1, 0], dtype=np.int8)


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over raw bytes."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _avalanche(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps mod 2^64
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def fingerprint(token: str, seed: int = DEFAULT_SEED, nbits: int = 2048) -> np.ndarray:
    """Deterministic pseudo-random bits for a token: uint8 array of {0,1}.

    The 64-bit state is seeded by mixing ``seed`` with FNV-1a of the token
    bytes; successive blocks come from splitmix-style avalanche steps.
    """
    if nbits < 1:
        raise ConfigError(f"fingerprint: nbits must be >= 1, got {nbits}")
    n_blocks = (nbits + 63) // 64
    with np.errstate(over="ignore"):
        base = np.uint64((seed & _MASK64) ^ fnv1a64(token.encode("utf-8")))
        state = _avalanche(base + GOLDEN)
        steps = np.arange(1, n_blocks + 1, dtype=np.uint64) * GOLDEN
        blocks = _avalanche(state + steps)
    raw = blocks.astype("<u8").view(np.uint8)
    return np.unpackbits(raw, bitorder="little")[:nbits]


def ternary_map(bits: np.ndarray, mode: str = "balanced") -> np.ndarray:
    """Map consecutive bit pairs onto {-1, 0, +1} (int8array of length len(bits)/2).

    Balanced: {00,01,10,11} -> {-1,0,0,+1}. Unbalanced (ablation variant,
    +1 twice as likely as each other value): {00,01,10,11} -> {-1,+1,+1,0}.
    """
    bits = np.asarray(bits)
    if len(bits) % 2:
        raise ShapeError(f"ternary_map: bit length must be even, got {len(bits)}")
    if mode == "balanced":
        lut = _BALANCED_LUT
    elif mode == "unbalanced":
        lut = _UNBALANCED_LUT
    else:
        raise ConfigError(f"unknown map mode {mode!r}")
    pairs = 2 * bits[0::2] + bits[1::2]
    return lut[pairs]


@dataclass(frozen=True)
class ProjectionConfig:
    """Token projection settings. feature_dim is the N in {-1,0,1}^N."""

    feature_dim: int = 1024
    map_mode: str = "balanced"
    prefix_len: int = 3
    suffix_len: int = 3
    feature_split: tuple = (0.5, 0.25, 0.25)
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.feature_dim <= 0 or self.feature_dim % 2:
            raise ConfigError(f"feature_dim must be positive and even, got {self.feature_dim}")
        if self.map_mode not in ("balanced", "unbalanced"):
            raise ConfigError(f"unknown map mode {self.map_mode!r}")
        if len(self.feature_split) != 3 or abs(sum(self.feature_split) - 1.0) > 1e-9:
            raise ConfigError(f"feature_split must be 3 fractions summing to 1, got {self.feature_split}")
        if self.prefix_len < 0 or self.suffix_len < 0:
            raise ConfigError("prefix_len and suffix_len must be >= 0")

    def segment_dims(self) -> tuple:
        """(whole, prefix, suffix) feature counts; prefix/suffix floored, whole takes the rest."""
        n = self.feature_dim
        n_prefix = int(self.feature_split[1] * n)
        n_suffix = int(self.feature_split[2] * n)
        return n - n_prefix - n_suffix, n_prefix, n_suffix


def _segment_seed(seed: int, index: int) -> int:
    with np.errstate(over="ignore"):
        return int(_avalanche(np.uint64(seed & _MASK64) + np.uint64(index + 1) * GOLDEN))


@lru_cache(maxsize=1 << 16)
def _project_token_cached(token: str, config: ProjectionConfig) -> np.ndarray:
    segments = (token, token[: config.prefix_len], token[-config.suffix_len :] if config.suffix_len else "")
    parts = []
    for index, (segment, dim) in enumerate(zip(segments, config.segment_dims())):
        if dim == 0:
            continue
        bits = fingerprint(segment, _segment_seed(config.seed, index), 2 * dim)
        parts.append(ternary_map(bits, config.map_mode))
    vec = np.concatenate(parts)
    vec.flags.writeable = False
    return vec


def project_token(token: str, config: ProjectionConfig) -> np.ndarray:
    """Ternary feature vector in {-1,0,+1}^N for one token (int8, read-only).

    Concatenates whole-token, prefix, and suffix segment features, each
    fingerprinted under its own derived seed. Tokens shorter than the
    prefix/suffix lengths fall back to the whole token for that segment.
    """
    return _project_token_cached(token, config)


@dataclass
class ProjectedSequence:
    """T x N ternary matrix for one token sequence, with an all-true mask."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape[0] != self.mask.shape[0]:
            raise ShapeError(
                f"row count {self.values.shape[0]} != mask length {self.mask.shape[0]}"
            )


def project_sequence(tokens, config: ProjectionConfig) -> ProjectedSequence:
    """Project a token sequence to its T x N ternary matrix."""
    tokens = list(tokens)
    if not tokens:
        raise InputError("project_sequence: token list is empty")
    values = np.stack([project_token(t, config) for t in tokens])
    return ProjectedSequence(values=values, mask=np.ones(len(tokens), dtype=bool))
