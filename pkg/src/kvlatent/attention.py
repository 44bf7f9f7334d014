"""Toy causal attention forwards for source and converted layers.

These simulators stop at the attention output (no output projection, no
layer norm) so that a converted layer can be compared against its source as
a pure statement about the weights. The latent forward reconstructs K and V
from the cached-width latents; the rotary variant adds a small decoupled
position channel: per-head rotary queries plus one shared rotary key per
token, concatenated to the content channel and rescaled by
sqrt(head_dim + rope_dim).
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import linalg
from .errors import ValidationError
from .factorizer import GqaLayer, MlaFactors


@dataclass(frozen=True)
class AttentionConfig:
    """Shape and positional settings for one simulated layer."""

    d_model: int
    n_heads: int
    head_dim: int
    n_groups: int
    seq_len: int
    rope_dim: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_heads * self.head_dim != self.d_model:
            raise ValidationError(
                f"n_heads * head_dim must equal d_model: "
                f"{self.n_heads} * {self.head_dim} != {self.d_model}"
            )
        if self.rope_dim < 0 or (self.rope_dim and self.rope_dim % 2):
            raise ValidationError("rope_dim must be 0 or a positive even number")
        if self.rope_base <= 0.0:
            raise ValidationError("rope_base must be positive")
        if self.seq_len < 1:
            raise ValidationError("seq_len must be positive")


@dataclass(frozen=True)
class RopeAdapters:
    """Projections feeding the rotary channel: per-head queries, shared key."""

    w_r_q: np.ndarray
    w_r_k: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w_r_q", linalg.as_matrix(self.w_r_q, "w_r_q"))
        object.__setattr__(self, "w_r_k", linalg.as_matrix(self.w_r_k, "w_r_k"))


@dataclass(frozen=True)
class AttentionTrace:
    """Logits, attention weights, and output of one forward pass.

    Masked (future) positions hold exactly 0 in both logits and weights;
    cached_widths records how many reals per token each variant would cache.
    """

    logits: np.ndarray  # (n_heads, T, T)
    weights: np.ndarray  # (n_heads, T, T)
    output: np.ndarray  # (T, d_model)
    cached_widths: dict[str, int]
    scale_denominator: float

    @property
    def cache_width(self) -> int:
        return sum(self.cached_widths.values())


class DriftResult(NamedTuple):
    max_abs: float
    frob: float


class CacheFootprint(NamedTuple):
    total_bytes: int
    megabytes: float


def rope_rotate(x, width: int, base: float) -> np.ndarray:
    """Rotate each row by its own position, in adjacent pairs.

    Pair j of a width-d block turns by angle t * base^(-2j/d) at row t
    (0-indexed). Every width-d block of columns gets the same angles, so a
    multi-head layout rotates each head identically.
    """
    x = linalg.as_matrix(x, "x")
    if width <= 0 or width % 2:
        raise ValidationError(f"rotation width must be positive and even, got {width}")
    if x.shape[1] % width:
        raise ValidationError(
            f"columns ({x.shape[1]}) must be a multiple of the rotation width {width}"
        )
    if base <= 0.0:
        raise ValidationError("base must be positive")
    n_rows, n_cols = x.shape
    half = width // 2
    blocks = n_cols // width
    theta = base ** (-2.0 * np.arange(half) / width)
    angles = np.arange(n_rows)[:, None] * theta[None, :]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    pairs = x.reshape(n_rows, blocks, half, 2)
    even = pairs[..., 0]
    odd = pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(n_rows, n_cols)


def _causal_weights(raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = np.where(mask, raw, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _head_attention(q_heads, k_heads, v_heads, extra_logits, scale_den):
    """Shared per-head causal attention loop.

    q_heads/k_heads/v_heads: lists of (T, *) arrays per head; extra_logits is
    None or a per-head list of (T, T) additive terms (the rotary channel).
    """
    n_heads = len(q_heads)
    t = q_heads[0].shape[0]
    mask = np.tril(np.ones((t, t), dtype=bool))
    logits = np.zeros((n_heads, t, t))
    weights = np.zeros((n_heads, t, t))
    head_outputs = []
    for h in range(n_heads):
        raw = q_heads[h] @ k_heads[h].T
        if extra_logits is not None:
            raw = raw + extra_logits[h]
        raw = raw / scale_den
        logits[h] = np.where(mask, raw, 0.0)
        weights[h] = _causal_weights(raw, mask)
        head_outputs.append(weights[h] @ v_heads[h])
    return logits, weights, np.concatenate(head_outputs, axis=1)


def gqa_forward(layer: GqaLayer, x) -> AttentionTrace:
    """Reference grouped-attention forward without positional encoding."""
    x = linalg.as_matrix(x, "x")
    if x.shape[1] != layer.d_model:
        raise ValidationError(
            f"input width {x.shape[1]} does not match d_model {layer.d_model}"
        )
    d_h = layer.head_dim
    q = x @ layer.w_q
    k = x @ layer.w_k_g
    v = x @ layer.w_v_g
    q_heads, k_heads, v_heads = [], [], []
    for h in range(layer.n_heads):
        g = (h * layer.n_groups) // layer.n_heads
        q_heads.append(q[:, h * d_h : (h + 1) * d_h])
        k_heads.append(k[:, g * d_h : (g + 1) * d_h])
        v_heads.append(v[:, g * d_h : (g + 1) * d_h])
    scale_den = math.sqrt(d_h)
    logits, weights, output = _head_attention(q_heads, k_heads, v_heads, None, scale_den)
    widths = {"k": layer.grouped_width, "v": layer.grouped_width}
    return AttentionTrace(logits, weights, output, widths, scale_den)


def mla_forward(factors: MlaFactors, w_q, config: AttentionConfig, x) -> AttentionTrace:
    """Latent-KV forward without the rotary channel (content only)."""
    if config.rope_dim != 0:
        raise ValidationError("content-only forward requires rope_dim == 0")
    x = linalg.as_matrix(x, "x")
    w_q = linalg.as_matrix(w_q, "w_q")
    _check_mla_shapes(factors, w_q, config, x)
    d_h = config.head_dim
    latent_k = x @ factors.w_a_k
    latent_v = x @ factors.w_a_v
    k = latent_k @ factors.w_b_k
    v = latent_v @ factors.w_b_v
    q = x @ w_q
    q_heads = [q[:, h * d_h : (h + 1) * d_h] for h in range(config.n_heads)]
    k_heads = [k[:, h * d_h : (h + 1) * d_h] for h in range(config.n_heads)]
    v_heads = [v[:, h * d_h : (h + 1) * d_h] for h in range(config.n_heads)]
    scale_den = math.sqrt(d_h)
    logits, weights, output = _head_attention(q_heads, k_heads, v_heads, None, scale_den)
    widths = {"latent_k": factors.r_k, "latent_v": factors.r_v}
    return AttentionTrace(logits, weights, output, widths, scale_den)


def mla_forward_rope(
    factors: MlaFactors,
    w_q,
    adapters: RopeAdapters,
    config: AttentionConfig,
    x,
) -> AttentionTrace:
    """Latent-KV forward with the decoupled rotary channel enabled.

    The rotary key is computed once per token and shared by every head; only
    it is added to the per-token cache (width rope_dim), alongside the two
    content latents. Values come from the content channel alone.
    """
    if config.rope_dim <= 0:
        raise ValidationError("rotary forward requires rope_dim > 0")
    x = linalg.as_matrix(x, "x")
    w_q = linalg.as_matrix(w_q, "w_q")
    _check_mla_shapes(factors, w_q, config, x)
    d_r = config.rope_dim
    if adapters.w_r_q.shape != (config.d_model, config.n_heads * d_r):
        raise ValidationError(
            f"w_r_q has shape {adapters.w_r_q.shape}, expected "
            f"{(config.d_model, config.n_heads * d_r)}"
        )
    if adapters.w_r_k.shape != (config.d_model, d_r):
        raise ValidationError(
            f"w_r_k has shape {adapters.w_r_k.shape}, expected {(config.d_model, d_r)}"
        )

    d_h = config.head_dim
    latent_k = x @ factors.w_a_k
    latent_v = x @ factors.w_a_v
    k = latent_k @ factors.w_b_k
    v = latent_v @ factors.w_b_v
    q = x @ w_q
    q_rope = rope_rotate(x @ adapters.w_r_q, d_r, config.rope_base)
    k_rope = rope_rotate(x @ adapters.w_r_k, d_r, config.rope_base)  # shared by heads

    q_heads = [q[:, h * d_h : (h + 1) * d_h] for h in range(config.n_heads)]
    k_heads = [k[:, h * d_h : (h + 1) * d_h] for h in range(config.n_heads)]
    v_heads = [v[:, h * d_h : (h + 1) * d_h] for h in range(config.n_heads)]
    extra = [
        q_rope[:, h * d_r : (h + 1) * d_r] @ k_rope.T for h in range(config.n_heads)
    ]
    scale_den = math.sqrt(d_h + d_r)
    logits, weights, output = _head_attention(q_heads, k_heads, v_heads, extra, scale_den)
    widths = {"latent_k": factors.r_k, "latent_v": factors.r_v, "rope_k": d_r}
    return AttentionTrace(logits, weights, output, widths, scale_den)


def _check_mla_shapes(factors: MlaFactors, w_q, config: AttentionConfig, x) -> None:
    if x.shape[1] != config.d_model:
        raise ValidationError(
            f"input width {x.shape[1]} does not match d_model {config.d_model}"
        )
    if factors.d_model != config.d_model or factors.out_width != config.d_model:
        raise ValidationError("factor shapes do not match the attention config")
    if w_q.shape != (config.d_model, config.n_heads * config.head_dim):
        raise ValidationError(f"w_q has shape {w_q.shape}")


def logit_drift(a: AttentionTrace, b: AttentionTrace) -> DriftResult:
    """Max-absolute and Frobenius drift of unmasked logits between two traces."""
    if a.logits.shape != b.logits.shape:
        raise ValidationError(
            f"trace shapes differ: {a.logits.shape} vs {b.logits.shape}"
        )
    t = a.logits.shape[1]
    mask = np.tril(np.ones((t, t), dtype=bool))
    delta = (a.logits - b.logits)[:, mask]
    if delta.size == 0:
        return DriftResult(0.0, 0.0)
    return DriftResult(float(np.max(np.abs(delta))), float(np.sqrt(np.sum(delta**2))))


def kv_cache_bytes(
    layers: int,
    seq_len: int,
    batch: int,
    width: int,
    bytes_per_element: int,
) -> CacheFootprint:
    """Cache footprint for `width` cached reals per token: bytes and MB (10^6)."""
    if layers < 1 or seq_len < 1 or batch < 1 or bytes_per_element < 1:
        raise ValidationError("layers, seq_len, batch, bytes_per_element must be >= 1")
    if width < 0:
        raise ValidationError("width cannot be negative")
    total = layers * seq_len * batch * width * bytes_per_element
    return CacheFootprint(total, total / 1e6)
