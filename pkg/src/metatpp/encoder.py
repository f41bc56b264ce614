"""Masked transformer encoder producing local-history context features.

Every event position l gets a feature r_l that summarizes only the last
``window`` events up to and including l; the attention mask enforces this.
With a single layer the receptive field is exactly that window; stacking
layers widens it to roughly num_layers * window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .data import LocalHistoryMask, PaddedBatch, local_history_mask

__all__ = [
    "EncoderConfig",
    "ContextFeatures",
    "temporal_encode",
    "init_encoder_params",
    "embed_events",
    "encode_context",
]

LOG_DT_EPS = 1e-8  # tames the heavy left tail of inter-event gaps


@dataclass
class EncoderConfig:
    feature_dim: int = 64
    num_heads: int = 4
    num_layers: int = 1
    window: int = 20
    num_marks: int = 1
    ffn_dim: int | None = None  # defaults to 4 * feature_dim

    def __post_init__(self):
        if self.feature_dim % self.num_heads != 0:
            raise ValueError(f"feature_dim {self.feature_dim} not divisible by num_heads {self.num_heads}")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.feature_dim


@dataclass
class ContextFeatures:
    """Per-event local-history embeddings plus the batch validity mask."""

    features: Tensor  # [B, L, D]
    valid_mask: np.ndarray  # [B, L]


def temporal_encode(absolute_times: np.ndarray, dim: int) -> np.ndarray:
    """Deterministic sinusoidal position code evaluated at event times.

    Component d holds sin(t * w_d) for even d and cos(t * w_d) for odd d,
    with w_d = 10000^(-2*floor(d/2)/dim).
    """
    t = np.asarray(absolute_times, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0):
        raise ValueError("temporal_encode: times must be finite and non-negative")
    d = np.arange(dim)
    freq = 1.0 / np.power(10000.0, 2.0 * (d // 2) / dim)
    angles = t[..., None] * freq
    enc = np.empty(t.shape + (dim,))
    enc[..., 0::2] = np.sin(angles[..., 0::2])
    enc[..., 1::2] = np.cos(angles[..., 1::2])
    return enc


def _linear_init(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape=(fan_in, fan_out))


def init_encoder_params(config: EncoderConfig, rng: Rng, prefix: str = "encoder") -> dict[str, Tensor]:
    d = config.feature_dim
    f = config.ffn_dim
    params: dict[str, Tensor] = {}

    def p(name: str, arr: np.ndarray):
        params[f"{prefix}.{name}"] = Tensor(arr, requires_grad=True, name=f"{prefix}.{name}")

    p("lift.w", _linear_init(rng, 1, d))
    p("lift.b", np.zeros(d))
    if config.num_marks > 1:
        p("mark_emb", 0.02 * rng.normal((config.num_marks, d)))
    for layer in range(config.num_layers):
        pre = f"layer{layer}"
        for nm in ("w_q", "w_k", "w_v", "w_o"):
            p(f"{pre}.{nm}", _linear_init(rng, d, d))
            p(f"{pre}.b_{nm[-1]}", np.zeros(d))
        p(f"{pre}.ln1.g", np.ones(d))
        p(f"{pre}.ln1.b", np.zeros(d))
        p(f"{pre}.ffn.w1", _linear_init(rng, d, f))
        p(f"{pre}.ffn.b1", np.zeros(f))
        p(f"{pre}.ffn.w2", _linear_init(rng, f, d))
        p(f"{pre}.ffn.b2", np.zeros(d))
        p(f"{pre}.ln2.g", np.ones(d))
        p(f"{pre}.ln2.b", np.zeros(d))
    return params


def embed_events(
    batch: PaddedBatch,
    params: dict[str, Tensor],
    config: EncoderConfig,
    prefix: str = "encoder",
) -> Tensor:
    """Sum of temporal code, mark embedding, and a linear lift of log gaps."""
    dt = batch.inter_event_times
    if np.any((dt <= 0) & batch.valid_mask):
        raise ValueError("embed_events: non-positive inter-event time at a valid position")
    enc = Tensor(temporal_encode(batch.absolute_times, config.feature_dim).astype(dt.dtype, copy=False))
    log_dt = Tensor(np.log(dt + LOG_DT_EPS)[..., None])
    x = enc + ad.matmul(log_dt, params[f"{prefix}.lift.w"]) + params[f"{prefix}.lift.b"]
    if config.num_marks > 1:
        x = x + ad.embedding(params[f"{prefix}.mark_emb"], batch.marks)
    return x


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, l, d = x.shape
    return ad.transpose(ad.reshape(x, (b, l, num_heads, d // num_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def encode_context(
    batch: PaddedBatch,
    mask: LocalHistoryMask,
    params: dict[str, Tensor],
    config: EncoderConfig,
    prefix: str = "encoder",
) -> ContextFeatures:
    """Run the masked self-attention stack over a padded batch."""
    if mask.window != config.window:
        raise ValueError(f"mask window {mask.window} does not match config window {config.window}")
    if mask.size < batch.max_len:
        raise ValueError(f"mask size {mask.size} smaller than batch length {batch.max_len}")
    x = embed_events(batch, params, config, prefix=prefix)
    l = batch.max_len
    # Keys must be inside the window and land on real events.
    allow = mask.allowed[None, None, :l, :l] & batch.valid_mask[:, None, None, :]
    scale = 1.0 / np.sqrt(config.feature_dim // config.num_heads)
    for layer in range(config.num_layers):
        pre = f"{prefix}.layer{layer}"
        q = _split_heads(ad.matmul(x, params[f"{pre}.w_q"]) + params[f"{pre}.b_q"], config.num_heads)
        k = _split_heads(ad.matmul(x, params[f"{pre}.w_k"]) + params[f"{pre}.b_k"], config.num_heads)
        v = _split_heads(ad.matmul(x, params[f"{pre}.w_v"]) + params[f"{pre}.b_v"], config.num_heads)
        scores = ad.matmul(q, ad.swap_last2(k)) * scale
        weights = ad.masked_softmax(scores, allow, axis=-1)
        attn = _merge_heads(ad.matmul(weights, v))
        attn = ad.matmul(attn, params[f"{pre}.w_o"]) + params[f"{pre}.b_o"]
        x = ad.layer_norm(x + attn) * params[f"{pre}.ln1.g"] + params[f"{pre}.ln1.b"]
        h = ad.relu(ad.matmul(x, params[f"{pre}.ffn.w1"]) + params[f"{pre}.ffn.b1"])
        h = ad.matmul(h, params[f"{pre}.ffn.w2"]) + params[f"{pre}.ffn.b2"]
        x = ad.layer_norm(x + h) * params[f"{pre}.ln2.g"] + params[f"{pre}.ln2.b"]
        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError(f"encode_context: non-finite activations in layer {layer}")
    return ContextFeatures(features=x, valid_mask=batch.valid_mask)
