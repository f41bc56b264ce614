"""Neural-process heads over context features.

Covers the permutation-invariant pooling of context features, the global
Gaussian latent with reparameterized sampling, the cross-attention module
that matches a target's local history against earlier ones, the log-normal
mixture decoder, and the mark-classification head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor

__all__ = [
    "MixtureParams",
    "pool_context",
    "init_latent_params",
    "infer_latent",
    "sample_latent",
    "kl_diag_gaussian",
    "init_cross_attention_params",
    "cross_attend",
    "init_decoder_params",
    "decode_mixture",
    "lognormal_mixture_logpdf",
    "lognormal_mixture_mean",
    "lognormal_mixture_logsurvival",
    "init_mark_params",
    "mark_logits",
]

SIGMA_FLOOR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)
_SURVIVAL_TINY = 1e-300


def _linear_init(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape=(fan_in, fan_out))


# -- permutation-invariant pooling -------------------------------------------------


def pool_context(features: Tensor, valid_mask: np.ndarray) -> Tensor:
    """Running mean of context features strictly before each position.

    Returns a [B, L, D] grid whose row l is mean(r_0 .. r_{l-1}) over valid
    positions; row 0 is the zero vector (empty context).  Prefix sums keep
    this O(L*D), and the mean makes it invariant to context order.
    """
    b, l, d = features.shape
    valid = valid_mask.astype(features.dtype)[..., None]
    masked = features * Tensor(valid)
    csum = ad.cumsum(masked, axis=1)
    zeros = Tensor(np.zeros((b, 1, d), dtype=features.dtype))
    prefix = ad.concat([zeros, csum[:, : l - 1, :]], axis=1) if l > 1 else zeros
    counts = np.cumsum(valid_mask, axis=1, dtype=np.float64)
    counts_before = np.concatenate([np.zeros((b, 1)), counts[:, : l - 1]], axis=1) if l > 1 else np.zeros((b, 1))
    denom = np.maximum(counts_before, 1.0)[..., None].astype(features.dtype)
    return prefix / Tensor(denom)


# -- global latent ------------------------------------------------------------------


def init_latent_params(dim: int, rng: Rng, hidden: int | None = None, prefix: str = "latent") -> dict[str, Tensor]:
    h = hidden or dim
    arrs = {
        f"{prefix}.w1": _linear_init(rng, dim, h),
        f"{prefix}.b1": np.zeros(h),
        f"{prefix}.w2": _linear_init(rng, h, 2 * dim),
        f"{prefix}.b2": np.zeros(2 * dim),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrs.items()}


def infer_latent(
    pooled: Tensor,
    params: dict[str, Tensor],
    prefix: str = "latent",
    sigma_floor: float = SIGMA_FLOOR,
) -> tuple[Tensor, Tensor]:
    """Two-layer map from a pooled context feature to (mu_z, sigma_z)."""
    h = ad.relu(ad.matmul(pooled, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    out = ad.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]
    d = out.shape[-1] // 2
    mu = out[..., :d]
    sigma = ad.softplus(out[..., d:]) + sigma_floor
    return mu, sigma


def sample_latent(
    mu: Tensor,
    sigma: Tensor,
    rng: Rng | None,
    n_samples: int,
    eps: np.ndarray | None = None,
) -> Tensor:
    """Reparameterized draws z = mu + sigma * eps with eps ~ N(0, I).

    Inserts a sample axis before the feature axis: [..., D] -> [..., n, D].
    Gradients flow to mu and sigma.  Callers may supply ``eps`` directly
    (evaluation keys it per sequence for batching-independent determinism).
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    lead = mu.shape[:-1]
    d = mu.shape[-1]
    if eps is None:
        if rng is None:
            raise ValueError("sample_latent: need an Rng when eps is not given")
        eps = rng.normal(lead + (n_samples, d))
    elif eps.shape != lead + (n_samples, d):
        raise ValueError(f"sample_latent: eps shape {eps.shape} != {lead + (n_samples, d)}")
    mu_e = ad.reshape(mu, lead + (1, d))
    sigma_e = ad.reshape(sigma, lead + (1, d))
    return mu_e + sigma_e * Tensor(eps.astype(mu.dtype, copy=False))


def kl_diag_gaussian(mu_p: Tensor, sigma_p: Tensor, mu_q: Tensor, sigma_q: Tensor) -> Tensor:
    """Closed-form KL(N(mu_p, sigma_p^2) || N(mu_q, sigma_q^2)), summed over the feature axis."""
    log_ratio = ad.log(sigma_q) - ad.log(sigma_p)
    diff = mu_p - mu_q
    quad = (sigma_p * sigma_p + diff * diff) / (2.0 * sigma_q * sigma_q)
    return ad.tsum(log_ratio + quad - 0.5, axis=-1)


# -- cross-attention over earlier local histories ------------------------------------


def init_cross_attention_params(dim: int, num_heads: int, rng: Rng, prefix: str = "xattn") -> dict[str, Tensor]:
    arrs = {
        f"{prefix}.w_q": np.stack([_linear_init(rng, dim, dim) for _ in range(num_heads)]),
        f"{prefix}.w_k": np.stack([_linear_init(rng, dim, dim) for _ in range(num_heads)]),
        f"{prefix}.w_o": _linear_init(rng, num_heads * dim, dim),
        f"{prefix}.fc.w1": _linear_init(rng, dim, dim),
        f"{prefix}.fc.b1": np.zeros(dim),
        f"{prefix}.fc.w2": _linear_init(rng, dim, dim),
        f"{prefix}.fc.b2": np.zeros(dim),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrs.items()}


def cross_attend(
    features: Tensor,
    valid_mask: np.ndarray,
    params: dict[str, Tensor],
    num_heads: int,
    prefix: str = "xattn",
) -> Tensor:
    """Attend each position's feature over all strictly earlier features.

    Queries and keys are per-head projections of the context features; the
    values are the features themselves, unprojected.  Heads are concatenated,
    projected, and passed through a small fully connected stack.  Positions
    with no earlier context (the first event, padding) come out exactly zero.
    """
    b, l, d = features.shape
    x = ad.reshape(features, (b, 1, l, d))
    w_q = ad.reshape(params[f"{prefix}.w_q"], (1, num_heads, d, d))
    w_k = ad.reshape(params[f"{prefix}.w_k"], (1, num_heads, d, d))
    q = ad.matmul(x, w_q)
    k = ad.matmul(x, w_k)
    scores = ad.matmul(q, ad.swap_last2(k)) * (1.0 / math.sqrt(d))
    pos = np.arange(l)
    allow = (pos[None, :] < pos[:, None])[None, None] & valid_mask[:, None, None, :]
    weights = ad.masked_softmax(scores, allow, axis=-1)
    heads = ad.matmul(weights, x)  # values are the raw features
    merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (b, l, num_heads * d))
    proj = ad.matmul(merged, params[f"{prefix}.w_o"])
    h = ad.relu(ad.matmul(proj, params[f"{prefix}.fc.w1"]) + params[f"{prefix}.fc.b1"])
    out = ad.matmul(h, params[f"{prefix}.fc.w2"]) + params[f"{prefix}.fc.b2"]
    has_context = (np.cumsum(valid_mask, axis=1) - valid_mask) > 0
    gate = (has_context & valid_mask).astype(out.dtype)[..., None]
    return out * Tensor(gate)


# -- log-normal mixture decoder --------------------------------------------------------


@dataclass
class MixtureParams:
    """Log-normal mixture over the next inter-event time."""

    weights: Tensor  # [..., K] simplex
    log_weights: Tensor  # [..., K]
    means: Tensor  # [..., K] log-space means
    scales: Tensor  # [..., K] positive

    @property
    def n_components(self) -> int:
        return self.weights.shape[-1]


def init_decoder_params(
    block_dims: dict[str, int],
    hidden: int,
    n_components: int,
    rng: Rng,
    prefix: str = "decoder",
) -> dict[str, Tensor]:
    """First layer is stored as one weight block per input feature.

    Stacking the blocks recovers the single [sum(dims), hidden] matrix of a
    plain concatenated input; keeping them separate lets callers broadcast
    cheaply when one block (the latent sample) carries an extra axis.
    """
    arrs: dict[str, np.ndarray] = {}
    for name, dim in block_dims.items():
        arrs[f"{prefix}.w1.{name}"] = _linear_init(rng, dim, hidden)
    arrs[f"{prefix}.b1"] = np.zeros(hidden)
    arrs[f"{prefix}.w2"] = _linear_init(rng, hidden, 3 * n_components)
    b2 = np.zeros(3 * n_components)
    # Spread the component means and start the scales near one.
    b2[n_components : 2 * n_components] = np.linspace(-1.5, 1.5, n_components)
    b2[2 * n_components :] = math.log(math.e - 1.0)  # softplus^-1(1)
    arrs[f"{prefix}.b2"] = b2
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrs.items()}


def decode_mixture(
    blocks: dict[str, Tensor],
    params: dict[str, Tensor],
    n_components: int,
    prefix: str = "decoder",
    sigma_floor: float = SIGMA_FLOOR,
    return_hidden: bool = False,
):
    """Two fully connected layers from the concatenated feature blocks.

    ``blocks`` maps block name -> Tensor [..., D_name]; leading shapes must
    broadcast together.  Returns mixture weights (softmax), log-space means,
    and softplus scales with a positive floor.
    """
    pre = None
    for name, x in blocks.items():
        part = ad.matmul(x, params[f"{prefix}.w1.{name}"])
        pre = part if pre is None else pre + part
    h = ad.relu(pre + params[f"{prefix}.b1"])
    out = ad.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]
    k = n_components
    logits = out[..., :k]
    log_w = logits - ad.logsumexp(logits, axis=-1, keepdims=True)
    mix = MixtureParams(
        weights=ad.exp(log_w),
        log_weights=log_w,
        means=out[..., k : 2 * k],
        scales=ad.softplus(out[..., 2 * k :]) + sigma_floor,
    )
    return (mix, h) if return_hidden else mix


def lognormal_mixture_logpdf(dt, params: MixtureParams) -> Tensor:
    """Log density of a log-normal mixture at inter-event times ``dt`` (> 0)."""
    dt_arr = dt.data if isinstance(dt, Tensor) else np.asarray(dt, dtype=np.float64)
    if np.any(dt_arr <= 0):
        raise ValueError("lognormal_mixture_logpdf: inter-event times must be positive")
    dt_t = dt if isinstance(dt, Tensor) else Tensor(dt_arr)
    log_dt = ad.log(dt_t)
    x = (ad.reshape(log_dt, log_dt.shape + (1,)) - params.means) / params.scales
    comp = params.log_weights - ad.log(params.scales) - 0.5 * (x * x)
    return ad.logsumexp(comp, axis=-1) - log_dt - 0.5 * LOG_2PI


def lognormal_mixture_mean(params: MixtureParams) -> Tensor:
    """Analytic mixture mean: sum_k w_k * exp(mu_k + sigma_k^2 / 2)."""
    return ad.tsum(params.weights * ad.exp(params.means + 0.5 * params.scales * params.scales), axis=-1)


def lognormal_mixture_logsurvival(t, params: MixtureParams) -> Tensor:
    """Log probability that the next gap exceeds ``t``.

    Uses the complementary normal CDF per component, so it equals
    log(1 - sum_k w_k * Phi((ln t - mu_k) / sigma_k)) without the
    cancellation of forming the difference directly; a floor guards the
    log deep in the tail.
    """
    t_arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0):
        raise ValueError("lognormal_mixture_logsurvival: t must be positive")
    t_t = t if isinstance(t, Tensor) else Tensor(t_arr)
    log_t = ad.log(t_t)
    x = (ad.reshape(log_t, log_t.shape + (1,)) - params.means) / params.scales
    # Phi(-x) = (1 + erf(-x / sqrt(2))) / 2
    comp_survival = 0.5 * (1.0 + ad.erf(x * (-1.0 / math.sqrt(2.0))))
    comp = params.log_weights + ad.log(ad.clip_min(comp_survival, _SURVIVAL_TINY))
    return ad.logsumexp(comp, axis=-1)


# -- mark classification head ------------------------------------------------------------


def init_mark_params(block_dims: dict[str, int], num_marks: int, rng: Rng, prefix: str = "mark") -> dict[str, Tensor]:
    if num_marks < 2:
        raise ValueError("mark head requires at least 2 mark classes")
    arrs: dict[str, np.ndarray] = {}
    for name, dim in block_dims.items():
        arrs[f"{prefix}.w.{name}"] = _linear_init(rng, dim, num_marks)
    arrs[f"{prefix}.b"] = np.zeros(num_marks)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrs.items()}


def mark_logits(blocks: dict[str, Tensor], params: dict[str, Tensor], prefix: str = "mark") -> Tensor:
    """One fully connected layer over the same feature blocks as the decoder."""
    out = None
    for name, x in blocks.items():
        part = ad.matmul(x, params[f"{prefix}.w.{name}"])
        out = part if out is None else out + part
    return out + params[f"{prefix}.b"]
