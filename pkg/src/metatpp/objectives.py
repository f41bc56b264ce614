"""Training losses, the training loop, and the grid-search driver."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import evaluation
from .autodiff import Rng, Tensor
from .data import Dataset, PaddedBatch, make_batch
from .heads import lognormal_mixture_logpdf, lognormal_mixture_logsurvival, kl_diag_gaussian
from .model import Model, ModelConfig, default_config, target_mask
from .optim import Adam, GradientError

__all__ = [
    "GRID_LEARNING_RATES",
    "GRID_WEIGHT_DECAYS",
    "TrainConfig",
    "LossReport",
    "TrainResult",
    "loss_supervised",
    "loss_elbo_vi",
    "loss_mc",
    "compute_loss",
    "train",
    "grid_search",
]

log = logging.getLogger(__name__)

GRID_LEARNING_RATES = (1e-2, 1e-3, 1e-4, 1e-5)
GRID_WEIGHT_DECAYS = (1e-2, 1e-3, 1e-4, 1e-5)


@dataclass
class TrainConfig:
    variant: str = "thp_plus"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    n_train_samples: int = 32  # z draws per ELBO/MC step
    n_eval_samples: int = 256  # z draws for validation / test metrics
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    detach_posterior_kl: bool = False
    survival_term: bool = False
    dtype: str = "float64"
    model_overrides: dict = field(default_factory=dict)

    def model_config(self, num_marks: int) -> ModelConfig:
        return default_config(self.variant, num_marks=num_marks, dtype=self.dtype, **self.model_overrides)


@dataclass
class LossReport:
    """Loss components for one batch; total is their (unit-weighted) sum."""

    total: Tensor
    time_nll: float
    kl: float
    mark_ce: float
    n_events: int

    def item(self) -> float:
        return float(self.total.data)


def _targets(batch: PaddedBatch):
    """Next inter-event time and next mark per position, plus the target mask."""
    tmask = target_mask(batch)
    dt_next = np.ones_like(batch.inter_event_times)
    dt_next[:, :-1] = batch.inter_event_times[:, 1:]
    dt_next[~tmask] = 1.0  # harmless positive filler at masked positions
    mark_next = np.zeros_like(batch.marks)
    mark_next[:, :-1] = batch.marks[:, 1:]
    return dt_next, mark_next, tmask


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    weight = Tensor(mask.astype(x.dtype))
    return ad.tsum(x * weight) / float(mask.sum())


def _mark_log_probs(logits: Tensor, mark_next: np.ndarray) -> Tensor:
    """Log probability of the observed next mark, per position and sample."""
    log_probs = logits - ad.logsumexp(logits, axis=-1, keepdims=True)
    b, l, n, c = logits.shape
    idx = np.broadcast_to(mark_next[:, :, None, None], (b, l, n, 1))
    return ad.reshape(ad.gather(log_probs, idx, axis=-1), (b, l, n))


def _survival_nll(mix, batch: PaddedBatch) -> Tensor | None:
    """Negative log survival of the gap from each last event to its horizon."""
    if batch.t_end is None:
        return None
    b = batch.batch_size
    last = batch.lengths - 1
    rows = np.arange(b)
    gap = batch.t_end[rows] - batch.absolute_times[rows, last]
    ok = np.isfinite(gap) & (gap > 0)
    if not np.any(ok):
        return None
    n = mix.means.shape[2]
    k = mix.means.shape[-1]
    idx = np.broadcast_to(last[:, None, None, None], (b, 1, n, k))
    at_last = type(mix)(
        weights=ad.gather(mix.weights, idx, axis=1),
        log_weights=ad.gather(mix.log_weights, idx, axis=1),
        means=ad.gather(mix.means, idx, axis=1),
        scales=ad.gather(mix.scales, idx, axis=1),
    )
    gap_safe = np.where(ok, gap, 1.0)
    log_s = lognormal_mixture_logsurvival(Tensor(gap_safe[:, None, None]), at_last)  # [B, 1, N]
    per_seq = ad.logsumexp(log_s, axis=-1) - np.log(n)  # average over z samples
    return -ad.tsum(per_seq * Tensor(ok[:, None].astype(per_seq.dtype)))


def loss_supervised(model: Model, batch: PaddedBatch, survival: bool = False) -> LossReport:
    """Mean next-event NLL for the deterministic variants.

    Covers thp_plus (no conditioning) and the cond_* variants whose decoder
    sees the deterministic pooled context feature.
    """
    dt_next, mark_next, tmask = _targets(batch)
    mix, marks, _ = model.forward(batch, n_samples=1)
    logp = lognormal_mixture_logpdf(Tensor(dt_next[:, :, None]), mix)  # [B, L, 1]
    time_nll = -_masked_mean(ad.reshape(logp, tmask.shape), tmask)
    total = time_nll
    mark_ce = 0.0
    if marks is not None:
        ce = -_masked_mean(ad.reshape(_mark_log_probs(marks, mark_next), tmask.shape), tmask)
        total = total + ce
        mark_ce = float(ce.data)
    if survival:
        sv = _survival_nll(mix, batch)
        if sv is not None:
            total = total + sv / float(tmask.sum())
    if not np.isfinite(float(total.data)):
        raise FloatingPointError("loss_supervised: non-finite loss")
    return LossReport(total, float(time_nll.data), 0.0, mark_ce, int(tmask.sum()))


def loss_elbo_vi(model: Model, batch: PaddedBatch, rng: Rng, n_samples: int, detach_posterior_kl: bool = False) -> LossReport:
    """Negative ELBO: reconstruction under posterior z draws plus the
    per-position KL from the whole-sequence posterior to the running prior."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    dt_next, mark_next, tmask = _targets(batch)
    mix, marks, latent = model.forward(batch, n_samples=n_samples, rng=rng, latent_source="posterior")
    logp = lognormal_mixture_logpdf(Tensor(dt_next[:, :, None]), mix)  # [B, L, N]
    recon_time = ad.tmean(logp, axis=-1)
    time_nll = -_masked_mean(recon_time, tmask)
    post_mu, post_sigma = latent.post_mu, latent.post_sigma
    if detach_posterior_kl:
        post_mu, post_sigma = ad.stop_gradient(post_mu), ad.stop_gradient(post_sigma)
    kl = kl_diag_gaussian(post_mu, post_sigma, latent.prior_mu, latent.prior_sigma)  # [B, L]
    kl_mean = _masked_mean(kl, tmask)
    total = time_nll + kl_mean
    mark_ce = 0.0
    if marks is not None:
        ce = -_masked_mean(ad.tmean(_mark_log_probs(marks, mark_next), axis=-1), tmask)
        total = total + ce
        mark_ce = float(ce.data)
    if not np.isfinite(float(total.data)):
        raise FloatingPointError("loss_elbo_vi: non-finite loss")
    return LossReport(total, float(time_nll.data), float(kl_mean.data), mark_ce, int(tmask.sum()))


def loss_mc(model: Model, batch: PaddedBatch, rng: Rng, n_samples: int) -> LossReport:
    """Monte-Carlo marginal-likelihood objective with prior z draws per position."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    dt_next, mark_next, tmask = _targets(batch)
    mix, marks, _ = model.forward(batch, n_samples=n_samples, rng=rng, latent_source="prior")
    logp = lognormal_mixture_logpdf(Tensor(dt_next[:, :, None]), mix)  # [B, L, N]
    ll = ad.logsumexp(logp, axis=-1) - float(np.log(n_samples))
    time_nll = -_masked_mean(ll, tmask)
    total = time_nll
    mark_ce = 0.0
    if marks is not None:
        mark_ll = ad.logsumexp(_mark_log_probs(marks, mark_next), axis=-1) - float(np.log(n_samples))
        ce = -_masked_mean(mark_ll, tmask)
        total = total + ce
        mark_ce = float(ce.data)
    if not np.isfinite(float(total.data)):
        raise FloatingPointError("loss_mc: non-finite loss")
    return LossReport(total, float(time_nll.data), 0.0, mark_ce, int(tmask.sum()))


def compute_loss(model: Model, batch: PaddedBatch, rng: Rng, config: TrainConfig) -> LossReport:
    cfg = model.config
    if cfg.trained_with_vi:
        return loss_elbo_vi(model, batch, rng, config.n_train_samples, config.detach_posterior_kl)
    if cfg.trained_with_mc:
        return loss_mc(model, batch, rng, config.n_train_samples)
    return loss_supervised(model, batch, survival=config.survival_term)


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int
    best_val_nll: float
    diverged: bool = False


def _length_buckets(dataset: Dataset, batch_size: int) -> list[list[int]]:
    order = sorted(range(len(dataset)), key=lambda i: len(dataset.sequences[i]))
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def train(config: TrainConfig, train_set: Dataset, val_set: Dataset) -> TrainResult:
    """Minibatch Adam with early stopping on validation NLL.

    Keeps the best-validation weights; aborts on divergence and returns the
    last good checkpoint.  Fully deterministic for a given config and seed.
    """
    model = Model.create(config.model_config(train_set.num_marks), seed=config.seed)
    log.info("training %s: %d parameters (mark head excluded)", config.variant, model.parameter_count())
    opt = Adam(model.params, lr=config.learning_rate, weight_decay=config.weight_decay)
    rng = Rng.keyed(config.seed, 0x7EA1)
    buckets = _length_buckets(train_set, config.batch_size)
    batches = [make_batch([train_set.sequences[i] for i in idx]) for idx in buckets]

    best_val = np.inf
    best_epoch = -1
    best_params = {k: p.data.copy() for k, p in model.params.items()}
    history: list[dict] = []
    stale = 0
    diverged = False
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(batches))
        sums = np.zeros(4)
        try:
            for bi in order:
                batch = batches[bi]
                opt.zero_grad()
                report = compute_loss(model, batch, rng, config)
                report.total.backward()
                opt.step()
                sums += (report.item(), report.time_nll, report.kl, report.mark_ce)
        except (FloatingPointError, GradientError) as exc:
            log.warning("epoch %d diverged (%s); restoring best checkpoint", epoch, exc)
            diverged = True
            break
        n = len(batches)
        val_nll = evaluation.eval_nll(
            model, val_set, n_samples=config.n_eval_samples, seed=config.seed, include_survival=config.survival_term
        )
        history.append(
            {
                "epoch": epoch,
                "train_loss": sums[0] / n,
                "train_time_nll": sums[1] / n,
                "train_kl": sums[2] / n,
                "train_mark_ce": sums[3] / n,
                "val_nll": val_nll,
            }
        )
        if val_nll < best_val:
            best_val = val_nll
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in model.params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    for k, p in model.params.items():
        p.data = best_params[k]
    return TrainResult(model, history, best_epoch, float(best_val), diverged)


@dataclass
class GridResult:
    best_config: TrainConfig
    best_result: TrainResult
    leaderboard: list[dict]


def grid_search(
    template: TrainConfig,
    train_set: Dataset,
    val_set: Dataset,
    learning_rates=GRID_LEARNING_RATES,
    weight_decays=GRID_WEIGHT_DECAYS,
) -> GridResult:
    """Train every (learning rate, weight decay) cell and pick by validation NLL."""
    leaderboard = []
    best: tuple[float, TrainConfig, TrainResult] | None = None
    for lr in learning_rates:
        for wd in weight_decays:
            cfg = copy.deepcopy(template)
            cfg.learning_rate = lr
            cfg.weight_decay = wd
            result = train(cfg, train_set, val_set)
            row = {
                "learning_rate": lr,
                "weight_decay": wd,
                "val_nll": result.best_val_nll,
                "best_epoch": result.best_epoch,
                "epochs_run": len(result.history),
                "diverged": result.diverged,
            }
            leaderboard.append(row)
            log.info("grid cell lr=%g wd=%g -> val NLL %.4f", lr, wd, result.best_val_nll)
            if best is None or result.best_val_nll < best[0]:
                best = (result.best_val_nll, cfg, result)
    assert best is not None
    return GridResult(best_config=best[1], best_result=best[2], leaderboard=leaderboard)
