"""Metric approximations, bootstrap protocol, baselines, and experiment harnesses.

Latent-variant metrics are Monte-Carlo approximations: z is drawn from the
per-position prior, the mixture likelihood / expected gap / class probability
is averaged over the draws, and everything is deterministic given
(model, dataset, n_samples, seed) because each sequence owns a noise stream
keyed by its index.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import special as _special

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .data import Dataset, EventSequence, drop_events, make_batch
from .heads import MixtureParams
from .model import Model

__all__ = [
    "SequenceStats",
    "MetricReport",
    "evaluate_sequences",
    "eval_nll",
    "eval_rmse",
    "eval_accuracy",
    "bootstrap",
    "metric_report",
    "naive_gap_errors",
    "naive_baseline",
    "imputation_eval",
    "drift_eval",
    "export_binned_counts",
]

log = logging.getLogger(__name__)

EVAL_BATCH = 16


@dataclass
class SequenceStats:
    """Cached per-sequence sums; every metric and bootstrap reduces these."""

    n_targets: int = 0
    nll_sum: float = 0.0
    sq_err_sum: float = 0.0
    n_rmse: int = 0
    n_overflow: int = 0
    n_correct: int = 0
    n_marked: int = 0
    survival_nll: float = 0.0
    # imputation extras
    sq_err_imputed: float = 0.0
    n_imputed: int = 0
    n_unscored: int = 0


def _nll_reducer(stats: list[SequenceStats]) -> float:
    n = sum(s.n_targets for s in stats)
    total = sum(s.nll_sum + s.survival_nll for s in stats)
    return total / n if n else float("nan")


def _rmse_reducer(stats: list[SequenceStats]) -> float:
    n = sum(s.n_rmse for s in stats)
    return float(np.sqrt(sum(s.sq_err_sum for s in stats) / n)) if n else float("nan")


def _acc_reducer(stats: list[SequenceStats]) -> float:
    n = sum(s.n_marked for s in stats)
    return sum(s.n_correct for s in stats) / n if n else float("nan")


def _imputed_rmse_reducer(stats: list[SequenceStats]) -> float:
    n = sum(s.n_imputed for s in stats)
    return float(np.sqrt(sum(s.sq_err_imputed for s in stats) / n)) if n else float("nan")


def _latent_eps(model: Model, dataset: Dataset, order: list[int], n_samples: int, seed: int, max_len: int):
    """Per-sequence noise, keyed by dataset index so batching cannot change it."""
    d = model.config.feature_dim
    eps = np.zeros((len(order), max_len, n_samples, d))
    for row, idx in enumerate(order):
        n = len(dataset.sequences[idx])
        eps[row, :n] = Rng.keyed(seed, idx).normal((n, n_samples, d))
    return eps


def evaluate_sequences(
    model: Model,
    dataset: Dataset,
    n_samples: int = 256,
    seed: int = 0,
    include_survival: bool = False,
    return_predictions: bool = False,
):
    """Forward the model over a dataset and cache per-sequence metric sums.

    Predictions per position are the posterior-averaged analytic mixture
    means; events whose mixture mean overflows are skipped and counted.
    """
    from .model import target_mask  # local import to keep module load light

    n_seq = len(dataset)
    stats = [SequenceStats() for _ in range(n_seq)]
    predictions: list[np.ndarray | None] = [None] * n_seq
    order = sorted(range(n_seq), key=lambda i: len(dataset.sequences[i]))
    uses_latent = model.config.uses_latent
    m = n_samples if uses_latent else 1
    for start in range(0, n_seq, EVAL_BATCH):
        chunk = order[start : start + EVAL_BATCH]
        batch = make_batch([dataset.sequences[i] for i in chunk])
        eps = _latent_eps(model, dataset, chunk, m, seed, batch.max_len) if uses_latent else None
        with ad.no_grad():
            mix, marks, _ = model.forward(batch, n_samples=m, rng=None, latent_source="prior", eps=eps)
        tmask = target_mask(batch)
        dt_next = np.ones_like(batch.inter_event_times)
        dt_next[:, :-1] = batch.inter_event_times[:, 1:]
        dt_next[~tmask] = 1.0

        log_w = mix.log_weights.data
        means = mix.means.data
        scales = mix.scales.data
        # log density per (position, sample)
        ln_dt = np.log(dt_next)[:, :, None, None]
        x = (ln_dt - means) / scales
        comp = log_w - np.log(scales) - 0.5 * x * x
        logp = _special.logsumexp(comp, axis=-1) - ln_dt[..., 0] - 0.5 * np.log(2 * np.pi)
        ll = _special.logsumexp(logp, axis=-1) - np.log(m)  # [B, L]

        with np.errstate(over="ignore"):
            comp_mean = np.exp(means + 0.5 * scales * scales)
            mix_mean = np.sum(np.exp(log_w) * comp_mean, axis=-1)  # [B, L, M]
        pred = mix_mean.mean(axis=-1)  # [B, L]
        pred_ok = np.isfinite(mix_mean).all(axis=-1)

        if marks is not None:
            logits = marks.data
            probs = np.exp(logits - _special.logsumexp(logits, axis=-1, keepdims=True))
            pred_mark = probs.mean(axis=2).argmax(axis=-1)  # [B, L]
            mark_next = np.zeros_like(batch.marks)
            mark_next[:, :-1] = batch.marks[:, 1:]

        if include_survival and batch.t_end is not None:
            last = batch.lengths - 1
            rows = np.arange(batch.batch_size)
            gap = batch.t_end[rows] - batch.absolute_times[rows, last]
            sv = np.zeros(batch.batch_size)
            ok_rows = np.isfinite(gap) & (gap > 0)
            if np.any(ok_rows):
                lw = log_w[rows, last]
                mu = means[rows, last]
                sc = scales[rows, last]
                xs = (np.log(np.where(ok_rows, gap, 1.0))[:, None, None] - mu) / sc
                comp_s = lw + _special.log_ndtr(-xs)
                log_s = _special.logsumexp(comp_s, axis=-1)  # [B, M]
                sv = -(_special.logsumexp(log_s, axis=-1) - np.log(m))
                sv[~ok_rows] = 0.0

        for row, idx in enumerate(chunk):
            t = tmask[row]
            s = stats[idx]
            s.n_targets = int(t.sum())
            s.nll_sum = float(-(ll[row] * t).sum())
            ok = t & pred_ok[row]
            err = pred[row] - dt_next[row]
            s.sq_err_sum = float((err[ok] ** 2).sum())
            s.n_rmse = int(ok.sum())
            s.n_overflow = int((t & ~pred_ok[row]).sum())
            if marks is not None:
                s.n_marked = int(t.sum())
                s.n_correct = int((pred_mark[row][t] == mark_next[row][t]).sum())
            if include_survival and batch.t_end is not None:
                s.survival_nll = float(sv[row])
            if return_predictions:
                predictions[idx] = pred[row, : batch.lengths[row]].copy()
    overflow = sum(s.n_overflow for s in stats)
    if overflow:
        log.warning("mixture-mean overflow at %d events; skipped in RMSE", overflow)
    return (stats, predictions) if return_predictions else stats


def eval_nll(model, dataset, n_samples: int = 256, seed: int = 0, include_survival: bool = False) -> float:
    return _nll_reducer(evaluate_sequences(model, dataset, n_samples, seed, include_survival))


def eval_rmse(model, dataset, n_samples: int = 256, seed: int = 0) -> float:
    return _rmse_reducer(evaluate_sequences(model, dataset, n_samples, seed))


def eval_accuracy(model, dataset, n_samples: int = 256, seed: int = 0) -> float:
    if dataset.num_marks < 2:
        raise ValueError("eval_accuracy: dataset has no marks")
    return _acc_reducer(evaluate_sequences(model, dataset, n_samples, seed))


def bootstrap(metric_fn, items: list, n_resamples: int = 200, seed: int = 0) -> tuple[float, float]:
    """Resample items with replacement and report the metric's mean and std.

    ``items`` are cached per-sequence statistics; the model is never re-run.
    """
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    n = len(items)
    rng = Rng.keyed(seed, 0xB0, 0x07)
    values = np.empty(n_resamples)
    for r in range(n_resamples):
        idx = rng.integers(0, n, shape=n)
        values[r] = metric_fn([items[i] for i in idx])
    return float(values.mean()), float(values.std())


@dataclass
class MetricReport:
    """Bootstrapped metrics in the shape the JSON report uses."""

    variant: str
    dataset: str
    rmse_mean: float
    rmse_std: float
    nll_mean: float | None
    nll_std: float | None
    acc_mean: float | None
    acc_std: float | None
    n_resamples: int
    seed: int
    M: int
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "extras"}
        out.update(self.extras)
        return out


def metric_report(
    model: Model,
    dataset: Dataset,
    n_samples: int = 256,
    seed: int = 0,
    n_resamples: int = 200,
    include_survival: bool = False,
) -> MetricReport:
    """Point metrics plus bootstrap mean/std over test sequences."""
    stats = evaluate_sequences(model, dataset, n_samples, seed, include_survival)
    rmse_mean, rmse_std = bootstrap(_rmse_reducer, stats, n_resamples, seed)
    nll_mean, nll_std = bootstrap(_nll_reducer, stats, n_resamples, seed)
    marked = dataset.num_marks > 1
    acc_mean, acc_std = bootstrap(_acc_reducer, stats, n_resamples, seed) if marked else (None, None)
    return MetricReport(
        variant=model.config.variant,
        dataset=dataset.name,
        rmse_mean=rmse_mean,
        rmse_std=rmse_std,
        nll_mean=nll_mean,
        nll_std=nll_std,
        acc_mean=acc_mean,
        acc_std=acc_std,
        n_resamples=n_resamples,
        seed=seed,
        M=n_samples,
        extras={
            "nll_point": _nll_reducer(stats),
            "rmse_point": _rmse_reducer(stats),
            "n_overflow": sum(s.n_overflow for s in stats),
        },
    )


# -- running-median baseline ---------------------------------------------------------


def naive_gap_errors(arrival_times: np.ndarray) -> np.ndarray:
    """Errors of the running-median gap predictor along one sequence.

    After l observed events the prediction for the next gap is the median of
    the gaps seen so far (the time-from-origin of the first event is not a
    gap and is excluded).  The median is maintained incrementally with an
    insertion-sorted list.
    """
    times = np.asarray(arrival_times, dtype=np.float64)
    gaps = np.diff(times)
    errors = []
    seen: list[float] = []
    for j in range(gaps.size):
        if seen:
            mid = len(seen) // 2
            med = seen[mid] if len(seen) % 2 else 0.5 * (seen[mid - 1] + seen[mid])
            errors.append(med - gaps[j])
        bisect.insort(seen, gaps[j])
    return np.asarray(errors)


def naive_baseline(dataset: Dataset, n_resamples: int = 200, seed: int = 0) -> MetricReport:
    """RMSE of the running-median predictor; it has no likelihood, so no NLL."""
    stats = []
    for seq in dataset.sequences:
        err = naive_gap_errors(seq.arrival_times)
        stats.append(SequenceStats(sq_err_sum=float((err**2).sum()), n_rmse=err.size))
    rmse_mean, rmse_std = bootstrap(_rmse_reducer, stats, n_resamples, seed)
    return MetricReport(
        variant="naive_median",
        dataset=dataset.name,
        rmse_mean=rmse_mean,
        rmse_std=rmse_std,
        nll_mean=None,
        nll_std=None,
        acc_mean=None,
        acc_std=None,
        n_resamples=n_resamples,
        seed=seed,
        M=0,
        extras={"rmse_point": _rmse_reducer(stats)},
    )


# -- imputation under random event drops ------------------------------------------------


def imputation_eval(
    model: Model,
    dataset: Dataset,
    drop_ratio: float,
    seed: int = 0,
    n_samples: int = 256,
    n_resamples: int = 200,
) -> MetricReport:
    """Drop events, then score predictions of each dropped event.

    Each dropped event at true time t* is predicted from the corrupted
    history strictly before t*: the model's expected next gap at the last
    observed event is compared with t* minus that event's time.  Dropped
    events with no observed predecessor cannot be scored and are counted.
    """
    if not 0.0 < drop_ratio < 1.0:
        raise ValueError(f"drop_ratio must be in (0, 1), got {drop_ratio}")
    drop_seeds = Rng.keyed(seed, 0xD20B).integers(0, 2**31 - 1, shape=len(dataset))
    observed_seqs: list[EventSequence] = []
    dropped_times: list[np.ndarray] = []
    for i, seq in enumerate(dataset.sequences):
        observed, dropped_idx = drop_events(seq, drop_ratio, int(drop_seeds[i]))
        observed_seqs.append(observed)
        dropped_times.append(seq.arrival_times[dropped_idx])
    observed_set = Dataset(observed_seqs, num_marks=dataset.num_marks, name=f"{dataset.name}/drop{drop_ratio}")
    _, predictions = evaluate_sequences(
        model, observed_set, n_samples=n_samples, seed=seed, return_predictions=True
    )
    stats = []
    for i, seq in enumerate(observed_seqs):
        s = SequenceStats()
        pred = predictions[i]
        t_obs = seq.arrival_times
        for t_star in dropped_times[i]:
            j = int(np.searchsorted(t_obs, t_star)) - 1
            if j < 0 or not np.isfinite(pred[j]):
                s.n_unscored += 1
                continue
            target = t_star - t_obs[j]
            s.sq_err_imputed += float((pred[j] - target) ** 2)
            s.n_imputed += 1
        stats.append(s)
    n_scored = sum(s.n_imputed for s in stats)
    if n_scored == 0:
        log.warning("imputation_eval: no dropped events could be scored")
        rmse_mean, rmse_std = float("nan"), float("nan")
    else:
        rmse_mean, rmse_std = bootstrap(_imputed_rmse_reducer, stats, n_resamples, seed)
    return MetricReport(
        variant=model.config.variant,
        dataset=observed_set.name,
        rmse_mean=rmse_mean,
        rmse_std=rmse_std,
        nll_mean=None,
        nll_std=None,
        acc_mean=None,
        acc_std=None,
        n_resamples=n_resamples,
        seed=seed,
        M=n_samples,
        extras={
            "drop_ratio": drop_ratio,
            "n_imputed": n_scored,
            "n_unscored": sum(s.n_unscored for s in stats),
            "rmse_point": _imputed_rmse_reducer(stats),
        },
    )


def drift_eval(
    model: Model,
    datasets: list[Dataset],
    seed: int = 0,
    n_samples: int = 256,
    n_resamples: int = 200,
) -> list[MetricReport]:
    """Evaluate one trained model across ordered deployment periods."""
    reports = []
    for period, ds in enumerate(datasets):
        rep = metric_report(model, ds, n_samples=n_samples, seed=seed, n_resamples=n_resamples)
        rep.extras["period"] = period
        reports.append(rep)
    return reports


def export_binned_counts(
    model: Model,
    dataset: Dataset,
    bin_width: float,
    seed: int = 0,
    n_samples: int = 256,
) -> list[tuple[float, int, int]]:
    """Histogram true vs. predicted event times into fixed-width bins.

    Both columns cover the predicted positions (every event after the first
    of each sequence); the predicted time of an event is the previous true
    time plus the model's expected gap.  Empty bins are kept.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    _, predictions = evaluate_sequences(model, dataset, n_samples=n_samples, seed=seed, return_predictions=True)
    true_times = []
    pred_times = []
    for i, seq in enumerate(dataset.sequences):
        t = seq.arrival_times
        true_times.append(t[1:])
        pred_times.append(t[:-1] + predictions[i][: len(seq) - 1])
    true_times = np.concatenate(true_times)
    pred_times = np.concatenate(pred_times)
    finite_top = pred_times[np.isfinite(pred_times)].max(initial=0.0)
    pred_times = np.nan_to_num(pred_times, nan=0.0, posinf=finite_top, neginf=0.0)
    top = max(true_times.max(), pred_times.max())
    n_bins = max(1, int(np.ceil(top / bin_width + 1e-12)))
    edges = np.arange(n_bins + 1) * bin_width
    tc, _ = np.histogram(true_times, bins=edges)
    pc, _ = np.histogram(np.clip(pred_times, 0.0, edges[-1] - 1e-12), bins=edges)
    return [(float(edges[i]), int(tc[i]), int(pc[i])) for i in range(n_bins)]
