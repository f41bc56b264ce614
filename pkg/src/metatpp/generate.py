"""Synthetic event-sequence generation via thinning."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .autodiff import Rng
from .data import Dataset, EventSequence

__all__ = [
    "sample_thinning",
    "generate_sinusoidal",
    "generate_constant_rate",
    "SIN_PERIOD",
    "SIN_T_MAX",
]

SIN_PERIOD = 4.0 * math.pi
SIN_T_MAX = 32.0 * math.pi


def sample_thinning(
    intensity: Callable[[np.ndarray], np.ndarray],
    upper_bound: float,
    t_max: float,
    rng: Rng,
) -> np.ndarray:
    """Simulate an inhomogeneous Poisson process on (0, t_max] by thinning.

    Candidate points come from a homogeneous process at rate ``upper_bound``;
    each is kept with probability intensity(t) / upper_bound.
    """
    if upper_bound <= 0 or t_max <= 0:
        raise ValueError("sample_thinning: upper_bound and t_max must be positive")
    # Candidate count is Poisson(upper_bound * t_max); order statistics of
    # uniforms give the candidate times in one vectorized draw.
    n_cand = int(rng._gen.poisson(upper_bound * t_max))
    if n_cand == 0:
        return np.empty(0)
    times = np.sort(rng.uniform(0.0, t_max, shape=n_cand))
    lam = intensity(times)
    if np.any(lam > upper_bound * (1 + 1e-12)):
        raise ValueError("sample_thinning: intensity exceeds its upper bound")
    keep = rng.uniform(shape=n_cand) * upper_bound < lam
    accepted = times[keep]
    return accepted[accepted > 0]


def sinusoidal_intensity(base_rate: float, phase: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    """Rate c*(1 + sin(t/2 + phase))/2 + 0.01*c, period 4*pi."""

    def intensity(t: np.ndarray) -> np.ndarray:
        return base_rate * (1.0 + np.sin(0.5 * t + phase)) / 2.0 + 0.01 * base_rate

    return intensity


def generate_sinusoidal(
    n_sequences: int,
    seed: int,
    phase: float = 0.0,
    count_range: tuple[int, int] = (20, 200),
    t_max: float = SIN_T_MAX,
    name: str = "sinusoidal",
) -> Dataset:
    """Sinusoidally modulated Poisson sequences on [0, 32*pi].

    Each sequence draws a target event count uniformly from ``count_range``
    and scales the base rate so the expected count matches it; sequences
    with fewer than two events are redrawn.  ``phase`` shifts the sinusoid,
    which is how the distribution-drift experiments move the process.
    """
    if n_sequences < 1:
        raise ValueError(f"n_sequences must be >= 1, got {n_sequences}")
    lo, hi = count_range
    # Expected count at base rate c: integral of the intensity over [0, t_max].
    # The sine integrates to (cos(phase) - cos(t_max/2 + phase)), zero for the
    # default full-period domain.
    sine_part = (math.cos(phase) - math.cos(0.5 * t_max + phase))
    unit_mass = 0.5 * t_max + sine_part + 0.01 * t_max  # integral at c = 1
    sequences = []
    for i in range(n_sequences):
        seq_rng = Rng.keyed(seed, i)
        for attempt in range(100):
            target = float(seq_rng.integers(lo, hi + 1))
            c = target / unit_mass
            times = sample_thinning(sinusoidal_intensity(c, phase), 1.01 * c, t_max, seq_rng)
            if times.size >= 2:
                break
        else:
            raise RuntimeError(f"sinusoidal generator: sequence {i} kept coming up short")
        sequences.append(EventSequence(arrival_times=times, id=f"{name}-{i}", t_end=t_max))
    return Dataset(sequences, num_marks=1, name=name)


def generate_constant_rate(
    n_sequences: int,
    rate: float,
    t_max: float,
    seed: int,
    name: str = "poisson",
) -> Dataset:
    """Homogeneous Poisson sequences; inter-event gaps are Exp(rate)."""
    if n_sequences < 1 or rate <= 0 or t_max <= 0:
        raise ValueError("generate_constant_rate: bad arguments")
    sequences = []
    for i in range(n_sequences):
        seq_rng = Rng.keyed(seed, i)
        for attempt in range(100):
            times = sample_thinning(lambda t: np.full_like(t, rate), rate, t_max, seq_rng)
            if times.size >= 2:
                break
        else:
            raise RuntimeError(f"constant-rate generator: sequence {i} kept coming up short")
        sequences.append(EventSequence(arrival_times=times, id=f"{name}-{i}", t_end=t_max))
    return Dataset(sequences, num_marks=1, name=name)
