"""Synthetic functional data with known mean, eigenfunctions and scores.

Curves follow a two-component expansion around 3 sin(pi t), with
eigenfunctions sqrt(2) sin(2 pi t) and sqrt(2) cos(2 pi t), score variances
(1, 0.25) and unit-variance Gaussian observation noise by default.  The
integrated squared error metric lives here as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FunctionalDataset


def true_mean(t: np.ndarray) -> np.ndarray:
    return 3.0 * np.sin(np.pi * np.asarray(t, dtype=float))


def true_eigenfunction_1(t: np.ndarray) -> np.ndarray:
    return np.sqrt(2.0) * np.sin(2.0 * np.pi * np.asarray(t, dtype=float))


def true_eigenfunction_2(t: np.ndarray) -> np.ndarray:
    return np.sqrt(2.0) * np.cos(2.0 * np.pi * np.asarray(t, dtype=float))


def true_eigenfunctions(t: np.ndarray) -> np.ndarray:
    """Both eigenfunctions evaluated at t, one per column."""
    return np.column_stack([true_eigenfunction_1(t), true_eigenfunction_2(t)])


@dataclass(frozen=True)
class SimConfig:
    """Sampling plan for one synthetic dataset."""

    num_curves: int = 36
    obs_range: tuple[int, int] = (20, 30)  # per-curve count drawn uniformly, inclusive
    noise_variance: float = 1.0
    score_variances: tuple[float, float] = (1.0, 0.25)
    seed: int | None = None

    def __post_init__(self):
        if self.num_curves < 1:
            raise ValueError("num_curves must be >= 1")
        lo, hi = self.obs_range
        if lo < 2 or hi > 10_000 or lo > hi:
            raise ValueError("obs_range must satisfy 2 <= lo <= hi <= 10000")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be nonnegative")
        v1, v2 = self.score_variances
        if not (v1 >= v2 > 0):
            raise ValueError("score variances must be positive and descending")


@dataclass(frozen=True)
class SimTruth:
    """Everything the generator knows that an analysis would have to recover."""

    scores: np.ndarray  # (n, 2)
    score_variances: tuple[float, float]
    noise_variance: float
    seed: int | None = None
    mean_fn: object = field(default=true_mean, repr=False)
    eigenfunction_fns: tuple = field(
        default=(true_eigenfunction_1, true_eigenfunction_2), repr=False
    )


def generate(
    config: SimConfig, rng: np.random.Generator | None = None
) -> tuple[FunctionalDataset, SimTruth]:
    """Draw one dataset: uniform observation times, Gaussian scores and noise."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    lo, hi = config.obs_range
    sds = np.sqrt(np.asarray(config.score_variances))
    noise_sd = np.sqrt(config.noise_variance)

    curve_ids, times, values = [], [], []
    scores = np.empty((config.num_curves, 2))
    for i in range(config.num_curves):
        count = int(rng.integers(lo, hi + 1))
        t = np.sort(rng.uniform(0.0, 1.0, size=count))
        scores[i] = rng.standard_normal(2) * sds
        signal = (
            true_mean(t)
            + scores[i, 0] * true_eigenfunction_1(t)
            + scores[i, 1] * true_eigenfunction_2(t)
        )
        y = signal + noise_sd * rng.standard_normal(count)
        curve_ids.append(str(i + 1))
        times.append(t)
        values.append(y)

    dataset = FunctionalDataset(curve_ids=curve_ids, times=times, values=values)
    truth = SimTruth(
        scores=scores,
        score_variances=config.score_variances,
        noise_variance=config.noise_variance,
        seed=config.seed,
    )
    return dataset, truth


def ise(f_true: np.ndarray, f_hat: np.ndarray, grid: np.ndarray) -> float:
    """Integrated squared error between two functions sampled on a common grid."""
    f_true = np.asarray(f_true, dtype=float)
    f_hat = np.asarray(f_hat, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if not (f_true.shape == f_hat.shape == grid.shape):
        raise ValueError("grid and function samples must have equal lengths")
    return float(np.trapezoid((f_true - f_hat) ** 2, grid))
