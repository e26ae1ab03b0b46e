"""Per-timestep error series in dB."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


def to_db(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return 10.0 * np.log10(x)


def _nanmean(a) -> float:
    # -inf dB (exact estimates) and all-NaN windows are legitimate here
    with warnings.catch_warnings(), np.errstate(invalid="ignore"):
        warnings.simplefilter("ignore", RuntimeWarning)
        return float(np.nanmean(a))


def squared_error(estimates: np.ndarray, states: np.ndarray) -> np.ndarray:
    """``||x_hat - x||^2 / m`` per trajectory and step, shape (B, T)."""
    return np.mean((estimates - states) ** 2, axis=-1)


@dataclass(frozen=True)
class MetricSeries:
    """Empirical and predicted error of one filter, both in dB, length T.

    ``empirical_db[t]`` is the dB of the mean over kept trajectories of
    ``||x_hat_t - x_t||^2 / m``; ``predicted_db[t]`` the dB of the mean
    predicted ``trace(Sigma_t) / m``.
    """

    label: str
    empirical_db: np.ndarray
    predicted_db: np.ndarray
    n_trajectories: int
    n_excluded: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.empirical_db.shape != self.predicted_db.shape:
            raise ValueError("empirical and predicted series must share length T")

    @property
    def T(self) -> int:
        return self.empirical_db.shape[0]

    def _window(self, a, t_min: int):
        # t is 1-based
        return a[t_min - 1:]

    def mean_empirical_db(self, t_min: int = 1) -> float:
        return _nanmean(self._window(self.empirical_db, t_min))

    def mean_predicted_db(self, t_min: int = 1) -> float:
        return _nanmean(self._window(self.predicted_db, t_min))

    def mean_abs_gap_db(self, t_min: int = 1) -> float:
        """Time-averaged ``|predicted - empirical|`` in dB."""
        with np.errstate(invalid="ignore"):
            gap = self._window(self.predicted_db - self.empirical_db, t_min)
        return _nanmean(np.abs(gap))

    def mean_gap_db(self, t_min: int = 1) -> float:
        """Time-averaged ``predicted - empirical`` (negative = underestimation)."""
        with np.errstate(invalid="ignore"):
            return _nanmean(self._window(self.predicted_db - self.empirical_db, t_min))

    def summary(self, t_min: int = 1) -> dict:
        return {
            "empirical_db": self.mean_empirical_db(t_min),
            "predicted_db": self.mean_predicted_db(t_min),
            "gap_db": self.mean_gap_db(t_min),
            "abs_gap_db": self.mean_abs_gap_db(t_min),
            "n_trajectories": self.n_trajectories,
            "n_excluded": self.n_excluded,
        }


def build_series(label: str, sq_err: np.ndarray, predicted_mse: np.ndarray,
                 keep: np.ndarray | None = None, meta: dict | None = None) -> MetricSeries:
    """Average (B, T) arrays over kept trajectories and convert to dB.

    NaN entries of ``predicted_mse`` mark failed steps and are skipped.
    """
    B = sq_err.shape[0]
    keep = np.ones(B, dtype=bool) if keep is None else keep
    emp = np.mean(sq_err[keep], axis=0) if keep.any() else np.full(sq_err.shape[1], np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pred = np.nanmean(predicted_mse[keep], axis=0) if keep.any() else np.full_like(emp, np.nan)
    return MetricSeries(label, to_db(emp), to_db(pred), int(keep.sum()), int(B - keep.sum()),
                        dict(meta or {}))
