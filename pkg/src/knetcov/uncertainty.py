"""Error covariance recovered from a Kalman gain and the observation model.

If ``K = P H^T (H P H^T + R)^{-1}`` for some prior covariance ``P`` and ``H``
has full column rank, ``P`` can be solved for from ``K`` alone:

    H P H^T = (I_n - H K)^{-1} H K R
    P       = (H^T H)^{-1} H^T [H P H^T] H (H^T H)^{-1}

and the posterior covariance is ``(I_m - K H) P``. Nothing about the
evolution model or ``Q`` is needed, which is what makes this usable on the
gains produced by a learned filter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, GainBoundaryError, UnsupportedGeometryError
from .kalman import symmetrize

COND_LIMIT = 1e12
RANK_TOL = 1e-10
PSD_TOL = 1e-10


@dataclass(frozen=True)
class ObservationGeometry:
    """``H`` with full column rank, its ``(H^T H)^{-1}`` and the noise ``R``."""

    H: np.ndarray
    R: np.ndarray | None = None
    H_tilde: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        n, m = H.shape
        if n < m:
            raise UnsupportedGeometryError(f"H is {n}x{m}; need at least as many observations as states")
        sv = np.linalg.svd(H, compute_uv=False)
        if sv[-1] <= RANK_TOL * sv[0]:
            raise UnsupportedGeometryError(
                f"H is rank deficient (singular values {sv[0]:.3e} .. {sv[-1]:.3e})")
        R = np.eye(n) if self.R is None else np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        if R.shape != (n, n):
            raise ContractError(f"R must be {n}x{n}, got {R.shape}")
        if np.max(np.abs(R - R.T)) > 1e-10 or np.linalg.eigvalsh(R).min() <= 0:
            raise ContractError("R must be symmetric positive definite")
        H_tilde = np.linalg.inv(H.T @ H)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "H_tilde", H_tilde)

    @property
    def m(self) -> int:
        return self.H.shape[1]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @classmethod
    def from_model(cls, model) -> "ObservationGeometry":
        return cls(model.H, model.R)


def _check_gain(K: np.ndarray, geom: ObservationGeometry) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    if K.shape[-2:] != (geom.m, geom.n):
        raise ContractError(f"gain must be {geom.m}x{geom.n}, got {K.shape[-2:]}")
    return K


def sigma_prior_from_gain(K, geom: ObservationGeometry) -> np.ndarray:
    """Prior covariance implied by gain ``K`` (broadcasts over leading axes)."""
    K = _check_gain(K, geom)
    H = geom.H
    HK = H @ K
    A = np.eye(geom.n) - HK
    cond = np.linalg.cond(A)
    worst = float(np.max(cond))
    if not np.isfinite(worst) or worst > COND_LIMIT:
        raise GainBoundaryError(
            f"gain at observation-trust boundary: cond(I - HK) = {worst:.3e}")
    HPH = np.linalg.solve(A, HK @ geom.R)
    left = geom.H_tilde @ H.T
    return symmetrize(left @ HPH @ np.swapaxes(left, -1, -2))


def error_cov_from_gain(K, geom: ObservationGeometry) -> np.ndarray:
    """Posterior error covariance ``(I - K H) P`` with ``P`` from ``sigma_prior_from_gain``."""
    K = _check_gain(K, geom)
    prior = sigma_prior_from_gain(K, geom)
    return symmetrize((np.eye(geom.m) - K @ geom.H) @ prior)


def is_psd(cov: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    return np.linalg.eigvalsh(cov)[..., 0] >= -tol


@dataclass(frozen=True)
class ErrorPrediction:
    """Per-step covariance predictions for a batch of gain sequences.

    ``cov`` is (B, T, m, m) and NaN where the step failed; ``failed`` marks
    those steps. ``non_psd`` flags steps whose covariance has a negative
    eigenvalue; those are reported unmodified.
    """

    cov: np.ndarray
    failed: np.ndarray
    non_psd: np.ndarray

    @property
    def mse(self) -> np.ndarray:
        """``trace(Sigma_t)/m`` per trajectory and step."""
        return np.trace(self.cov, axis1=-2, axis2=-1) / self.cov.shape[-1]

    @property
    def db(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return 10.0 * np.log10(self.mse)

    @property
    def std(self) -> np.ndarray:
        """Per-state standard deviations for uncertainty bands (NaN if negative)."""
        with np.errstate(invalid="ignore"):
            return np.sqrt(np.diagonal(self.cov, axis1=-2, axis2=-1))

    def failed_steps(self) -> list[tuple[int, int]]:
        return [tuple(int(i) for i in ix) for ix in np.argwhere(self.failed)]


def predict_error(gains, geom: ObservationGeometry) -> ErrorPrediction:
    """Apply ``error_cov_from_gain`` to every step of a gain sequence.

    ``gains`` is (T, m, n) or (B, T, m, n). Steps whose ``I - HK`` is not
    safely invertible are recorded in ``failed`` and left as NaN rather than
    aborting the whole series.
    """
    gains = np.asarray(gains, dtype=np.float64)
    squeeze = gains.ndim == 3
    if squeeze:
        gains = gains[None]
    if not np.all(np.isfinite(gains)):
        raise ContractError("gain sequence contains non-finite values")
    B, T = gains.shape[:2]
    cov = np.full((B, T, geom.m, geom.m), np.nan)
    try:
        cov[:] = error_cov_from_gain(gains, geom)
        failed = np.zeros((B, T), dtype=bool)
    except GainBoundaryError:
        A = np.eye(geom.n) - geom.H @ gains
        cond = np.linalg.cond(A)
        failed = ~np.isfinite(cond) | (cond > COND_LIMIT)
        ok = ~failed
        if ok.any():
            cov[ok] = error_cov_from_gain(gains[ok], geom)
    non_psd = np.zeros((B, T), dtype=bool)
    good = ~failed
    if good.any():
        non_psd[good] = ~is_psd(cov[good])
    if squeeze:
        cov, failed, non_psd = cov[0], failed[0], non_psd[0]
    return ErrorPrediction(cov, failed, non_psd)
