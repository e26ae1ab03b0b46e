"""Model-based Kalman filter, extended Kalman filter and Riccati iteration.

All functions broadcast over leading batch dimensions. A linear model's
covariances do not depend on the data, so they stay unbatched until
``run_filter`` stacks them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ConvergenceError, SingularInnovationError
from .ssmodel import StateSpaceModel

_COND_LIMIT = 1.0 / np.finfo(np.float64).eps


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


@dataclass(frozen=True)
class Prior:
    x_prior: np.ndarray
    Sigma_prior: np.ndarray
    y_pred: np.ndarray
    S: np.ndarray


@dataclass(frozen=True)
class FilterMoments:
    """Moments of one predict/update cycle."""

    x_prior: np.ndarray
    x_post: np.ndarray
    Sigma_prior: np.ndarray
    Sigma_post: np.ndarray
    y_pred: np.ndarray
    S: np.ndarray
    innovation: np.ndarray
    gain: np.ndarray


def kf_predict(model: StateSpaceModel, x_post, Sigma_post) -> Prior:
    """Propagate the posterior one step.

    The mean goes through the evolution map; the covariance uses its Jacobian
    at the previous posterior (which is just ``F`` for a linear model).
    """
    x_post = np.asarray(x_post, dtype=np.float64)
    if x_post.shape[-1] != model.m:
        raise ContractError(f"x_post must have trailing dimension {model.m}")
    F = model.evolution.jacobian(x_post)
    x_prior = model.evolution(x_post)
    Sigma_prior = symmetrize(F @ Sigma_post @ np.swapaxes(F, -1, -2) + model.Q)
    y_pred = x_prior @ model.H.T
    S = symmetrize(model.H @ Sigma_prior @ model.H.T + model.R)
    return Prior(x_prior, Sigma_prior, y_pred, S)


def kf_gain(Sigma_prior, H, R) -> np.ndarray:
    """``K = Sigma_prior H^T S^{-1}`` via a linear solve against ``S``."""
    Sigma_prior = np.asarray(Sigma_prior, dtype=np.float64)
    HS = H @ Sigma_prior
    S = symmetrize(HS @ H.T + R)
    cond = np.linalg.cond(S)
    worst = float(np.max(cond))
    if not np.isfinite(worst) or worst > _COND_LIMIT:
        raise SingularInnovationError("innovation covariance is singular", worst)
    return np.swapaxes(np.linalg.solve(S, HS), -1, -2)


def kf_update(prior: Prior, K, y) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance from the prior moments and a gain."""
    innovation = np.asarray(y, dtype=np.float64) - prior.y_pred
    x_post = prior.x_prior + np.einsum("...ij,...j->...i", K, innovation)
    Sigma_post = symmetrize(prior.Sigma_prior - K @ prior.S @ np.swapaxes(K, -1, -2))
    return x_post, Sigma_post


def ekf_step(model: StateSpaceModel, x_post, Sigma_post, y) -> FilterMoments:
    """One full KF/EKF cycle. For linear models this is the plain KF."""
    prior = kf_predict(model, x_post, Sigma_post)
    K = kf_gain(prior.Sigma_prior, model.H, model.R)
    x_new, Sigma_new = kf_update(prior, K, y)
    return FilterMoments(
        x_prior=prior.x_prior, x_post=x_new, Sigma_prior=prior.Sigma_prior,
        Sigma_post=Sigma_new, y_pred=prior.y_pred, S=prior.S,
        innovation=np.asarray(y, dtype=np.float64) - prior.y_pred, gain=K,
    )


kf_step = ekf_step


@dataclass(frozen=True)
class FilterRun:
    """Stacked per-step moments; time is axis 1 (shape (B, T, ...))."""

    x_prior: np.ndarray
    x_post: np.ndarray
    Sigma_prior: np.ndarray
    Sigma_post: np.ndarray
    gain: np.ndarray
    innovation: np.ndarray

    @property
    def predicted_mse(self) -> np.ndarray:
        """Per-trajectory ``trace(Sigma_t)/m``, shape (B, T)."""
        m = self.Sigma_post.shape[-1]
        return np.trace(self.Sigma_post, axis1=-2, axis2=-1) / m


def run_filter(model: StateSpaceModel, observations, x0, Sigma0=None) -> FilterRun:
    """Filter a batch of observation sequences ``(B, T, n)`` from ``x0`` (B, m)."""
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim == 2:
        obs = obs[None]
    B, T, _ = obs.shape
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (B, model.m)).copy()
    Sigma = np.zeros((model.m, model.m)) if Sigma0 is None else np.asarray(Sigma0, dtype=np.float64)
    keys = ("x_prior", "x_post", "Sigma_prior", "Sigma_post", "gain", "innovation")
    out = {k: [] for k in keys}
    for t in range(T):
        mom = ekf_step(model, x, Sigma, obs[:, t])
        x, Sigma = mom.x_post, mom.Sigma_post
        for k in keys:
            out[k].append(getattr(mom, k))

    def stack(seq, tail):
        arr = np.stack([np.broadcast_to(a, (B,) + tail) for a in seq], axis=1)
        return np.ascontiguousarray(arr)

    m, n = model.m, model.n
    return FilterRun(
        x_prior=stack(out["x_prior"], (m,)), x_post=stack(out["x_post"], (m,)),
        Sigma_prior=stack(out["Sigma_prior"], (m, m)), Sigma_post=stack(out["Sigma_post"], (m, m)),
        gain=stack(out["gain"], (m, n)), innovation=stack(out["innovation"], (n,)),
    )


def kf_riccati_steady_state(model: StateSpaceModel, tol: float = 1e-12, max_iter: int = 100_000,
                            Sigma0=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Iterate the covariance recursion to its fixed point.

    Returns ``(Sigma_prior, Sigma_post, K)`` at convergence, declared when
    successive posteriors differ by less than ``tol`` in max-abs norm.
    """
    if not model.is_linear:
        raise ContractError("steady state requires a linear model")
    F, H, Q, R = model.F, model.H, model.Q, model.R
    post = np.zeros((model.m, model.m)) if Sigma0 is None else np.asarray(Sigma0, dtype=np.float64)
    for _ in range(max_iter):
        prior = symmetrize(F @ post @ F.T + Q)
        K = kf_gain(prior, H, R)
        S = symmetrize(H @ prior @ H.T + R)
        new_post = symmetrize(prior - K @ S @ K.T)
        if np.max(np.abs(new_post - post)) < tol:
            return prior, new_post, K
        post = new_post
    raise ConvergenceError(f"Riccati iteration did not converge in {max_iter} iterations")
