"""KalmanNet: the Kalman filter recursion with a learned gain.

Each step predicts ``x_{t|t-1} = f(x_{t-1})`` and ``y_{t|t-1} = H x_{t|t-1}``
with the assumed model, asks the gain network for ``K_t`` and applies
``x_t = x_{t|t-1} + K_t (y_t - y_{t|t-1})``. The gain sequence is kept so the
error covariance can be recovered afterwards (see ``uncertainty``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import gainnet
from .errors import ContractError, DivergenceError
from .gainnet import GainNetConfig, OptimizerState, Params
from .metrics import MetricSeries, build_series, squared_error, to_db
from .ssmodel import Dataset, StateSpaceModel
from .uncertainty import ErrorPrediction, ObservationGeometry, predict_error

log = logging.getLogger(__name__)

LOSS_CAP = 1e6


@dataclass(frozen=True)
class KnetState:
    """Recurrent quantities carried between steps (batched on axis 0)."""

    x_post: np.ndarray
    x_prior_prev: np.ndarray
    y_prev: np.ndarray | None
    hidden: np.ndarray
    model: StateSpaceModel
    t: int = 0


def knet_init(model: StateSpaceModel, x0, config: GainNetConfig) -> KnetState:
    """Zero hidden state, ``x_{0|-1} = x0`` and no previous observation."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[-1] != model.m or (config.m, config.n) != (model.m, model.n):
        raise ContractError("initial state / network dimensions do not match the model")
    batch = x0.shape[:-1]
    return KnetState(x0.copy(), x0.copy(), None, np.zeros(batch + (config.hidden,)), model)


def knet_step(state: KnetState, params: Params, config: GainNetConfig, y,
              check: bool = True) -> tuple[np.ndarray, np.ndarray, KnetState]:
    """Advance one step; returns ``(x_hat_t, K_t, new_state)``."""
    model = state.model
    y = np.asarray(y, dtype=np.float64)
    x_prior = model.evolution(state.x_post)
    innovation = y - x_prior @ model.H.T
    obs_diff = np.zeros_like(y) if state.y_prev is None else y - state.y_prev
    features = gainnet.assemble_features(innovation, obs_diff, state.x_post - state.x_prior_prev,
                                         config)
    K, hidden = gainnet.gain_forward(params, state.hidden, features, config, check=check)
    x_post = x_prior + np.einsum("...ij,...j->...i", K, innovation)
    if check and not np.all(np.isfinite(x_post)):
        raise DivergenceError(f"non-finite state estimate at step {state.t + 1}")
    new_state = KnetState(x_post, x_prior, y, hidden, model, state.t + 1)
    return x_post, K, new_state


@dataclass(frozen=True)
class KnetRun:
    """Estimates (B, T, m), gains (B, T, m, n) and a per-trajectory divergence mask."""

    estimates: np.ndarray
    gains: np.ndarray
    diverged: np.ndarray


def run_knet(params: Params, config: GainNetConfig, model: StateSpaceModel, observations, x0,
             gain_override=None) -> KnetRun:
    """Filter a batch; divergent trajectories are flagged instead of raising.

    ``gain_override`` (B?, T, m, n) replaces the network output, which is how
    the recursion is checked against a model-based filter.
    """
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim == 2:
        obs = obs[None]
    B, T, _ = obs.shape
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (B, model.m))
    state = knet_init(model, x0, config)
    est = np.empty((B, T, model.m))
    gains = np.empty((B, T, model.m, model.n))
    diverged = np.zeros(B, dtype=bool)
    with np.errstate(all="ignore"):
        for t in range(T):
            if gain_override is None:
                x, K, state = knet_step(state, params, config, obs[:, t], check=False)
            else:
                x, K, state = _fixed_gain_step(state, np.asarray(gain_override)[..., t, :, :],
                                               obs[:, t])
            est[:, t] = x
            gains[:, t] = K
            bad = ~(np.all(np.isfinite(x), axis=-1) & np.all(np.isfinite(K), axis=(-2, -1)))
            if bad.any():
                # park divergent rows at zero so the dynamics never see non-finite input
                diverged |= bad
                state = replace(state, x_post=np.where(diverged[:, None], 0.0, state.x_post),
                                x_prior_prev=np.where(diverged[:, None], 0.0, state.x_prior_prev),
                                hidden=np.where(diverged[:, None], 0.0, state.hidden))
    est[diverged] = np.nan
    gains[diverged] = np.nan
    return KnetRun(est, gains, diverged)


def _fixed_gain_step(state: KnetState, K, y):
    model = state.model
    x_prior = model.evolution(state.x_post)
    innovation = y - x_prior @ model.H.T
    K = np.broadcast_to(K, x_prior.shape[:-1] + (model.m, model.n))
    x_post = x_prior + np.einsum("...ij,...j->...i", K, innovation)
    return x_post, K, replace(state, x_post=x_post, x_prior_prev=x_prior, y_prev=y, t=state.t + 1)


def sequence_mse(params: Params, config: GainNetConfig, model: StateSpaceModel,
                 observations, states, x0, cap: float | None = None) -> float:
    """Mean squared state error; with ``cap``, per-trajectory losses are clipped."""
    run = run_knet(params, config, model, observations, x0)
    per_traj = np.mean((run.estimates - np.asarray(states)) ** 2, axis=(1, 2))
    if cap is not None:
        per_traj = np.where(np.isfinite(per_traj), np.minimum(per_traj, cap), cap)
    return float(np.mean(per_traj))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 50
    clip_norm: float = 1.0
    seed: int = 0
    hidden: int | None = None
    normalize_features: bool = False
    output_init_scale: float = 1.0


@dataclass
class TrainResult:
    params: Params
    config: GainNetConfig
    train_db: list[float] = field(default_factory=list)
    val_db: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def loss_rows(self) -> list[tuple[int, float, float]]:
        return [(e + 1, tr, va) for e, (tr, va) in enumerate(zip(self.train_db, self.val_db))]


def feature_scale_from_data(model: StateSpaceModel, data: Dataset) -> tuple[float, ...]:
    """RMS of observation increments, reused for the state block through ``H``."""
    obs = data.observations
    dy = np.diff(obs, axis=1).reshape(-1, model.n)
    sy = np.sqrt(np.mean(dy**2, axis=0)) + 1e-12
    dx = np.diff(data.states, axis=1).reshape(-1, model.m)
    sx = np.sqrt(np.mean(dx**2, axis=0)) + 1e-12
    return tuple(sy) + tuple(sy) + tuple(sx)


def train_knet(model: StateSpaceModel, train: Dataset, val: Dataset, cfg: TrainConfig,
               progress=None) -> TrainResult:
    """Minibatch Adam on full-sequence BPTT with early stopping on validation MSE.

    Returns the parameters of the best validation epoch and per-epoch train /
    validation MSE in dB. ``progress`` is called as ``progress(epoch, train_db, val_db)``.
    """
    if train.N == 0 or val.N == 0:
        raise ContractError("training and validation sets must be non-empty")
    scale = feature_scale_from_data(model, train) if cfg.normalize_features else None
    net = GainNetConfig(model.m, model.n, hidden=cfg.hidden, feature_scale=scale)
    params = gainnet.init_params(net, cfg.seed, cfg.output_init_scale)
    opt = OptimizerState.fresh(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 1)
    result = TrainResult(params, net)
    best = np.inf
    since_best = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(train.N)
        losses, sizes = [], []
        for start in range(0, train.N, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            try:
                loss, grads = gainnet.bptt_gradients(
                    params, net, model, train.observations[idx], train.states[idx],
                    train.initial_states[idx])
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch + 1}: {exc}") from exc
            grads = gainnet.clip_by_global_norm(grads, cfg.clip_norm)
            params, opt = gainnet.optimizer_step(params, grads, opt)
            losses.append(loss)
            sizes.append(len(idx))
        train_mse = float(np.average(losses, weights=sizes))
        val_mse = sequence_mse(params, net, model, val.observations, val.states,
                               val.initial_states, cap=LOSS_CAP)
        result.train_db.append(float(to_db(train_mse)))
        result.val_db.append(float(to_db(val_mse)))
        if progress is not None:
            progress(epoch + 1, result.train_db[-1], result.val_db[-1])
        if val_mse < best:
            best = val_mse
            since_best = 0
            result.params = params
            result.best_epoch = epoch + 1
        else:
            since_best += 1
            if since_best >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch + 1, result.best_epoch)
                break
    return result


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KnetEvaluation:
    series: MetricSeries
    run: KnetRun
    prediction: ErrorPrediction


def evaluate_knet(params: Params, config: GainNetConfig, model: StateSpaceModel, test: Dataset,
                  label: str = "knet", chunk: int = 500) -> KnetEvaluation:
    """Empirical error and gain-derived predicted error over the test set."""
    geom = ObservationGeometry.from_model(model)
    runs = [run_knet(params, config, model, test.observations[s:s + chunk],
                     test.initial_states[s:s + chunk]) for s in range(0, test.N, chunk)]
    run = KnetRun(*(np.concatenate([getattr(r, k) for r in runs]) for k in
                    ("estimates", "gains", "diverged")))
    keep = ~run.diverged
    gains = np.where(keep[:, None, None, None], run.gains, 0.0)
    pred = predict_error(gains, geom)
    pred_mse = np.where(keep[:, None], pred.mse, np.nan)
    with np.errstate(invalid="ignore"):
        sq = squared_error(run.estimates, test.states)
    meta = {"failed_steps": int(pred.failed[keep].sum()),
            "non_psd_steps": int(pred.non_psd[keep].sum())}
    series = build_series(label, sq, pred_mse, keep, meta)
    return KnetEvaluation(series, run, pred)
