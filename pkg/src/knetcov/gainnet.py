"""Recurrent network that outputs a Kalman gain, with exact BPTT gradients.

Architecture per step::

    u  = relu(W_in f + b_in)                     input layer
    h' = GRU(u, h)                               gates ordered (reset, update, new)
    K  = reshape(W_out h' + b_out, (m, n))       row-major, no output nonlinearity

The input ``f`` concatenates the innovation, the observation difference and
the forward update difference (``2n + m`` entries). Gradients are computed by
hand, backpropagating through the GRU and through the filter recursion
``x_t = f(x_{t-1}) + K_t (y_t - H f(x_{t-1}))`` over the full sequence.
Parameters are plain ``dict[str, ndarray]`` in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DivergenceError
from .ssmodel import StateSpaceModel

PARAM_NAMES = ("W_in", "b_in", "W_ih", "b_ih", "W_hh", "b_hh", "W_out", "b_out")
CHECKPOINT_MAGIC = "KNETCOV-GAINNET"
CHECKPOINT_VERSION = 1

Params = dict[str, np.ndarray]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class GainNetConfig:
    m: int
    n: int
    hidden: int | None = None
    input_width: int | None = None
    # Per-feature divisors; ``None`` means unnormalised features.
    feature_scale: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.hidden is None:
            object.__setattr__(self, "hidden", 10 * (self.m**2 + self.n**2))
        if self.input_width is None:
            object.__setattr__(self, "input_width", self.hidden)
        if self.feature_scale is not None:
            scale = tuple(float(s) for s in self.feature_scale)
            if len(scale) != self.feature_dim or min(scale) <= 0:
                raise ContractError(f"feature_scale needs {self.feature_dim} positive entries")
            object.__setattr__(self, "feature_scale", scale)

    @property
    def feature_dim(self) -> int:
        return 2 * self.n + self.m

    @property
    def normalized(self) -> bool:
        return self.feature_scale is not None

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h, hi, d, mn = self.hidden, self.input_width, self.feature_dim, self.m * self.n
        return {
            "W_in": (hi, d), "b_in": (hi,),
            "W_ih": (3 * h, hi), "b_ih": (3 * h,),
            "W_hh": (3 * h, h), "b_hh": (3 * h,),
            "W_out": (mn, h), "b_out": (mn,),
        }

    def to_dict(self) -> dict:
        return {"m": self.m, "n": self.n, "hidden": self.hidden, "input_width": self.input_width,
                "feature_scale": None if self.feature_scale is None else list(self.feature_scale)}


def init_params(config: GainNetConfig, seed: int, output_scale: float = 1.0) -> Params:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` per layer.

    ``output_scale`` shrinks the output layer; 0 starts from a zero gain,
    i.e. pure model prediction, which keeps chaotic models from diverging
    before training has begun.
    """
    rng = np.random.default_rng(seed)
    shapes = config.shapes()
    fan_in = {"in": config.feature_dim, "ih": config.input_width,
              "hh": config.hidden, "out": config.hidden}
    params = {}
    for name in PARAM_NAMES:
        bound = 1.0 / np.sqrt(fan_in[name.split("_")[1]])
        params[name] = rng.uniform(-bound, bound, size=shapes[name])
    params["W_out"] *= output_scale
    params["b_out"] *= output_scale
    return params


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def check_params(params: Params, config: GainNetConfig) -> None:
    shapes = config.shapes()
    for name in PARAM_NAMES:
        if name not in params or params[name].shape != shapes[name]:
            raise ContractError(f"parameter {name} missing or not shaped {shapes[name]}")
        if not np.all(np.isfinite(params[name])):
            raise ContractError(f"parameter {name} has non-finite entries")


def assemble_features(innovation, obs_diff, update_diff, config: GainNetConfig) -> np.ndarray:
    f = np.concatenate([innovation, obs_diff, update_diff], axis=-1)
    if config.feature_scale is not None:
        f = f / np.asarray(config.feature_scale)
    return f


# ---------------------------------------------------------------------------
# Forward / backward of one step
# ---------------------------------------------------------------------------


def _forward(params: Params, h, f, config: GainNetConfig, check: bool):
    H = config.hidden
    a = f @ params["W_in"].T + params["b_in"]
    u = np.maximum(a, 0.0)
    if check and not np.all(np.isfinite(u)):
        raise DivergenceError("non-finite activation in input layer")
    gi = u @ params["W_ih"].T + params["b_ih"]
    gh = h @ params["W_hh"].T + params["b_hh"]
    r = sigmoid(gi[..., :H] + gh[..., :H])
    z = sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
    cand = np.tanh(gi[..., 2 * H:] + r * gh[..., 2 * H:])
    h_new = (1.0 - z) * cand + z * h
    if check and not np.all(np.isfinite(h_new)):
        raise DivergenceError("non-finite activation in GRU cell")
    k = h_new @ params["W_out"].T + params["b_out"]
    if check and not np.all(np.isfinite(k)):
        raise DivergenceError("non-finite activation in output layer")
    K = k.reshape(k.shape[:-1] + (config.m, config.n))
    cache = (f, a, u, h, gh, r, z, cand, h_new)
    return K, h_new, cache


def gain_forward(params: Params, hidden, features, config: GainNetConfig,
                 check: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Map features (..., 2n+m) and hidden state (..., h) to ``(K, hidden')``."""
    K, h_new, _ = _forward(params, np.asarray(hidden, dtype=np.float64),
                           np.asarray(features, dtype=np.float64), config, check)
    return K, h_new


def _backward(params: Params, cache, g_K, g_h, grads: Params, config: GainNetConfig):
    """Accumulate parameter grads; return (grad wrt features, grad wrt previous hidden)."""
    f, a, u, h, gh, r, z, cand, h_new = cache
    H = config.hidden
    g_k = g_K.reshape(g_K.shape[0], -1)
    grads["W_out"] += g_k.T @ h_new
    grads["b_out"] += g_k.sum(0)
    g_h = g_h + g_k @ params["W_out"]

    g_z = g_h * (h - cand)
    g_cand = g_h * (1.0 - z)
    g_hprev = g_h * z
    g_an = g_cand * (1.0 - cand**2)
    g_r = g_an * gh[:, 2 * H:]
    g_ar = g_r * r * (1.0 - r)
    g_az = g_z * z * (1.0 - z)
    g_gi = np.concatenate([g_ar, g_az, g_an], axis=1)
    g_gh = np.concatenate([g_ar, g_az, g_an * r], axis=1)

    grads["W_ih"] += g_gi.T @ u
    grads["b_ih"] += g_gi.sum(0)
    grads["W_hh"] += g_gh.T @ h
    grads["b_hh"] += g_gh.sum(0)
    g_hprev = g_hprev + g_gh @ params["W_hh"]
    g_u = g_gi @ params["W_ih"]

    g_a = g_u * (a > 0.0)
    grads["W_in"] += g_a.T @ f
    grads["b_in"] += g_a.sum(0)
    g_f = g_a @ params["W_in"]
    if config.feature_scale is not None:
        g_f = g_f / np.asarray(config.feature_scale)
    return g_f, g_hprev


# ---------------------------------------------------------------------------
# Unrolled filter + BPTT
# ---------------------------------------------------------------------------


def _as_batch(observations, states, x0):
    obs = np.asarray(observations, dtype=np.float64)
    st = np.asarray(states, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if obs.ndim == 2:
        obs, st, x0 = obs[None], st[None], x0[None]
    if obs.shape[:2] != st.shape[:2]:
        raise ContractError("observations and states must share (B, T)")
    return obs, st, x0


def bptt_gradients(params: Params, config: GainNetConfig, model: StateSpaceModel,
                   observations, states, x0) -> tuple[float, Params]:
    """Mean squared state error and its exact gradient.

    The loss averages ``(x_hat - x)^2`` over batch, time and state dimension,
    with ``x_hat_0 = x0`` known. ``observations`` is (B, T, n), ``states``
    (B, T, m), ``x0`` (B, m).
    """
    obs, st, x0 = _as_batch(observations, states, x0)
    B, T, m = st.shape
    n = config.n
    Hm = model.H
    dyn = model.evolution

    h = np.zeros((B, config.hidden))
    x_post = x0.copy()
    x_prior_prev = x0.copy()
    y_prev = None
    caches, jacs, innovations, gains = [], [], [], []
    x_posts = np.empty((B, T, m))
    for t in range(T):
        x_prior = dyn(x_post)
        jacs.append(dyn.derivative(x_post))
        dy = obs[:, t] - x_prior @ Hm.T
        obs_diff = np.zeros((B, n)) if y_prev is None else obs[:, t] - y_prev
        f = assemble_features(dy, obs_diff, x_post - x_prior_prev, config)
        K, h, cache = _forward(params, h, f, config, check=True)
        x_prior_prev = x_prior
        x_post = x_prior + np.einsum("bij,bj->bi", K, dy)
        if not np.all(np.isfinite(x_post)):
            raise DivergenceError(f"non-finite state estimate at step {t + 1}")
        x_posts[:, t] = x_post
        y_prev = obs[:, t]
        caches.append(cache)
        innovations.append(dy)
        gains.append(K)

    err = x_posts - st
    loss = float(np.mean(err**2))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")

    grads = zeros_like_params(params)
    g_post_direct = 2.0 * err / err.size
    g_post = np.zeros((B, m))   # into x_post[t] from later steps
    g_prior = np.zeros((B, m))  # into x_prior[t] from later steps
    g_h = np.zeros((B, config.hidden))
    for t in range(T - 1, -1, -1):
        gp = g_post + g_post_direct[:, t]
        K, dy = gains[t], innovations[t]
        g_prior_t = g_prior + gp
        g_K = gp[:, :, None] * dy[:, None, :]
        g_dy = np.einsum("bij,bi->bj", K, gp)
        g_f, g_h = _backward(params, caches[t], g_K, g_h, grads, config)
        g_dy = g_dy + g_f[:, :n]
        g_upd = g_f[:, 2 * n:]
        g_prior_t = g_prior_t - g_dy @ Hm
        # x_prior[t] = f(x_post[t-1]); feature at t uses x_post[t-1] - x_prior[t-1]
        g_post = g_upd + (g_prior_t[:, None, :] @ jacs[t])[:, 0]
        g_prior = -g_upd if t > 0 else np.zeros((B, m))
    return loss, grads


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moment accumulators."""

    m: Params
    v: Params
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "OptimizerState":
        return cls(zeros_like_params(params), zeros_like_params(params), 0, lr, beta1, beta2, eps)


def optimizer_step(params: Params, grads: Params, state: OptimizerState
                   ) -> tuple[Params, OptimizerState]:
    """Bias-corrected Adam update; inputs are not modified."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for k in params:
        g = grads[k]
        mk = b1 * state.m[k] + (1.0 - b1) * g
        vk = b2 * state.v[k] + (1.0 - b2) * g * g
        new_params[k] = params[k] - state.lr * (mk / c1) / (np.sqrt(vk / c2) + state.eps)
        new_m[k], new_v[k] = mk, vk
    return new_params, OptimizerState(new_m, new_v, step, state.lr, b1, b2, state.eps)


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def clip_by_global_norm(grads: Params, max_norm: float) -> Params:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: GainNetConfig
    params: Params
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, config: GainNetConfig, params: Params,
                    extra: dict | None = None) -> Path:
    """JSON checkpoint: magic string, version, config and row-major layer data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layers = [{"name": k, "dims": list(params[k].shape), "data": params[k].ravel().tolist()}
              for k in PARAM_NAMES]
    doc = {"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION,
           "config": config.to_dict(), "layers": layers, "extra": extra or {}}
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("magic") != CHECKPOINT_MAGIC:
        raise ContractError(f"{path} is not a gain-network checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {doc.get('version')}")
    cfg = doc["config"]
    if cfg.get("feature_scale") is not None:
        cfg["feature_scale"] = tuple(cfg["feature_scale"])
    config = GainNetConfig(**cfg)
    params = {layer["name"]: np.asarray(layer["data"], dtype=np.float64).reshape(layer["dims"])
              for layer in doc["layers"]}
    check_params(params, config)
    return Checkpoint(config, params, doc.get("extra", {}))
