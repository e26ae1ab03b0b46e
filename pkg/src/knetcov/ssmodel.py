"""State-space models, trajectory generation and observation whitening.

Models follow the discrete-time form

    x_t = f(x_{t-1}) + w_t,    w_t ~ N(0, Q)
    y_t = H x_t + v_t,         v_t ~ N(0, R)

where ``f`` is either a dense matrix (``LinearDynamics``) or the Taylor-
discretised Lorenz system (``LorenzDynamics``). Every array function here
accepts leading batch dimensions; vectors live on the last axis.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, NumericError

SYM_TOL = 1e-10
_SPLIT_OFFSETS = {"train": 0, "validation": 1 << 32, "test": 2 << 32}
_MASK64 = (1 << 64) - 1


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.ndim != 2:
        raise ContractError(f"{name} must be a matrix, got shape {a.shape}")
    return a


def _check_covariance(a: np.ndarray, name: str, strict: bool) -> None:
    if a.shape[0] != a.shape[1]:
        raise ContractError(f"{name} must be square, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL:
        raise ContractError(f"{name} is not symmetric")
    eig = np.linalg.eigvalsh(a)
    if strict and eig.min() <= 0.0:
        raise ContractError(f"{name} must be positive definite (min eigenvalue {eig.min():.3e})")
    if eig.min() < -SYM_TOL:
        raise ContractError(f"{name} must be positive semidefinite (min eigenvalue {eig.min():.3e})")


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearDynamics:
    """Linear evolution ``x -> F x``."""

    F: np.ndarray

    def __post_init__(self):
        F = _as_matrix(self.F, "F")
        if F.shape[0] != F.shape[1]:
            raise ContractError(f"F must be square, got {F.shape}")
        object.__setattr__(self, "F", F)

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.F.T

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Evolution matrix used in the covariance recursion."""
        return self.F

    def derivative(self, x: np.ndarray) -> np.ndarray:
        """Exact derivative of the map, for back-propagation."""
        return self.F

    def to_dict(self) -> dict:
        return {"kind": "linear", "F": self.F.tolist()}


def lorenz_matrix(x: np.ndarray, sigma: float = 10.0, rho: float = 28.0,
                  beta: float = 8.0 / 3.0) -> np.ndarray:
    """State-dependent coefficient matrix ``A(x)`` with ``A(x) x`` = Lorenz field."""
    x = np.asarray(x, dtype=np.float64)
    A = np.zeros(x.shape[:-1] + (3, 3))
    A[..., 0, 0] = -sigma
    A[..., 0, 1] = sigma
    A[..., 1, 0] = rho
    A[..., 1, 1] = -1.0
    A[..., 1, 2] = -x[..., 0]
    A[..., 2, 1] = x[..., 0]
    A[..., 2, 2] = -beta
    return A


def lorenz_transition(x, dt: float, order: int, sigma: float = 10.0, rho: float = 28.0,
                      beta: float = 8.0 / 3.0) -> tuple[np.ndarray, np.ndarray]:
    """One Lorenz step via a truncated matrix exponential of ``A(x) dt``.

    Returns ``(x_next, F_hat)`` where ``F_hat = I + sum_{j=1}^{order} (A dt)^j / j!``
    and ``x_next = F_hat x``. ``F_hat`` doubles as the EKF evolution Jacobian.
    """
    if dt <= 0 or order < 1:
        raise ContractError(f"need dt > 0 and order >= 1, got dt={dt}, order={order}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3:
        raise ContractError(f"Lorenz state must be 3-dimensional, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite Lorenz state")
    Adt = lorenz_matrix(x, sigma, rho, beta) * dt
    F_hat = np.broadcast_to(np.eye(3), Adt.shape).copy()
    term = F_hat.copy()
    for j in range(1, order + 1):
        term = term @ Adt / j
        F_hat += term
    x_next = np.einsum("...ij,...j->...i", F_hat, x)
    return x_next, F_hat


@dataclass(frozen=True)
class LorenzDynamics:
    """Discretised Lorenz attractor with Taylor order ``order`` and step ``dt``."""

    dt: float = 0.02
    order: int = 5
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0

    dim = 3

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.transition(x)[0]

    def transition(self, x):
        return lorenz_transition(x, self.dt, self.order, self.sigma, self.rho, self.beta)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.transition(x)[1]

    def derivative(self, x: np.ndarray) -> np.ndarray:
        """Exact Jacobian of ``x -> F_hat(x) x``.

        ``A`` depends on ``x`` only through ``x[0]`` with ``dA/dx0 = E``, so the
        derivative is ``F_hat`` plus a correction in the first column.
        """
        x = np.asarray(x, dtype=np.float64)
        Adt = lorenz_matrix(x, self.sigma, self.rho, self.beta) * self.dt
        E = np.zeros((3, 3))
        E[1, 2] = -self.dt
        E[2, 1] = self.dt
        # powers[p] = (A dt)^p x
        powers = [x]
        for _ in range(self.order - 1):
            powers.append(np.einsum("...ij,...j->...i", Adt, powers[-1]))
        F_hat = np.broadcast_to(np.eye(3), Adt.shape).copy()
        term = F_hat.copy()
        col = np.zeros_like(x)
        for j in range(1, self.order + 1):
            term = term @ Adt / j
            F_hat += term
            # d/dx0 of (A dt)^j x = sum_k (A dt)^k E (A dt)^{j-1-k} x
            acc = np.zeros_like(x)
            for k in range(j):
                v = powers[j - 1 - k] @ E.T
                for _ in range(k):
                    v = np.einsum("...ij,...j->...i", Adt, v)
                acc = acc + v
            col = col + acc / math.factorial(j)
        F_hat[..., :, 0] += col
        return F_hat

    def to_dict(self) -> dict:
        return {"kind": "lorenz", "dt": self.dt, "order": self.order,
                "sigma": self.sigma, "rho": self.rho, "beta": self.beta}


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StateSpaceModel:
    """Evolution map, observation matrix and noise covariances.

    ``evolution`` may be a plain matrix, which is wrapped as ``LinearDynamics``.
    ``R`` is only required to be PSD here so that noiseless data can be
    generated; filters and the uncertainty extraction check definiteness
    where they need it.
    """

    evolution: LinearDynamics | LorenzDynamics
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        evo = self.evolution
        if not hasattr(evo, "jacobian"):
            evo = LinearDynamics(evo)
        H = _as_matrix(self.H, "H")
        Q = _as_matrix(self.Q, "Q")
        R = _as_matrix(self.R, "R")
        m = evo.dim
        if H.shape[1] != m:
            raise ContractError(f"H must have {m} columns, got shape {H.shape}")
        n = H.shape[0]
        if Q.shape != (m, m):
            raise ContractError(f"Q must be {m}x{m}, got {Q.shape}")
        if R.shape != (n, n):
            raise ContractError(f"R must be {n}x{n}, got {R.shape}")
        _check_covariance(Q, "Q", strict=False)
        _check_covariance(R, "R", strict=False)
        for name, value in (("evolution", evo), ("H", H), ("Q", Q), ("R", R)):
            object.__setattr__(self, name, value)

    @property
    def m(self) -> int:
        return self.H.shape[1]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def is_linear(self) -> bool:
        return isinstance(self.evolution, LinearDynamics)

    @property
    def F(self) -> np.ndarray:
        if not self.is_linear:
            raise ContractError("nonlinear model has no constant evolution matrix")
        return self.evolution.F

    def with_(self, **changes) -> "StateSpaceModel":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {"evolution": self.evolution.to_dict(), "H": self.H.tolist(),
                "Q": self.Q.tolist(), "R": self.R.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpaceModel":
        evo = dict(d["evolution"])
        kind = evo.pop("kind")
        if kind == "linear":
            dynamics = LinearDynamics(np.asarray(evo["F"], dtype=float))
        elif kind == "lorenz":
            dynamics = LorenzDynamics(**evo)
        else:
            raise ContractError(f"unknown evolution kind {kind!r}")
        return cls(dynamics, np.asarray(d["H"]), np.asarray(d["Q"]), np.asarray(d["R"]))


def scalar_model(F: float = 0.9, H: float = 1.0, Q: float = 1.0, R: float = 1.0) -> StateSpaceModel:
    return StateSpaceModel(np.array([[F]]), np.array([[H]]), np.array([[Q]]), np.array([[R]]))


def lorenz_model(dt: float = 0.02, order: int = 5, q2: float = 1e-3, r2: float = 1e-2,
                 H: np.ndarray | None = None) -> StateSpaceModel:
    H = np.eye(3) if H is None else H
    return StateSpaceModel(LorenzDynamics(dt=dt, order=order), H,
                           q2 * np.eye(3), r2 * np.eye(H.shape[0]))


def _check_last_dim(a: np.ndarray, dim: int, name: str) -> None:
    if a.shape[-1] != dim:
        raise ContractError(f"{name} must have trailing dimension {dim}, got shape {a.shape}")


def step_evolve(model: StateSpaceModel, x_prev, w) -> np.ndarray:
    """``f(x_prev) + w``."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_last_dim(x_prev, model.m, "x_prev")
    _check_last_dim(w, model.m, "w")
    return model.evolution(x_prev) + w


def observe(model: StateSpaceModel, x, v) -> np.ndarray:
    """``H x + v``."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_last_dim(x, model.m, "x")
    _check_last_dim(v, model.n, "v")
    return x @ model.H.T + v


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def noise_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix ``L`` with ``L L^T = cov``.

    Cholesky when ``cov`` is positive definite, otherwise an eigendecomposition
    with negative round-off eigenvalues clipped to zero.
    """
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        lam, V = np.linalg.eigh(cov)
        return V * np.sqrt(np.clip(lam, 0.0, None))


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for trajectory ``index``; key is ``seed XOR index``."""
    return np.random.Generator(np.random.Philox(key=(int(seed) ^ int(index)) & _MASK64))


@dataclass(frozen=True)
class InitialStateLaw:
    """``x_0 ~ N(mean, cov)``; ``cov`` defaults to zero (known start)."""

    mean: np.ndarray
    cov: np.ndarray | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.zeros((mean.size, mean.size)) if self.cov is None else _as_matrix(self.cov, "cov")
        _check_covariance(cov, "initial covariance", strict=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    observations: np.ndarray
    seed: int
    initial_state: np.ndarray

    def __post_init__(self):
        if len(self.states) != len(self.observations) or len(self.states) < 1:
            raise ContractError("states and observations must share a length T >= 1")


@dataclass(frozen=True)
class Dataset:
    """A batch of equal-length trajectories stored as dense arrays.

    ``states`` is (N, T, m), ``observations`` is (N, T, n), ``initial_states``
    is (N, m) and ``seeds`` holds each trajectory's generator key.
    """

    states: np.ndarray
    observations: np.ndarray
    initial_states: np.ndarray
    seeds: np.ndarray
    model: StateSpaceModel
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.states.ndim != 3 or self.observations.ndim != 3:
            raise ContractError("states and observations must be (N, T, dim) arrays")
        if self.states.shape[:2] != self.observations.shape[:2]:
            raise ContractError("all trajectories must share the same length")
        if self.states.shape[1] < 1 or self.states.shape[0] < 1:
            raise ContractError("dataset needs N >= 1 and T >= 1")

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.states.shape[1]

    def __len__(self) -> int:
        return self.N

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.observations[i], int(self.seeds[i]),
                          self.initial_states[i])

    def __iter__(self) -> Iterator[Trajectory]:
        return (self[i] for i in range(self.N))

    @property
    def trajectories(self) -> list[Trajectory]:
        return list(self)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, states=self.states[idx], observations=self.observations[idx],
                       initial_states=self.initial_states[idx], seeds=self.seeds[idx])

    def descriptor(self) -> dict:
        return {"model": self.model.to_dict(), "split": self.split, "N": self.N, "T": self.T,
                **self.meta}


def split_seed(seed: int, split: str) -> int:
    return (int(seed) + _SPLIT_OFFSETS[split]) & _MASK64


def generate_dataset(model: StateSpaceModel, T: int, N: int, x0_law: InitialStateLaw,
                     seed: int, split: str = "train") -> Dataset:
    """Simulate ``N`` trajectories of length ``T``.

    Trajectory ``i`` draws its initial state, process noise and measurement
    noise (in that order) from ``trajectory_rng(split_seed(seed, split), i)``,
    so the output is a pure function of the arguments and growing ``N``
    leaves earlier trajectories untouched.
    """
    if T < 1 or N < 1:
        raise ContractError(f"need T >= 1 and N >= 1, got T={T}, N={N}")
    if split not in _SPLIT_OFFSETS:
        raise ContractError(f"unknown split {split!r}")
    m, n = model.m, model.n
    if x0_law.mean.shape != (m,):
        raise ContractError(f"initial mean must have length {m}")
    base = split_seed(seed, split)
    L0, LQ, LR = noise_factor(x0_law.cov), noise_factor(model.Q), noise_factor(model.R)
    z0 = np.empty((N, m))
    zw = np.empty((N, T, m))
    zv = np.empty((N, T, n))
    keys = np.empty(N, dtype=np.uint64)
    for i in range(N):
        rng = trajectory_rng(base, i)
        z0[i] = rng.standard_normal(m)
        zw[i] = rng.standard_normal((T, m))
        zv[i] = rng.standard_normal((T, n))
        keys[i] = (base ^ i) & _MASK64
    x = x0_law.mean + z0 @ L0.T
    x0 = x.copy()
    w = zw @ LQ.T
    v = zv @ LR.T
    states = np.empty((N, T, m))
    for t in range(T):
        x = step_evolve(model, x, w[:, t])
        states[:, t] = x
    observations = observe(model, states, v)
    meta = {"seed": int(seed), "x0_law": x0_law.to_dict()}
    return Dataset(states, observations, x0, keys, model, split, meta)


# ---------------------------------------------------------------------------
# Whitening
# ---------------------------------------------------------------------------


def spd_power(R: np.ndarray, power: float) -> np.ndarray:
    """``R**power`` for symmetric positive definite ``R`` via ``eigh``."""
    R = _as_matrix(R, "R")
    _check_covariance(R, "R", strict=True)
    lam, V = np.linalg.eigh(R)
    return (V * lam**power) @ V.T


def whiten(dataset: Dataset, R: np.ndarray | None = None) -> Dataset:
    """Map observations to ``R^{-1/2} y`` so the measurement noise becomes ``I``.

    The returned dataset carries the transformed model (``H' = R^{-1/2} H``,
    ``R' = I``); states are shared with the input.
    """
    model = dataset.model
    R = model.R if R is None else _as_matrix(R, "R")
    W = spd_power(R, -0.5)
    new_model = replace(model, H=W @ model.H, R=np.eye(model.n))
    return replace(dataset, observations=dataset.observations @ W.T, model=new_model)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    """Write ``path`` (CSV) and a sidecar ``path.with_suffix('.json')`` descriptor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m, n = dataset.model.m, dataset.model.n
    header = ["traj", "t"] + [f"x_{i}" for i in range(m)] + [f"y_{j}" for j in range(n)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.N):
            for t in range(dataset.T):
                row = [i, t + 1] + [_fmt(v) for v in dataset.states[i, t]]
                row += [_fmt(v) for v in dataset.observations[i, t]]
                writer.writerow(row)
    side = dataset.descriptor()
    side["seeds"] = [int(s) for s in dataset.seeds]
    side["initial_states"] = [[_fmt(v) for v in x] for x in dataset.initial_states]
    if isinstance(dataset.model.evolution, LorenzDynamics):
        side["dt"] = dataset.model.evolution.dt
        side["J"] = dataset.model.evolution.order
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    model = StateSpaceModel.from_dict(side["model"])
    N, T, m, n = side["N"], side["T"], model.m, model.n
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape != (N * T, 2 + m + n):
        raise ContractError(f"{path} does not match its descriptor")
    states = data[:, 2:2 + m].reshape(N, T, m)
    obs = data[:, 2 + m:].reshape(N, T, n)
    x0 = np.array([[float(v) for v in x] for x in side["initial_states"]]).reshape(N, m)
    seeds = np.array(side["seeds"], dtype=np.uint64)
    meta = {k: side[k] for k in ("seed", "x0_law") if k in side}
    return Dataset(states, obs, x0, seeds, model, side["split"], meta)
