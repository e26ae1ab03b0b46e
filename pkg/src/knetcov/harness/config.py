"""Experiment configuration, loaded from YAML."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from ..errors import ContractError
from ..knet import TrainConfig
from ..ssmodel import InitialStateLaw, LorenzDynamics, StateSpaceModel

SCENARIOS = ("linear-full", "linear-mismatch", "lorenz")


def as_matrix(value, dim: int) -> np.ndarray:
    """Scalar -> ``value * I``, flat list -> diagonal, nested list -> matrix."""
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        return float(a) * np.eye(dim)
    if a.ndim == 1:
        return np.diag(a)
    return a


@dataclass(frozen=True)
class ModelSpec:
    """Model parameters as written in a config file.

    For ``kind: linear`` the state dimension comes from ``F``. For
    ``kind: lorenz`` the state is 3-dimensional and ``dt``/``order`` set the
    Taylor discretisation. ``H``, ``Q`` and ``R`` accept scalars (times
    identity), diagonals or full matrices.
    """

    kind: str = "linear"
    F: Any = 0.9
    H: Any = 1.0
    Q: Any = 1.0
    R: Any = 1.0
    dt: float = 0.02
    order: int = 5

    def build(self) -> StateSpaceModel:
        if self.kind == "linear":
            F = np.atleast_2d(np.asarray(self.F, dtype=np.float64))
            evolution = F
            m = F.shape[0]
        elif self.kind == "lorenz":
            evolution = LorenzDynamics(dt=self.dt, order=self.order)
            m = 3
        else:
            raise ContractError(f"unknown model kind {self.kind!r}")
        H = as_matrix(self.H, m)
        return StateSpaceModel(evolution, H, as_matrix(self.Q, m), as_matrix(self.R, H.shape[0]))


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "linear-full"
    seed: int = 7
    T: int = 100
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 2000
    true_model: ModelSpec = field(default_factory=ModelSpec)
    assumed_model: ModelSpec = field(default_factory=ModelSpec)
    x0_mean: Any = 0.0
    x0_cov: Any = 0.0
    sigma0: Any = 0.0
    train: TrainConfig = field(default_factory=TrainConfig)
    t_min: int = 20
    svg: bool = False
    save_datasets: bool = False
    out_dir: str = "runs"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ContractError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if min(self.T, self.n_train, self.n_val, self.n_test) < 1:
            raise ContractError("T and all split sizes must be >= 1")
        if not 1 <= self.t_min <= self.T:
            raise ContractError("t_min must lie in [1, T]")
        if self.scenario == "linear-mismatch":
            if self.true_model.kind != "linear" or self.assumed_model.kind != "linear":
                raise ContractError("linear-mismatch needs linear models")
            if np.allclose(np.asarray(self.true_model.F), np.asarray(self.assumed_model.F)):
                raise ContractError("linear-mismatch requires assumed F != true F")
        if self.scenario == "lorenz" and self.true_model.kind != "lorenz":
            raise ContractError("lorenz scenario needs a lorenz true model")

    def models(self) -> tuple[StateSpaceModel, StateSpaceModel]:
        true, assumed = self.true_model.build(), self.assumed_model.build()
        if true.m != assumed.m or true.n != assumed.n:
            raise ContractError("true and assumed models must share dimensions")
        return true, assumed

    def x0_law(self, m: int) -> InitialStateLaw:
        mean = np.broadcast_to(np.asarray(self.x0_mean, dtype=np.float64), (m,))
        return InitialStateLaw(mean, as_matrix(self.x0_cov, m))

    def filter_sigma0(self, m: int) -> np.ndarray:
        return as_matrix(self.sigma0, m)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def default_config(scenario: str = "linear-full") -> ExperimentConfig:
    if scenario == "linear-full":
        return ExperimentConfig(scenario=scenario, out_dir=f"runs/{scenario}")
    if scenario == "linear-mismatch":
        return ExperimentConfig(scenario=scenario, assumed_model=ModelSpec(F=0.5),
                                out_dir=f"runs/{scenario}")
    if scenario == "lorenz":
        return ExperimentConfig(
            scenario=scenario,
            true_model=ModelSpec(kind="lorenz", H=1.0, Q=0.01, R=1.0, dt=0.02, order=5),
            # process noise inflated to absorb the coarse discretisation
            assumed_model=ModelSpec(kind="lorenz", H=1.0, Q=1.0, R=1.0, dt=0.02, order=1),
            x0_mean=[1.0, 1.0, 1.0],
            train=TrainConfig(epochs=500, normalize_features=True, output_init_scale=0.0),
            out_dir=f"runs/{scenario}",
        )
    raise ContractError(f"unknown scenario {scenario!r}")


def _build(cls, data: dict, base):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ContractError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return replace(base, **data)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Overlay ``data`` on the defaults of its scenario."""
    data = dict(data or {})
    base = default_config(data.get("scenario", "linear-full"))
    for key, base_val in (("true_model", base.true_model), ("assumed_model", base.assumed_model)):
        if key in data:
            data[key] = _build(ModelSpec, data[key] or {}, base_val)
    if "train" in data:
        data["train"] = _build(TrainConfig, data["train"] or {}, base.train)
    return _build(ExperimentConfig, data, base)


def load_config(path: str | Path | None, seed: int | None = None,
                scenario: str | None = None) -> ExperimentConfig:
    data = {} if path is None else (yaml.safe_load(Path(path).read_text()) or {})
    if scenario is not None:
        data.setdefault("scenario", scenario)
    cfg = config_from_dict(data)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
