"""Scenario orchestration: data, training, evaluation and report files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import gainnet
from ..kalman import FilterRun, kf_riccati_steady_state, run_filter
from ..knet import TrainResult, evaluate_knet, run_knet, train_knet
from ..metrics import MetricSeries, build_series, squared_error, to_db
from ..ssmodel import Dataset, StateSpaceModel, generate_dataset, load_dataset, save_dataset
from ..uncertainty import ObservationGeometry, predict_error
from .config import ExperimentConfig, dump_config

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


class ScenarioError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


class _Outputs:
    """Tracks files written by one command so a failure can remove them."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / name
        self.files.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.files:
            for q in (p, p.with_suffix(".json") if p.suffix == ".csv" else None):
                if q is not None and q.exists():
                    q.unlink()


class _Stage:
    def __init__(self, name: str, outputs: _Outputs):
        self.name, self.outputs = name, outputs

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, ScenarioError):
            self.outputs.cleanup()
            raise ScenarioError(self.name, exc) from exc
        return False


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def make_datasets(cfg: ExperimentConfig, splits=SPLITS) -> dict[str, Dataset]:
    true, _ = cfg.models()
    law = cfg.x0_law(true.m)
    sizes = {"train": cfg.n_train, "validation": cfg.n_val, "test": cfg.n_test}
    return {s: generate_dataset(true, cfg.T, sizes[s], law, cfg.seed, split=s) for s in splits}


def load_datasets(data_dir: str | Path, splits=SPLITS) -> dict[str, Dataset]:
    return {s: load_dataset(Path(data_dir) / f"{s}.csv") for s in splits}


def model_based_label(model: StateSpaceModel) -> str:
    return "kf" if model.is_linear else "ekf"


def evaluate_filter(model: StateSpaceModel, test: Dataset, sigma0, label: str | None = None
                    ) -> tuple[MetricSeries, FilterRun]:
    """KF/EKF empirical error and its own covariance recursion as prediction."""
    run = run_filter(model, test.observations, test.initial_states, sigma0)
    series = build_series(label or model_based_label(model), squared_error(run.x_post, test.states),
                          run.predicted_mse)
    return series, run


def band_coverage(estimates, sigma, truth) -> float:
    """Fraction of (trajectory, step, state) entries with ``|x_hat - x| <= sigma``."""
    with np.errstate(invalid="ignore"):
        inside = np.abs(np.asarray(estimates) - np.asarray(truth)) <= np.asarray(sigma)
    return float(np.mean(inside))


def scenario_claims(cfg: ExperimentConfig, mb: MetricSeries, kn: MetricSeries) -> dict:
    """Scenario-specific comparisons over ``t >= t_min``."""
    t0 = cfg.t_min
    mb_emp, kn_emp = mb.mean_empirical_db(t0), kn.mean_empirical_db(t0)
    if cfg.scenario == "linear-full":
        return {
            "knet_empirical_within_0.5db_of_kf": abs(kn_emp - mb_emp) < 0.5,
            "kf_abs_gap_below_0.5db": mb.mean_abs_gap_db(t0) < 0.5,
            "knet_abs_gap_below_0.5db": kn.mean_abs_gap_db(t0) < 0.5,
        }
    if cfg.scenario == "linear-mismatch":
        return {
            "kf_underestimates_by_more_than_1db": -mb.mean_gap_db(t0) > 1.0,
            "knet_abs_gap_below_1db": kn.mean_abs_gap_db(t0) < 1.0,
            "knet_empirical_not_above_kf": kn_emp <= mb_emp,
        }
    return {
        "knet_empirical_below_ekf": kn_emp < mb_emp,
        "knet_abs_gap_below_ekf_abs_gap": kn.mean_abs_gap_db(t0) < mb.mean_abs_gap_db(t0),
        "ekf_overestimates": mb.mean_gap_db(t0) > 0.0,
    }


def write_metrics_csv(path: Path, series: list[MetricSeries]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "filter", "empirical_db", "predicted_db"])
        for s in series:
            for t in range(s.T):
                w.writerow([t + 1, s.label, _fmt(s.empirical_db[t]), _fmt(s.predicted_db[t])])


def read_metrics_csv(path: str | Path) -> dict[str, MetricSeries]:
    rows: dict[str, list[tuple[float, float]]] = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["filter"], []).append(
                (float(row["empirical_db"]), float(row["predicted_db"])))
    return {k: MetricSeries(k, np.array([r[0] for r in v]), np.array([r[1] for r in v]), 0)
            for k, v in rows.items()}


def write_loss_csv(path: Path, result: TrainResult) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_db", "val_db"])
        for epoch, tr, va in result.loss_rows():
            w.writerow([epoch, _fmt(tr), _fmt(va)])


def _train_cfg(cfg: ExperimentConfig):
    # the experiment seed drives initialisation and shuffling
    return replace(cfg.train, seed=cfg.seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@dataclass
class ReportBundle:
    out_dir: Path
    series: dict[str, MetricSeries]
    summary: dict
    files: list[Path] = field(default_factory=list)
    train_result: TrainResult | None = None
    coverage: dict = field(default_factory=dict)


def generate_command(cfg: ExperimentConfig, out_dir: str | Path) -> list[Path]:
    outputs = _Outputs(Path(out_dir))
    with _Stage("generate", outputs):
        for split, ds in make_datasets(cfg).items():
            save_dataset(ds, outputs.path(f"{split}.csv"))
    return outputs.files


def train_command(cfg: ExperimentConfig, out_dir: str | Path, data_dir=None,
                  progress=None) -> TrainResult:
    outputs = _Outputs(Path(out_dir))
    with _Stage("generate", outputs):
        data = load_datasets(data_dir, ("train", "validation")) if data_dir else \
            make_datasets(cfg, ("train", "validation"))
        _, assumed = cfg.models()
    with _Stage("train", outputs):
        result = train_knet(assumed, data["train"], data["validation"], _train_cfg(cfg), progress)
    with _Stage("write", outputs):
        gainnet.save_checkpoint(outputs.path("checkpoint.json"), result.config, result.params,
                                {"best_epoch": result.best_epoch, "scenario": cfg.scenario})
        write_loss_csv(outputs.path("loss_curves.csv"), result)
    return result


def evaluate_command(cfg: ExperimentConfig, out_dir: str | Path, checkpoint: str | Path,
                     data_dir=None) -> ReportBundle:
    outputs = _Outputs(Path(out_dir))
    with _Stage("load", outputs):
        ck = gainnet.load_checkpoint(checkpoint)
    with _Stage("generate", outputs):
        test = (load_datasets(data_dir, ("test",)) if data_dir else make_datasets(cfg, ("test",)))["test"]
    return _evaluate_and_write(cfg, outputs, ck.params, ck.config, test, None)


def run_scenario(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                 progress=None) -> ReportBundle:
    """Generate data, train KalmanNet, evaluate both filters and write reports.

    Files: ``metrics.csv``, ``summary.json``, ``loss_curves.csv``,
    ``checkpoint.json``, ``config.yaml`` and, if enabled, datasets and SVGs.
    """
    outputs = _Outputs(Path(out_dir or cfg.out_dir))
    with _Stage("generate", outputs):
        data = make_datasets(cfg)
        _, assumed = cfg.models()
        if cfg.save_datasets:
            for split, ds in data.items():
                save_dataset(ds, outputs.path(f"data/{split}.csv"))
    with _Stage("train", outputs):
        result = train_knet(assumed, data["train"], data["validation"], _train_cfg(cfg), progress)
    with _Stage("write", outputs):
        dump_config(cfg, outputs.path("config.yaml"))
        gainnet.save_checkpoint(outputs.path("checkpoint.json"), result.config, result.params,
                                {"best_epoch": result.best_epoch, "scenario": cfg.scenario})
        write_loss_csv(outputs.path("loss_curves.csv"), result)
    return _evaluate_and_write(cfg, outputs, result.params, result.config, data["test"], result)


def _evaluate_and_write(cfg, outputs, params, net_config, test, result) -> ReportBundle:
    with _Stage("evaluate", outputs):
        _, assumed = cfg.models()
        sigma0 = cfg.filter_sigma0(assumed.m)
        mb, mb_run = evaluate_filter(assumed, test, sigma0)
        kn_eval = evaluate_knet(params, net_config, assumed, test)
        kn = kn_eval.series
        keep = ~kn_eval.run.diverged
        coverage = {
            mb.label: band_coverage(mb_run.x_post, np.sqrt(np.diagonal(
                mb_run.Sigma_post, axis1=-2, axis2=-1)), test.states),
            "knet": band_coverage(kn_eval.run.estimates[keep], kn_eval.prediction.std[keep],
                                  test.states[keep]),
        }
    with _Stage("write", outputs):
        summary = {
            "scenario": cfg.scenario,
            "seed": cfg.seed,
            "t_min": cfg.t_min,
            "filters": {s.label: s.summary(cfg.t_min) for s in (mb, kn)},
            "claims": scenario_claims(cfg, mb, kn),
            "band_coverage": coverage,
            "knet_diagnostics": kn.meta,
        }
        if assumed.is_linear:
            _, post, _ = kf_riccati_steady_state(assumed)
            summary["assumed_riccati_db"] = float(to_db(np.trace(post) / assumed.m))
        if result is not None:
            summary["training"] = {"epochs_run": len(result.val_db), "best_epoch": result.best_epoch,
                                   "best_val_db": result.val_db[result.best_epoch - 1]}
        write_metrics_csv(outputs.path("metrics.csv"), [mb, kn])
        outputs.path("summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        if cfg.svg:
            from .svg import metrics_svg
            metrics_svg(outputs.path("metrics.svg"), [mb, kn], cfg.scenario)
    return ReportBundle(outputs.out_dir, {mb.label: mb, kn.label: kn}, summary, outputs.files,
                        result, coverage)


@dataclass
class TrajectoryReport:
    """Per-dimension series for one test trajectory; arrays are (T, m)."""

    truth: np.ndarray
    kf_est: np.ndarray
    kf_sigma: np.ndarray
    knet_est: np.ndarray
    knet_sigma: np.ndarray

    def rows(self):
        T, m = self.truth.shape
        for t in range(T):
            for d in range(m):
                yield (t + 1, d, self.truth[t, d], self.kf_est[t, d], self.kf_sigma[t, d],
                       self.knet_est[t, d], self.knet_sigma[t, d])


def single_trajectory_report(cfg: ExperimentConfig, checkpoint: str | Path, index: int = 0,
                             out_dir: str | Path | None = None) -> TrajectoryReport:
    """Ground truth with KF and KalmanNet estimates and their 1-sigma bands.

    Only trajectories ``0..index`` of the test split are generated; per-
    trajectory random streams make trajectory ``index`` identical to the one
    in the full test set.
    """
    outputs = _Outputs(Path(out_dir or cfg.out_dir))
    with _Stage("load", outputs):
        ck = gainnet.load_checkpoint(checkpoint)
    with _Stage("generate", outputs):
        true, assumed = cfg.models()
        test = generate_dataset(true, cfg.T, index + 1, cfg.x0_law(true.m), cfg.seed,
                                split="test").subset([index])
    with _Stage("evaluate", outputs):
        run = run_filter(assumed, test.observations, test.initial_states, cfg.filter_sigma0(assumed.m))
        kn = run_knet(ck.params, ck.config, assumed, test.observations, test.initial_states)
        pred = predict_error(np.nan_to_num(kn.gains[0]), ObservationGeometry.from_model(assumed))
        report = TrajectoryReport(
            truth=test.states[0], kf_est=run.x_post[0],
            kf_sigma=np.sqrt(np.diagonal(run.Sigma_post[0], axis1=-2, axis2=-1)),
            knet_est=kn.estimates[0], knet_sigma=pred.std,
        )
    with _Stage("write", outputs):
        with outputs.path("trajectory.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "dim", "truth", "kf_est", "kf_sigma", "knet_est", "knet_sigma"])
            for row in report.rows():
                w.writerow([row[0], row[1]] + [_fmt(v) for v in row[2:]])
        if cfg.svg:
            from .svg import trajectory_svg
            trajectory_svg(outputs.path("trajectory.svg"), report, model_based_label(assumed))
    return report
