"""Random-system check that gain-derived covariances match the KF recursion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..kalman import run_filter
from ..ssmodel import StateSpaceModel
from ..uncertainty import ObservationGeometry, error_cov_from_gain, sigma_prior_from_gain

TOLERANCE = 1e-9
MAX_M, MAX_N = 4, 5


def _spd(rng: np.random.Generator, k: int) -> np.ndarray:
    A = rng.standard_normal((k, k))
    return A @ A.T + 0.1 * np.eye(k)


def random_system(seed: int, dims: tuple[int, int] | None = None, T: int = 30,
                  rank_deficient: bool = False):
    """One random draw: ``(model, Sigma0, x0, observations)``.

    ``F`` is scaled to spectral radius 0.95. With ``rank_deficient`` the first
    two columns of ``H`` coincide (or ``H`` is zeroed when ``m == 1``).
    """
    rng = np.random.default_rng(seed)
    if dims is None:
        m = int(rng.integers(1, MAX_M + 1))
        n = int(rng.integers(m, MAX_N + 1))
    else:
        m, n = dims
    F = rng.standard_normal((m, m))
    F *= 0.95 / max(np.max(np.abs(np.linalg.eigvals(F))), 1e-12)
    H = rng.standard_normal((n, m))
    if rank_deficient:
        if m == 1:
            H[:] = 0.0
        else:
            H[:, 1] = H[:, 0]
    L = rng.standard_normal((m, m))
    Sigma0 = L @ L.T * rng.uniform(0.0, 2.0)
    model = StateSpaceModel(F, H, _spd(rng, m), _spd(rng, n))
    x0 = rng.standard_normal(m)
    y = rng.standard_normal((T, n))
    return model, Sigma0, x0, y


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Largest per-step Frobenius error of ``a`` relative to ``b``."""
    num = np.linalg.norm(a - b, axis=(-2, -1))
    den = np.maximum(np.linalg.norm(b, axis=(-2, -1)), np.finfo(float).tiny)
    return float(np.max(num / den))


def check_draw(seed: int, dims=None, T: int = 30, rank_deficient: bool = False) -> float:
    model, Sigma0, x0, y = random_system(seed, dims, T, rank_deficient)
    geom = ObservationGeometry.from_model(model)
    run = run_filter(model, y, x0, Sigma0)
    K = run.gain[0]
    err_prior = relative_error(sigma_prior_from_gain(K, geom), run.Sigma_prior[0])
    err_post = relative_error(error_cov_from_gain(K, geom), run.Sigma_post[0])
    return max(err_prior, err_post)


@dataclass
class CovtestReport:
    draws: int
    max_rel_error: float
    failing_seeds: list[int] = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return not self.failing_seeds

    def lines(self) -> list[str]:
        status = "PASS" if self.passed else "FAIL"
        out = [f"covtest {status}: {self.draws} draws, max relative error {self.max_rel_error:.3e}"
               f" (tolerance {self.tolerance:g})"]
        if self.failing_seeds:
            out.append("failing seeds: " + " ".join(str(s) for s in self.failing_seeds))
        return out


def covtest(dims: tuple[int, int] | None = None, draws: int = 100, seed: int = 0, T: int = 30,
            rank_deficient: bool = False, tolerance: float = TOLERANCE) -> CovtestReport:
    """Run ``draws`` random systems; draw ``i`` uses seed ``seed + i``.

    ``dims=None`` samples ``m <= 4`` and ``m <= n <= 5`` per draw. A
    rank-deficient ``H`` raises ``UnsupportedGeometryError``.
    """
    worst = 0.0
    failing = []
    for i in range(draws):
        err = check_draw(seed + i, dims, T, rank_deficient)
        worst = max(worst, err)
        if not err < tolerance:
            failing.append(seed + i)
    return CovtestReport(draws, worst, failing, tolerance)


def parse_dims(text: str | None) -> tuple[int, int] | None:
    """``"2x3"`` or ``"m=2,n=3"`` -> ``(2, 3)``; ``None``/``"random"`` -> ``None``."""
    if text is None or text == "random":
        return None
    text = text.replace(" ", "")
    if "x" in text:
        m, n = text.split("x")
        return int(m), int(n)
    parts = dict(p.split("=") for p in text.split(","))
    return int(parts["m"]), int(parts["n"])
