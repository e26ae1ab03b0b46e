import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import kf_reference, riccati_scalar_root

from knetcov.errors import ConvergenceError, SingularInnovationError
from knetcov.kalman import (
    ekf_step,
    kf_gain,
    kf_predict,
    kf_riccati_steady_state,
    kf_update,
    run_filter,
)
from knetcov.ssmodel import (
    InitialStateLaw,
    StateSpaceModel,
    generate_dataset,
    lorenz_model,
    scalar_model,
)

POST = riccati_scalar_root()
PRIOR = 0.81 * POST + 1.0


class WrappedLinear:
    """A linear map presented through the nonlinear-dynamics interface."""

    def __init__(self, F):
        self.F = np.asarray(F)
        self.dim = self.F.shape[0]

    def __call__(self, x):
        return x @ self.F.T

    def jacobian(self, x):
        return self.F


def random_model(rng, m, n):
    F = rng.standard_normal((m, m))
    F *= 0.95 / np.max(np.abs(np.linalg.eigvals(F)))
    A, B = rng.standard_normal((m, m)), rng.standard_normal((n, n))
    return StateSpaceModel(F, rng.standard_normal((n, m)), A @ A.T + 0.1 * np.eye(m),
                           B @ B.T + 0.1 * np.eye(n))


def test_oracle_values():
    assert POST == pytest.approx(0.59741, abs=5e-6)
    assert PRIOR == pytest.approx(1.4839, abs=5e-5)
    assert 10 * np.log10(POST) == pytest.approx(-2.24, abs=5e-3)


def test_predict_identity_without_process_noise():
    m = StateSpaceModel(np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2))
    Sigma = np.array([[2.0, 0.3], [0.3, 1.0]])
    prior = kf_predict(m, np.zeros(2), Sigma)
    np.testing.assert_allclose(prior.Sigma_prior, Sigma)


def test_predict_scalar_steady_state():
    prior = kf_predict(scalar_model(), np.array([2.0]), np.array([[POST]]))
    assert prior.Sigma_prior[0, 0] == pytest.approx(PRIOR, rel=1e-12)
    assert prior.S[0, 0] == pytest.approx(PRIOR + 1.0, rel=1e-12)
    assert prior.x_prior[0] == pytest.approx(1.8)
    assert prior.y_pred[0] == pytest.approx(1.8)


def test_gain_examples():
    np.testing.assert_array_equal(kf_gain(np.zeros((2, 2)), np.eye(2), np.eye(2)), np.zeros((2, 2)))
    K = kf_gain(np.array([[PRIOR]]), np.eye(1), np.eye(1))
    assert K[0, 0] == pytest.approx(POST, rel=1e-12)
    K = kf_gain(np.diag([1.0, 2.0]), np.eye(2), 1e-12 * np.eye(2))
    np.testing.assert_allclose(K, np.eye(2), atol=1e-6)


def test_gain_singular_innovation_reports_condition():
    with pytest.raises(SingularInnovationError) as err:
        kf_gain(np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)))
    assert err.value.condition > 1e15 or not np.isfinite(err.value.condition)


def test_update_examples():
    m = scalar_model()
    prior = kf_predict(m, np.array([2.0]), np.array([[POST]]))
    x, S = kf_update(prior, np.zeros((1, 1)), np.array([5.0]))
    assert x[0] == prior.x_prior[0] and S[0, 0] == prior.Sigma_prior[0, 0]
    K = kf_gain(prior.Sigma_prior, m.H, m.R)
    x, S = kf_update(prior, K, prior.y_pred)
    assert x[0] == prior.x_prior[0]
    assert S[0, 0] == pytest.approx(POST, abs=1e-12)


def test_ekf_on_wrapped_linear_equals_kf():
    rng = np.random.default_rng(3)
    lin = random_model(rng, 3, 4)
    wrapped = StateSpaceModel(WrappedLinear(lin.F), lin.H, lin.Q, lin.R)
    x, S = rng.standard_normal(3), np.eye(3)
    for _ in range(20):
        y = rng.standard_normal(4)
        a, b = ekf_step(lin, x, S, y), ekf_step(wrapped, x, S, y)
        for name in ("x_prior", "x_post", "Sigma_prior", "Sigma_post", "gain", "S"):
            np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=0, atol=1e-12)
        x, S = a.x_post, a.Sigma_post


def test_ekf_noiseless_lorenz_tracks_truth():
    model = lorenz_model(q2=0.0, r2=0.0)
    ds = generate_dataset(model, 100, 1, InitialStateLaw(np.ones(3)), seed=2)
    filt = model.with_(R=1e-12 * np.eye(3))
    run = run_filter(filt, ds.observations, ds.initial_states)
    assert np.max(np.abs(run.x_post - ds.states)) < 1e-5


def test_mismatched_lorenz_ekf_is_worse():
    data_model = lorenz_model(order=5, q2=1e-3, r2=1e-2)
    test = generate_dataset(data_model, 100, 100, InitialStateLaw(np.ones(3)), seed=4, split="test")
    matched = run_filter(data_model, test.observations, test.initial_states)
    coarse = run_filter(lorenz_model(order=1, q2=1e-3, r2=1e-2), test.observations,
                        test.initial_states)
    mse = lambda r: np.mean((r.x_post - test.states) ** 2)
    assert mse(coarse) > mse(matched)


def test_riccati_examples():
    zero = StateSpaceModel(np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)), np.eye(2))
    np.testing.assert_allclose(kf_riccati_steady_state(zero)[1], 0.0, atol=1e-15)
    prior, post, K = kf_riccati_steady_state(scalar_model())
    assert 0.59740 <= post[0, 0] <= 0.59742
    assert post[0, 0] == pytest.approx(POST, abs=1e-11)
    assert prior[0, 0] == pytest.approx(PRIOR, abs=1e-11)
    assert K[0, 0] == pytest.approx(POST, abs=1e-11)
    two = StateSpaceModel(0.9 * np.eye(2), np.eye(2), np.eye(2), np.eye(2))
    np.testing.assert_allclose(kf_riccati_steady_state(two)[1], POST * np.eye(2), atol=1e-11)


def test_riccati_reports_non_convergence():
    with pytest.raises(ConvergenceError):
        kf_riccati_steady_state(scalar_model(), max_iter=3)


def test_run_filter_matches_textbook_kf():
    rng = np.random.default_rng(8)
    model = random_model(rng, 3, 4)
    y = rng.standard_normal((40, 4))
    x0 = rng.standard_normal(3)
    Sigma0 = np.eye(3) * 0.5
    run = run_filter(model, y, x0, Sigma0)
    ref = kf_reference(model.F, model.H, model.Q, model.R, x0, Sigma0, y)
    np.testing.assert_allclose(run.x_post[0], ref["x"], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(run.Sigma_post[0], ref["post"], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(run.gain[0], ref["K"], rtol=1e-10, atol=1e-12)


def test_kf_mmse_matches_theory_per_step():
    model = scalar_model()
    # 2000 trajectories leave ~0.14 dB of sampling noise per step; 30000 bring it to ~0.035 dB
    test = generate_dataset(model, 100, 30_000, InitialStateLaw([0.0]), seed=7, split="test")
    run = run_filter(model, test.observations, test.initial_states)
    emp = 10 * np.log10(np.mean((run.x_post - test.states)[..., 0] ** 2, axis=0))
    theo = 10 * np.log10(run.Sigma_post[0, :, 0, 0])
    assert np.max(np.abs(emp - theo)) < 0.15


@given(st.integers(1, 4), st.integers(0, 3), st.integers(0, 10_000))
def test_covariance_invariants(m, extra, seed):
    n = m + extra
    rng = np.random.default_rng(seed)
    model = random_model(rng, m, n)
    L = rng.standard_normal((m, m))
    x, Sigma = rng.standard_normal(m), L @ L.T
    for _ in range(5):
        mom = ekf_step(model, x, Sigma, rng.standard_normal(n))
        for M in (mom.Sigma_prior, mom.Sigma_post, mom.S):
            np.testing.assert_allclose(M, M.T, atol=1e-9)
        assert np.linalg.eigvalsh(mom.S).min() > 0
        assert np.trace(mom.Sigma_post) <= np.trace(mom.Sigma_prior) + 1e-12
        I_KH = np.eye(m) - mom.gain @ model.H
        joseph = I_KH @ mom.Sigma_prior @ I_KH.T + mom.gain @ model.R @ mom.gain.T
        np.testing.assert_allclose(mom.Sigma_post, joseph, atol=1e-8 * max(1.0, np.abs(joseph).max()))
        np.testing.assert_array_equal(mom.innovation, mom.innovation)
        x, Sigma = mom.x_post, mom.Sigma_post
