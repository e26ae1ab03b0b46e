import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import riccati_scalar_root

from knetcov.errors import ContractError, GainBoundaryError, UnsupportedGeometryError
from knetcov.harness.covtest import random_system
from knetcov.kalman import run_filter
from knetcov.ssmodel import InitialStateLaw, generate_dataset, scalar_model, spd_power
from knetcov.uncertainty import (
    ObservationGeometry,
    error_cov_from_gain,
    is_psd,
    predict_error,
    sigma_prior_from_gain,
)

POST = riccati_scalar_root()
SCALAR = ObservationGeometry(np.eye(1))


def rel_err(a, b):
    return np.max(np.linalg.norm(a - b, axis=(-2, -1)) / np.linalg.norm(b, axis=(-2, -1)))


def test_geometry_invariants():
    H = np.random.default_rng(0).standard_normal((5, 3))
    g = ObservationGeometry(H)
    np.testing.assert_allclose(g.H_tilde @ (H.T @ H), np.eye(3), atol=1e-8)
    np.testing.assert_array_equal(g.R, np.eye(5))


def test_geometry_rejections():
    with pytest.raises(UnsupportedGeometryError):
        ObservationGeometry(np.ones((1, 2)))
    with pytest.raises(UnsupportedGeometryError):
        ObservationGeometry(np.array([[1.0, 2.0], [2.0, 4.0], [0.5, 1.0]]))
    with pytest.raises(ContractError):
        ObservationGeometry(np.eye(2), np.diag([1.0, 0.0]))


def test_zero_gain_gives_zero_prior():
    np.testing.assert_array_equal(sigma_prior_from_gain(np.zeros((2, 3)),
                                                        ObservationGeometry(np.ones((3, 2)) + np.eye(3, 2))),
                                  np.zeros((2, 2)))


def test_scalar_examples():
    K = np.array([[POST]])
    assert sigma_prior_from_gain(K, SCALAR)[0, 0] == pytest.approx(POST / (1 - POST), rel=1e-12)
    assert sigma_prior_from_gain(K, SCALAR)[0, 0] == pytest.approx(1.4839, abs=5e-5)
    assert error_cov_from_gain(np.array([[0.5]]), SCALAR)[0, 0] == pytest.approx(0.5, rel=1e-14)
    assert error_cov_from_gain(K, SCALAR)[0, 0] == pytest.approx(POST, rel=1e-12)


def test_trust_boundary_error():
    with pytest.raises(GainBoundaryError):
        sigma_prior_from_gain(np.array([[1.0]]), SCALAR)


@pytest.mark.parametrize("dims,T", [((3, 3), 30), ((2, 3), 50)])
def test_exact_kf_gains_reproduce_kf_covariances(dims, T):
    for seed in range(10):
        model, Sigma0, x0, y = random_system(seed, dims, T)
        run = run_filter(model, y, x0, Sigma0)
        geom = ObservationGeometry.from_model(model)
        assert rel_err(sigma_prior_from_gain(run.gain[0], geom), run.Sigma_prior[0]) < 1e-9
        assert rel_err(error_cov_from_gain(run.gain[0], geom), run.Sigma_post[0]) < 1e-9


@given(st.integers(0, 100_000))
def test_oracle_outputs_symmetric_psd(seed):
    model, Sigma0, x0, y = random_system(seed, None, 30)
    run = run_filter(model, y, x0, Sigma0)
    cov = error_cov_from_gain(run.gain[0], ObservationGeometry.from_model(model))
    np.testing.assert_array_equal(cov, np.swapaxes(cov, -1, -2))
    assert np.all(is_psd(cov))


@given(st.integers(0, 100_000))
def test_whitening_consistency(seed):
    model, Sigma0, x0, y = random_system(seed, None, 10)
    run = run_filter(model, y, x0, Sigma0)
    K = run.gain[0]
    half, inv_half = spd_power(model.R, 0.5), spd_power(model.R, -0.5)
    a = error_cov_from_gain(K, ObservationGeometry(model.H, model.R))
    b = error_cov_from_gain(K @ half, ObservationGeometry(inv_half @ model.H))
    assert rel_err(b, a) < 1e-9


def test_constant_gain_gives_constant_series():
    pred = predict_error(np.full((20, 1, 1), 0.3), SCALAR)
    assert np.all(pred.cov == pred.cov[0])
    assert not pred.failed.any()


def test_kf_gain_series_converges_to_riccati():
    model = scalar_model()
    ds = generate_dataset(model, 100, 1, InitialStateLaw([0.0]), seed=1)
    run = run_filter(model, ds.observations, ds.initial_states)
    pred = predict_error(run.gain[0], SCALAR)
    assert pred.db[-1] == pytest.approx(10 * np.log10(POST), abs=1e-9)
    assert pred.std[-1, 0] == pytest.approx(0.7729, abs=5e-5)


def test_failed_steps_are_gaps():
    gains = np.array([[[0.3]], [[1.0]], [[0.4]]])
    pred = predict_error(gains, SCALAR)
    assert pred.failed.tolist() == [False, True, False]
    assert np.isnan(pred.cov[1]).all()
    assert pred.failed_steps() == [(1,)]
    assert np.isfinite(pred.cov[[0, 2]]).all()


def test_non_psd_learned_gain_is_flagged_not_projected():
    # with H = R = 1 the scalar posterior equals K, so a negative gain is not a covariance
    pred = predict_error(np.array([[[-0.5]]]), SCALAR)
    assert pred.non_psd[0]
    assert pred.cov[0, 0, 0] < 0


def test_non_finite_gain_rejected():
    with pytest.raises(ContractError):
        predict_error(np.array([[[np.nan]]]), SCALAR)
