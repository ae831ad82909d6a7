import numpy as np
import pytest
from scipy.integrate import quad_vec
from scipy.linalg import expm
from scipy.stats import ks_2samp

from grpolab.analysis.asymptotics import (StabilityError, SyntheticQuadratic, asymptotics_pipeline,
                                          chi2_mixture_sample, chi2_mixture_weights, hessian_spectrum,
                                          limit_weights, solve_lyapunov)


def test_spectrum_rank_one_example():
    r, lam, Q = hessian_spectrum(np.diag([-2.0, 0.0]))
    assert r == 1 and np.allclose(lam, [2.0])
    assert np.allclose(np.abs(Q[:, 0]), [1.0, 0.0])


def test_spectrum_negative_identity():
    r, lam, Q = hessian_spectrum(-np.eye(3))
    assert r == 3 and np.allclose(lam, 1.0)


def test_spectrum_orthonormal_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(20):
        A = rng.normal(size=(5, 3))
        r, lam, Q = hessian_spectrum(-(A @ A.T))
        assert r == 3
        assert np.abs(Q.T @ Q - np.eye(r)).max() <= 1e-10
        assert np.all(np.diff(lam) <= 0)


def test_spectrum_rejects_indefinite():
    with pytest.raises(ValueError):
        hessian_spectrum(np.diag([-1.0, 0.5]))
    with pytest.raises(ValueError):
        hessian_spectrum(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_lyapunov_scalar_and_diagonal():
    assert np.allclose(solve_lyapunov(np.array([[1.0]]), np.array([[2.0]])), [[1.0]])
    A, Om = np.diag([0.5, 2.0, 3.0]), np.diag([1.0, 4.0, 0.3])
    assert np.allclose(solve_lyapunov(A, Om), np.diag(np.diag(Om) / (2 * np.diag(A))))


def test_lyapunov_matches_quadrature():
    rng = np.random.default_rng(1)
    M = rng.normal(size=(3, 3))
    A = M + (abs(np.linalg.eigvals(M).real).max() + 0.5) * np.eye(3)
    R = rng.normal(size=(3, 3))
    Om = R @ R.T
    sigma = solve_lyapunov(A, Om)
    assert np.abs(A.T @ sigma + sigma @ A - Om).max() <= 1e-8 * np.abs(Om).max()
    integral, _ = quad_vec(lambda u: expm(-A.T * u) @ Om @ expm(-A * u), 0, np.inf, epsabs=1e-12)
    assert np.abs(sigma - integral).max() <= 1e-6


def test_lyapunov_rejects_unstable():
    with pytest.raises(StabilityError, match="eigenvalue"):
        solve_lyapunov(np.diag([1.0, -0.2]), np.eye(2))


def test_weights_examples():
    assert np.allclose(chi2_mixture_weights(np.eye(2), [2, 2]), [1, 1])
    assert np.allclose(chi2_mixture_weights(np.diag([4.0, 1.0]), [2, 2]), [4, 1])
    with pytest.raises(ValueError):
        chi2_mixture_weights(np.eye(2), [1.0])


def test_weights_rotation_invariance_isotropic():
    rng = np.random.default_rng(2)
    R = rng.normal(size=(3, 3))
    sigma = R @ R.T
    Qr, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    w = chi2_mixture_weights(sigma, [1.5] * 3)
    w_rot = chi2_mixture_weights(Qr @ sigma @ Qr.T, [1.5] * 3)
    assert np.allclose(w, w_rot)
    assert np.all(np.diff(w) <= 0) and np.all(w >= 0)


def test_mixture_sampler_moments():
    rng = np.random.default_rng(3)
    s = chi2_mixture_sample([0.7], 100_000, rng)
    assert abs(s.mean() - 0.7) <= 4 * s.std() / np.sqrt(len(s))
    assert np.all(chi2_mixture_sample([0.0, 0.0], 100, rng) == 0)
    s = chi2_mixture_sample([2.0, 0.5, 0.1], 100_000, rng)
    assert abs(s.mean() - 2.6) <= 4 * s.std() / np.sqrt(len(s))


def test_ks_harness_calibration():
    rng = np.random.default_rng(4)
    w = [1.0, 0.3]
    a, b = chi2_mixture_sample(w, 10_000, rng), chi2_mixture_sample(w, 10_000, rng)
    assert ks_2samp(a, b).statistic <= 0.05


def test_gamma_halved_halves_weights():
    quad = SyntheticQuadratic(np.diag([3.0, 1.0, 0.0]), gamma=np.array([[1.0, 0.2, 0.1],
                                                                         [0.2, 0.5, 0.0],
                                                                         [0.1, 0.0, 0.3]]))
    w = limit_weights(quad, 1.0)[-1]
    w_half = limit_weights(quad.with_gamma(quad.gamma / 2), 1.0)[-1]
    assert np.allclose(w_half, w / 2, rtol=0.02)


def test_deterministic_gradients_zero_weights():
    quad = SyntheticQuadratic(np.diag([2.0, 0.0]))
    rep = asymptotics_pipeline(quad, 1.0, 2000, 20, 0, mixture_samples=1000)
    assert np.all(rep.weights == 0)
    assert np.max(rep.scaled_gaps) <= 1e-6


def test_pipeline_rejects_small_beta():
    quad = SyntheticQuadratic(np.diag([2.0, 0.0]), gamma=np.eye(2))
    with pytest.raises(StabilityError, match="1/\\(2\\*lambda_min\\)"):
        asymptotics_pipeline(quad, 0.2, 100, 10, 0)


def test_pipeline_report_invariants():
    quad = SyntheticQuadratic(np.diag([3.0, 1.0, 0.0]), gamma=np.eye(3))
    rep = asymptotics_pipeline(quad, 1.0, 500, 200, 5, mixture_samples=10_000)
    assert rep.r == 2
    assert np.abs(rep.Q.T @ rep.Q - np.eye(2)).max() <= 1e-8
    assert np.linalg.eigvalsh(rep.Sigma).min() >= -1e-12
    assert np.all(np.diff(rep.weights) <= 0) and np.all(rep.weights >= 0)
    d = rep.to_dict()
    assert d["omega_min_eig"] == pytest.approx(1.0) and d["mixture_mean"] == pytest.approx(rep.weights.sum())


def test_quadratic_oracle_and_noise():
    quad = SyntheticQuadratic(np.diag([2.0, 0.0]), gamma=np.diag([0.5, 2.0]))
    th = np.array([0.3, 4.0])
    assert quad.value(th) == pytest.approx(-0.09)
    assert np.allclose(quad.gradient(th), [-0.6, 0.0])
    noise = quad.noisy_gradient(np.broadcast_to(th, (200_000, 2)), np.random.default_rng(6)) - quad.gradient(th)
    assert np.allclose(np.cov(noise, rowvar=False), quad.gamma, atol=0.03)
    assert quad.mu == pytest.approx(2.0) and quad.L == pytest.approx(2.0)
