import numpy as np
import pytest

from wml.linalg import (EllipsoidError, NormSampler, ValidationError,
                        direction_set, jacobi_eigh, mvee_central,
                        norm_ball_reducing, spd_power, spectral_norm)


def test_jacobi_matches_lapack_oracle():
    rng = np.random.default_rng(0)
    for d in (2, 3, 4, 6):
        m = rng.standard_normal((7, d, d))
        m = m + np.swapaxes(m, 1, 2)
        vals, vecs = jacobi_eigh(m)
        assert np.allclose(vals, np.linalg.eigvalsh(m), atol=1e-12)
        recon = np.einsum("bij,bj,bkj->bik", vecs, vals, vecs)
        assert np.allclose(recon, m, atol=1e-12)


def test_spd_power_identity_and_diag():
    for alpha in (-1.0, -0.5, 0.5, 2.0):
        assert np.allclose(spd_power(np.eye(3), alpha), np.eye(3), atol=1e-12)
    assert np.allclose(spd_power(np.diag([4.0, 9.0]), 0.5),
                       np.diag([2.0, 3.0]), atol=1e-12)


def test_spd_power_sqrt_squares_back():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((5, 3, 3))
    m = np.einsum("bij,bkj->bik", a, a) + 0.1 * np.eye(3)
    root = spd_power(m, 0.5)
    assert np.max(np.abs(root @ root - m)) < 1e-10


def test_spd_power_rejects_non_spd():
    with pytest.raises(ValidationError):
        spd_power(np.array([[1.0, 2.0], [0.0, 1.0]]), 0.5)
    with pytest.raises(ValidationError):
        spd_power(np.diag([1.0, -2.0]), 0.5)


def test_spectral_norm_examples():
    assert spectral_norm(np.diag([2.0, 5.0])) == pytest.approx(5.0, abs=1e-12)
    u = np.array([1.0, 2.0, 2.0])
    assert spectral_norm(np.outer(u, u)) == pytest.approx(9.0, rel=1e-12)


def _charpoly_largest_singular(m):
    # roots of det(M^T M - lam I) via companion polynomial, d <= 3
    g = m.T @ m
    d = g.shape[0]
    if d == 2:
        coeffs = [1.0, -np.trace(g), np.linalg.det(g)]
    else:
        t = np.trace(g)
        t2 = np.trace(g @ g)
        coeffs = [1.0, -t, 0.5 * (t * t - t2), -np.linalg.det(g)]
    lam = max(r.real for r in np.roots(coeffs))
    return np.sqrt(lam)


def test_spectral_norm_charpoly_oracle():
    rng = np.random.default_rng(2)
    for d in (2, 3):
        for _ in range(10):
            m = rng.standard_normal((d, d))
            assert spectral_norm(m) == pytest.approx(
                _charpoly_largest_singular(m), rel=1e-10)


def test_mvee_euclidean_ball_is_identity():
    rho = NormSampler(2, lambda e: np.linalg.norm(e, axis=1))
    a = norm_ball_reducing(rho, tol=1e-3)
    assert np.max(np.abs(a - np.eye(2))) < 2e-3


def test_mvee_linear_image():
    d_mat = np.diag([0.5, 3.0])
    rho = NormSampler(2, lambda e: np.linalg.norm(e @ d_mat.T, axis=1))
    a = norm_ball_reducing(rho, tol=1e-3)
    assert np.max(np.abs(a - d_mat)) < 1e-2


def test_mvee_square_gives_circle_over_sqrt2():
    # Loewner ellipsoid of the sup-norm square is the circle of radius
    # sqrt(2), sampled on the standard 720-direction set
    rho = NormSampler(2, lambda e: np.max(np.abs(e), axis=1))
    assert rho.n_directions == 720
    a = norm_ball_reducing(rho, tol=1e-3)
    assert np.max(np.abs(a - np.eye(2) / np.sqrt(2.0))) < 2e-3


def test_mvee_central_inner_outer_certificates():
    rng = np.random.default_rng(3)
    pts = rng.standard_normal((40, 3))
    a, inner = mvee_central(pts, eps=1e-6)
    support = np.linalg.norm(pts @ a.T, axis=1)
    assert np.max(support) <= 1.0 + 1e-12          # containment
    assert inner <= np.sqrt(3.0 * (1.0 + 1e-5))    # John factor


def test_mvee_nonconvergence_error_carries_state():
    pts = direction_set(2, 32)
    with pytest.raises(EllipsoidError) as err:
        mvee_central(pts, eps=1e-12, max_iter=3)
    assert err.value.last_matrix is not None
    assert err.value.achieved > 1.0


def test_norm_sampler_validates_homogeneity():
    with pytest.raises(ValidationError):
        NormSampler(2, lambda e: np.linalg.norm(e, axis=1) + 1.0)
    with pytest.raises(ValidationError):
        NormSampler(2, lambda e: np.linalg.norm(e, axis=1) - 10.0)


def test_direction_counts_follow_configuration():
    assert direction_set(2).shape == (720, 2)
    assert direction_set(3).shape == (2048, 3)
    assert direction_set(4).shape == (8192, 4)
    norms = np.linalg.norm(direction_set(3), axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)
