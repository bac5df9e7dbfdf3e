import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deep_nrsfm.exceptions import DegenerateCameraError
from deep_nrsfm.numerics import (polar_project, polar_project_batch, polar_project_vjp,
                                 random_orthonormal_camera, soft_threshold, svd_3x2, svd_thin)

finite = st.floats(-1e6, 1e6, allow_nan=False)
nonneg = st.floats(0, 1e6, allow_nan=False)


def random_orthonormal_2(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, 3, 2)))
    return q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[:, None, :]


def test_soft_threshold_examples():
    assert soft_threshold(2.0, 0.5) == 1.5
    assert soft_threshold(-0.3, 0.5) == 0.0
    for x in (-3.2, 0.0, 1e-9, 7.5):
        assert soft_threshold(x, 0.0) == x


@given(finite, nonneg)
def test_soft_threshold_is_odd_and_zero_in_dead_zone(x, tau):
    assert soft_threshold(-x, tau) == -soft_threshold(x, tau)
    if abs(x) <= tau:
        assert soft_threshold(x, tau) == 0.0


@given(finite, finite, nonneg)
def test_soft_threshold_is_1_lipschitz(x, y, tau):
    assert abs(soft_threshold(x, tau) - soft_threshold(y, tau)) <= abs(x - y) * (1 + 1e-12)


def test_svd_examples():
    res = svd_thin(np.array([[1.0, 0], [0, 1], [0, 0]]))
    np.testing.assert_allclose(res.sigma, [1, 1])
    res = svd_thin(np.array([[2.0, 0], [0, 3], [0, 0]]))
    np.testing.assert_allclose(res.sigma, [3, 2])


def check_svd(a, res):
    r = res.sigma.size
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(res.v.T @ res.v, np.eye(r), atol=1e-10)
    assert np.all(np.diff(res.sigma) <= 0) and np.all(res.sigma >= 0)
    recon = res.u @ np.diag(res.sigma) @ res.v.T
    assert np.linalg.norm(recon - a) <= 1e-8 * np.linalg.norm(a)


@pytest.mark.parametrize("shape", [(3, 2), (5, 3), (8, 8), (3, 1)])
def test_svd_random_satisfies_invariants(shape):
    rng = np.random.default_rng(42)
    a = rng.standard_normal(shape)
    check_svd(a, svd_thin(a))


def test_svd_3x2_batch_reconstruction_on_1e5_matrices():
    rng = np.random.default_rng(7)
    m = rng.standard_normal((100_000, 3, 2))
    # a slice of badly conditioned ones to exercise the fallback path
    m[:1000, :, 1] = m[:1000, :, 0] * 2 + 1e-6 * rng.standard_normal((1000, 3))
    u, s, v = svd_3x2(m)
    recon = (u * s[:, None, :]) @ v.swapaxes(-1, -2)
    rel = np.linalg.norm(recon - m, axis=(1, 2)) / np.linalg.norm(m, axis=(1, 2))
    assert rel.max() <= 1e-8
    eye = np.eye(2)
    assert np.abs(u.swapaxes(-1, -2) @ u - eye).max() <= 1e-10
    assert np.abs(v.swapaxes(-1, -2) @ v - eye).max() <= 1e-10
    assert np.all(s[:, 0] >= s[:, 1])


def test_svd_rejects_non_finite():
    with pytest.raises(Exception):
        svd_thin(np.array([[np.nan, 0], [0, 1], [0, 0]]))


def test_polar_examples():
    m = np.array([[1.0, 0], [0, 1], [0, 0]])
    np.testing.assert_allclose(polar_project(m), m, atol=1e-15)
    np.testing.assert_allclose(polar_project(np.array([[2.0, 0], [0, 3], [0, 0]])), m, atol=1e-15)
    q = random_orthonormal_camera(3)
    np.testing.assert_allclose(polar_project(q), q, atol=1e-12)


def test_polar_beats_monte_carlo_candidates():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((3, 2))
    q_star = polar_project(m)
    np.testing.assert_allclose(q_star.T @ q_star, np.eye(2), atol=1e-8)
    candidates = random_orthonormal_2(rng, 10_000)
    scores = np.einsum("nij,ij->n", candidates, m)
    assert np.trace(q_star.T @ m) >= scores.max()


def test_polar_idempotent_and_rotation_equivariant():
    rng = np.random.default_rng(1)
    for _ in range(200):
        m = rng.standard_normal((3, 2))
        q = polar_project(m)
        np.testing.assert_allclose(polar_project(q), q, atol=1e-10)
        t = rng.uniform(0, 2 * np.pi)
        r = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        np.testing.assert_allclose(polar_project(m @ r), q @ r, atol=1e-8)


def test_polar_rejects_rank_deficient():
    m = np.array([[1.0, 2.0], [2.0, 4.0], [0.5, 1.0]])
    with pytest.raises(DegenerateCameraError):
        polar_project(m)
    with pytest.raises(DegenerateCameraError) as info:
        polar_project_batch(np.stack([np.eye(3, 2), np.zeros((3, 2))]))
    assert "[1]" in str(info.value)


def test_polar_vjp_matches_finite_differences():
    rng = np.random.default_rng(5)
    m = rng.standard_normal((4, 3, 2))
    g = rng.standard_normal((4, 3, 2))
    _, (u, s, v) = polar_project_batch(m)
    grad, unstable = polar_project_vjp(u, s, v, g)
    assert not unstable.any()
    h = 1e-6
    fd = np.zeros_like(m)
    for idx in np.ndindex(m.shape):
        mp, mm = m.copy(), m.copy()
        mp[idx] += h
        mm[idx] -= h
        qp, _ = polar_project_batch(mp)
        qm, _ = polar_project_batch(mm)
        fd[idx] = (np.sum(g * qp) - np.sum(g * qm)) / (2 * h)
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)


def test_camera_is_orthonormal_and_seed_dependent():
    a = random_orthonormal_camera(0)
    b = random_orthonormal_camera(1)
    np.testing.assert_allclose(a.T @ a, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(b.T @ b, np.eye(2), atol=1e-12)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, random_orthonormal_camera(0))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_camera_orthonormal_for_any_seed(seed):
    m = random_orthonormal_camera(seed)
    np.testing.assert_allclose(m.T @ m, np.eye(2), atol=1e-12)


def test_camera_directions_are_centred():
    rng = np.random.default_rng(123)
    cams = np.stack([random_orthonormal_camera(rng) for _ in range(10_000)])
    assert np.abs(cams.mean(axis=0)).max() < 0.05
