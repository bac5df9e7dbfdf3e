"""Small dense kernels: soft thresholding, thin SVD, polar projection, cameras.

Matrices are plain ``float64`` numpy arrays.  The 3x2 SVD has a closed-form,
batched path because it sits inside every training step.
"""

from typing import NamedTuple

import numpy as np

from .exceptions import DegenerateCameraError, NumericalFailure

# sigma_min / sigma_max below this is treated as a rank-deficient camera
DEGENERATE_RATIO = 1e-12
# closed-form 3x2 path loses orthonormality of u when sigma_2/sigma_1 is tiny
_GRAM_FALLBACK_RATIO = 1e-3


class SvdThin(NamedTuple):
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def soft_threshold(x, tau):
    """Elementwise ``sign(x) * max(|x| - tau, 0)``; ``tau`` may broadcast."""
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def relu(x):
    return np.maximum(x, 0.0)


def frobenius(a, axis=(-2, -1)):
    return np.sqrt(np.sum(np.square(a), axis=axis))


def svd_thin(a):
    """Thin SVD of an ``m x n`` matrix with ``m >= n``.

    Returns ``SvdThin(u, sigma, v)`` with ``a = u @ diag(sigma) @ v.T`` and
    ``sigma`` sorted descending.  3x2 inputs go through the closed-form Gram
    path of :func:`svd_3x2`.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < a.shape[1]:
        raise ValueError(f"svd_thin needs a tall 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalFailure("svd_thin: non-finite input", payload=a)
    if a.shape == (3, 2):
        u, s, v = svd_3x2(a[None])
        return SvdThin(u[0], s[0], v[0])
    return _svd_general(a)


def _svd_general(a):
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}", payload=a) from exc
    return SvdThin(u, s, vt.swapaxes(-1, -2))


def svd_3x2(m):
    """Batched thin SVD of ``(B, 3, 2)`` matrices.

    The 2x2 Gram matrix ``M^T M`` is diagonalised in closed form.  The small
    eigenvalue is taken from ``|m1 x m2|^2 / lambda_1`` rather than from the
    difference formula, which cancels badly.  Frames whose condition number is
    too large for ``u = M v / sigma`` to stay orthonormal fall back to LAPACK.

    Returns ``u (B,3,2)``, ``sigma (B,2)`` and ``v (B,2,2)``.
    """
    m = np.asarray(m, dtype=np.float64)
    c1, c2 = m[..., 0], m[..., 1]
    a = np.einsum("bi,bi->b", c1, c1)
    d = np.einsum("bi,bi->b", c2, c2)
    b = np.einsum("bi,bi->b", c1, c2)

    half_gap = 0.5 * (a - d)
    lam1 = 0.5 * (a + d) + np.hypot(half_gap, b)
    cross = np.cross(c1, c2)
    det = np.einsum("bi,bi->b", cross, cross)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam2 = np.where(lam1 > 0, det / lam1, 0.0)
    s1 = np.sqrt(lam1)
    s2 = np.sqrt(np.maximum(lam2, 0.0))

    theta = 0.5 * np.arctan2(2.0 * b, a - d)
    ct, st = np.cos(theta), np.sin(theta)
    v = np.empty(m.shape[:-2] + (2, 2))
    v[..., 0, 0] = ct
    v[..., 1, 0] = st
    v[..., 0, 1] = -st
    v[..., 1, 1] = ct

    u = np.empty_like(m)
    bad = ~(s2 > _GRAM_FALLBACK_RATIO * s1)
    ok = ~bad
    if np.any(ok):
        mv = m[ok] @ v[ok]
        u[ok] = mv / np.stack([s1[ok], s2[ok]], axis=-1)[:, None, :]
    sigma = np.stack([s1, s2], axis=-1)
    if np.any(bad):
        if not np.all(np.isfinite(m[bad])):
            raise NumericalFailure("svd_3x2: non-finite input", payload=m[bad])
        ub, sb, vb = _svd_general(m[bad])
        u[bad], sigma[bad], v[bad] = ub, sb, vb
    return u, sigma, v


def polar_project(m):
    """Nearest matrix with orthonormal columns to a 3x2 camera, ``U V^T``."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 2):
        raise ValueError(f"polar_project expects a 3x2 matrix, got {m.shape}")
    q, _ = polar_project_batch(m[None])
    return q[0]


def polar_project_batch(m, strict=True):
    """Polar factor of each ``(B, 3, 2)`` camera.

    Returns ``(q, (u, sigma, v))`` so callers can reuse the factors when
    differentiating.  Raises :class:`DegenerateCameraError` naming the
    offending frames when ``sigma_min < 1e-12 * sigma_max``.  With
    ``strict=False`` it instead returns ``(q, factors, degenerate_mask)``;
    ``q`` for flagged frames is whatever ``U V^T`` LAPACK produced.
    """
    if not np.all(np.isfinite(m)):
        raise DegenerateCameraError("camera has non-finite entries", payload=m)
    u, s, v = svd_3x2(m)
    degenerate = degenerate_cameras(s)
    if not strict:
        return u @ v.swapaxes(-1, -2), (u, s, v), degenerate
    if np.any(degenerate):
        idx = np.flatnonzero(degenerate)
        raise DegenerateCameraError(
            f"rank-deficient camera in frame(s) {idx.tolist()}", payload=m[idx]
        )
    return u @ v.swapaxes(-1, -2), (u, s, v)


def degenerate_cameras(sigma):
    """Mask of frames whose singular values fail ``s_min >= 1e-12 s_max > 0``."""
    return ~(sigma[:, 1] >= DEGENERATE_RATIO * sigma[:, 0]) | ~(sigma[:, 0] > 0)


def polar_project_vjp(u, s, v, grad_q, guard=1e-10):
    """Pull a gradient on ``Q = U V^T`` back to the raw camera ``M``.

    With ``Y = U^T G V`` the result is
    ``U K V^T + (I - U U^T) G V diag(1/s) V^T`` where ``K`` is the 2x2 skew
    matrix with off-diagonal ``(Y01 - Y10) / (s0 + s1)``.

    Returns ``(grad_m, unstable)``; frames with ``s0 + s1 < guard`` get a zero
    gradient and are flagged in the boolean mask ``unstable``.
    """
    denom = s[:, 0] + s[:, 1]
    unstable = ~(denom >= guard)
    safe = np.where(unstable, 1.0, denom)
    vt = v.swapaxes(-1, -2)
    y = u.swapaxes(-1, -2) @ grad_q @ v
    k = (y[:, 0, 1] - y[:, 1, 0]) / safe
    skew = np.zeros_like(y)
    skew[:, 0, 1] = k
    skew[:, 1, 0] = -k
    term1 = u @ skew @ vt

    gv = grad_q @ v
    perp = gv - u @ (u.swapaxes(-1, -2) @ gv)
    s_safe = np.where(s > 0, s, 1.0)
    term2 = (perp / s_safe[:, None, :]) @ vt
    grad_m = term1 + term2
    grad_m[unstable] = 0.0
    return grad_m, unstable


def random_rotation(rng):
    """Haar-distributed element of SO(3) drawn from ``rng``."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def random_orthonormal_camera(seed):
    """First two columns of a Haar rotation seeded by ``seed`` (int or Generator)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return random_rotation(rng)[:, :2].copy()
