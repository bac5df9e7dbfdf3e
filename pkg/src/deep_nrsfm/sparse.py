"""Reference ISTA / block-ISTA solvers and dictionary diagnostics.

These are deliberately independent of :mod:`deep_nrsfm.network`: the tests
use them as oracles for the single-iteration encoder layers, and training
uses :func:`mutual_coherence` to score checkpoints.

Block codes follow the network layout: a ``3L x 2`` code matrix is handled
as an ``(L, 3, 2)`` array of blocks.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .exceptions import DivergenceError, IllPosedDictionaryError
from .numerics import frobenius, relu, soft_threshold

DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class Dictionary:
    """Atoms stored as columns, with their norms cached."""

    atoms: np.ndarray
    column_norms: np.ndarray

    @classmethod
    def from_atoms(cls, atoms):
        atoms = np.asarray(atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise IllPosedDictionaryError(f"dictionary must be 2-D, got shape {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise IllPosedDictionaryError("dictionary has non-finite entries")
        norms = np.linalg.norm(atoms, axis=0)
        if np.any(norms == 0):
            raise IllPosedDictionaryError(
                f"zero atom(s) at column(s) {np.flatnonzero(norms == 0).tolist()}")
        return cls(atoms, norms)

    @property
    def shape(self):
        return self.atoms.shape


def _atoms(d):
    return d.atoms if isinstance(d, Dictionary) else np.asarray(d, dtype=np.float64)


def as_blocks(z):
    """View a ``3L x 2`` code matrix as ``(L, 3, 2)`` blocks."""
    z = np.asarray(z)
    return z.reshape(-1, 3, 2)


def block_norms(blocks):
    return frobenius(np.asarray(blocks).reshape(-1, 3, 2))


def active_blocks(blocks, eps=0.0):
    """Number of blocks whose Frobenius norm exceeds ``eps``."""
    return int(np.count_nonzero(block_norms(blocks) > eps))


def kron_identity(d, size=3):
    """``D (x) I_size``; turns a vector dictionary into a block dictionary."""
    return np.kron(_atoms(d), np.eye(size))


def ista(d, x, tau, alpha, iters):
    """Plain ISTA from ``z = 0``: ``z <- h_tau(z - alpha D^T (D z - x))``.

    Raises :class:`DivergenceError` when ``|z|_inf`` exceeds 1e12, which
    happens when ``alpha`` is larger than ``2 / ||D||_2^2``.
    """
    a = _atoms(d)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (a.shape[0],):
        raise ValueError(f"measurement has shape {x.shape}, dictionary has {a.shape[0]} rows")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    z = np.zeros(a.shape[1])
    for it in range(iters):
        z = soft_threshold(z - alpha * (a.T @ (a @ z - x)), tau)
        if not np.all(np.abs(z) <= DIVERGENCE_LIMIT):
            raise DivergenceError(f"ISTA diverged at iteration {it + 1}", iteration=it + 1)
    return z


def ista_objective(d, x, z, tau, alpha):
    """``||x - D z||^2 + 2 (tau / alpha) ||z||_1``, the quantity ISTA decreases."""
    a = _atoms(d)
    r = x - a @ z
    return float(r @ r + 2.0 * tau / alpha * np.abs(z).sum())


def block_soft_threshold_exact(v, tau):
    """Proximal map of ``tau * sum_j ||V_j||_F``: shrink each block's norm by ``tau``."""
    v = as_blocks(np.asarray(v, dtype=np.float64))
    norms = block_norms(v)
    scale = np.divide(np.maximum(norms - tau, 0.0), norms,
                      out=np.zeros_like(norms), where=norms > 0)
    return v * scale[:, None, None]


def block_soft_threshold_approx(v, b):
    """Entrywise soft threshold of block ``j`` with its own threshold ``b[j]``."""
    v = as_blocks(np.asarray(v, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    if np.any(b < 0):
        raise ValueError("block thresholds must be nonnegative")
    return soft_threshold(v, b[:, None, None])


def block_ista(d, x, b, alpha, iters, z0=None):
    """Block ISTA with the entrywise (approximate) block threshold.

    ``d`` is ``m x 3L`` and ``x`` is ``m x 2``; the code is ``3L x 2``,
    returned as ``(L, 3, 2)`` blocks.  Each iteration computes
    ``V = Z - alpha D^T (D Z - X)`` and then thresholds block ``j`` by ``b[j]``.
    """
    a = _atoms(d)
    x = np.asarray(x, dtype=np.float64)
    if a.shape[1] % 3:
        raise ValueError(f"block dictionary needs 3L columns, got {a.shape[1]}")
    if x.shape != (a.shape[0], 2):
        raise ValueError(f"measurement has shape {x.shape}, expected ({a.shape[0]}, 2)")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    z = np.zeros((a.shape[1], 2)) if z0 is None else np.array(z0, dtype=np.float64).reshape(-1, 2)
    for it in range(iters):
        v = z - alpha * (a.T @ (a @ z - x))
        z = block_soft_threshold_approx(v, b).reshape(-1, 2)
        if not np.all(np.abs(z) <= DIVERGENCE_LIMIT):
            raise DivergenceError(f"block ISTA diverged at iteration {it + 1}", iteration=it + 1)
    return as_blocks(z)


def single_iter_block_encode(d, x, b):
    """One block-ISTA step from zero with unit step on the nonnegative orthant.

    ``relu(D^T X - b (x) 1_{3x2})``, returned as ``(L, 3, 2)`` blocks.
    """
    a = _atoms(d)
    z = as_blocks(a.T @ np.asarray(x, dtype=np.float64))
    return relu(z - np.asarray(b, dtype=np.float64)[:, None, None])


def mutual_coherence(d):
    """Largest ``|<d_i, d_j>| / (||d_i|| ||d_j||)`` over distinct atoms."""
    a = _atoms(d)
    if a.ndim != 2 or a.shape[1] < 2:
        raise IllPosedDictionaryError("coherence needs at least two atoms")
    norms = np.linalg.norm(a, axis=0)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise IllPosedDictionaryError("dictionary has a zero or non-finite atom")
    unit = a / norms
    gram = np.abs(unit.T @ unit)
    np.fill_diagonal(gram, 0.0)
    return float(min(gram.max(), 1.0))


# -- enumeration oracles ------------------------------------------------------


def best_support_lstsq(d, x, k):
    """Exhaustive k-sparse least squares over all column supports.

    Returns ``(support, residual)`` for the support with the smallest residual.
    Intended for tiny problems only (``L <= 12``, ``k <= 3``).
    """
    a = _atoms(d)
    best = (None, np.inf)
    for support in combinations(range(a.shape[1]), k):
        sub = a[:, support]
        coef, *_ = np.linalg.lstsq(sub, x, rcond=None)
        res = float(np.linalg.norm(x - sub @ coef))
        if res < best[1]:
            best = (support, res)
    return best


def best_block_support_lstsq(d, x, k):
    """Exhaustive search over supports of ``k`` blocks of 3 columns each."""
    a = _atoms(d)
    n_blocks = a.shape[1] // 3
    best = (None, np.inf)
    for support in combinations(range(n_blocks), k):
        cols = [3 * j + c for j in support for c in range(3)]
        sub = a[:, cols]
        coef, *_ = np.linalg.lstsq(sub, x, rcond=None)
        res = float(np.linalg.norm(x - sub @ coef))
        if res < best[1]:
            best = (support, res)
    return best
