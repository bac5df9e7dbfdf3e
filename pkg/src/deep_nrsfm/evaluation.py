"""Alignment, the normalized mean 3D error, and the experiment studies."""

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .exceptions import DegenerateAlignmentError, InsufficientDataError, ShapeError


@dataclass
class EvalReport:
    per_frame_errors: np.ndarray
    mean_error: float
    aligned: bool = True
    noise_ratio: float = 0.0
    coherence: Optional[float] = None

    def summary(self):
        return {
            "mean_error": float(self.mean_error),
            "coherence": None if self.coherence is None else float(self.coherence),
            "noise_ratio": float(self.noise_ratio),
            "frames": int(len(self.per_frame_errors)),
        }


def align_orthonormal(s_est, s_gt):
    """Orthogonal ``R`` (det may be -1) minimising ``||s_est R - s_gt||_F``."""
    s_est = np.asarray(s_est, dtype=np.float64)
    s_gt = np.asarray(s_gt, dtype=np.float64)
    if s_est.shape != s_gt.shape or s_est.ndim != 2:
        raise ShapeError(f"shape mismatch {s_est.shape} vs {s_gt.shape}")
    if not np.any(s_gt):
        raise DegenerateAlignmentError("ground-truth shape is identically zero")
    return _procrustes(s_est[None], s_gt[None])[0]


def _procrustes(s_est, s_gt):
    u, _, vt = np.linalg.svd(s_est.swapaxes(-1, -2) @ s_gt)
    return u @ vt


def normalized_3d_error(estimates, ground_truth, visibility=None, noise_ratio=0.0,
                        coherence=None):
    """Per frame ``||S_est R - S_gt||_F / ||S_gt||_F`` after orthogonal alignment.

    With a visibility mask, alignment and both norms use only visible points.
    No scale correction is applied.
    """
    est = np.asarray(estimates, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if est.shape != gt.shape:
        raise ShapeError(f"{est.shape[0] if est.ndim else 0} estimates vs "
                         f"{gt.shape[0] if gt.ndim else 0} ground-truth frames "
                         f"(shapes {est.shape} and {gt.shape})")
    if visibility is not None:
        mask = np.asarray(visibility, dtype=bool)[:, :, None]
        est = est * mask
        gt = gt * mask
    gt_norm = np.linalg.norm(gt, axis=(1, 2))
    if np.any(gt_norm == 0):
        raise DegenerateAlignmentError(
            f"zero ground truth in frame(s) {np.flatnonzero(gt_norm == 0).tolist()}")
    rot = _procrustes(est, gt)
    # identical frames: I is optimal and avoids an SVD rounding residue
    rot[np.all(est == gt, axis=(1, 2))] = np.eye(3)
    errors = np.linalg.norm(est @ rot - gt, axis=(1, 2)) / gt_norm
    mean = float(errors.mean()) if errors.size else float("nan")
    return EvalReport(errors, mean, True, noise_ratio, coherence)


def rigid_factorization(points):
    """Rank-3 rigid factorization baseline (Tomasi-Kanade with metric upgrade).

    ``points`` is ``(F, p, 2)`` centred observations.  Returns a single
    ``(p, 3)`` rigid shape, used as the estimate for every frame.
    """
    w = np.asarray(points, dtype=np.float64)
    n_frames, p, _ = w.shape
    stacked = w.transpose(0, 2, 1).reshape(2 * n_frames, p)
    u, s, vt = np.linalg.svd(stacked, full_matrices=False)
    root = np.sqrt(s[:3])
    motion = u[:, :3] * root
    shape = root[:, None] * vt[:3]

    # metric upgrade: solve for symmetric Q with m_x Q m_x = m_y Q m_y = 1, m_x Q m_y = 0
    mx, my = motion[0::2], motion[1::2]

    def sym_row(a, b):
        return np.stack([a[:, 0] * b[:, 0], a[:, 0] * b[:, 1] + a[:, 1] * b[:, 0],
                         a[:, 0] * b[:, 2] + a[:, 2] * b[:, 0], a[:, 1] * b[:, 1],
                         a[:, 1] * b[:, 2] + a[:, 2] * b[:, 1], a[:, 2] * b[:, 2]], axis=1)

    lhs = np.concatenate([sym_row(mx, mx), sym_row(my, my), sym_row(mx, my)])
    rhs = np.concatenate([np.ones(n_frames), np.ones(n_frames), np.zeros(n_frames)])
    q6, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    q = np.array([[q6[0], q6[1], q6[2]], [q6[1], q6[3], q6[4]], [q6[2], q6[4], q6[5]]])
    evals, evecs = np.linalg.eigh(q)
    evals = np.maximum(evals, 1e-12 * max(evals.max(), 1e-300))
    g = evecs * np.sqrt(evals)
    return (np.linalg.solve(g, shape)).T


def rigid_baseline_error(ts):
    shape = rigid_factorization(ts.points)
    est = np.broadcast_to(shape, ts.gt_shapes.shape)
    return normalized_3d_error(est, ts.gt_shapes)


def pearson(x, y):
    """Pearson correlation; ``nan`` when either series has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0:
        return float("nan")
    return float(xc @ yc / denom)


@dataclass
class CoherenceSeries:
    points: List[tuple] = field(default_factory=list)  # (step, coherence, mean_error)
    correlation: float = float("nan")

    @property
    def defined(self):
        return not math.isnan(self.correlation)


def coherence_series_from_pairs(pairs):
    """Correlation of hand-built ``(coherence, error)`` pairs."""
    pairs = list(pairs)
    if len(pairs) < 3:
        raise InsufficientDataError(f"need at least 3 points, got {len(pairs)}")
    coh = [c for c, _ in pairs]
    err = [e for _, e in pairs]
    return CoherenceSeries([(i, c, e) for i, (c, e) in enumerate(pairs)], pearson(coh, err))


def coherence_error_series(records, dataset, load_params=None):
    """Pair each checkpoint's recorded coherence with its 3D error on ``dataset``."""
    from .network import predict_shapes
    from .train import checkpoint_params

    records = list(records)
    if len(records) < 3:
        raise InsufficientDataError(f"need at least 3 checkpoints, got {len(records)}")
    if not dataset.has_ground_truth:
        raise InsufficientDataError("dataset has no ground truth")
    load = load_params or checkpoint_params
    points = []
    for rec in records:
        shapes, _, _ = predict_shapes(dataset.points, load(rec), input_scale=rec.input_scale)
        err = normalized_3d_error(shapes, dataset.gt_shapes, dataset.visibility).mean_error
        points.append((rec.step, rec.coherence, err))
    corr = pearson([c for _, c, _ in points], [e for _, _, e in points])
    return CoherenceSeries(points, corr)


def evaluate_params(params, dataset, noise_ratio=0.0, input_scale=1.0):
    """3D error of ``params`` on ``dataset`` with the final-dictionary coherence attached."""
    from .network import predict_shapes
    from .sparse import mutual_coherence

    shapes, _, _ = predict_shapes(dataset.points, params, input_scale=input_scale)
    return normalized_3d_error(shapes, dataset.gt_shapes, dataset.visibility,
                               noise_ratio=noise_ratio,
                               coherence=mutual_coherence(params.dicts[-1]))


def noise_sweep(dataset, sizes, cfg, ratios, noise_seed=None, out_dir=None):
    """Retrain from scratch at each noise ratio and report the error curve.

    Returns ``(curve, failures)``: ``curve`` lists ``(ratio, mean_error)``
    in ascending ratio order and ``failures`` maps ratio to the exception
    that stopped that run.  Each error is the coherence-selected checkpoint's
    reconstruction of the noisy observations it was trained on, scored
    against the clean ground-truth shapes.
    """
    from pathlib import Path

    from .data import add_noise
    from .train import checkpoint_params, select_checkpoint, train

    if not dataset.has_ground_truth:
        raise InsufficientDataError("noise sweep needs ground truth")
    seed = cfg.seed if noise_seed is None else noise_seed
    curve, failures = [], {}
    for ratio in sorted(float(r) for r in ratios):
        noisy = add_noise(dataset, ratio, seed)
        run_dir = None if out_dir is None else Path(out_dir) / f"ratio_{ratio:g}"
        try:
            _, records = train(noisy, sizes, cfg, out_dir=run_dir)
            best = select_checkpoint(records)
            report = evaluate_params(checkpoint_params(best), noisy, noise_ratio=ratio,
                                     input_scale=best.input_scale)
        except Exception as exc:  # partial results are still reported
            failures[ratio] = exc
            continue
        curve.append((ratio, report.mean_error))
    return curve, failures
