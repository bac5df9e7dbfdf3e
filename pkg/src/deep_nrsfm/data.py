"""Track sets: synthetic generation, preprocessing and the text file format.

Track file layout (UTF-8, LF line endings, whitespace separated)::

    NRSFM-TRACKS v1 p=<p> frames=<F> gt=<0|1>
    u1 v1 ... up vp            # per frame: 2p reals
    1 1 0 ... 1                # per frame: p visibility bits
    x1 y1 z1 ... xp yp zp      # only if gt=1: ground-truth shape, row-major
    m00 m01 m10 m11 m20 m21    # only if gt=1: ground-truth camera, row-major

Reals are written with 17 significant digits so a save/load round trip is
bit-exact.
"""

import math
import re
import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import InsufficientObservationsError, ShapeError, TrackParseError
from .network import layer_sizes

HEADER_RE = re.compile(r"^NRSFM-TRACKS v1 p=(\d+) frames=(\d+) gt=([01])$")


class EmptyFrameWarning(UserWarning):
    """A frame has no visible points and was zero-filled entirely."""


class TrackFrame(NamedTuple):
    points: np.ndarray
    visibility: np.ndarray


@dataclass(frozen=True)
class TrackSet:
    """A stack of frames sharing the same ``p`` points.

    ``points`` is ``(F, p, 2)``, ``visibility`` is ``(F, p)`` bool.  When
    ground truth is present, ``gt_shapes`` is ``(F, p, 3)`` and
    ``gt_cameras`` is ``(F, 3, 2)``.
    """

    points: np.ndarray
    visibility: np.ndarray
    gt_shapes: Optional[np.ndarray] = None
    gt_cameras: Optional[np.ndarray] = None
    empty_frames: tuple = ()

    def __post_init__(self):
        pts = self.points
        if pts.ndim != 3 or pts.shape[2] != 2:
            raise ShapeError(f"points must be (F, p, 2), got {pts.shape}")
        if self.visibility.shape != pts.shape[:2]:
            raise ShapeError("visibility mask does not match points")
        if (self.gt_shapes is None) != (self.gt_cameras is None):
            raise ShapeError("ground truth needs both shapes and cameras")
        if self.gt_shapes is not None:
            if self.gt_shapes.shape != pts.shape[:2] + (3,):
                raise ShapeError(f"ground-truth shapes {self.gt_shapes.shape} do not match points")
            if self.gt_cameras.shape != (pts.shape[0], 3, 2):
                raise ShapeError(f"ground-truth cameras {self.gt_cameras.shape} do not match points")

    @property
    def p(self):
        return self.points.shape[1]

    @property
    def n_frames(self):
        return self.points.shape[0]

    @property
    def has_ground_truth(self):
        return self.gt_shapes is not None

    @property
    def frames(self):
        return [TrackFrame(w, vis) for w, vis in zip(self.points, self.visibility)]

    def __len__(self):
        return self.n_frames

    @classmethod
    def from_frames(cls, frames, p=None, gt_shapes=None, gt_cameras=None):
        frames = list(frames)
        if not frames:
            if p is None:
                raise ShapeError("empty track set needs an explicit p")
            return cls(np.zeros((0, p, 2)), np.zeros((0, p), dtype=bool))
        points = np.stack([np.asarray(f.points, dtype=np.float64) for f in frames])
        vis = np.stack([np.asarray(f.visibility, dtype=bool) for f in frames])
        return cls(points, vis,
                   None if gt_shapes is None else np.asarray(gt_shapes, dtype=np.float64),
                   None if gt_cameras is None else np.asarray(gt_cameras, dtype=np.float64))


@dataclass(frozen=True)
class SynthConfig:
    p: int = 15
    frame_count: int = 4000
    k: tuple = (32, 8)
    sparsity: int = 2
    dict_seed: int = 0
    camera_seed: int = 1
    code_scale: float = 1.0

    def validate(self):
        layer_sizes(self.p, self.k)
        if not 1 <= self.sparsity <= self.k[-1]:
            raise ValueError(f"sparsity must be in [1, {self.k[-1]}], got {self.sparsity}")
        if self.frame_count < 0:
            raise ValueError("frame_count must be nonnegative")
        if not self.code_scale > 0:
            raise ValueError("code_scale must be positive")
        return self


class GroundTruthModel(NamedTuple):
    dicts: list
    codes: np.ndarray  # (F, k_n) final-layer codes


def _normalize_columns(a):
    return a / np.linalg.norm(a, axis=0)


def sample_dictionaries(cfg, rng):
    """Ground-truth dictionaries whose products keep every code nonnegative.

    ``D1`` is Gaussian with each atom centred over the points (so shapes and
    their projections have zero centroid).  Deeper dictionaries are sparse
    and nonnegative, so intermediate codes ``psi_i = D_{i+1} psi_{i+1}`` stay
    nonnegative and sparse.  All atoms have unit norm.
    """
    p, k = cfg.p, cfg.k
    d1 = rng.standard_normal((p, 3, k[0]))
    d1 -= d1.mean(axis=0, keepdims=True)
    dicts = [_normalize_columns(d1.reshape(3 * p, k[0]))]
    for rows, cols in zip(k[:-1], k[1:]):
        nnz = max(2, math.ceil(rows / 4))
        d = np.zeros((rows, cols))
        for j in range(cols):
            idx = rng.choice(rows, size=nnz, replace=False)
            d[idx, j] = np.abs(rng.standard_normal(nnz))
        dicts.append(_normalize_columns(d))
    return dicts


def sample_codes(n_frames, kn, sparsity, scale, rng):
    """Nonnegative codes with uniformly chosen ``sparsity``-element supports."""
    codes = np.zeros((n_frames, kn))
    for f in range(n_frames):
        idx = rng.choice(kn, size=sparsity, replace=False)
        codes[f, idx] = np.abs(rng.standard_normal(sparsity)) * scale
    return codes


def compose_shapes(dicts, codes):
    """``s = D1 D2 ... Dn psi_n`` reshaped to ``(F, p, 3)``."""
    x = np.asarray(codes, dtype=np.float64)
    for d in reversed(dicts):
        x = x @ d.T
    return x.reshape(x.shape[0], -1, 3)


def random_cameras(n_frames, rng):
    """``(F, 3, 2)`` Haar-distributed orthographic cameras."""
    q, r = np.linalg.qr(rng.standard_normal((n_frames, 3, 3)))
    q = q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[:, None, :]
    flip = np.linalg.det(q) < 0
    q[flip, :, 2] *= -1
    return q[:, :, :2].copy()


def generate_synthetic(cfg, return_model=False):
    """Sample shapes from a hierarchical sparse model and project them.

    ``W_f = S_f M_f`` with nonnegative ``K``-sparse final codes and Haar
    cameras.  With ``return_model=True`` also returns the ground-truth
    dictionaries and codes.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.dict_seed)
    dicts = sample_dictionaries(cfg, rng)
    codes = sample_codes(cfg.frame_count, cfg.k[-1], cfg.sparsity, cfg.code_scale, rng)
    shapes = compose_shapes(dicts, codes)
    cams = random_cameras(cfg.frame_count, np.random.default_rng(cfg.camera_seed))
    points = shapes @ cams
    ts = TrackSet(points, np.ones(points.shape[:2], dtype=bool), shapes, cams)
    if return_model:
        return ts, GroundTruthModel(dicts, codes)
    return ts


def center_frames(ts):
    """Subtract each frame's centroid, computed over its visible points."""
    counts = ts.visibility.sum(axis=1)
    short = np.flatnonzero(counts < 3)
    if short.size:
        raise InsufficientObservationsError(
            f"frame(s) {short.tolist()} have fewer than 3 visible points")
    mask = ts.visibility[:, :, None]
    centroid = (ts.points * mask).sum(axis=1) / counts[:, None]
    return replace(ts, points=ts.points - centroid[:, None, :])


def add_noise(ts, ratio, seed):
    """Add Gaussian noise scaled so ``||noise||_F / ||W||_F == ratio`` per frame."""
    if ratio < 0:
        raise ValueError("noise ratio must be nonnegative")
    if ratio == 0:
        return replace(ts, points=ts.points.copy())
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(ts.points.shape)
    w_norm = np.linalg.norm(ts.points, axis=(1, 2))
    n_norm = np.linalg.norm(noise, axis=(1, 2))
    noise *= (ratio * w_norm / n_norm)[:, None, None]
    return replace(ts, points=ts.points + noise)


def noise_ratios(clean, noisy):
    """Realised per-frame ``||noisy - clean||_F / ||clean||_F``."""
    diff = np.linalg.norm(noisy.points - clean.points, axis=(1, 2))
    return diff / np.linalg.norm(clean.points, axis=(1, 2))


def zero_fill_missing(ts):
    """Set invisible coordinates to 0; the mask is kept for evaluation.

    Frames with no visible point at all are listed in ``empty_frames`` and
    reported with an :class:`EmptyFrameWarning`.
    """
    points = np.where(ts.visibility[:, :, None], ts.points, 0.0)
    empty = tuple(np.flatnonzero(~ts.visibility.any(axis=1)).tolist())
    if empty:
        warnings.warn(f"frames {list(empty)} have no visible points", EmptyFrameWarning,
                      stacklevel=2)
    return replace(ts, points=points, empty_frames=empty)


# -- file format --------------------------------------------------------------


def _fmt(values):
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def dumps_tracks(ts):
    gt = ts.has_ground_truth
    lines = [f"NRSFM-TRACKS v1 p={ts.p} frames={ts.n_frames} gt={int(gt)}"]
    for f in range(ts.n_frames):
        lines.append(_fmt(ts.points[f]))
        lines.append(" ".join("1" if v else "0" for v in ts.visibility[f]))
        if gt:
            lines.append(_fmt(ts.gt_shapes[f]))
            lines.append(_fmt(ts.gt_cameras[f]))
    return "\n".join(lines) + "\n"


def save_tracks(ts, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_tracks(ts))


def _parse_reals(line, count, lineno, what):
    tokens = line.split()
    if len(tokens) != count:
        raise TrackParseError(f"expected {count} values for {what}, found {len(tokens)}", lineno)
    try:
        values = [float(t) for t in tokens]
    except ValueError as exc:
        raise TrackParseError(f"non-numeric token in {what}: {exc}", lineno) from None
    return np.array(values)


def loads_tracks(text):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise TrackParseError("empty file", 1)
    m = HEADER_RE.match(lines[0].strip())
    if not m:
        raise TrackParseError(f"malformed header {lines[0]!r}", 1)
    p, n_frames, gt = int(m.group(1)), int(m.group(2)), m.group(3) == "1"
    per_frame = 4 if gt else 2
    body = lines[1:]
    if len(body) != n_frames * per_frame:
        raise TrackParseError(
            f"header declares {n_frames} frames with p={p} ({n_frames * per_frame} lines), "
            f"found {len(body)} data lines", len(lines))
    points = np.zeros((n_frames, p, 2))
    vis = np.zeros((n_frames, p), dtype=bool)
    shapes = np.zeros((n_frames, p, 3)) if gt else None
    cams = np.zeros((n_frames, 3, 2)) if gt else None
    for f in range(n_frames):
        base = 1 + f * per_frame
        points[f] = _parse_reals(body[base - 1], 2 * p, base + 1, "points").reshape(p, 2)
        bits = body[base].split()
        if len(bits) != p or any(b not in ("0", "1") for b in bits):
            raise TrackParseError(f"expected {p} visibility bits (0/1)", base + 2)
        vis[f] = [b == "1" for b in bits]
        if gt:
            shapes[f] = _parse_reals(body[base + 1], 3 * p, base + 3, "shape").reshape(p, 3)
            cams[f] = _parse_reals(body[base + 2], 6, base + 4, "camera").reshape(3, 2)
    return TrackSet(points, vis, shapes, cams)


def load_tracks(path):
    with open(path, encoding="utf-8") as fh:
        return loads_tracks(fh.read())
