"""Multi-layer block-sparse encoder/decoder for orthographic NRSfM.

Shapes and layouts
------------------
``p`` points, ``n`` layers with sizes ``k[0] > k[1] > ... > k[n-1]``.

* ``dicts[0]`` is ``D1`` with shape ``(3p, k1)``.  Row ``3*i + c`` holds
  coordinate ``c`` of point ``i``, so ``D1.reshape(p, 3, k1)`` is the
  filter bank used by the 1x1-convolution form and
  ``D1_sharp[i, 3*j + c] = D1[3*i + c, j]``.
* ``dicts[i]`` for ``i >= 1`` is ``(k_i, k_{i+1})``.
* Block codes are stored as ``(B, k, 3, 2)``: block ``j`` of a ``3k x 2``
  code matrix lives at ``[:, j]``.  The Kronecker products ``D (x) I3`` are
  never formed; every layer is an ``einsum`` over the block axis.

The whole forward/backward pass is batched over frames.  The per-frame
:func:`forward` / :func:`backward` wrappers exist for the single-frame API.
"""

from dataclasses import dataclass, field, fields
from typing import List, NamedTuple, Sequence

import numpy as np

from .exceptions import GradientInstabilityError, ShapeError
from .numerics import frobenius, polar_project_batch, polar_project_vjp, relu

POLAR_GUARD = 1e-10


class LayerSizes(NamedTuple):
    p: int
    k: tuple

    @property
    def n(self):
        return len(self.k)

    def validate(self):
        if self.p < 3:
            raise ShapeError(f"need at least 3 points, got p={self.p}")
        if not self.k or any(int(x) < 1 for x in self.k):
            raise ShapeError(f"layer sizes must be positive, got {self.k}")
        if any(a <= b for a, b in zip(self.k, self.k[1:])):
            raise ShapeError(f"layer sizes must strictly decrease, got {self.k}")
        return self


def layer_sizes(p, k):
    return LayerSizes(int(p), tuple(int(x) for x in k)).validate()


@dataclass
class ModelParams:
    """Network weights.  Also used as the container for their gradients."""

    dicts: List[np.ndarray]
    enc_bias: List[np.ndarray]
    dec_bias: List[np.ndarray]  # dec_bias[i] pairs with dicts[i + 1]
    cam_weights: np.ndarray
    code_weights: np.ndarray
    code_bias: np.ndarray

    @property
    def sizes(self):
        d1 = self.dicts[0]
        return LayerSizes(d1.shape[0] // 3, tuple([d1.shape[1]] + [d.shape[1] for d in self.dicts[1:]]))

    @property
    def d1_sharp(self):
        p, k1 = self.dicts[0].shape[0] // 3, self.dicts[0].shape[1]
        return self.dicts[0].reshape(p, 3, k1).transpose(0, 2, 1).reshape(p, 3 * k1)

    def filters(self):
        """``D1`` viewed as a ``(p, 3, k1)`` filter bank (no copy)."""
        d1 = self.dicts[0]
        return d1.reshape(d1.shape[0] // 3, 3, d1.shape[1])

    def arrays(self):
        """All parameter arrays in declared order."""
        return [*self.dicts, *self.enc_bias, *self.dec_bias,
                self.cam_weights, self.code_weights, self.code_bias]

    def names(self):
        n = len(self.dicts)
        return ([f"D{i + 1}" for i in range(n)]
                + [f"b{i + 1}" for i in range(n)]
                + [f"b'{i + 2}" for i in range(n - 1)]
                + ["c", "G", "g"])

    @classmethod
    def from_arrays(cls, arrays, n_layers):
        arrays = list(arrays)
        n = n_layers
        return cls(
            dicts=arrays[:n],
            enc_bias=arrays[n:2 * n],
            dec_bias=arrays[2 * n:3 * n - 1],
            cam_weights=arrays[3 * n - 1],
            code_weights=arrays[3 * n],
            code_bias=arrays[3 * n + 1],
        )

    def map(self, fn, *others):
        return type(self).from_arrays(
            [fn(*xs) for xs in zip(self.arrays(), *(o.arrays() for o in others))],
            len(self.dicts),
        )

    def copy(self):
        return self.map(np.copy)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def check(self):
        """Validate the dimension chain; raise :class:`ShapeError` otherwise."""
        sizes = self.sizes
        k = sizes.k
        if self.dicts[0].shape[0] % 3:
            raise ShapeError("D1 row count must be a multiple of 3")
        for i in range(1, len(self.dicts)):
            if self.dicts[i].shape[0] != self.dicts[i - 1].shape[1]:
                raise ShapeError(f"layer {i + 1}: D{i + 1} has {self.dicts[i].shape[0]} rows, "
                                 f"expected {self.dicts[i - 1].shape[1]}")
        for i, b in enumerate(self.enc_bias):
            if b.shape != (k[i],):
                raise ShapeError(f"layer {i + 1}: encoder bias shape {b.shape}, expected ({k[i]},)")
        for i, b in enumerate(self.dec_bias):
            if b.shape != (k[i],):
                raise ShapeError(f"layer {i + 2}: decoder bias shape {b.shape}, expected ({k[i]},)")
        kn = k[-1]
        if self.cam_weights.shape != (kn,) or self.code_weights.shape != (kn, 6 * kn) \
                or self.code_bias.shape != (kn,):
            raise ShapeError("recovery-head shapes do not match the last layer size")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise ShapeError("parameters contain non-finite values")
        return sizes


Gradients = ModelParams


def init_params(sizes, seed):
    """Gaussian dictionaries scaled by ``1/sqrt(fan_in)``, biases 0.01.

    ``fan_in`` is the row count of each matrix in the encoder direction:
    ``3p`` for ``D1``, ``k_{i-1}`` for ``D_i`` and ``6 k_n`` for the code head.
    """
    sizes = layer_sizes(*sizes)
    rng = np.random.default_rng(seed)
    rows = [3 * sizes.p, *sizes.k[:-1]]
    dicts = [rng.standard_normal((r, c)) / np.sqrt(r) for r, c in zip(rows, sizes.k)]
    kn = sizes.k[-1]
    return ModelParams(
        dicts=dicts,
        enc_bias=[np.full(k, 0.01) for k in sizes.k],
        dec_bias=[np.full(k, 0.01) for k in sizes.k[:-1]],
        cam_weights=np.full(kn, 1.0 / kn),
        code_weights=rng.standard_normal((kn, 6 * kn)) / np.sqrt(6 * kn),
        code_bias=np.full(kn, 0.01),
    )


# -- building blocks ----------------------------------------------------------


def first_layer_linear(filters, w):
    """``(D1_sharp)^T W`` as a 1x1 transposed convolution: ``(B,p,2) -> (B,k1,3,2)``."""
    return np.einsum("icj,bid->bjcd", filters, w, optimize=True)


def block_layer_linear(d, psi):
    """``(D (x) I3)^T Psi`` without the Kronecker product: ``(B,k,3,2) -> (B,k',3,2)``."""
    return np.einsum("jl,bjcd->blcd", d, psi, optimize=True)


def kron_layer_linear(d, psi):
    """Reference path that materialises ``D (x) I3``; used only for testing."""
    big = np.kron(d, np.eye(3))
    b, k = psi.shape[:2]
    stacked = psi.reshape(b, 3 * k, 2)
    out = np.einsum("rl,brd->bld", big, stacked)
    return out.reshape(b, d.shape[1], 3, 2)


def encode_batch(w, params):
    """Encoder over a batch ``w (B,p,2)``; returns ``(psi_blocks, pre_activations)``."""
    filters = params.filters()
    if w.ndim != 3 or w.shape[1:] != (filters.shape[0], 2):
        raise ShapeError(f"layer 1: observations have shape {w.shape[1:]}, "
                         f"expected ({filters.shape[0]}, 2)")
    pres, psis = [], []
    x = first_layer_linear(filters, w)
    for i, b in enumerate(params.enc_bias):
        if i > 0:
            d = params.dicts[i]
            if d.shape[0] != psis[-1].shape[1]:
                raise ShapeError(f"layer {i + 1}: D{i + 1} expects {d.shape[0]} blocks, "
                                 f"got {psis[-1].shape[1]}")
            x = block_layer_linear(d, psis[-1])
        pre = x - b[:, None, None]
        pres.append(pre)
        psis.append(relu(pre))
    return psis, pres


def recover_camera_batch(psi_n, params):
    return np.einsum("j,bjcd->bcd", params.cam_weights, psi_n)


def recover_code_batch(psi_n, params):
    """``relu(G vec(Psi_n) - g)``; vec is block-major, row-major within a block."""
    flat = psi_n.reshape(psi_n.shape[0], -1)
    pre = flat @ params.code_weights.T - params.code_bias
    return relu(pre), pre


def decode_batch(code, params):
    """Decoder from ``psi_n (B,k_n)``.

    Returns ``(codes, pres, shape)`` where ``codes[i]`` is ``psi_{i+1}``
    (so ``codes[-1]`` is the input) and ``shape`` is ``(B, p, 3)``.
    """
    n = len(params.dicts)
    codes = [None] * n
    pres = [None] * n
    codes[n - 1] = code
    for i in range(n - 1, 0, -1):
        pre = codes[i] @ params.dicts[i].T - params.dec_bias[i - 1]
        pres[i - 1] = pre
        codes[i - 1] = relu(pre)
    shape = np.einsum("icj,bj->bic", params.filters(), codes[0], optimize=True)
    return codes, pres, shape


@dataclass
class BatchTrace:
    """Every intermediate of a batched forward pass."""

    w: np.ndarray
    psi_blocks: list
    enc_pre: list
    code_pre: np.ndarray
    codes: list
    dec_pre: list
    camera_raw: np.ndarray
    camera_proj: np.ndarray
    svd: tuple
    shape: np.ndarray
    residual: np.ndarray
    loss: np.ndarray = field(default=None)
    degenerate: np.ndarray = field(default=None)


def forward_batch(w, params, strict=True):
    """Run the network on ``w (B,p,2)``; per-frame unsquared Frobenius losses.

    A rank-deficient raw camera raises :class:`DegenerateCameraError`, unless
    ``strict`` is false, in which case the frame is flagged in
    ``trace.degenerate`` and later skipped by :func:`backward_batch`.
    """
    w = np.asarray(w, dtype=np.float64)
    psis, enc_pre = encode_batch(w, params)
    camera = recover_camera_batch(psis[-1], params)
    code, code_pre = recover_code_batch(psis[-1], params)
    codes, dec_pre, shape = decode_batch(code, params)
    if strict:
        proj, factors = polar_project_batch(camera)
        degenerate = np.zeros(w.shape[0], dtype=bool)
    else:
        proj, factors, degenerate = polar_project_batch(camera, strict=False)
    residual = w - shape @ proj
    return BatchTrace(
        w=w, psi_blocks=psis, enc_pre=enc_pre, code_pre=code_pre, codes=codes,
        dec_pre=dec_pre, camera_raw=camera, camera_proj=proj, svd=factors,
        shape=shape, residual=residual, loss=frobenius(residual),
        degenerate=degenerate,
    )


def backward_batch(trace, params, weights=None, skip_unstable=False):
    """Reverse-mode gradient of ``sum_f weights[f] * loss_f``.

    ``weights`` defaults to ``1/B`` (the mini-batch mean).  ReLU uses the
    subgradient 0 at the kink and the Frobenius loss has gradient 0 where it
    is exactly 0.  Frames whose camera has ``s0 + s1 < 1e-10`` raise
    :class:`GradientInstabilityError`, or contribute nothing when
    ``skip_unstable`` is set; frames flagged degenerate by a non-strict
    forward pass are always skipped.  Returns ``(grads, skipped_frames)``.
    """
    bsz = trace.w.shape[0]
    if weights is None:
        weights = np.full(bsz, 1.0 / bsz)
    n = len(params.dicts)
    grads = params.zeros_like()
    filters = params.filters()
    gfilters = np.zeros_like(filters)

    loss = trace.loss
    scale = np.divide(weights, loss, out=np.zeros_like(loss), where=loss > 0)
    d_res = trace.residual * scale[:, None, None]
    d_shape = -d_res @ trace.camera_proj.swapaxes(-1, -2)
    d_proj = -trace.shape.swapaxes(-1, -2) @ d_res

    u, s, v = trace.svd
    d_cam, unstable = polar_project_vjp(u, s, v, d_proj, guard=POLAR_GUARD)
    bad = np.flatnonzero(unstable & ~trace.degenerate)
    if bad.size and not skip_unstable:
        raise GradientInstabilityError(
            f"camera singular values sum below {POLAR_GUARD} in frame(s) {bad.tolist()}",
            frames=bad,
        )
    bad = np.flatnonzero(unstable | trace.degenerate)
    if bad.size:
        d_shape[bad] = 0.0
        d_cam[bad] = 0.0

    # decoder
    gfilters += np.einsum("bic,bj->icj", d_shape, trace.codes[0], optimize=True)
    d_code = np.einsum("icj,bic->bj", filters, d_shape, optimize=True)
    for i in range(1, n):
        d_pre = d_code * (trace.dec_pre[i - 1] > 0)
        grads.dicts[i] += d_pre.T @ trace.codes[i]
        grads.dec_bias[i - 1] -= d_pre.sum(axis=0)
        d_code = d_pre @ params.dicts[i]

    # recovery heads
    psi_n = trace.psi_blocks[-1]
    flat = psi_n.reshape(bsz, -1)
    d_zpre = d_code * (trace.code_pre > 0)
    grads.code_weights += d_zpre.T @ flat
    grads.code_bias -= d_zpre.sum(axis=0)
    d_psi = (d_zpre @ params.code_weights).reshape(psi_n.shape)
    grads.cam_weights += np.einsum("bcd,bjcd->j", d_cam, psi_n, optimize=True)
    d_psi += params.cam_weights[None, :, None, None] * d_cam[:, None]

    # encoder
    for i in range(n - 1, -1, -1):
        d_pre = d_psi * (trace.enc_pre[i] > 0)
        grads.enc_bias[i] -= d_pre.sum(axis=(0, 2, 3))
        if i > 0:
            prev = trace.psi_blocks[i - 1]
            grads.dicts[i] += np.einsum("bjcd,blcd->jl", prev, d_pre, optimize=True)
            d_psi = np.einsum("jl,blcd->bjcd", params.dicts[i], d_pre, optimize=True)
        else:
            gfilters += np.einsum("bid,bjcd->icj", trace.w, d_pre, optimize=True)

    grads.dicts[0] += gfilters.reshape(grads.dicts[0].shape)
    return grads, bad


# -- single-frame API ---------------------------------------------------------


class ForwardTrace(NamedTuple):
    psi_blocks: list
    psi_codes: list  # psi_n, ..., psi_1
    camera_raw: np.ndarray
    camera_proj: np.ndarray
    shape: np.ndarray
    loss: float
    batch: BatchTrace


def _single(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"expected a p x 2 observation matrix, got shape {w.shape}")
    return w[None]


def encode(w, params):
    """Block codes ``Psi_1 ... Psi_n`` for one frame, each ``(k_i, 3, 2)``."""
    psis, _ = encode_batch(_single(w), params)
    return [x[0] for x in psis]


def recover_camera(psi_n, params):
    _check_blocks(psi_n, params)
    return recover_camera_batch(np.asarray(psi_n)[None], params)[0]


def recover_code(psi_n, params):
    _check_blocks(psi_n, params)
    return recover_code_batch(np.asarray(psi_n)[None], params)[0][0]


def _check_blocks(psi_n, params):
    kn = params.cam_weights.shape[0]
    if np.shape(psi_n) != (kn, 3, 2):
        raise ShapeError(f"expected {kn} blocks of 3x2, got shape {np.shape(psi_n)}")


def decode(code, params):
    """Returns ``(codes, shape)`` with ``codes = [psi_{n-1}, ..., psi_1]``."""
    codes, _, shape = decode_batch(np.asarray(code, dtype=np.float64)[None], params)
    return [c[0] for c in reversed(codes[:-1])], shape[0]


def forward(w, params):
    t = forward_batch(_single(w), params)
    return ForwardTrace(
        psi_blocks=[x[0] for x in t.psi_blocks],
        psi_codes=[c[0] for c in reversed(t.codes)],
        camera_raw=t.camera_raw[0],
        camera_proj=t.camera_proj[0],
        shape=t.shape[0],
        loss=float(t.loss[0]),
        batch=t,
    )


def backward(trace, w, params):
    """Gradient of one frame's loss with respect to every parameter."""
    if not np.array_equal(trace.batch.w[0], np.asarray(w, dtype=np.float64)):
        raise ValueError("trace was not produced from this observation")
    grads, _ = backward_batch(trace.batch, params, weights=np.ones(1))
    return grads


def predict_shapes(w, params, chunk=2048, input_scale=1.0):
    """Shapes ``(F, p, 3)``, projected cameras and losses for many frames.

    ``w`` is multiplied by ``input_scale`` before the forward pass and the
    shapes are divided by it afterwards, so they live in the units of ``w``.
    Losses stay in network units.
    """
    w = np.asarray(w, dtype=np.float64) * input_scale
    shapes, cams, losses = [], [], []
    for start in range(0, w.shape[0], chunk):
        t = forward_batch(w[start:start + chunk], params, strict=False)
        shapes.append(t.shape)
        cams.append(t.camera_proj)
        losses.append(t.loss)
    if not shapes:
        p = params.sizes.p
        return np.zeros((0, p, 3)), np.zeros((0, 3, 2)), np.zeros(0)
    return np.concatenate(shapes) / input_scale, np.concatenate(cams), np.concatenate(losses)


def param_field_names():
    return [f.name for f in fields(ModelParams)]
