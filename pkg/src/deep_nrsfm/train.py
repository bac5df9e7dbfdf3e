"""Adam training loop, checkpoints, and coherence-guided checkpoint selection."""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np

from .exceptions import (DegenerateCameraError, EmptyHistoryError, GradientInstabilityError,
                         PoisonedStepError, ShapeError, TrainingCollapseError)
from .network import ModelParams, backward_batch, forward_batch, init_params, layer_sizes
from .sparse import mutual_coherence

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "deep-nrsfm-checkpoint"
CHECKPOINT_VERSION = 1
LOG_HEADER = "step,mean_loss,coherence,wall_time"
COLLAPSE_PATIENCE = 100


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000
    deterministic: bool = True
    threads: int = 1
    # observations are rescaled to this coordinate RMS before training; 0 disables
    input_rms: float = 1.0

    def validate(self):
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not self.input_rms >= 0:
            raise ValueError("input_rms must be nonnegative")
        return self


class HistoryRecord(NamedTuple):
    step: int
    mean_loss: float
    coherence: float


@dataclass
class TrainState:
    params: ModelParams
    first_moment: ModelParams
    second_moment: ModelParams
    step: int = 0
    history: List[HistoryRecord] = field(default_factory=list)

    @classmethod
    def initial(cls, params):
        return cls(params, params.zeros_like(), params.zeros_like())


@dataclass(frozen=True)
class CheckpointRecord:
    step: int
    path: Optional[Path]
    coherence: float
    mean_loss: float
    params: Optional[ModelParams] = field(default=None, repr=False, compare=False)
    input_scale: float = 1.0


def adam_step(state, grads, cfg):
    """One bias-corrected Adam update; returns a new state.

    Raises :class:`PoisonedStepError` on non-finite gradients without
    touching ``state``.
    """
    garr = grads.arrays()
    if not all(np.all(np.isfinite(g)) for g in garr):
        raise PoisonedStepError(f"non-finite gradient at step {state.step + 1}")
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    m = state.first_moment.map(lambda m_, g: b1 * m_ + (1 - b1) * g, grads)
    v = state.second_moment.map(lambda v_, g: b2 * v_ + (1 - b2) * g * g, grads)
    lr_t = cfg.learning_rate / (1 - b1 ** t)
    corr2 = 1 - b2 ** t
    params = state.params.map(
        lambda p, m_, v_: p - lr_t * m_ / (np.sqrt(v_ / corr2) + cfg.adam_eps), m, v)
    return TrainState(params, m, v, t, list(state.history))


# -- checkpoints ----------------------------------------------------------------


def checkpoint_dict(params, step, coherence, mean_loss=None, input_scale=1.0):
    sizes = params.sizes
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "sizes": {"p": sizes.p, "k": list(sizes.k)},
        "step": int(step),
        "coherence": float(coherence),
        "mean_loss": None if mean_loss is None else float(mean_loss),
        "input_scale": float(input_scale),
        "arrays": [
            {"name": name, "shape": list(a.shape), "data": [float(x) for x in a.ravel()]}
            for name, a in zip(params.names(), params.arrays())
        ],
    }


def save_checkpoint(path, params, step, coherence, mean_loss=None, input_scale=1.0):
    """Write a JSON checkpoint; identical inputs give identical bytes.

    ``input_scale`` is the factor applied to observations before they enter
    the network; estimated shapes are divided by it again.
    """
    text = json.dumps(checkpoint_dict(params, step, coherence, mean_loss, input_scale),
                      separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Returns ``(params, meta)``; ``meta`` has step, coherence, mean_loss,
    input_scale and sizes."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ShapeError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    sizes = layer_sizes(doc["sizes"]["p"], doc["sizes"]["k"])
    arrays = [np.array(a["data"], dtype=np.float64).reshape(a["shape"]) for a in doc["arrays"]]
    params = ModelParams.from_arrays(arrays, sizes.n)
    if params.check() != sizes:
        raise ShapeError(f"{path}: arrays disagree with declared sizes {sizes}")
    meta = {k: doc[k] for k in ("step", "coherence", "mean_loss")}
    meta["input_scale"] = float(doc.get("input_scale", 1.0))
    meta["sizes"] = sizes
    return params, meta


def checkpoint_params(record):
    if record.params is not None:
        return record.params
    if record.path is None:
        raise ValueError("checkpoint record holds neither parameters nor a path")
    return load_checkpoint(record.path)[0]


def checkpoint_record(path):
    """Rebuild a :class:`CheckpointRecord` from a checkpoint file."""
    _, meta = load_checkpoint(path)
    loss = meta["mean_loss"]
    return CheckpointRecord(meta["step"], Path(path), meta["coherence"],
                            float("nan") if loss is None else loss,
                            input_scale=meta["input_scale"])


def trained_records(records):
    """Checkpoints written after at least one update, or all of them if there are none.

    The step-0 checkpoint holds the random initialisation, whose dictionary
    coherence says nothing about what training has learnt.
    """
    records = list(records)
    trained = [r for r in records if r.step > 0]
    return trained or records


def select_checkpoint(records):
    """Lowest final-dictionary coherence; ties go to lower loss, then earlier step.

    Only trained checkpoints compete; the initial one is returned only when
    it is the sole candidate.
    """
    records = list(records)
    if not records:
        raise EmptyHistoryError("no checkpoints to select from")
    return min(trained_records(records), key=lambda r: (r.coherence, r.mean_loss, r.step))


# -- training -----------------------------------------------------------------


def input_scale_for(points, target_rms):
    """Factor taking the coordinate RMS of ``points`` to ``target_rms``."""
    if not target_rms:
        return 1.0
    rms = math.sqrt(float(np.mean(np.square(points)))) if points.size else 0.0
    return target_rms / rms if rms > 0 else 1.0


def dataset_loss(points, params, chunk=2048):
    total, count = 0.0, 0
    for start in range(0, points.shape[0], chunk):
        loss = forward_batch(points[start:start + chunk], params, strict=False).loss
        total += float(loss.sum())
        count += loss.size
    return total / count if count else 0.0


def epoch_order(n_frames, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n_frames)


def batch_indices(n_frames, batch_size, seed):
    """Endless stream of mini-batches: each epoch is a fresh permutation."""
    epoch = 0
    while True:
        order = epoch_order(n_frames, seed, epoch)
        for start in range(0, n_frames, batch_size):
            yield order[start:start + batch_size]
        epoch += 1


def batch_gradients(w, params, executor=None, chunks=1):
    """Mean loss and gradient over ``w``, optionally split across threads.

    Chunk gradients are reduced in chunk order, so the result does not depend
    on thread scheduling.
    """
    bsz = w.shape[0]
    weight = np.full(bsz, 1.0 / bsz)

    def work(sl):
        trace = forward_batch(w[sl], params, strict=False)
        grads, bad = backward_batch(trace, params, weights=weight[sl], skip_unstable=True)
        return float(trace.loss.sum()), grads, bad.size

    bounds = np.linspace(0, bsz, min(chunks, bsz) + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    results = list(executor.map(work, slices)) if executor and len(slices) > 1 \
        else [work(sl) for sl in slices]
    loss = sum(r[0] for r in results) / bsz
    grads = results[0][1]
    for _, g, _ in results[1:]:
        grads = grads.map(np.add, g)
    return loss, grads, sum(r[2] for r in results)


class TrainingLog:
    """CSV log with one row per checkpoint; ``wall_time`` is 0 in deterministic mode."""

    def __init__(self, path=None, deterministic=True):
        self.path = None if path is None else Path(path)
        self.deterministic = deterministic
        self.start = time.perf_counter()
        self.rows = [LOG_HEADER]
        if self.path is not None:
            self.path.write_text(LOG_HEADER + "\n", encoding="utf-8")

    def append(self, step, mean_loss, coherence):
        wall = 0.0 if self.deterministic else time.perf_counter() - self.start
        row = f"{step},{mean_loss!r},{coherence!r},{wall:.3f}"
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(row + "\n")


def train(dataset, sizes, cfg, out_dir=None, init=None, callback=None):
    """Train on a centred, zero-filled track set.

    Observations are first rescaled so their coordinate RMS equals
    ``cfg.input_rms``; the factor is saved with every checkpoint.  Every
    ``checkpoint_every`` steps (and at step 0 and the final step) the
    parameters are scored by the mean per-frame loss over the whole dataset
    and by the coherence of the final dictionary.  With ``out_dir`` the
    checkpoints and ``train_log.csv`` are written there; otherwise each
    record keeps its parameters in memory.

    Returns ``(state, records)``.
    """
    cfg.validate()
    sizes = layer_sizes(*sizes)
    points = dataset.points if hasattr(dataset, "points") else np.asarray(dataset)
    if points.shape[1] != sizes.p:
        raise ShapeError(f"dataset has p={points.shape[1]}, model expects p={sizes.p}")
    scale = input_scale_for(points, cfg.input_rms)
    points = points * scale
    params = init if init is not None else init_params(sizes, cfg.seed)
    state = TrainState.initial(params)
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tlog = TrainingLog(None if out is None else out / "train_log.csv", cfg.deterministic)
    records = []

    def checkpoint(state):
        coh = mutual_coherence(state.params.dicts[-1])
        loss = dataset_loss(points, state.params)
        state.history.append(HistoryRecord(state.step, loss, coh))
        path = None
        if out is not None:
            path = out / f"ckpt_{state.step:07d}.json"
            save_checkpoint(path, state.params, state.step, coh, loss, scale)
        records.append(CheckpointRecord(state.step, path, coh, loss,
                                        None if out is not None else state.params.copy(),
                                        scale))
        tlog.append(state.step, loss, coh)
        log.info("step %d  loss %.6g  coherence %.4f", state.step, loss, coh)
        if callback is not None:
            callback(state, records[-1])

    checkpoint(state)
    if cfg.steps == 0 or points.shape[0] == 0:
        return state, records

    executor = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    batches = batch_indices(points.shape[0], cfg.batch_size, cfg.seed)
    bad_streak = 0
    try:
        while state.step < cfg.steps:
            idx = next(batches)
            try:
                loss, grads, _ = batch_gradients(points[idx], state.params, executor, cfg.threads)
                if not math.isfinite(loss):
                    raise PoisonedStepError("non-finite loss")
                state = adam_step(state, grads, cfg)
                bad_streak = 0
            except (PoisonedStepError, DegenerateCameraError, GradientInstabilityError) as exc:
                bad_streak += 1
                log.warning("skipped batch after step %d: %s", state.step, exc)
                if bad_streak >= COLLAPSE_PATIENCE:
                    last = records[-1] if records else None
                    raise TrainingCollapseError(
                        f"{bad_streak} consecutive failed steps after step {state.step}",
                        last_checkpoint=last) from exc
                continue
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                checkpoint(state)
    finally:
        if executor is not None:
            executor.shutdown()
    return state, records
