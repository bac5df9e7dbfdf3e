import numpy as np
import pytest

from deep_nrsfm import train as train_mod
from deep_nrsfm.data import SynthConfig, generate_synthetic
from deep_nrsfm.exceptions import (EmptyHistoryError, PoisonedStepError, ShapeError,
                                   TrainingCollapseError)
from deep_nrsfm.network import ModelParams, init_params
from deep_nrsfm.sparse import mutual_coherence
from deep_nrsfm.train import (LOG_HEADER, CheckpointRecord, TrainConfig, TrainState, adam_step,
                              epoch_order, load_checkpoint, save_checkpoint, select_checkpoint,
                              train)

SIZES = (10, (8, 4))


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(SynthConfig(p=10, frame_count=64, k=(8, 4)))


def scalar_params(value):
    z = np.zeros(1)
    return ModelParams(dicts=[np.array([[value]])], enc_bias=[z.copy()], dec_bias=[],
                       cam_weights=z.copy(), code_weights=np.zeros((1, 6)), code_bias=z.copy())


def test_config_validation():
    for bad in (dict(batch_size=0), dict(adam_beta1=1.0), dict(adam_beta2=0.0),
                dict(learning_rate=0.0), dict(steps=-1), dict(threads=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


# -- Adam -----------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    params = init_params(SIZES, 0)
    state = TrainState.initial(params)
    new = adam_step(state, params.zeros_like(), TrainConfig())
    assert new.step == 1
    for a, b in zip(new.params.arrays(), params.arrays()):
        np.testing.assert_array_equal(a, b)


def test_adam_first_step_has_learning_rate_magnitude():
    state = TrainState.initial(scalar_params(0.0))
    grads = scalar_params(1.0)
    new = adam_step(state, grads, TrainConfig(learning_rate=0.1))
    assert new.params.dicts[0][0, 0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_rejects_non_finite_gradient_without_mutation():
    params = init_params(SIZES, 0)
    state = TrainState.initial(params)
    grads = params.zeros_like()
    grads.code_bias[0] = np.nan
    before = [a.copy() for a in state.params.arrays()]
    with pytest.raises(PoisonedStepError):
        adam_step(state, grads, TrainConfig())
    assert state.step == 0
    for a, b in zip(state.params.arrays(), before):
        np.testing.assert_array_equal(a, b)


def test_adam_is_deterministic():
    rng = np.random.default_rng(0)
    params = init_params(SIZES, 0)
    grads = [params.map(lambda a: rng.standard_normal(a.shape)) for _ in range(5)]
    runs = []
    for _ in range(2):
        state = TrainState.initial(params)
        for g in grads:
            state = adam_step(state, g, TrainConfig())
        runs.append(state)
    for a, b in zip(runs[0].params.arrays(), runs[1].params.arrays()):
        np.testing.assert_array_equal(a, b)


def test_adam_update_stays_bounded_under_spikes():
    rng = np.random.default_rng(1)
    cfg = TrainConfig(learning_rate=1e-3)
    state = TrainState.initial(scalar_params(0.0))
    for _ in range(100):
        state = adam_step(state, scalar_params(rng.standard_normal()), cfg)
    for spike in (1e3, -1e6, 1e9):
        before = state.params.dicts[0][0, 0]
        state = adam_step(state, scalar_params(spike), cfg)
        assert abs(state.params.dicts[0][0, 0] - before) <= 10 * cfg.learning_rate


# -- selection ----------------------------------------------------------------


def rec(step, coh, loss):
    return CheckpointRecord(step, None, coh, loss)


def test_select_checkpoint_examples():
    only = rec(0, 0.5, 1.0)
    assert select_checkpoint([only]) is only
    records = [rec(1, 0.9, 1.0), rec(2, 0.4, 1.0), rec(3, 0.6, 1.0)]
    assert select_checkpoint(records).step == 2
    tied = [rec(1, 0.4, 2.0), rec(2, 0.4, 1.0), rec(3, 0.4, 1.0)]
    assert select_checkpoint(tied).step == 2
    with pytest.raises(EmptyHistoryError):
        select_checkpoint([])


def test_select_checkpoint_skips_initialisation_when_trained_exist():
    records = [rec(0, 0.1, 5.0), rec(100, 0.5, 1.0), rec(200, 0.3, 0.9)]
    assert select_checkpoint(records).step == 200
    assert select_checkpoint(records[:1]).step == 0


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip_and_byte_stability(tmp_path):
    params = init_params((9, (7, 5, 2)), 3)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(a, params, 12, mutual_coherence(params.dicts[-1]), 0.25)
    save_checkpoint(b, params.copy(), 12, mutual_coherence(params.dicts[-1]), 0.25)
    assert a.read_bytes() == b.read_bytes()
    loaded, meta = load_checkpoint(a)
    assert meta["step"] == 12 and meta["mean_loss"] == 0.25
    assert meta["sizes"] == (9, (7, 5, 2))
    for x, y in zip(loaded.arrays(), params.arrays()):
        np.testing.assert_array_equal(x, y)


def test_load_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ShapeError):
        load_checkpoint(path)


# -- training loop --------------------------------------------------------------


def test_zero_steps_returns_initial_checkpoint(tiny, tmp_path):
    state, records = train(tiny, SIZES, TrainConfig(steps=0), out_dir=tmp_path)
    assert state.step == 0 and len(records) == 1
    assert records[0].path.name == "ckpt_0000000.json"
    init = init_params(SIZES, 0)
    for a, b in zip(state.params.arrays(), init.arrays()):
        np.testing.assert_array_equal(a, b)
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == LOG_HEADER and len(lines) == 2


def test_training_reduces_loss_and_records_history(tiny, tmp_path):
    cfg = TrainConfig(steps=300, batch_size=16, learning_rate=1e-2, checkpoint_every=100)
    state, records = train(tiny, SIZES, cfg, out_dir=tmp_path)
    assert [r.step for r in records] == [0, 100, 200, 300]
    assert [h.step for h in state.history] == [0, 100, 200, 300]
    assert state.history[-1].mean_loss < 0.7 * state.history[0].mean_loss
    for r in records:
        params, meta = load_checkpoint(r.path)
        assert meta["coherence"] == r.coherence == mutual_coherence(params.dicts[-1])
        assert 0 <= r.coherence <= 1


def test_deterministic_replay_is_byte_identical(tiny, tmp_path):
    cfg = TrainConfig(steps=40, batch_size=16, checkpoint_every=20)
    s1, r1 = train(tiny, SIZES, cfg, out_dir=tmp_path / "a")
    s2, r2 = train(tiny, SIZES, cfg, out_dir=tmp_path / "b")
    assert s1.history == s2.history
    for a, b in zip(r1, r2):
        assert a.path.read_bytes() == b.path.read_bytes()
    assert (tmp_path / "a/train_log.csv").read_bytes() == (tmp_path / "b/train_log.csv").read_bytes()


def test_threaded_training_is_reproducible(tiny):
    cfg = TrainConfig(steps=10, batch_size=16, checkpoint_every=5, threads=3)
    s1, _ = train(tiny, SIZES, cfg)
    s2, _ = train(tiny, SIZES, cfg)
    assert s1.history == s2.history
    single, _ = train(tiny, SIZES, TrainConfig(steps=10, batch_size=16, checkpoint_every=5))
    for a, b in zip(s1.params.arrays(), single.params.arrays()):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_epochs_cover_every_frame_once():
    order = epoch_order(50, 3, 0)
    assert sorted(order) == list(range(50))
    assert not np.array_equal(order, epoch_order(50, 3, 1))


def test_persistent_failures_raise_collapse(tiny, monkeypatch):
    def poisoned(*args, **kwargs):
        raise PoisonedStepError("synthetic failure")

    monkeypatch.setattr(train_mod, "batch_gradients", poisoned)
    with pytest.raises(TrainingCollapseError) as info:
        train(tiny, SIZES, TrainConfig(steps=500))
    assert info.value.last_checkpoint.step == 0


def test_train_rejects_wrong_point_count(tiny):
    with pytest.raises(ShapeError):
        train(tiny, (11, (8, 4)), TrainConfig(steps=1))
