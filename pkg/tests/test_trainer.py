from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_selector, tiny_synth, tiny_train
from trackselect import tensor as tc
from trackselect.checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint
from trackselect.synth import generate_synthetic
from trackselect.trainer import (
    TrainConfig,
    TrainingError,
    clip_grads,
    gradcheck_fixture,
    load_state,
    lr_at,
    resume,
    train,
)


def test_train_deterministic(tiny_corpus, tmp_path):
    a = train(tiny_corpus, tiny_selector(), tiny_train(), out_dir=tmp_path / "a")
    b = train(tiny_corpus, tiny_selector(), tiny_train(), out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "final.solp").read_bytes() == (tmp_path / "b" / "final.solp").read_bytes()
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()
    assert a.checkpoint_bytes() == b.checkpoint_bytes()
    c = train(tiny_corpus, tiny_selector(), tiny_train(seed=1))
    assert c.checkpoint_bytes() != a.checkpoint_bytes()


def test_train_log_records(tiny_corpus, tmp_path):
    train(tiny_corpus, tiny_selector(), tiny_train(), out_dir=tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert lines[0]["type"] == "config"
    epochs = [r for r in lines if r["type"] == "epoch"]
    assert [r["epoch"] for r in epochs] == [1, 2, 3, 4]
    assert [r["lambda2"] for r in epochs] == [0.0, 0.3, 0.3, 0.3]
    assert all(r["lambda1"] == 1.0 for r in epochs)
    steps = [r for r in lines if r["type"] == "step"]
    assert len(steps) == 4 * tiny_corpus.n_expressions
    assert sorted((tmp_path).glob("ckpt_epoch*.solp"))[-1].name == "ckpt_epoch004.solp"


def test_reference_weights_logged(tiny_corpus):
    state = train(tiny_corpus, tiny_selector(), TrainConfig(epochs=1, n_neg=4))
    rec = state.history[0]
    assert (rec["lambda1"], rec["lambda2"]) == (1.0, 0.3)


def test_resume_matches_uninterrupted(tiny_corpus, tmp_path):
    full = train(tiny_corpus, tiny_selector(), tiny_train())
    part = train(tiny_corpus, tiny_selector(), tiny_train(), out_dir=tmp_path, until=2)
    assert part.epoch == 2
    resumed = resume(tmp_path / "final.solp", tiny_corpus, out_dir=tmp_path)
    assert resumed.epoch == 4
    assert resumed.checkpoint_bytes() == full.checkpoint_bytes()


def test_resume_past_final_is_noop(tiny_corpus, tmp_path):
    train(tiny_corpus, tiny_selector(), tiny_train(epochs=1), out_dir=tmp_path)
    before = (tmp_path / "final.solp").read_bytes()
    state = resume(tmp_path / "final.solp", tiny_corpus)
    assert state.epoch == 1 and state.checkpoint_bytes() == before


def test_resume_with_different_dim(tiny_corpus, tmp_path):
    train(tiny_corpus, tiny_selector(), tiny_train(epochs=1), out_dir=tmp_path)
    config, tensors = load_checkpoint(tmp_path / "final.solp")
    config["selector"]["dim"] = 32
    config["epoch"] = 0
    (tmp_path / "bad.solp").write_bytes(encode_checkpoint(config, tensors))
    with pytest.raises(tc.ShapeError):
        resume(tmp_path / "bad.solp", tiny_corpus)
    wider = generate_synthetic(tiny_synth(scenes=1, dim=32), 0)
    with pytest.raises(tc.ShapeError):
        train(wider, tiny_selector(), tiny_train(epochs=1))


def test_empty_corpus_rejected(tiny_corpus):
    empty = type(tiny_corpus)([], {})
    with pytest.raises(TrainingError):
        train(empty, tiny_selector(), tiny_train())


def test_loss_decreases(tiny_corpus):
    state = train(tiny_corpus, tiny_selector(), tiny_train(epochs=6, align_warmup_epochs=6))
    assert state.history[-1]["mean_loss"] < state.history[0]["mean_loss"]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.integers(1, 30), st.sampled_from(["cosine", "linear"]))
def test_lr_schedule(epochs, steps_per_epoch, schedule):
    cfg = TrainConfig(epochs=epochs, lr_init=5e-6, schedule=schedule)
    total = epochs * steps_per_epoch
    for step in range(0, total, max(1, total // 7)):
        e = step / steps_per_epoch
        want = (5e-6 * 0.5 * (1 + math.cos(math.pi * e / epochs)) if schedule == "cosine"
                else 5e-6 * (1 - e / epochs))
        assert abs(lr_at(cfg, step, steps_per_epoch) - want) <= 1e-12
    assert lr_at(cfg, 0, steps_per_epoch) == 5e-6


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12), st.floats(0.01, 10))
def test_clip_bounds_norm(values, max_norm):
    grads = {"a": np.array(values[: len(values) // 2 + 1]), "b": np.array(values[len(values) // 2 + 1:])}
    before = math.sqrt(sum(v * v for v in values))
    ret = clip_grads(grads, max_norm)
    after = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    assert ret == pytest.approx(before)
    assert after <= max_norm + 1e-6
    if before <= max_norm:
        assert after == pytest.approx(before)


def test_config_errors():
    for bad in (dict(epochs=0), dict(lr_init=0), dict(schedule="step"), dict(align_warmup_epochs=99),
                dict(n_neg=0), dict(align_sign=0.5), dict(dtype="float16"), dict(lambda2=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).check()


def test_gradcheck_fixture_sampled():
    objective, store = gradcheck_fixture()
    assert tc.grad_check(objective, store, n_samples=60) < 1e-4


def test_checkpoint_roundtrip_and_corruption(tiny_corpus, tmp_path):
    state = train(tiny_corpus, tiny_selector(), tiny_train(epochs=1), out_dir=tmp_path)
    buf = (tmp_path / "final.solp").read_bytes()
    config, tensors = decode_checkpoint(buf)
    assert config["epoch"] == 1
    for name, t in state.store.items():
        np.testing.assert_array_equal(tensors[name], t.data)
    assert encode_checkpoint(config, tensors) == buf
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf[:-5])
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf + b"\0")
    loaded = load_state(tmp_path / "final.solp")
    assert loaded.checkpoint_bytes() == buf
