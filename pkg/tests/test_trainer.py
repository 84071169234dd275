import io
import struct

import numpy as np
import pytest

from pairdiff.numerics import substream
from pairdiff.trainer import (CKPT_MAGIC, TrainConfig, checkpoint_tensors, file_sha256, init_state,
                              load_checkpoint, load_training_pairs, read_checkpoint, read_loss_log,
                              save_checkpoint, smoothed, train, train_step, write_checkpoint)


def tiny(**kw):
    base = dict(steps=6, batch_size=2, lr=1e-3, seed=3, n_train=8, data_seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def pairs():
    return load_training_pairs(tiny())


def test_initial_loss_near_one(pairs):
    masks, images = pairs
    cfg = tiny(batch_size=8)
    state = init_state(cfg)
    ll, lb = train_step(state, masks, images, substream(0, 9), lr=0.0)
    assert 0.9 <= ll <= 1.1 and 0.9 <= lb <= 1.1


def test_one_step_changes_parameters(pairs):
    masks, images = pairs
    state = init_state(tiny())
    before = {k: v.copy() for k, v in state.models["brain"].params.items()}
    train_step(state, masks[:2], images[:2], substream(0, 1), lr=1e-3)
    assert any(not np.array_equal(before[k], state.models["brain"].params[k]) for k in before)
    assert state.optim["brain"].step == 1 and state.optim["lesion"].step == 1


def test_branches_start_differently():
    state = init_state(tiny())
    a, b = state.models["lesion"].params, state.models["brain"].params
    assert not np.array_equal(a["layer0.weight"], b["layer0.weight"])


def test_training_deterministic(tmp_path, pairs):
    a = train(tiny(), tmp_path / "a", data=pairs)
    b = train(tiny(), tmp_path / "b", data=pairs)
    assert file_sha256(a) == file_sha256(b)
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()


def test_resume_matches_uninterrupted(tmp_path, pairs):
    straight = train(tiny(steps=6), tmp_path / "s", data=pairs)
    train(tiny(steps=3), tmp_path / "r", data=pairs)
    resumed = train(tiny(steps=6), tmp_path / "r", resume=tmp_path / "r" / "final.usbc", data=pairs)
    assert file_sha256(straight) == file_sha256(resumed)
    assert (tmp_path / "s" / "loss.csv").read_bytes() == (tmp_path / "r" / "loss.csv").read_bytes()


def test_resume_rejects_other_seed(tmp_path, pairs):
    ck = train(tiny(steps=2), tmp_path / "x", data=pairs)
    with pytest.raises(ValueError):
        train(tiny(steps=4, seed=99), tmp_path / "x", resume=ck, data=pairs)


def test_loss_log_finite_and_periodic_checkpoints(tmp_path, pairs):
    train(tiny(steps=4, ckpt_every=2), tmp_path, data=pairs)
    log = read_loss_log(tmp_path / "loss.csv")
    assert log.shape == (4, 3)
    assert np.all(np.isfinite(log))
    assert list(log[:, 0]) == [1, 2, 3, 4]
    assert (tmp_path / "ckpt_000002.usbc").exists() and (tmp_path / "ckpt_000004.usbc").exists()
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "step,L_lesion,L_brain"


def test_checkpoint_round_trip(tmp_path, pairs):
    state = init_state(tiny())
    train_step(state, pairs[0][:2], pairs[1][:2], substream(1, 1), 1e-3)
    state.step = 1
    save_checkpoint(tmp_path / "c.usbc", state)
    again = load_checkpoint(tmp_path / "c.usbc")
    t1, t2 = checkpoint_tensors(state), checkpoint_tensors(again)
    assert set(t1) == set(t2)
    for k in t1:
        assert np.array_equal(t1[k], t2[k]), k
    assert again.step == 1 and again.seed == 3


def test_checkpoint_layout():
    buf = io.BytesIO()
    write_checkpoint(buf, {"b": np.ones(2), "a": np.zeros(1)})
    raw = buf.getvalue()
    assert raw[:4] == CKPT_MAGIC
    assert struct.unpack("<II", raw[4:12]) == (1, 2)
    assert struct.unpack("<I", raw[12:16]) == (1,) and raw[16:17] == b"a"
    assert raw[17:21] == b"UBT1"
    buf.seek(0)
    assert set(read_checkpoint(buf)) == {"a", "b"}


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ValueError):
        read_checkpoint(io.BytesIO(b"NOPE"))
    with pytest.raises(ValueError):
        read_checkpoint(io.BytesIO(CKPT_MAGIC + struct.pack("<II", 9, 0)))
    with pytest.raises(FileNotFoundError, match="missing.usbc"):
        load_checkpoint(tmp_path / "missing.usbc")


def test_config_validation():
    with pytest.raises(ValueError):
        tiny(steps=0).validate()
    with pytest.raises(ValueError):
        tiny(batch_size=0).validate()


def test_smoothed():
    v = np.arange(1.0, 6.0)
    assert np.allclose(smoothed(v, 2), [1.0, 1.5, 2.5, 3.5, 4.5])
    assert np.allclose(smoothed(v, 100), np.cumsum(v) / np.arange(1, 6))
