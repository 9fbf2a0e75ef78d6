import struct

import numpy as np
import pytest

from aed import checkpoint as C
from aed.cae import TrainHyper, cae_train_step, init_cae, strip_for_inference
from aed.checkpoint import CheckpointError
from aed.clf import init_clf
from aed.tensor import ShapeError

TINY = dict(input_size=8, widths=(4, 4, 2))


def _trained(stream="motion-forward"):
    cp = init_cae(stream, 3, **TINY)
    rng = np.random.default_rng(0)
    c = cp.params.tensors["enc.conv1.w"].shape[2]
    seg = (rng.random((2, 8, 8, 1)) > 0.5).astype(float) if stream == "appearance" else None
    cae_train_step(cp, rng.normal(size=(2, 8, 8, c)), rng.normal(size=(2, 8, 8, c)), TrainHyper(lr=1e-3), seg)
    return cp


def test_round_trip_is_bit_identical(tmp_path):
    cp = _trained()
    h = C.config_hash("seed = 1\n")
    C.save_checkpoint(cp, tmp_path / "a.ckpt", h)
    back = C.load_checkpoint(tmp_path / "a.ckpt", "motion-forward", "cae", h)
    assert back.params.tensors.keys() == cp.params.tensors.keys()
    for k, v in cp.params.tensors.items():
        assert back.params.tensors[k].tobytes() == v.tobytes()
        st, sb = cp.params.adam[k], back.params.adam[k]
        assert (st.m.tobytes(), st.v.tobytes(), st.step) == (sb.m.tobytes(), sb.v.tobytes(), sb.step)
    C.save_checkpoint(back, tmp_path / "b.ckpt", h)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_classifier_and_frozen_round_trips():
    clf = init_clf("appearance", 1, "signed")
    back, _ = C.from_bytes(C.to_bytes(clf))
    assert back.diff_mode == "signed"
    assert all(back.params.tensors[k].tobytes() == v.tobytes() for k, v in clf.params.tensors.items())
    frozen = strip_for_inference(_trained("appearance"))
    back, _ = C.from_bytes(C.to_bytes(frozen))
    assert type(back).__name__ == "FrozenCae"
    assert all(back.tensors[k].tobytes() == v.tobytes() for k, v in frozen.tensors.items())


def test_stripped_checkpoint_is_smaller():
    cp = _trained()
    assert len(C.to_bytes(strip_for_inference(cp))) < len(C.to_bytes(cp))


def test_corruption_is_detected(tmp_path):
    data = C.to_bytes(_trained())
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        C.load_checkpoint(p)
    p.write_bytes(data[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        C.load_checkpoint(p)
    p.write_bytes(data + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        C.load_checkpoint(p)
    p.write_bytes(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(CheckpointError, match="version 99"):
        C.load_checkpoint(p)


def test_audits(tmp_path):
    p = tmp_path / "m.ckpt"
    C.save_checkpoint(_trained("motion-forward"), p, C.config_hash("a"))
    with pytest.raises(ShapeError, match="appearance"):
        C.load_checkpoint(p, "appearance")
    with pytest.raises(CheckpointError, match="different config"):
        C.load_checkpoint(p, chash=C.config_hash("b"))
    with pytest.raises(CheckpointError, match="clf"):
        C.load_checkpoint(p, "motion-forward", "clf")
    # both motion streams share shapes
    assert C.load_checkpoint(p, "motion-backward").stream == "motion-forward"


def test_rejects_unknown_objects_and_bad_hash():
    with pytest.raises(TypeError):
        C.to_bytes(object())
    with pytest.raises(ValueError):
        C.to_bytes(init_clf("appearance", 0), b"short")
