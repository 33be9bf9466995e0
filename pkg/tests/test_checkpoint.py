import json
import struct

import numpy as np
import pytest

from avtts.checkpoint import (MAGIC, Checkpoint, CheckpointError, from_bytes, load_checkpoint, save_checkpoint,
                              to_bytes)
from avtts.model import AffectTTS
from avtts.numerics import AdamState
from avtts.verification import TINY_MODEL


@pytest.fixture(scope="module")
def ckpt():
    model = AffectTTS(TINY_MODEL, seed=2)
    params = {n: p.data.copy() for n, p in model.params.items()}
    opt = AdamState(lr=1e-3, step=7, m={"mel_proj.bias": np.full(80, 0.5, np.float32)},
                    v={"mel_proj.bias": np.full(80, 0.25, np.float32)})
    return Checkpoint(model_config=TINY_MODEL.to_dict(), params=params, stage="stage1", step=7,
                      stats={"scope": "corpus"}, optimizer=opt, train_config={"lr": 1e-3})


def test_round_trip_is_byte_identical(ckpt, tmp_path):
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.stage == "stage1" and back.step == 7 and back.optimizer.step == 7
    for name, arr in ckpt.params.items():
        np.testing.assert_array_equal(back.params[name], arr)
    np.testing.assert_array_equal(back.optimizer.v["mel_proj.bias"], 0.25)


def test_groups_split_backbone_and_prosody(ckpt):
    groups = ckpt.groups()
    assert "prosody.arousal" in groups["prosody"] and "duration_predictor.out.bias" in groups["prosody"]
    assert "encoder.0.attn.q.weight" in groups["backbone"]
    assert len(groups["backbone"]) + len(groups["prosody"]) == len(ckpt.params)


def test_truncation_detected(ckpt):
    blob = to_bytes(ckpt)
    for cut in (5, 20, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointError):
            from_bytes(blob[:cut])


def test_corruption_detected(ckpt):
    blob = bytearray(to_bytes(ckpt))
    blob[-100] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(blob))


def test_bad_magic(ckpt):
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"NOTIT!" + to_bytes(ckpt)[6:])


def test_unsupported_version(ckpt):
    blob = to_bytes(ckpt)
    bumped = MAGIC + struct.pack("<H", 9) + blob[len(MAGIC) + 2:]
    with pytest.raises(CheckpointError, match="version 9"):
        from_bytes(bumped)


def test_unknown_stage_tag(ckpt):
    bad = Checkpoint(model_config=ckpt.model_config, params=ckpt.params, stage="stage3")
    with pytest.raises(CheckpointError, match="stage3"):
        from_bytes(to_bytes(bad))


def test_header_is_readable_json(ckpt):
    blob = to_bytes(ckpt)
    (length,) = struct.unpack("<I", blob[len(MAGIC) + 2:len(MAGIC) + 6])
    header = json.loads(blob[len(MAGIC) + 6:len(MAGIC) + 6 + length])
    assert header["stage"] == "stage1" and header["tensors"][0]["name"] == "phoneme_embedding"


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "nope.ckpt")
