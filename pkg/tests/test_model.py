import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avtts.dataset import Batch
from avtts.model import (AffectTTS, ModelConfig, bucketize, durations_from_log, is_pc_param, is_prosody_param,
                         length_regulate, param_shapes, regulate_indices)
from avtts.numerics import Tensor
from avtts.verification import TINY_MODEL, _random_batch, length_regulator_laws

CFG = dataclasses.replace(TINY_MODEL, hidden=16, conv_filter=32, predictor_channels=16)


@pytest.fixture(scope="module")
def model():
    return AffectTTS(CFG, seed=1)


def one_batch(rng, b=2, max_len=5):
    return _random_batch(rng, CFG, b=b, max_len=max_len)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(hidden=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(condition_init="random")
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"hidden": 8, "depth": 3})
    assert ModelConfig.from_dict(CFG.to_dict()) == CFG


def test_parameter_groups_partition(model):
    groups = model.groups()
    assert set(groups["backbone"]) | set(groups["prosody"]) == set(model.params)
    assert not set(groups["backbone"]) & set(groups["prosody"])
    assert is_prosody_param("pitch_predictor.out.bias") and is_prosody_param("prosody.arousal")
    assert is_pc_param("prosody.condition.weight") and not is_pc_param("duration_predictor.conv1.bias")
    assert not is_prosody_param("pitch_embedding")


def test_init_is_seeded():
    a, b, c = AffectTTS(CFG, seed=4), AffectTTS(CFG, seed=4), AffectTTS(CFG, seed=5)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["mel_proj.weight"].data, c.params["mel_proj.weight"].data)
    assert set(param_shapes(CFG)) == set(a.params)


def test_missing_params_rejected():
    params = dict(AffectTTS(CFG, seed=0).params)
    del params["mel_proj.bias"]
    with pytest.raises(ValueError, match="mel_proj.bias"):
        AffectTTS(CFG, params)


def test_forward_shapes(model):
    batch = one_batch(np.random.default_rng(0))
    out = model.forward(batch)
    b, length = batch.ids.shape
    t = batch.frame_mask.shape[1]
    assert out.mel.shape == (b, t, CFG.mel_bins)
    assert out.log_duration.shape == (b, length) == out.e1.shape[:2]
    assert out.pitch.shape == out.energy.shape == (b, t)
    assert out.e1.shape[2] == CFG.hidden


def test_outputs_zero_on_padding(model):
    batch = one_batch(np.random.default_rng(1), b=3)
    out = model.forward(batch)
    assert np.all(out.log_duration.data[batch.mask == 0] == 0)
    assert np.all(out.mel.data[batch.frame_mask == 0] == 0)
    assert np.all(out.pitch.data[batch.frame_mask == 0] == 0)


def test_unknown_route(model):
    with pytest.raises(ValueError, match="route"):
        model.forward(one_batch(np.random.default_rng(2)), route="e3")


def test_prepend_speaker_dimension_checked(model):
    emb = model.embed_phonemes(np.array([[3, 4]]))
    with pytest.raises(ValueError, match="256"):
        model.prepend_speaker(emb, np.ones((1, 100)), np.ones((1, 2)))
    seq, mask = model.prepend_speaker(emb, np.ones((1, 256)) / 16, np.ones((1, 2)))
    assert seq.shape == (1, 3, CFG.hidden) and mask.tolist() == [[1, 1, 1]]


def test_max_phonemes_enforced():
    small = AffectTTS(dataclasses.replace(CFG, max_phonemes=4), seed=0)
    with pytest.raises(ValueError, match="max_phonemes"):
        small.encode(np.full((1, 4), 5), np.ones((1, 4)), np.ones((1, 256)) / 16)


def test_affect_vector_is_linear(model):
    va, vv = model.params["prosody.arousal"].data, model.params["prosody.valence"].data
    e = model.affect_vector(np.array([0.25, 1.0]), np.array([0.5, 0.0])).data
    np.testing.assert_allclose(e[0], 0.25 * va + 0.5 * vv, rtol=1e-6)
    np.testing.assert_allclose(e[1], va, rtol=1e-6)
    assert not model.affect_vector(np.zeros(1), np.zeros(1)).data.any()


def test_identity_condition_passes_e1_through_at_zero_affect(model):
    e1 = Tensor(np.random.default_rng(3).standard_normal((2, 4, CFG.hidden)).astype(np.float32))
    e2 = model.condition(e1, model.affect_vector(np.zeros(2), np.zeros(2)))
    np.testing.assert_allclose(e2.data, e1.data, atol=1e-6)


def test_xavier_condition_init_differs():
    m = AffectTTS(dataclasses.replace(CFG, condition_init="xavier"), seed=1)
    left = m.params["prosody.condition.weight"].data[:CFG.hidden]
    assert not np.allclose(left, np.eye(CFG.hidden))


def test_e1_route_ignores_affect(model):
    batch = one_batch(np.random.default_rng(4))
    a = model.forward(batch, route="e1").mel.data
    batch.arousal = 1.0 - batch.arousal
    b = model.forward(batch, route="e1").mel.data
    assert a.tobytes() == b.tobytes()


def test_durations_from_log():
    mask = np.array([[1, 1, 1, 0]])
    d = durations_from_log(np.log(np.array([[3.0, 1.4, 1.6, 50.0]])), mask)
    assert d.tolist() == [[2, 0, 1, 0]]
    d = durations_from_log(np.array([[-5.0, -1.0, -3.0, 9.0]]), mask)
    assert d.tolist() == [[0, 1, 0, 0]]


def test_bucketize_examples():
    assert bucketize(np.array([0.0]), -1.0, 1.0, 256)[0] == 127
    assert bucketize(np.array([-9.0, 9.0, -1.0, 1.0]), -1.0, 1.0, 256).tolist() == [0, 255, 0, 255]


def test_teacher_forcing_needs_targets(model):
    batch = one_batch(np.random.default_rng(5))
    batch.durations = None
    with pytest.raises(ValueError, match="teacher"):
        model.forward(batch)


def test_free_running_forward(model):
    batch = one_batch(np.random.default_rng(6))
    out = model.forward(batch, teacher_force=False)
    assert (out.durations.sum(axis=1) >= 1).all()
    assert out.mel.shape[1] == out.durations.sum(axis=1).max()


def test_decode_zero_frames_rejected(model):
    with pytest.raises(ValueError, match="zero frames"):
        model.decode(Tensor(np.zeros((1, 0, CFG.hidden), np.float32)), np.zeros((1, 0)))


def test_padding_invariance(model):
    rng = np.random.default_rng(7)
    batch = one_batch(rng, b=2, max_len=6)
    n = int(batch.mask[0].sum())
    t = int(batch.frame_mask[0].sum())
    solo = Batch(ids=batch.ids[:1, :n], mask=batch.mask[:1, :n], speaker=batch.speaker[:1],
                 arousal=batch.arousal[:1], valence=batch.valence[:1], durations=batch.durations[:1, :n],
                 pitch=batch.pitch[:1, :t], energy=batch.energy[:1, :t], frame_mask=batch.frame_mask[:1, :t])
    full = model.forward(batch)
    alone = model.forward(solo)
    np.testing.assert_allclose(full.mel.data[0, :t], alone.mel.data[0], atol=1e-5)
    np.testing.assert_allclose(full.log_duration.data[0, :n], alone.log_duration.data[0], atol=1e-5)


def test_dropout_only_in_training(model):
    batch = one_batch(np.random.default_rng(8))
    a = model.forward(batch).mel.data
    b = model.forward(batch).mel.data
    c = model.forward(batch, training=True, rng=np.random.default_rng(0)).mel.data
    assert a.tobytes() == b.tobytes() and not np.array_equal(a, c)


def test_astype_float64(model):
    m64 = model.astype(np.float64)
    batch = one_batch(np.random.default_rng(9))
    out = m64.forward(batch)
    assert out.mel.dtype == np.float64
    np.testing.assert_allclose(out.mel.data, model.forward(batch).mel.data, atol=1e-4)


# -- length regulator ------------------------------------------------------

def test_length_regulate_example():
    h = Tensor(np.arange(6, dtype=np.float32).reshape(1, 3, 2))
    out, mask = length_regulate(h, np.array([[2, 0, 1]]))
    assert out.data[0].tolist() == [[0, 1], [0, 1], [4, 5]]
    assert mask.tolist() == [[1, 1, 1]]


def test_negative_duration_rejected():
    with pytest.raises(ValueError, match="negative"):
        regulate_indices(np.array([[1, -1]]))


def test_duration_shape_mismatch():
    with pytest.raises(ValueError):
        length_regulate(Tensor(np.zeros((1, 3, 2))), np.array([[1, 2]]))


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=10), st.data())
def test_length_regulator_laws(durations, data):
    durations = np.array(durations)
    split = data.draw(st.integers(0, len(durations)))
    hidden = np.random.default_rng(len(durations)).standard_normal((len(durations), 3))
    count, homo, elide = length_regulator_laws(durations, split, hidden)
    assert count and homo and elide
