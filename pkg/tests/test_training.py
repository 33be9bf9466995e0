import csv
import dataclasses

import numpy as np
import pytest

from avtts.dataset import DataError, FeatureStats, collate
from avtts.model import AffectTTS, is_pc_param
from avtts.numerics import backward
from avtts.training import (METRIC_FIELDS, FreezeViolation, TrainConfig, Trainer, resume, step_rng, total_loss,
                            train_stage1, train_stage2)
from avtts.verification import TINY_MODEL, _random_batch, overfit_history, strip_affect, synthetic_features, \
    window_means

FAST = TrainConfig(batch_size=4, lr=1e-3, warmup_steps=5, stage1_steps=6, stage2_steps=4, seed=3)


@pytest.fixture(scope="module")
def corpus():
    return synthetic_features(8, 2, 21, True)


@pytest.fixture(scope="module")
def stage1(corpus):
    return train_stage1(strip_affect(corpus), FAST, TINY_MODEL)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mel_loss="huber")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"lr": 1.0, "momentum": 0.9})
    assert TrainConfig.from_dict(FAST.to_dict()) == FAST


def test_warmup_schedule():
    cfg = TrainConfig(lr=1e-3, warmup_steps=4)
    assert [cfg.lr_at(s) for s in range(5)] == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3])
    assert TrainConfig(lr=2e-3, warmup_steps=0).lr_at(0) == 2e-3


def perfect_output(model, batch):
    out = model.forward(batch, route="e1")
    out.mel.data[...] = batch.mel
    out.log_duration.data[...] = np.log1p(batch.durations) * batch.mask
    out.pitch.data[...] = batch.pitch
    out.energy.data[...] = batch.energy
    return out


def test_loss_zero_for_exact_predictions():
    model = AffectTTS(TINY_MODEL, seed=0)
    batch = _random_batch(np.random.default_rng(0), TINY_MODEL, b=3)
    _, parts = total_loss(perfect_output(model, batch), batch)
    assert all(parts[k] == 0.0 for k in ("L_mel", "L_dur", "L_pitch", "L_energy", "total"))


def test_loss_ignores_padding():
    model = AffectTTS(TINY_MODEL, seed=0)
    batch = _random_batch(np.random.default_rng(1), TINY_MODEL, b=3, max_len=6)
    out = model.forward(batch, route="e1")
    _, before = total_loss(out, batch)
    pad = batch.frame_mask == 0
    batch.mel[pad] = 1e6
    batch.pitch[pad] = -1e6
    batch.durations[batch.mask == 0] = 99
    _, after = total_loss(out, batch)
    assert before == after


def test_loss_weights_and_mse_option():
    model = AffectTTS(TINY_MODEL, seed=0)
    batch = _random_batch(np.random.default_rng(2), TINY_MODEL)
    out = model.forward(batch, route="e1")
    _, plain = total_loss(out, batch)
    _, weighted = total_loss(out, batch, TrainConfig(mel_weight=2.0, energy_weight=0.0))
    assert weighted["total"] == pytest.approx(plain["total"] + plain["L_mel"] - plain["L_energy"], rel=1e-5)
    _, mse = total_loss(out, batch, TrainConfig(mel_loss="mse"))
    assert mse["L_mel"] != plain["L_mel"]


def test_loss_rejects_misaligned_mel():
    model = AffectTTS(TINY_MODEL, seed=0)
    batch = _random_batch(np.random.default_rng(3), TINY_MODEL)
    out = model.forward(batch, route="e1")
    batch.mel = batch.mel[:, :-1]
    with pytest.raises(ValueError, match="does not match"):
        total_loss(out, batch)


def test_stage1_prosody_block_gets_no_gradient():
    model = AffectTTS(TINY_MODEL, seed=0)
    batch = _random_batch(np.random.default_rng(4), TINY_MODEL)
    loss, _ = total_loss(model.forward(batch, route="e1"), batch)
    grads = backward(loss, model.params)
    pc = [n for n in grads if is_pc_param(n)]
    assert pc and all(not grads[n].any() for n in pc)
    assert grads["duration_predictor.out.bias"].any()


def test_step_rng_is_counter_based():
    a = step_rng(1, 1, 5).random(4)
    assert np.array_equal(a, step_rng(1, 1, 5).random(4))
    assert not np.array_equal(a, step_rng(1, 2, 5).random(4))
    assert not np.array_equal(a, step_rng(1, 1, 6).random(4))


def test_stage2_requires_affect_and_names_utterance(corpus, stage1):
    bare = strip_affect(corpus)
    with pytest.raises(DataError, match=bare.features[0].id):
        train_stage2(bare, stage1.checkpoint, FAST)


def test_stage2_needs_stage1_init(corpus, stage1):
    s2 = train_stage2(corpus, stage1.checkpoint, FAST)
    with pytest.raises(ValueError, match="stage-1"):
        train_stage2(corpus, s2.checkpoint, FAST)


def test_stage2_freezes_backbone(corpus, stage1):
    s2 = train_stage2(corpus, stage1.checkpoint, FAST)
    for name in stage1.checkpoint.groups()["backbone"]:
        assert s2.checkpoint.params[name].tobytes() == stage1.checkpoint.params[name].tobytes()
    changed = [n for n in s2.checkpoint.groups()["prosody"]
               if not np.array_equal(s2.checkpoint.params[n], stage1.checkpoint.params[n])]
    assert any(n.startswith("prosody.") for n in changed)


def test_freeze_violation_detected(corpus, stage1):
    from avtts.training import model_from_checkpoint
    stats = FeatureStats.from_dict(stage1.checkpoint.stats)
    trainer = Trainer(2, corpus, stats, FAST, model_from_checkpoint(stage1.checkpoint))
    trainer.model.params["mel_proj.bias"].data += 1.0
    with pytest.raises(FreezeViolation, match="mel_proj.bias"):
        trainer.checkpoint()


def test_same_seed_same_curves(corpus):
    a = train_stage1(strip_affect(corpus), FAST, TINY_MODEL)
    b = train_stage1(strip_affect(corpus), FAST, TINY_MODEL)
    c = train_stage1(strip_affect(corpus), dataclasses.replace(FAST, seed=4), TINY_MODEL)
    assert a.history == b.history and a.history != c.history


def test_metrics_csv_and_checkpoints(corpus, tmp_path):
    cfg = dataclasses.replace(FAST, checkpoint_interval=3)
    train_stage1(strip_affect(corpus), cfg, TINY_MODEL, metrics_path=tmp_path / "m.csv", checkpoint_dir=tmp_path)
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == METRIC_FIELDS and [int(r["step"]) for r in rows] == list(range(1, 7))
    assert {p.name for p in tmp_path.glob("*.ckpt")} == {"stage1_step3.ckpt", "stage1_step6.ckpt", "stage1.ckpt"}


def test_resume_matches_uninterrupted_run(corpus, tmp_path):
    from avtts.checkpoint import load_checkpoint
    bare = strip_affect(corpus)
    cfg = dataclasses.replace(FAST, checkpoint_interval=3)
    full = train_stage1(bare, cfg, TINY_MODEL, checkpoint_dir=tmp_path, metrics_path=tmp_path / "m.csv")
    resumed = resume(bare, load_checkpoint(tmp_path / "stage1_step3.ckpt"), metrics_path=tmp_path / "m.csv")
    assert resumed.history == full.history[3:]
    for name, arr in full.checkpoint.params.items():
        assert resumed.checkpoint.params[name].tobytes() == arr.tobytes()
    assert sum(1 for _ in open(tmp_path / "m.csv")) == 1 + 6 + 3


def test_collated_batches_cover_corpus(corpus):
    trainer = Trainer(1, strip_affect(corpus), FeatureStats.fit(corpus.features), FAST, AffectTTS(TINY_MODEL))
    seen = sorted(u for step in range(2) for u in trainer.batch_for_step(step).utt_ids)
    assert seen == sorted(f.id for f in corpus.features)


def test_collate_rejects_missing_affect_in_stage2(corpus):
    bare = strip_affect(corpus)
    with pytest.raises(DataError):
        collate(bare.features[:2], bare.speakers, FeatureStats.fit(bare.features), require_affect=True)


@pytest.mark.slow
def test_overfit_block_means_decrease():
    totals = [h["total"] for h in overfit_history()]
    means = window_means(totals)
    assert len(means) == 10 and np.all(np.diff(means) < 0)
    mel = [h["L_mel"] for h in overfit_history()]
    assert np.mean(mel[-100:]) <= 0.5 * np.mean(mel[:100])
