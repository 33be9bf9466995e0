import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avtts.audio import AudioConfig, extract_f0, mel_spectrogram, read_wav
from avtts.dataset import (AffectPoint, AlignmentDiscard, DataError, FeatureStats, Utterance, batch_indices,
                           collate, features_from_synthetic, gen_synthetic_corpus, load_prepared, make_batches,
                           parse_alignment, prepare_corpus, read_manifest, save_prepared, write_alignment,
                           write_manifest, write_synthetic_corpus)

CFG = AudioConfig()


def rows(*intervals):
    return [f"{p}\t{s}\t{e}" for p, s, e in intervals]


# -- AffectPoint -----------------------------------------------------------

def test_affect_normalisation():
    p = AffectPoint(4, 7)
    assert p.arousal_norm == 0.5 and p.valence_norm == 1.0
    assert AffectPoint(1, 1).arousal_norm == 0.0


def test_affect_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        p = AffectPoint(9, -2)
    assert (p.arousal, p.valence) == (7.0, 1.0)
    assert "clamped" in caplog.text


def test_affect_rejects_nan():
    with pytest.raises(ValueError):
        AffectPoint(float("nan"), 3)


# -- alignment -------------------------------------------------------------

def test_boundary_rounding_example():
    d = parse_alignment(rows(("AA1", 0, 0.1), ("B", 0.1, 0.25), ("K", 0.25, 0.5)), ["AA1", "B", "K"], CFG)
    assert d == [9, 13, 21] and sum(d) == 43


def test_single_interval_covers_file():
    assert parse_alignment(rows(("AA1", 0, 1.0)), ["AA1"], CFG) == [round(CFG.sample_rate / CFG.hop)]


def test_label_mismatch_discarded():
    with pytest.raises(AlignmentDiscard, match="disagrees"):
        parse_alignment(rows(("AA1", 0, 0.1), ("ZH", 0.1, 0.2)), ["AA1", "B"], CFG)


def test_overlap_and_retrograde_discarded():
    with pytest.raises(AlignmentDiscard, match="overlaps"):
        parse_alignment(rows(("AA1", 0, 0.2), ("B", 0.1, 0.3)), ["AA1", "B"], CFG)
    with pytest.raises(AlignmentDiscard, match="retrograde"):
        parse_alignment(rows(("AA1", 0.2, 0.1)), ["AA1"], CFG)


def test_too_many_missing_phonemes_discarded():
    with pytest.raises(AlignmentDiscard, match="missing"):
        parse_alignment(rows(("AA1", 0, 0.1), ("K", 0.1, 0.2)), ["AA1", "B", "K"], CFG)


def test_one_missing_in_long_transcript_tolerated():
    transcript = ["AA1", "B", "K", "D", "T", "S", "M", "N", "L", "R", "IY1"]
    kept = [p for p in transcript if p != "D"]
    intervals = [(p, 0.1 * i, 0.1 * (i + 1)) for i, p in enumerate(kept)]
    d = parse_alignment(rows(*intervals), transcript, CFG)
    assert d[transcript.index("D")] == 0 and sum(d) == round(1.0 * CFG.sample_rate / CFG.hop)


def test_silence_intervals_absorbed():
    d = parse_alignment(rows(("AA1", 0, 0.1), ("sp", 0.1, 0.2), ("B", 0.2, 0.3)), ["AA1", "B"], CFG)
    assert sum(d) == round(0.3 * CFG.sample_rate / CFG.hop) and len(d) == 2


def test_malformed_lines_discarded():
    with pytest.raises(AlignmentDiscard):
        parse_alignment(["AA1 0 0.1"], ["AA1"], CFG)
    with pytest.raises(AlignmentDiscard):
        parse_alignment(["AA1\tzero\t0.1"], ["AA1"], CFG)
    with pytest.raises(AlignmentDiscard):
        parse_alignment([], ["AA1"], CFG)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=12))
def test_write_then_parse_alignment_round_trips(durations):
    if sum(durations) == 0:
        durations = [1] + durations[1:]
    phones = [["AA1", "B", "K", "S"][i % 4] for i in range(len(durations))]
    lines = []
    start = 0
    for p, d in zip(phones, durations):
        lines.append(f"{p}\t{start * CFG.hop / CFG.sample_rate}\t{(start + d) * CFG.hop / CFG.sample_rate}")
        start += d
    assert parse_alignment(lines, phones, CFG) == durations


# -- synthetic corpus ------------------------------------------------------

def test_corpus_is_reproducible():
    a = gen_synthetic_corpus(4, 2, seed=5)
    b = gen_synthetic_corpus(4, 2, seed=5)
    for x, y in zip(a, b):
        assert x.samples.tobytes() == y.samples.tobytes() and x.durations == y.durations


def test_corpus_shape_and_ranges():
    corpus = gen_synthetic_corpus(20, 3, seed=1)
    for utt in corpus:
        assert 3 <= len(utt.phonemes) <= 8
        assert np.abs(utt.samples).max() <= 1.0
        assert mel_spectrogram(utt.samples).shape[0] == sum(utt.durations)


def test_affect_flag_attaches_points():
    assert all(u.affect is not None for u in gen_synthetic_corpus(5, 2, seed=0, affect=True))
    assert all(u.affect is None for u in gen_synthetic_corpus(5, 2, seed=0))


def test_arousal_scales_f0_by_1_3():
    lo = gen_synthetic_corpus(6, 2, seed=2, fixed_affect=AffectPoint(1, 4))
    hi = gen_synthetic_corpus(6, 2, seed=2, fixed_affect=AffectPoint(7, 4))
    ratio = np.mean([h.f0.mean() / l.f0.mean() for h, l in zip(hi, lo)])
    assert ratio == pytest.approx(1.3, rel=0.01)
    assert sum(sum(h.durations) for h in hi) < sum(sum(l.durations) for l in lo)


def test_extracted_f0_matches_ground_truth():
    for utt in gen_synthetic_corpus(6, 3, seed=4, affect=True):
        f0 = extract_f0(utt.samples).f0
        assert len(f0) == sum(utt.durations)
        assert np.abs(f0[utt.voiced] - utt.f0[utt.voiced]).max() < 5.0


def test_written_corpus_passes_alignment_and_prepare(tmp_path):
    corpus = gen_synthetic_corpus(6, 2, seed=3, affect=True)
    manifest = write_synthetic_corpus(corpus, tmp_path)
    utts = read_manifest(manifest)
    assert [u.id for u in utts] == [c.id for c in corpus]
    for u, c in zip(utts, corpus):
        assert parse_alignment(u.alignment, u.phonemes, CFG) == c.durations
        assert read_wav(u.wav).shape == c.samples.shape
    prepared = prepare_corpus(utts)
    assert not prepared.discards and len(prepared.features) == 6
    assert set(prepared.speakers) == {c.speaker for c in corpus}
    truth = np.load(tmp_path / "ground_truth.npz")
    assert f"{corpus[0].id}/f0" in truth.files


def test_corrupted_alignment_is_discarded_with_reason(tmp_path):
    corpus = gen_synthetic_corpus(4, 1, seed=8)
    manifest = write_synthetic_corpus(corpus, tmp_path)
    utts = read_manifest(manifest)
    bad = utts[1].alignment
    lines = open(bad).read().splitlines()
    lines[0] = "ZH\t" + lines[0].split("\t", 1)[1]
    open(bad, "w").write("\n".join(lines) + "\n")
    prepared = prepare_corpus(utts)
    assert [d[0] for d in prepared.discards] == [utts[1].id]
    assert utts[1].id not in {f.id for f in prepared.features}


def test_unknown_phoneme_discarded(tmp_path):
    corpus = gen_synthetic_corpus(2, 1, seed=8)
    write_synthetic_corpus(corpus, tmp_path)
    utts = read_manifest(tmp_path / "manifest.jsonl")
    utts[0].phonemes = ["QQ"] + utts[0].phonemes[1:]
    assert prepare_corpus(utts).discards[0][0] == utts[0].id


# -- manifests -------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    utt = Utterance(id="a", wav="w/a.wav", phonemes=["AA1"], durations=[3], speaker="s", arousal=2.0, valence=5.0)
    write_manifest(tmp_path / "m.jsonl", [utt])
    row = json.loads((tmp_path / "m.jsonl").read_text())
    assert row["arousal"] == 2.0 and "embedding_path" not in row
    back = read_manifest(tmp_path / "m.jsonl")[0]
    assert back.wav == str(tmp_path / "w/a.wav") and back.affect == AffectPoint(2, 5)


def test_bad_manifest_row(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"id": "a", "nonsense": 1}\n')
    with pytest.raises(DataError, match="m.jsonl:1"):
        read_manifest(tmp_path / "m.jsonl")


# -- batching --------------------------------------------------------------

class Item:
    def __init__(self, i, n):
        self.id, self.durations = i, [n]


def test_small_manifest_single_batch():
    batches = list(make_batches([Item(i, i + 1) for i in range(10)], 16, seed=0))
    assert len(batches) == 1 and len(batches[0]) == 10


def test_batches_deterministic_and_cover_manifest():
    items = [Item(i, (i * 7) % 13 + 1) for i in range(50)]
    a = [[x.id for x in b] for b in make_batches(items, 4, seed=3)]
    b = [[x.id for x in b] for b in make_batches(items, 4, seed=3)]
    c = [[x.id for x in b] for b in make_batches(items, 4, seed=3, epoch=1)]
    assert a == b and a != c
    assert sorted(i for batch in a for i in batch) == list(range(50))


def test_batch_indices_validation():
    with pytest.raises(ValueError):
        batch_indices([], 4, 0)
    with pytest.raises(ValueError):
        batch_indices([1, 2], 0, 0)


# -- features --------------------------------------------------------------

@pytest.fixture(scope="module")
def prepared():
    return features_from_synthetic(gen_synthetic_corpus(6, 2, seed=12, affect=True))


def test_feature_stats_standardise(prepared):
    stats = FeatureStats.fit(prepared.features)
    pitch = np.concatenate([stats.pitch(f.f0) for f in prepared.features])
    assert abs(pitch.mean()) < 1e-4 and abs(pitch.std() - 1) < 1e-3
    assert stats.pitch_min == pytest.approx(pitch.min(), abs=1e-5)
    f0 = prepared.features[0].f0
    np.testing.assert_allclose(stats.pitch_to_hz(stats.pitch(f0)), f0, rtol=1e-5)
    assert FeatureStats.from_dict(stats.to_dict()) == stats


def test_feature_stats_per_speaker(prepared):
    stats = FeatureStats.fit(prepared.features, scope="speaker")
    for spk in prepared.speakers:
        p = np.concatenate([stats.pitch(f.f0, spk) for f in prepared.features if f.speaker == spk])
        assert abs(p.mean()) < 1e-4
    with pytest.raises(ValueError):
        FeatureStats.fit(prepared.features, scope="galaxy")


def test_collate_pads_and_masks(prepared):
    stats = FeatureStats.fit(prepared.features)
    items = prepared.features[:3]
    batch = collate(items, prepared.speakers, stats)
    assert batch.ids.shape == (3, max(len(f.phoneme_ids) for f in items))
    assert batch.mel.shape[1] == max(f.n_frames for f in items)
    for i, f in enumerate(items):
        assert batch.mask[i].sum() == len(f.phoneme_ids)
        assert batch.frame_mask[i].sum() == f.n_frames == f.durations.sum()
        assert batch.arousal[i] == pytest.approx(f.affect.arousal_norm)


def test_collate_requires_affect_when_asked(prepared):
    import dataclasses
    stats = FeatureStats.fit(prepared.features)
    plain = dataclasses.replace(prepared.features[0], arousal=None, valence=None)
    with pytest.raises(DataError, match=plain.id):
        collate([plain], prepared.speakers, stats, require_affect=True)


def test_prepared_cache_round_trip(prepared, tmp_path):
    stats = FeatureStats.fit(prepared.features)
    save_prepared(prepared, stats, tmp_path)
    first = {p.name: p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
    save_prepared(prepared, stats, tmp_path)
    assert first == {p.name: p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
    corpus, stats2 = load_prepared(tmp_path)
    assert stats2 == stats
    assert [f.id for f in corpus.features] == [f.id for f in prepared.features]
    np.testing.assert_array_equal(corpus.features[0].mel, prepared.features[0].mel)
    np.testing.assert_array_equal(corpus.speakers[prepared.features[0].speaker],
                                  prepared.speakers[prepared.features[0].speaker])
    with pytest.raises(DataError):
        load_prepared(tmp_path / "nothing")


def test_alignment_writer_matches_parser(tmp_path):
    write_alignment(tmp_path / "a.tsv", ["AA1", "B"], [4, 6], CFG)
    assert parse_alignment(tmp_path / "a.tsv", ["AA1", "B"], CFG) == [4, 6]
