"""Manifests, alignment ingestion, the synthetic corpus, and batching."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .audio import (
    SPEAKER_DIM,
    AudioConfig,
    SpeakerEmbedding,
    extract_energy,
    extract_f0,
    mel_spectrogram,
    read_wav,
    speaker_fingerprint,
    write_wav,
)
from .text import DEFAULT_INVENTORY, PAD_ID, SIL, PhonemeInventory

log = logging.getLogger(__name__)

AFFECT_MIN, AFFECT_MAX = 1.0, 7.0
SILENCE_LABELS = {"", "SIL", "SP", "SPN", "<EPS>", "SILENCE"}
MAX_MISSING_FRACTION = 0.10


class DataError(ValueError):
    """A sample that cannot be used; the message is the discard reason."""


class AlignmentDiscard(DataError):
    pass


@dataclass(frozen=True)
class AffectPoint:
    """Arousal and valence on the 1-7 annotation scale."""

    arousal: float
    valence: float

    def __post_init__(self):
        for axis in ("arousal", "valence"):
            raw = float(getattr(self, axis))
            if not math.isfinite(raw):
                raise ValueError(f"{axis} must be finite, got {raw}")
            clamped = min(max(raw, AFFECT_MIN), AFFECT_MAX)
            if clamped != raw:
                log.warning("%s %.3f outside [1, 7]; clamped to %.1f", axis, raw, clamped)
            object.__setattr__(self, axis, clamped)

    @property
    def arousal_norm(self) -> float:
        return (self.arousal - AFFECT_MIN) / (AFFECT_MAX - AFFECT_MIN)

    @property
    def valence_norm(self) -> float:
        return (self.valence - AFFECT_MIN) / (AFFECT_MAX - AFFECT_MIN)


@dataclass
class Utterance:
    id: str
    wav: str
    phonemes: list[str]
    durations: list[int]
    speaker: str
    arousal: float | None = None
    valence: float | None = None
    embedding_path: str | None = None
    alignment: str | None = None

    @property
    def affect(self) -> AffectPoint | None:
        if self.arousal is None or self.valence is None:
            return None
        return AffectPoint(self.arousal, self.valence)

    def to_json(self) -> dict:
        row = {"id": self.id, "wav": self.wav, "phonemes": list(self.phonemes),
               "durations": [int(d) for d in self.durations], "speaker": self.speaker}
        for key in ("arousal", "valence", "embedding_path", "alignment"):
            value = getattr(self, key)
            if value is not None:
                row[key] = value
        return row


def read_manifest(path: str | Path) -> list[Utterance]:
    """Read a JSON-Lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    utts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                utt = Utterance(**row)
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest row ({exc})") from None
            for key in ("wav", "embedding_path", "alignment"):
                value = getattr(utt, key)
                if value is not None and not Path(value).is_absolute():
                    setattr(utt, key, str(base / value))
            utts.append(utt)
    return utts


def write_manifest(path: str | Path, utterances: Iterable[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            fh.write(json.dumps(utt.to_json(), sort_keys=True) + "\n")


# -- alignment ----------------------------------------------------------------

def _canonical(label: str) -> str:
    label = label.strip().upper()
    return SIL if label in SILENCE_LABELS else label


def read_alignment_intervals(source: str | Path | Iterable[str]) -> list[tuple[str, float, float]]:
    if isinstance(source, (str, Path)) and Path(source).exists():
        lines = Path(source).read_text(encoding="utf-8").splitlines()
    elif isinstance(source, (str, Path)):
        raise AlignmentDiscard(f"alignment file not found: {source}")
    else:
        lines = list(source)
    intervals = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise AlignmentDiscard(f"alignment line {lineno}: expected phoneme<TAB>start<TAB>end")
        try:
            start, end = float(parts[1]), float(parts[2])
        except ValueError:
            raise AlignmentDiscard(f"alignment line {lineno}: non-numeric time") from None
        if not (math.isfinite(start) and math.isfinite(end)):
            raise AlignmentDiscard(f"alignment line {lineno}: non-finite time")
        intervals.append((_canonical(parts[0]), start, end))
    if not intervals:
        raise AlignmentDiscard("alignment is empty")
    return intervals


def parse_alignment(source, transcript: Sequence[str], cfg: AudioConfig = AudioConfig()) -> list[int]:
    """Per-phoneme frame durations from time-aligned intervals.

    Interval starts are rounded to frame boundaries; each duration is the gap
    to the next matched boundary, so durations sum to the final boundary.
    Unlabelled silences are absorbed by the preceding phoneme; transcript
    phonemes the aligner skipped get zero frames, but more than 10% of the
    non-silence phonemes missing discards the sample.
    """
    intervals = read_alignment_intervals(source)
    transcript = [_canonical(p) for p in transcript]
    if not transcript:
        raise AlignmentDiscard("empty transcript")
    prev_end = 0.0
    for i, (label, start, end) in enumerate(intervals):
        if end < start:
            raise AlignmentDiscard(f"retrograde interval {i} ({label}: {start} > {end})")
        if start < prev_end - 1e-6:
            raise AlignmentDiscard(f"interval {i} ({label}) overlaps its predecessor")
        prev_end = end

    frames_per_sec = cfg.sample_rate / cfg.hop
    matched: list[tuple[int, float]] = []  # (transcript index, start time)
    j = 0
    for label, start, _ in intervals:
        if label == SIL:
            if j < len(transcript) and transcript[j] == SIL:
                matched.append((j, start))
                j += 1
            continue  # unlabelled silence is absorbed by its predecessor
        k = j
        while k < len(transcript) and transcript[k] != label:
            k += 1
        if k == len(transcript):
            expected = transcript[j] if j < len(transcript) else "end of transcript"
            raise AlignmentDiscard(f"aligned label {label!r} disagrees with transcript (expected {expected!r})")
        matched.append((k, start))
        j = k + 1
    if not matched:
        raise AlignmentDiscard("no transcript phoneme was aligned")
    real = [i for i, p in enumerate(transcript) if p != SIL]
    hit = {i for i, _ in matched}
    missing = sum(1 for i in real if i not in hit)
    if real and missing / len(real) > MAX_MISSING_FRACTION:
        raise AlignmentDiscard(f"{missing}/{len(real)} phonemes missing from alignment")

    total = int(round(intervals[-1][2] * frames_per_sec))
    bounds = [0] + [int(round(start * frames_per_sec)) for _, start in matched[1:]] + [total]
    durations = [0] * len(transcript)
    for (idx, _), lo, hi in zip(matched, bounds[:-1], bounds[1:]):
        if hi < lo:
            raise AlignmentDiscard("alignment boundaries are not monotone after rounding")
        durations[idx] = hi - lo
    return durations


def write_alignment(path: str | Path, phonemes: Sequence[str], durations: Sequence[int],
                    cfg: AudioConfig = AudioConfig(), n_samples: int | None = None) -> None:
    sec_per_frame = cfg.hop / cfg.sample_rate
    lines = []
    start = 0
    for p, d in zip(phonemes, durations):
        lines.append(f"{p}\t{start * sec_per_frame:.9f}\t{(start + d) * sec_per_frame:.9f}")
        start += d
    if n_samples is not None and lines:
        p, s, _ = lines[-1].split("\t")
        lines[-1] = f"{p}\t{s}\t{n_samples / cfg.sample_rate:.9f}"
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- synthetic corpus ------------------------------------------------------

PSEUDO_PHONEMES = ("AA1", "AE1", "AH1", "AO1", "EH1", "ER1", "EY1", "IY1", "OW1", "UW1")
N_HARMONICS = 4
PITCH_GAIN, AMPLITUDE_GAIN, DURATION_GAIN, TILT_HZ_PER_S = 0.3, 0.5, -0.2, 20.0
HEADROOM = 0.8


def _phoneme_table():
    rng = np.random.default_rng(1234)
    n = len(PSEUDO_PHONEMES)
    return {
        "f0_factor": rng.uniform(0.85, 1.15, n),
        "duration": rng.uniform(0.10, 0.20, n),
        "amplitude": rng.uniform(0.3, 0.7, n),
        "harmonics": rng.uniform(0.2, 1.0, (n, N_HARMONICS)),
    }


_PHONEME_TABLE = _phoneme_table()


@dataclass
class SyntheticUtterance:
    id: str
    samples: np.ndarray
    phonemes: list[str]
    durations: list[int]
    speaker: str
    affect: AffectPoint | None
    f0: np.ndarray          # per-frame ground truth, Hz
    voiced: np.ndarray      # frames whose analysis window sits inside one phoneme
    amplitude: np.ndarray   # per-frame envelope


def _speaker_profiles(n_speakers: int, seed: int):
    rng = np.random.default_rng([seed, 0])
    return [
        {"f0": float(rng.uniform(100.0, 300.0)),
         "harmonics": rng.uniform(0.3, 1.0, N_HARMONICS) / np.arange(1, N_HARMONICS + 1)}
        for _ in range(n_speakers)
    ]


def synthesize_pseudo_utterance(phone_idx: Sequence[int], dur_jitter: Sequence[float],
                                amp_jitter: Sequence[float], speaker: dict, affect: AffectPoint | None,
                                cfg: AudioConfig = AudioConfig()):
    """Render pseudo-phonemes as harmonic tones; returns samples, frame durations and ground truth."""
    table = _PHONEME_TABLE
    sr, hop = cfg.sample_rate, cfg.hop
    a_bar = affect.arousal_norm if affect else 0.0
    v_bar = affect.valence_norm if affect else 0.5
    f_scale = 1.0 + PITCH_GAIN * a_bar
    amp_scale = 1.0 + AMPLITUDE_GAIN * a_bar
    dur_scale = 1.0 + DURATION_GAIN * a_bar
    tilt = (v_bar - 0.5) * TILT_HZ_PER_S

    seconds = np.clip(table["duration"][phone_idx] * dur_jitter, 0.08, 0.25) * dur_scale
    frames = np.maximum(1, np.round(seconds * sr / hop)).astype(int)
    total = int(frames.sum())
    n = total * hop - 1  # centre-padded STFT then yields exactly `total` frames
    bounds = np.concatenate([[0], np.cumsum(frames)]) * hop
    owner = np.minimum(np.searchsorted(bounds, np.arange(n), side="right") - 1, len(frames) - 1)

    level = np.clip(table["amplitude"][phone_idx] * amp_jitter, 0.2, 0.8) * amp_scale
    base = speaker["f0"] * table["f0_factor"][phone_idx] * f_scale
    time = np.arange(n) / sr
    inst_f0 = base[owner] + tilt * (time - 0.5 * n / sr)
    phase = 2 * np.pi * np.cumsum(inst_f0) / sr
    weights = speaker["harmonics"][None, :] * table["harmonics"][phone_idx]
    weights = weights / weights.sum(axis=1, keepdims=True)
    wave = np.zeros(n)
    for k in range(N_HARMONICS):
        wave += weights[owner, k] * np.sin((k + 1) * phase)
    ramp = int(0.005 * sr)
    envelope = np.convolve(level[owner], np.ones(ramp) / ramp, mode="same")
    samples = HEADROOM * envelope * wave

    centres = np.minimum(np.arange(total) * hop, n - 1)
    half = cfg.fft_size // 2
    lo, hi = centres - half, centres + half
    frame_owner = owner[centres]
    inside = (lo >= bounds[frame_owner]) & (hi <= bounds[frame_owner + 1]) & (lo >= 0) & (hi <= n)
    return samples.astype(np.float32), frames.tolist(), inst_f0[centres].astype(np.float32), inside, \
        (HEADROOM * level[frame_owner]).astype(np.float32)


def gen_synthetic_corpus(n_utts: int, n_speakers: int, seed: int, affect: bool = False,
                         fixed_affect: AffectPoint | None = None,
                         cfg: AudioConfig = AudioConfig()) -> list[SyntheticUtterance]:
    """A corpus of pseudo-phoneme tone sequences with exact ground truth.

    Each utterance has 3-8 pseudo-phonemes spoken by one of ``n_speakers``.
    With ``affect`` (or ``fixed_affect``) an AffectPoint scales F0 by
    ``1 + 0.3*a``, amplitude by ``1 + 0.5*a``, durations by ``1 - 0.2*a``
    and tilts the F0 contour by ``(v - 0.5) * 20`` Hz/s, where ``a`` and
    ``v`` are the normalised arousal and valence. Random draws do not
    depend on the affect settings, so the same seed gives the same content.
    """
    if n_utts < 1 or n_speakers < 1:
        raise ValueError("need at least one utterance and one speaker")
    speakers = _speaker_profiles(n_speakers, seed)
    corpus = []
    for i in range(n_utts):
        rng = np.random.default_rng([seed, 1, i])
        spk = int(rng.integers(n_speakers))
        n_ph = int(rng.integers(3, 9))
        phone_idx = rng.integers(len(PSEUDO_PHONEMES), size=n_ph)
        dur_jitter = rng.uniform(0.85, 1.15, n_ph)
        amp_jitter = rng.uniform(0.9, 1.1, n_ph)
        av = np.random.default_rng([seed, 2, i]).uniform(AFFECT_MIN, AFFECT_MAX, 2)
        point = fixed_affect if fixed_affect is not None else (AffectPoint(*av) if affect else None)
        samples, frames, f0, voiced, amp = synthesize_pseudo_utterance(
            phone_idx, dur_jitter, amp_jitter, speakers[spk], point, cfg)
        corpus.append(SyntheticUtterance(
            id=f"utt{seed}_{i:05d}", samples=samples,
            phonemes=[PSEUDO_PHONEMES[j] for j in phone_idx], durations=frames,
            speaker=f"spk{seed}_{spk:02d}", affect=point, f0=f0, voiced=voiced, amplitude=amp))
    return corpus


def write_synthetic_corpus(corpus: Sequence[SyntheticUtterance], out_dir: str | Path,
                           cfg: AudioConfig = AudioConfig()) -> Path:
    """Write wavs, alignments, ``manifest.jsonl`` and ``ground_truth.npz``."""
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    (out / "alignments").mkdir(exist_ok=True)
    rows, truth = [], {}
    for utt in corpus:
        write_wav(out / "wavs" / f"{utt.id}.wav", utt.samples, cfg)
        write_alignment(out / "alignments" / f"{utt.id}.tsv", utt.phonemes, utt.durations, cfg,
                        n_samples=len(utt.samples))
        rows.append(Utterance(
            id=utt.id, wav=f"wavs/{utt.id}.wav", phonemes=utt.phonemes, durations=utt.durations,
            speaker=utt.speaker, arousal=utt.affect.arousal if utt.affect else None,
            valence=utt.affect.valence if utt.affect else None,
            alignment=f"alignments/{utt.id}.tsv"))
        truth[f"{utt.id}/f0"] = utt.f0
        truth[f"{utt.id}/voiced"] = utt.voiced
        truth[f"{utt.id}/amplitude"] = utt.amplitude
    write_manifest(out / "manifest.jsonl", rows)
    np.savez(out / "ground_truth.npz", **truth)
    return out / "manifest.jsonl"


# -- batching --------------------------------------------------------------

def batch_indices(lengths: Sequence[int], batch_size: int, seed: int, epoch: int = 0,
                  pool_batches: int = 8) -> list[list[int]]:
    """Shuffled, length-bucketed batches; deterministic per ``(seed, epoch)``."""
    if not len(lengths):
        raise ValueError("cannot batch an empty manifest")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(lengths))
    pool = batch_size * pool_batches
    batches = []
    for start in range(0, len(order), pool):
        chunk = sorted(order[start:start + pool].tolist(), key=lambda i: (lengths[i], i))
        batches.extend(chunk[k:k + batch_size] for k in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def make_batches(manifest: Sequence, batch_size: int, seed: int, epoch: int = 0) -> Iterator[list]:
    """Yield the items of ``manifest`` grouped into one epoch of batches."""
    lengths = [int(np.sum(item.durations)) for item in manifest]
    for idx in batch_indices(lengths, batch_size, seed, epoch):
        yield [manifest[i] for i in idx]


# -- prepared features -------------------------------------------------------

@dataclass
class UtteranceFeatures:
    id: str
    phoneme_ids: np.ndarray
    durations: np.ndarray
    mel: np.ndarray
    f0: np.ndarray
    energy: np.ndarray
    speaker: str
    arousal: float | None = None
    valence: float | None = None

    @property
    def n_frames(self) -> int:
        return len(self.mel)

    @property
    def affect(self) -> AffectPoint | None:
        if self.arousal is None or self.valence is None:
            return None
        return AffectPoint(self.arousal, self.valence)


@dataclass
class FeatureStats:
    """Standardisation of log-F0 and energy; per corpus or per speaker."""

    pitch_mean: float
    pitch_std: float
    energy_mean: float
    energy_std: float
    pitch_min: float
    pitch_max: float
    energy_min: float
    energy_max: float
    scope: str = "corpus"
    speakers: dict[str, list[float]] = field(default_factory=dict)

    @classmethod
    def fit(cls, features: Sequence[UtteranceFeatures], scope: str = "corpus") -> "FeatureStats":
        if scope not in ("corpus", "speaker"):
            raise ValueError(f"unknown standardisation scope {scope!r}")
        logf0 = np.concatenate([np.log(f.f0.astype(np.float64)) for f in features])
        energy = np.concatenate([f.energy.astype(np.float64) for f in features])
        stats = cls(float(logf0.mean()), float(logf0.std() or 1.0), float(energy.mean()),
                    float(energy.std() or 1.0), 0.0, 0.0, 0.0, 0.0, scope=scope)
        if scope == "speaker":
            for spk in sorted({f.speaker for f in features}):
                lf = np.concatenate([np.log(f.f0.astype(np.float64)) for f in features if f.speaker == spk])
                en = np.concatenate([f.energy.astype(np.float64) for f in features if f.speaker == spk])
                stats.speakers[spk] = [float(lf.mean()), float(lf.std() or 1.0),
                                       float(en.mean()), float(en.std() or 1.0)]
        p = np.concatenate([stats.pitch(f.f0, f.speaker) for f in features])
        e = np.concatenate([stats.energy(f.energy, f.speaker) for f in features])
        stats.pitch_min, stats.pitch_max = float(p.min()), float(p.max())
        stats.energy_min, stats.energy_max = float(e.min()), float(e.max())
        if stats.pitch_max <= stats.pitch_min:
            stats.pitch_max = stats.pitch_min + 1.0
        if stats.energy_max <= stats.energy_min:
            stats.energy_max = stats.energy_min + 1.0
        return stats

    def _moments(self, speaker: str | None):
        if self.scope == "speaker" and speaker in self.speakers:
            return self.speakers[speaker]
        return [self.pitch_mean, self.pitch_std, self.energy_mean, self.energy_std]

    def pitch(self, f0_hz: np.ndarray, speaker: str | None = None) -> np.ndarray:
        mu, sd, _, _ = self._moments(speaker)
        return ((np.log(np.asarray(f0_hz, dtype=np.float64)) - mu) / sd).astype(np.float32)

    def energy(self, energy: np.ndarray, speaker: str | None = None) -> np.ndarray:
        _, _, mu, sd = self._moments(speaker)
        return ((np.asarray(energy, dtype=np.float64) - mu) / sd).astype(np.float32)

    def pitch_to_hz(self, pitch: np.ndarray, speaker: str | None = None) -> np.ndarray:
        mu, sd, _, _ = self._moments(speaker)
        return np.exp(np.asarray(pitch, dtype=np.float64) * sd + mu)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(**d)


def prepare_utterance(utt: Utterance, cfg: AudioConfig = AudioConfig(),
                      inventory: PhonemeInventory = DEFAULT_INVENTORY) -> tuple[UtteranceFeatures, np.ndarray]:
    """Extract features for one manifest row; raises :class:`DataError` to discard it."""
    unknown = [p for p in utt.phonemes if p not in inventory]
    if unknown:
        raise DataError(f"unknown phonemes {unknown[:3]}")
    if not utt.phonemes:
        raise DataError("no phonemes")
    try:
        samples = read_wav(utt.wav, cfg)
    except (OSError, EOFError) as exc:
        raise DataError(f"unreadable wav: {exc}") from None
    except Exception as exc:  # wave.Error and rate/format rejections
        raise DataError(str(exc)) from None
    if samples.size == 0:
        raise DataError("empty audio")
    if utt.alignment:
        durations = parse_alignment(utt.alignment, utt.phonemes, cfg)
    else:
        durations = list(utt.durations)
    if len(durations) != len(utt.phonemes):
        raise DataError(f"{len(durations)} durations for {len(utt.phonemes)} phonemes")
    if any(d < 0 for d in durations):
        raise DataError("negative duration")
    mel = mel_spectrogram(samples, cfg)
    total = int(sum(durations))
    if total < 1 or not 0 <= len(mel) - total <= 1:
        raise DataError(f"durations sum to {total} frames but audio has {len(mel)}")
    pitch = extract_f0(samples, cfg).f0[:total]
    energy = extract_energy(samples, cfg)[:total]
    feats = UtteranceFeatures(
        id=utt.id, phoneme_ids=np.asarray(inventory.encode(utt.phonemes), dtype=np.int64),
        durations=np.asarray(durations, dtype=np.int64), mel=mel[:total], f0=pitch, energy=energy,
        speaker=utt.speaker, arousal=utt.arousal, valence=utt.valence)
    return feats, samples


@dataclass
class PreparedCorpus:
    features: list[UtteranceFeatures]
    speakers: dict[str, np.ndarray]
    discards: list[tuple[str, str]] = field(default_factory=list)

    def by_id(self) -> dict[str, UtteranceFeatures]:
        return {f.id: f for f in self.features}


def prepare_corpus(manifest: Sequence[Utterance], cfg: AudioConfig = AudioConfig(),
                   inventory: PhonemeInventory = DEFAULT_INVENTORY) -> PreparedCorpus:
    """Features for every usable utterance plus per-speaker embeddings.

    Speakers without an ``embedding_path`` get the fingerprint of all their
    surviving audio concatenated in manifest order.
    """
    features, discards = [], []
    audio: dict[str, list[np.ndarray]] = {}
    loaded: dict[str, np.ndarray] = {}
    for utt in manifest:
        try:
            feats, samples = prepare_utterance(utt, cfg, inventory)
            if utt.embedding_path:
                loaded.setdefault(utt.speaker, load_embedding(utt.embedding_path).vector)
        except DataError as exc:
            discards.append((utt.id, str(exc)))
            log.info("discarding %s: %s", utt.id, exc)
            continue
        features.append(feats)
        audio.setdefault(utt.speaker, []).append(samples)
    speakers = dict(loaded)
    for spk, chunks in audio.items():
        if spk in speakers:
            continue
        joined = np.concatenate(chunks)
        if len(joined) < cfg.sample_rate // 2:
            joined = np.tile(joined, int(np.ceil(cfg.sample_rate / 2 / len(joined))))
        speakers[spk] = speaker_fingerprint(joined, cfg).vector
    return PreparedCorpus(features=features, speakers=speakers, discards=discards)


def load_embedding(path: str | Path) -> SpeakerEmbedding:
    try:
        vec = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable speaker embedding {path}: {exc}") from None
    if np.asarray(vec).size != SPEAKER_DIM:
        raise DataError(f"speaker embedding {path} has {np.asarray(vec).size} values, expected {SPEAKER_DIM}")
    return SpeakerEmbedding(vec, source="loaded")


def save_prepared(corpus: PreparedCorpus, stats: FeatureStats, out_dir: str | Path) -> None:
    """Write the feature cache; the byte content depends only on the inputs."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    index = []
    for f in corpus.features:
        np.savez(out / "features" / f"{f.id}.npz", phoneme_ids=f.phoneme_ids, durations=f.durations,
                 mel=f.mel, f0=f.f0, energy=f.energy)
        index.append({"id": f.id, "speaker": f.speaker, "arousal": f.arousal, "valence": f.valence})
    with open(out / "index.jsonl", "w", encoding="utf-8") as fh:
        for row in index:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    names = sorted(corpus.speakers)
    np.savez(out / "speakers.npz", names=np.array(names), vectors=np.stack([corpus.speakers[n] for n in names]))
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
    with open(out / "discards.tsv", "w", encoding="utf-8") as fh:
        for uid, reason in corpus.discards:
            fh.write(f"{uid}\t{reason}\n")


def load_prepared(cache_dir: str | Path) -> tuple[PreparedCorpus, FeatureStats]:
    cache = Path(cache_dir)
    if not (cache / "index.jsonl").exists():
        raise DataError(f"{cache} is not a prepared feature cache (run `avtts prepare`)")
    features = []
    with open(cache / "index.jsonl", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            with np.load(cache / "features" / f"{row['id']}.npz") as z:
                features.append(UtteranceFeatures(
                    id=row["id"], phoneme_ids=z["phoneme_ids"], durations=z["durations"], mel=z["mel"],
                    f0=z["f0"], energy=z["energy"], speaker=row["speaker"],
                    arousal=row.get("arousal"), valence=row.get("valence")))
    with np.load(cache / "speakers.npz") as z:
        speakers = {str(n): v for n, v in zip(z["names"], z["vectors"])}
    stats = FeatureStats.from_dict(json.loads((cache / "stats.json").read_text(encoding="utf-8")))
    discards = []
    if (cache / "discards.tsv").exists():
        for line in (cache / "discards.tsv").read_text(encoding="utf-8").splitlines():
            uid, _, reason = line.partition("\t")
            discards.append((uid, reason))
    return PreparedCorpus(features, speakers, discards), stats


def features_from_synthetic(corpus: Sequence[SyntheticUtterance], cfg: AudioConfig = AudioConfig(),
                            inventory: PhonemeInventory = DEFAULT_INVENTORY) -> PreparedCorpus:
    """In-memory equivalent of write + prepare for synthetic utterances."""
    features = []
    audio: dict[str, list[np.ndarray]] = {}
    for utt in corpus:
        total = int(sum(utt.durations))
        features.append(UtteranceFeatures(
            id=utt.id, phoneme_ids=np.asarray(inventory.encode(utt.phonemes), dtype=np.int64),
            durations=np.asarray(utt.durations, dtype=np.int64), mel=mel_spectrogram(utt.samples, cfg)[:total],
            f0=extract_f0(utt.samples, cfg).f0[:total], energy=extract_energy(utt.samples, cfg)[:total],
            speaker=utt.speaker, arousal=utt.affect.arousal if utt.affect else None,
            valence=utt.affect.valence if utt.affect else None))
        audio.setdefault(utt.speaker, []).append(utt.samples)
    speakers = {spk: speaker_fingerprint(np.concatenate(chunks), cfg).vector for spk, chunks in audio.items()}
    return PreparedCorpus(features=features, speakers=speakers)


@dataclass
class Batch:
    ids: np.ndarray            # (B, L) phoneme ids
    mask: np.ndarray           # (B, L) 1 for real phonemes
    speaker: np.ndarray        # (B, 256)
    arousal: np.ndarray        # (B,) normalised to [0, 1]
    valence: np.ndarray        # (B,)
    durations: np.ndarray | None = None   # (B, L) frames
    mel: np.ndarray | None = None         # (B, T, mel_bins)
    pitch: np.ndarray | None = None       # (B, T) standardised
    energy: np.ndarray | None = None      # (B, T) standardised
    frame_mask: np.ndarray | None = None  # (B, T)
    utt_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def collate(items: Sequence[UtteranceFeatures], speakers: dict[str, np.ndarray], stats: FeatureStats,
            affect: Sequence[AffectPoint | None] | None = None, require_affect: bool = False) -> Batch:
    """Pad a list of utterances into one :class:`Batch`."""
    if not items:
        raise ValueError("empty batch")
    b = len(items)
    width = max(len(f.phoneme_ids) for f in items)
    frames = max(f.n_frames for f in items)
    n_mel = items[0].mel.shape[1]
    batch = Batch(
        ids=np.full((b, width), PAD_ID, dtype=np.int64), mask=np.zeros((b, width), np.float32),
        speaker=np.zeros((b, SPEAKER_DIM), np.float32), arousal=np.zeros(b, np.float32),
        valence=np.zeros(b, np.float32), durations=np.zeros((b, width), np.int64),
        mel=np.zeros((b, frames, n_mel), np.float32), pitch=np.zeros((b, frames), np.float32),
        energy=np.zeros((b, frames), np.float32), frame_mask=np.zeros((b, frames), np.float32),
        utt_ids=[f.id for f in items])
    for i, f in enumerate(items):
        n, t = len(f.phoneme_ids), f.n_frames
        batch.ids[i, :n] = f.phoneme_ids
        batch.mask[i, :n] = 1.0
        batch.durations[i, :n] = f.durations
        batch.mel[i, :t] = f.mel
        batch.pitch[i, :t] = stats.pitch(f.f0, f.speaker)
        batch.energy[i, :t] = stats.energy(f.energy, f.speaker)
        batch.frame_mask[i, :t] = 1.0
        if f.speaker not in speakers:
            raise DataError(f"no speaker embedding for {f.speaker!r} ({f.id})")
        batch.speaker[i] = speakers[f.speaker]
        point = affect[i] if affect is not None else f.affect
        if point is None and require_affect:
            raise DataError(f"utterance {f.id} has no arousal/valence annotation")
        if point is not None:
            batch.arousal[i] = point.arousal_norm
            batch.valence[i] = point.valence_norm
    return batch
