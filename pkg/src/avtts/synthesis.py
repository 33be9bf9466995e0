"""Text + speaker + affect -> mel -> waveform."""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SPEAKER_DIM, AudioConfig, SpeakerEmbedding, griffin_lim, read_wav, speaker_fingerprint
from .checkpoint import Checkpoint
from .dataset import AffectPoint, Batch, DataError, FeatureStats, load_embedding
from .model import AffectTTS
from .text import DEFAULT_INVENTORY, g2p, load_lexicon
from .training import model_from_checkpoint

log = logging.getLogger(__name__)

NEUTRAL = AffectPoint(4.0, 4.0)


@dataclass
class TeacherSignals:
    """Ground-truth durations and standardised pitch/energy for the debug path."""

    durations: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.pitch = np.asarray(self.pitch, dtype=np.float32)
        self.energy = np.asarray(self.energy, dtype=np.float32)
        total = int(self.durations.sum())
        if self.pitch.shape != (total,) or self.energy.shape != (total,):
            raise ValueError(f"teacher pitch/energy need {total} frames, got {self.pitch.shape} and "
                             f"{self.energy.shape}")

    @classmethod
    def load(cls, path: str | Path) -> "TeacherSignals":
        with np.load(path) as z:
            missing = {"durations", "pitch", "energy"} - set(z.files)
            if missing:
                raise DataError(f"{path}: missing arrays {sorted(missing)}")
            return cls(z["durations"], z["pitch"], z["energy"])

    def save(self, path: str | Path) -> None:
        np.savez(path, durations=self.durations, pitch=self.pitch, energy=self.energy)


@dataclass
class SynthesisResult:
    mel: np.ndarray          # (T, mel_bins) log-mel
    durations: np.ndarray    # (L,) frames per phoneme
    pitch: np.ndarray        # (T,) standardised
    energy: np.ndarray       # (T,)
    phoneme_ids: np.ndarray
    wav: np.ndarray | None = None

    @property
    def pitch_mean(self) -> float:
        return float(self.pitch.mean()) if self.pitch.size else 0.0


def resolve_speaker(speaker_wav: str | Path | None = None, speaker_embedding: str | Path | None = None,
                    cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    if (speaker_wav is None) == (speaker_embedding is None):
        raise ValueError("give exactly one of a speaker wav or a speaker embedding")
    if speaker_embedding is not None:
        return load_embedding(speaker_embedding).vector
    try:
        samples = read_wav(speaker_wav, cfg)
    except (OSError, EOFError, ValueError, wave.Error) as exc:
        raise DataError(f"cannot read speaker wav {speaker_wav}: {exc}") from None
    return speaker_fingerprint(samples, cfg).vector


def _speaker_vector(speaker) -> np.ndarray:
    vec = speaker.vector if isinstance(speaker, SpeakerEmbedding) else np.asarray(speaker, dtype=np.float32)
    if vec.shape != (SPEAKER_DIM,):
        raise ValueError(f"speaker embedding must have {SPEAKER_DIM} dims, got shape {vec.shape}")
    return vec


def synthesize(model: AffectTTS, phoneme_ids, speaker, affect: AffectPoint | None = None,
               route: str = "e2", teacher: TeacherSignals | None = None) -> SynthesisResult:
    """Predict a log-mel for one utterance.

    ``route="e1"`` ignores the affect input (stage-1 model). With ``teacher``
    the durations, pitch and energy come from the given signals.
    """
    ids = np.asarray(phoneme_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("need a non-empty 1-D phoneme id sequence")
    point = affect or NEUTRAL
    batch = Batch(ids=ids[None], mask=np.ones((1, ids.size), np.float32),
                  speaker=_speaker_vector(speaker)[None],
                  arousal=np.array([point.arousal_norm], np.float32),
                  valence=np.array([point.valence_norm], np.float32))
    if teacher is not None:
        if teacher.durations.shape != ids.shape:
            raise ValueError(f"teacher durations cover {teacher.durations.size} phonemes, text has {ids.size}")
        batch.durations = teacher.durations[None]
        batch.pitch = teacher.pitch[None]
        batch.energy = teacher.energy[None]
    out = model.forward(batch, route=route, teacher_force=teacher is not None)
    t = int(out.frame_mask[0].sum())
    return SynthesisResult(mel=out.mel.data[0, :t].copy(), durations=out.durations[0].astype(np.int64),
                           pitch=out.pitch.data[0, :t].copy(), energy=out.energy.data[0, :t].copy(),
                           phoneme_ids=ids)


class Synthesizer:
    """A loaded checkpoint plus everything needed to go from text to audio."""

    def __init__(self, checkpoint: Checkpoint, audio: AudioConfig = AudioConfig(), lexicon_path=None):
        self.checkpoint = checkpoint
        self.model = model_from_checkpoint(checkpoint)
        self.stats = FeatureStats.from_dict(checkpoint.stats) if checkpoint.stats else None
        self.audio = audio
        self.lexicon = load_lexicon(lexicon_path) if lexicon_path else None
        self.route = "e2" if checkpoint.stage == "stage2" else "e1"

    def phonemes(self, text: str) -> np.ndarray:
        return np.asarray(g2p(text, self.lexicon, DEFAULT_INVENTORY).ids, dtype=np.int64)

    def __call__(self, text: str, speaker, affect: AffectPoint | None = None,
                 teacher: TeacherSignals | None = None, vocode: bool = True, griffin_lim_iters: int = 60,
                 seed: int = 0) -> SynthesisResult:
        if self.route == "e1" and affect is not None:
            log.warning("stage-1 checkpoint: arousal/valence inputs are ignored")
        result = synthesize(self.model, self.phonemes(text), speaker, affect, self.route, teacher)
        if vocode:
            result.wav = griffin_lim(result.mel.astype(np.float64), self.audio, iters=griffin_lim_iters, seed=seed)
        return result
