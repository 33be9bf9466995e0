"""scikit-learn style front end over the two-stage trainer."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .audio import SPEAKER_DIM, AudioConfig, SpeakerEmbedding, griffin_lim
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import AffectPoint, DataError, PreparedCorpus, UtteranceFeatures
from .model import ModelConfig
from .synthesis import synthesize
from .text import DEFAULT_INVENTORY, g2p
from .training import TrainConfig, model_from_checkpoint, train_stage1, train_stage2


def check_corpus(X, require_affect: bool = False) -> PreparedCorpus:
    """Accept a :class:`PreparedCorpus` and check it is usable for training."""
    if not isinstance(X, PreparedCorpus):
        raise TypeError(f"expected a PreparedCorpus, got {type(X).__name__}")
    if not X.features:
        raise DataError("empty training corpus")
    for f in X.features:
        if not isinstance(f, UtteranceFeatures):
            raise TypeError(f"corpus entries must be UtteranceFeatures, got {type(f).__name__}")
        if f.speaker not in X.speakers:
            raise DataError(f"no speaker embedding for {f.speaker!r} ({f.id})")
        if require_affect and f.affect is None:
            raise DataError(f"utterance {f.id} has no arousal/valence annotation")
    return X


def check_speaker(speaker, speakers: dict[str, np.ndarray] | None = None) -> np.ndarray:
    if isinstance(speaker, str):
        if not speakers or speaker not in speakers:
            raise KeyError(f"unknown speaker {speaker!r}")
        return np.asarray(speakers[speaker], dtype=np.float32)
    vec = speaker.vector if isinstance(speaker, SpeakerEmbedding) else np.asarray(speaker, dtype=np.float32)
    if vec.shape != (SPEAKER_DIM,) or not np.all(np.isfinite(vec)):
        raise ValueError(f"speaker embedding must be {SPEAKER_DIM} finite values, got shape {vec.shape}")
    return vec


def check_affect(affect) -> AffectPoint | None:
    if affect is None or isinstance(affect, AffectPoint):
        return affect
    arousal, valence = affect
    return AffectPoint(float(arousal), float(valence))


class AffectiveTTS(BaseEstimator):
    """Multi-speaker TTS with arousal/valence prosody control.

    ``fit`` runs the first training stage on any corpus; ``fit_prosody``
    runs the second stage on an affect-annotated corpus. ``predict`` maps
    texts (or phoneme-id sequences) to log-mel spectrograms.
    """

    def __init__(self, hidden=256, encoder_layers=4, decoder_layers=4, heads=2, conv_filter=1024, conv_kernel=9,
                 dropout=0.2, predictor_channels=256, predictor_kernel=3, predictor_dropout=0.5,
                 batch_size=16, lr=1e-4, warmup_steps=4000, stage1_steps=2000, stage2_steps=2000,
                 mel_loss="mae", stats_scope="corpus", seed=0):
        self.hidden = hidden
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.heads = heads
        self.conv_filter = conv_filter
        self.conv_kernel = conv_kernel
        self.dropout = dropout
        self.predictor_channels = predictor_channels
        self.predictor_kernel = predictor_kernel
        self.predictor_dropout = predictor_dropout
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.mel_loss = mel_loss
        self.stats_scope = stats_scope
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(hidden=self.hidden, encoder_layers=self.encoder_layers,
                           decoder_layers=self.decoder_layers, heads=self.heads, conv_filter=self.conv_filter,
                           conv_kernel=self.conv_kernel, dropout=self.dropout,
                           predictor_channels=self.predictor_channels, predictor_kernel=self.predictor_kernel,
                           predictor_dropout=self.predictor_dropout)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, lr=self.lr, warmup_steps=self.warmup_steps,
                           stage1_steps=self.stage1_steps, stage2_steps=self.stage2_steps, mel_loss=self.mel_loss,
                           stats_scope=self.stats_scope, seed=self.seed)

    def fit(self, X, y=None, **run_kwargs):
        corpus = check_corpus(X)
        result = train_stage1(corpus, self._train_config(), self._model_config(), **run_kwargs)
        self._store(result, corpus)
        return self

    def fit_prosody(self, X, y=None, **run_kwargs):
        check_is_fitted(self, "checkpoint_")
        corpus = check_corpus(X, require_affect=True)
        if self.checkpoint_.stage != "stage1":
            raise ValueError("fit_prosody expects a model fresh from fit (stage 1)")
        result = train_stage2(corpus, self.checkpoint_, self._train_config(), **run_kwargs)
        self._store(result, corpus)
        return self

    def _store(self, result, corpus: PreparedCorpus) -> None:
        self.checkpoint_ = result.checkpoint
        self.model_ = result.model
        self.history_ = result.history
        self.speakers_ = dict(corpus.speakers)
        self.stage_ = result.checkpoint.stage

    def _phoneme_ids(self, item) -> np.ndarray:
        if isinstance(item, str):
            return np.asarray(g2p(item).ids, dtype=np.int64)
        ids = np.asarray(item)
        if ids.ndim == 1 and ids.size and ids.dtype.kind in "US":
            return np.asarray(DEFAULT_INVENTORY.encode(ids.tolist()), dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0 or ids.dtype.kind not in "iu":
            raise ValueError("each input must be text, a phoneme list or a 1-D integer id array")
        return ids.astype(np.int64)

    def predict(self, X: Sequence, speaker, affect=None) -> list[np.ndarray]:
        """Log-mel spectrogram for each text / phoneme sequence in ``X``."""
        return [r.mel for r in self.predict_prosody(X, speaker, affect)]

    def predict_prosody(self, X: Sequence, speaker, affect=None) -> list:
        """Full synthesis results (mel, durations, pitch, energy) for each input."""
        check_is_fitted(self, "model_")
        if isinstance(X, str):
            X = [X]
        vec = check_speaker(speaker, self.speakers_)
        point = check_affect(affect)
        route = "e2" if self.stage_ == "stage2" else "e1"
        return [synthesize(self.model_, self._phoneme_ids(x), vec, point, route) for x in X]

    def synthesize(self, text: str, speaker, affect=None, audio: AudioConfig = AudioConfig(),
                   griffin_lim_iters: int = 60) -> np.ndarray:
        mel = self.predict([text], speaker, affect)[0]
        return griffin_lim(mel.astype(np.float64), audio, iters=griffin_lim_iters, seed=self.seed)

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "checkpoint_")
        save_checkpoint(self.checkpoint_, path)

    @classmethod
    def load(cls, path: str | Path, speakers: dict[str, np.ndarray] | None = None) -> "AffectiveTTS":
        ckpt = load_checkpoint(path)
        cfg = ckpt.model_config
        train = ckpt.train_config
        est = cls(**{k: cfg[k] for k in ("hidden", "encoder_layers", "decoder_layers", "heads", "conv_filter",
                                         "conv_kernel", "dropout", "predictor_channels", "predictor_kernel",
                                         "predictor_dropout")},
                  **{k: train[k] for k in ("batch_size", "lr", "warmup_steps", "stage1_steps", "stage2_steps",
                                           "mel_loss", "stats_scope", "seed") if k in train})
        est.checkpoint_ = ckpt
        est.model_ = model_from_checkpoint(ckpt)
        est.history_ = []
        est.speakers_ = dict(speakers or {})
        est.stage_ = ckpt.stage
        return est
