"""Feature extraction and waveform rendering.

Log-mel spectrograms, frame-level pitch and energy targets, Griffin-Lim
inversion, a deterministic acoustic speaker fingerprint and 16-bit WAV I/O.
Every function here is pure and deterministic.
"""

from __future__ import annotations

import wave
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import nnls

SPEAKER_DIM = 256
FINGERPRINT_SEED = 20210830


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 22050
    fft_size: int = 1024
    hop: int = 256
    win_length: int = 1024
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    f0_min: float = 60.0
    f0_max: float = 500.0
    voicing_threshold: float = 0.45

    def __post_init__(self):
        if not 0 < self.hop < self.fft_size:
            raise ValueError(f"hop ({self.hop}) must be positive and below fft_size ({self.fft_size})")
        if self.win_length > self.fft_size:
            raise ValueError("win_length cannot exceed fft_size")
        if self.fmax > self.sample_rate / 2:
            raise ValueError(f"fmax {self.fmax} above Nyquist {self.sample_rate / 2}")
        if not 0 < self.f0_min < self.f0_max:
            raise ValueError("need 0 < f0_min < f0_max")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def log_floor_value(self) -> float:
        return float(np.log(self.log_floor))


def n_frames(n_samples: int, cfg: AudioConfig) -> int:
    """Frame count of a centre-padded STFT."""
    return 1 + n_samples // cfg.hop


def _frames(samples: np.ndarray, cfg: AudioConfig, pad_mode: str = "reflect") -> np.ndarray:
    half = cfg.fft_size // 2
    if pad_mode == "reflect" and len(samples) <= half:
        pad_mode = "constant"
    padded = np.pad(samples, (half, half), mode=pad_mode)
    return sliding_window_view(padded, cfg.fft_size)[:: cfg.hop][: n_frames(len(samples), cfg)]


@lru_cache(maxsize=8)
def _window(cfg: AudioConfig) -> np.ndarray:
    win = np.zeros(cfg.fft_size)
    offset = (cfg.fft_size - cfg.win_length) // 2
    win[offset:offset + cfg.win_length] = np.hanning(cfg.win_length + 1)[:-1]
    return win


def stft_magnitude(samples: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """(T, fft_size//2+1) magnitude spectrogram with a periodic Hann window."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty audio")
    return np.abs(np.fft.rfft(_frames(samples, cfg) * _window(cfg), axis=-1))


def _hz_to_mel(f):
    # Slaney: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz, min_log_mel, logstep = 1000.0, 1000.0 / f_sp, np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, f / f_sp)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz, min_log_mel, logstep = 1000.0, 1000.0 / f_sp, np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: AudioConfig) -> np.ndarray:
    """(mel_bins, fft_size//2+1) triangular filters, area-normalised."""
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.fft_size // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.mel_bins + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def mel_spectrogram(samples: np.ndarray, cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    """Natural-log mel magnitudes, shape (T, mel_bins), floored at ``log_floor``."""
    mag = stft_magnitude(samples, cfg)
    mel = mag @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor)).astype(np.float32)


def extract_energy(samples: np.ndarray, cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    """Per-frame L2 norm of the STFT magnitude."""
    return np.linalg.norm(stft_magnitude(samples, cfg), axis=-1).astype(np.float32)


@dataclass
class FramePitch:
    f0: np.ndarray
    voiced: np.ndarray
    periodicity: np.ndarray = field(repr=False, default=None)


def _cmndf(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """Cumulative mean normalised difference for lags 0..max_lag, per frame."""
    n = frames.shape[1]
    width = n - max_lag
    head = frames[:, :width]
    size = 1 << int(np.ceil(np.log2(2 * n)))
    spec_full = np.fft.rfft(frames, size, axis=1)
    spec_head = np.fft.rfft(head, size, axis=1)
    corr = np.fft.irfft(np.conj(spec_head) * spec_full, size, axis=1)[:, : max_lag + 1]
    sq = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    energy_head = sq[:, width][:, None]
    lags = np.arange(max_lag + 1)
    energy_lag = sq[:, lags + width] - sq[:, lags]
    diff = np.maximum(energy_head + energy_lag - 2.0 * corr, 0.0)
    cum = np.cumsum(diff[:, 1:], axis=1)
    out = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[:, 1:] = diff[:, 1:] * lags[1:] / cum
    out[~np.isfinite(out)] = 1.0
    return out


def extract_f0(samples: np.ndarray, cfg: AudioConfig = AudioConfig()) -> FramePitch:
    """Frame-level F0 in Hz by a YIN-style difference function.

    A frame is voiced when the normalised difference dips below
    ``voicing_threshold`` inside the search band; the first such dip is
    descended to its local minimum and refined by a parabola. Unvoiced
    frames are filled by linear interpolation (held at the edges); a fully
    unvoiced signal is set to the band midpoint.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty audio")
    frames = _frames(samples, cfg, pad_mode="constant")
    sr = cfg.sample_rate
    min_lag = max(2, int(np.floor(sr / cfg.f0_max)))
    max_lag = int(np.ceil(sr / cfg.f0_min))
    if max_lag + 2 >= cfg.fft_size:
        raise ValueError("fft_size too short for the f0 search band")
    d = _cmndf(frames, max_lag + 1)
    rms = np.sqrt((frames ** 2).mean(axis=1))

    n = len(frames)
    f0 = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    periodicity = np.zeros(n)
    thr = cfg.voicing_threshold
    for t in range(n):
        if rms[t] < 1e-6:
            continue
        band = d[t, min_lag:max_lag + 1]
        below = np.flatnonzero(band < thr)
        if below.size == 0:
            continue
        lag = min_lag + below[0]
        while lag + 1 <= max_lag and d[t, lag + 1] < d[t, lag]:
            lag += 1
        a, b, c = d[t, lag - 1], d[t, lag], d[t, lag + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom > 0 else 0.0
        shift = float(np.clip(shift, -1.0, 1.0))
        est = sr / (lag + shift)
        if not cfg.f0_min <= est <= cfg.f0_max:
            continue
        f0[t] = est
        voiced[t] = True
        periodicity[t] = 1.0 - b

    if not voiced.any():
        f0[:] = 0.5 * (cfg.f0_min + cfg.f0_max)
    elif not voiced.all():
        idx = np.flatnonzero(voiced)
        f0 = np.interp(np.arange(n), idx, f0[idx])
    return FramePitch(f0=f0.astype(np.float32), voiced=voiced, periodicity=periodicity.astype(np.float32))


def _istft(spec: np.ndarray, cfg: AudioConfig, length: int) -> np.ndarray:
    win = _window(cfg)
    frames = np.fft.irfft(spec, cfg.fft_size, axis=-1) * win
    n = len(frames)
    total = cfg.fft_size + cfg.hop * (n - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n):
        start = t * cfg.hop
        out[start:start + cfg.fft_size] += frames[t]
        norm[start:start + cfg.fft_size] += win ** 2
    half = cfg.fft_size // 2
    out = out / np.where(norm > 1e-10, norm, 1.0)
    return out[half:half + length]


def mel_to_linear(mel: np.ndarray, cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    """Non-negative least-squares inversion of the mel filterbank, per frame."""
    fb = mel_filterbank(cfg)
    mag = np.exp(np.asarray(mel, dtype=np.float64))
    # bins at the floor carry no energy
    mag[np.asarray(mel) <= cfg.log_floor_value + 1e-4] = 0.0
    linear = np.zeros((len(mag), fb.shape[1]))
    for t, m in enumerate(mag):
        if m.any():
            linear[t] = nnls(fb, m)[0]
    return linear


def griffin_lim(mel: np.ndarray, cfg: AudioConfig = AudioConfig(), iters: int = 60, seed: int = 0) -> np.ndarray:
    """Render a log-mel spectrogram to ``(T-1)*hop`` samples."""
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[1] != cfg.mel_bins or len(mel) == 0:
        raise ValueError(f"expected (T, {cfg.mel_bins}) mel, got {mel.shape}")
    target = mel_to_linear(mel, cfg)
    length = (len(mel) - 1) * cfg.hop
    if length == 0 or not target.any():
        return np.zeros(length, dtype=np.float32)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    signal = _istft(target * phase, cfg, length)
    for _ in range(iters):
        rebuilt = np.fft.rfft(_frames(signal, cfg) * _window(cfg), axis=-1)[: len(target)]
        if len(rebuilt) < len(target):
            rebuilt = np.pad(rebuilt, ((0, len(target) - len(rebuilt)), (0, 0)))
        phase = np.exp(1j * np.angle(rebuilt))
        signal = _istft(target * phase, cfg, length)
    return signal.astype(np.float32)


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    source: str = "fingerprint"

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if self.vector.shape != (SPEAKER_DIM,):
            raise ValueError(f"speaker embedding must have {SPEAKER_DIM} dims, got {self.vector.shape}")
        norm = float(np.linalg.norm(self.vector.astype(np.float64)))
        if norm == 0:
            raise ValueError("speaker embedding has zero norm")
        if abs(norm - 1.0) > 1e-6:
            self.vector = (self.vector.astype(np.float64) / norm).astype(np.float32)


@lru_cache(maxsize=4)
def _fingerprint_projection(n_in: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n_in, SPEAKER_DIM)) / np.sqrt(n_in)


def fingerprint_features(samples: np.ndarray, cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    """Per-bin mean (relative to the log floor) and std of the log-mel."""
    if len(samples) < cfg.sample_rate // 2:
        raise ValueError(f"speaker audio too short: {len(samples) / cfg.sample_rate:.3f} s < 0.5 s")
    mel = mel_spectrogram(samples, cfg).astype(np.float64) - cfg.log_floor_value
    return np.concatenate([mel.mean(axis=0), mel.std(axis=0)])


def embed_features(features: np.ndarray, seed: int = FINGERPRINT_SEED) -> SpeakerEmbedding:
    proj = _fingerprint_projection(len(features), seed)
    vec = features @ proj
    vec = vec / np.linalg.norm(vec)
    return SpeakerEmbedding(vec.astype(np.float32), source="fingerprint")


def speaker_fingerprint(samples: np.ndarray, cfg: AudioConfig = AudioConfig(),
                        seed: int = FINGERPRINT_SEED) -> SpeakerEmbedding:
    """Deterministic 256-d unit-norm voice fingerprint from mel statistics."""
    return embed_features(fingerprint_features(np.asarray(samples, dtype=np.float64), cfg), seed)


def read_wav(path: str | Path, cfg: AudioConfig = AudioConfig()) -> np.ndarray:
    """Read 16-bit mono PCM at ``cfg.sample_rate`` into floats in [-1, 1)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getframerate() != cfg.sample_rate:
            raise ValueError(f"{path}: sample rate {wf.getframerate()} Hz, expected {cfg.sample_rate} Hz "
                             "(resampling is not supported)")
        raw = wf.readframes(wf.getnframes())
    return (np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0)


def write_wav(path: str | Path, samples: np.ndarray, cfg: AudioConfig = AudioConfig()) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(cfg.sample_rate)
        wf.writeframes(pcm.tobytes())
