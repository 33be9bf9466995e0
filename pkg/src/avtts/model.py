"""Multi-speaker FastSpeech2-style acoustic model with a prosody-control block.

Data flow for one utterance::

    phoneme ids ─ embed ─┐
    speaker embedding ───┴─ [spk, ph_1..ph_L] ─ encoder ─ drop slot ─ E1
    E1, (arousal, valence) ─ prosody control ─ E2
    E2 ─ duration predictor ─ durations
    E1, E2 ─ length regulator (same durations) ─ E1', E2'
    E2' ─ pitch / energy predictors
    E1' + pitch embedding + energy embedding ─ decoder ─ mel

Stage-1 routing feeds E1 to all three predictors and leaves the prosody
control block unused.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from typing import Mapping

import numpy as np

from .audio import SPEAKER_DIM
from .dataset import Batch
from .numerics import Tensor, init, name_seed, ops
from .text import DEFAULT_INVENTORY

PC_PREFIX = "prosody."
PREDICTORS = ("duration_predictor", "pitch_predictor", "energy_predictor")


@dataclass(frozen=True)
class ModelConfig:
    n_symbols: int = len(DEFAULT_INVENTORY)
    hidden: int = 256
    encoder_layers: int = 4
    decoder_layers: int = 4
    heads: int = 2
    conv_filter: int = 1024
    conv_kernel: int = 9
    dropout: float = 0.2
    predictor_channels: int = 256
    predictor_kernel: int = 3
    predictor_dropout: float = 0.5
    buckets: int = 256
    max_phonemes: int = 256
    mel_bins: int = 80
    speaker_dim: int = SPEAKER_DIM
    condition_init: str = "identity"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.buckets < 2:
            raise ValueError("need at least 2 pitch/energy buckets")
        if self.condition_init not in ("identity", "xavier"):
            raise ValueError(f"unknown condition_init {self.condition_init!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def is_prosody_param(name: str) -> bool:
    """Prosody group: the PC block and the three variance predictors."""
    return name.startswith(PC_PREFIX) or name.split(".", 1)[0] in PREDICTORS


def is_pc_param(name: str) -> bool:
    return name.startswith(PC_PREFIX)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, init scheme), in a fixed order."""
    h, f, k = cfg.hidden, cfg.conv_filter, cfg.conv_kernel
    shapes: dict[str, tuple[tuple[int, ...], str]] = {
        "phoneme_embedding": ((cfg.n_symbols, h), "embedding_normal"),
        "speaker_proj.weight": ((cfg.speaker_dim, h), "xavier_uniform"),
        "speaker_proj.bias": ((h,), "zeros"),
    }

    def block(prefix: str):
        for name in ("q", "k", "v", "o"):
            shapes[f"{prefix}.attn.{name}.weight"] = ((h, h), "xavier_uniform")
            shapes[f"{prefix}.attn.{name}.bias"] = ((h,), "zeros")
        shapes[f"{prefix}.ln1.gain"] = ((h,), "ones")
        shapes[f"{prefix}.ln1.bias"] = ((h,), "zeros")
        shapes[f"{prefix}.conv1.weight"] = ((k, h, f), "xavier_uniform")
        shapes[f"{prefix}.conv1.bias"] = ((f,), "zeros")
        shapes[f"{prefix}.conv2.weight"] = ((1, f, h), "xavier_uniform")
        shapes[f"{prefix}.conv2.bias"] = ((h,), "zeros")
        shapes[f"{prefix}.ln2.gain"] = ((h,), "ones")
        shapes[f"{prefix}.ln2.bias"] = ((h,), "zeros")

    for i in range(cfg.encoder_layers):
        block(f"encoder.{i}")
    shapes["pitch_embedding"] = ((cfg.buckets, h), "embedding_normal")
    shapes["energy_embedding"] = ((cfg.buckets, h), "embedding_normal")
    for i in range(cfg.decoder_layers):
        block(f"decoder.{i}")
    shapes["mel_proj.weight"] = ((h, cfg.mel_bins), "xavier_uniform")
    shapes["mel_proj.bias"] = ((cfg.mel_bins,), "zeros")

    shapes["prosody.arousal"] = ((h,), "vector")
    shapes["prosody.valence"] = ((h,), "vector")
    shapes["prosody.condition.weight"] = ((2 * h, h), "condition")
    shapes["prosody.condition.bias"] = ((h,), "zeros")
    c, pk = cfg.predictor_channels, cfg.predictor_kernel
    for p in PREDICTORS:
        shapes[f"{p}.conv1.weight"] = ((pk, h, c), "xavier_uniform")
        shapes[f"{p}.conv1.bias"] = ((c,), "zeros")
        shapes[f"{p}.ln1.gain"] = ((c,), "ones")
        shapes[f"{p}.ln1.bias"] = ((c,), "zeros")
        shapes[f"{p}.conv2.weight"] = ((pk, c, c), "xavier_uniform")
        shapes[f"{p}.conv2.bias"] = ((c,), "zeros")
        shapes[f"{p}.ln2.gain"] = ((c,), "ones")
        shapes[f"{p}.ln2.bias"] = ((c,), "zeros")
        shapes[f"{p}.out.weight"] = ((c, 1), "xavier_uniform")
        shapes[f"{p}.out.bias"] = ((1,), "zeros")
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    params = {}
    for name, (shape, scheme) in param_shapes(cfg).items():
        s = name_seed(seed, name)
        if scheme == "vector":
            data = init((1, shape[0]), "embedding_normal", s)[0]
        elif scheme == "condition":
            h = shape[1]
            right = init((h, h), "xavier_uniform", s)
            if cfg.condition_init == "identity":
                left = np.eye(h, dtype=np.float32)
            else:
                left = init((h, h), "xavier_uniform", name_seed(seed, name + ".left"))
            data = np.concatenate([left, right], axis=0)
        else:
            data = init(shape, scheme, s)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@lru_cache(maxsize=32)
def _positions(length: int, hidden: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.power(10000.0, -np.arange(0, hidden, 2) / hidden)
    table = np.zeros((length, hidden))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: hidden // 2])
    return table


def sinusoid_table(length: int, hidden: int, dtype=np.float32) -> np.ndarray:
    return _positions(length, hidden).astype(dtype)


def regulate_indices(durations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Source positions and validity for repeating row ``i`` ``durations[i]`` times."""
    durations = np.asarray(durations)
    if durations.ndim == 1:
        durations = durations[None]
    if (durations < 0).any():
        raise ValueError("negative duration")
    totals = durations.sum(axis=1)
    frames = int(totals.max()) if len(totals) else 0
    positions = np.zeros((len(durations), frames), dtype=np.int64)
    valid = np.zeros((len(durations), frames), dtype=np.float32)
    for b, row in enumerate(durations):
        rep = np.repeat(np.arange(len(row)), row.astype(np.int64))
        positions[b, :len(rep)] = rep
        valid[b, :len(rep)] = 1.0
    return positions, valid


def length_regulate(hidden: Tensor, durations: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Repeat each phoneme state ``d_i`` times; returns frames and frame mask."""
    durations = np.asarray(durations)
    if durations.shape != hidden.shape[:2]:
        raise ValueError(f"durations {durations.shape} do not match hidden states {hidden.shape[:2]}")
    positions, valid = regulate_indices(durations)
    return ops.gather_rows(hidden, positions, valid), valid


def durations_from_log(log_durations: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``max(0, round(exp(p) - 1))`` per real phoneme; an all-zero row gets one
    frame on its largest prediction."""
    p = np.asarray(log_durations, dtype=np.float64)
    mask = np.asarray(mask) > 0
    d = np.maximum(0, np.floor(np.exp(p) - 1.0 + 0.5)).astype(np.int64) * mask
    for b in range(len(d)):
        if mask[b].any() and d[b].sum() == 0:
            d[b, np.argmax(np.where(mask[b], p[b], -np.inf))] = 1
    return d


def bucketize(values: np.ndarray, lo: float, hi: float, n: int) -> np.ndarray:
    """``floor((x - lo) / (hi - lo) * (n - 1))`` clipped to ``[0, n-1]``."""
    scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) * (n - 1)
    return np.clip(np.floor(scaled), 0, n - 1).astype(np.int64)


@dataclass
class ModelOutput:
    mel: Tensor
    log_duration: Tensor
    pitch: Tensor
    energy: Tensor
    durations: np.ndarray
    frame_mask: np.ndarray
    e1: Tensor
    predictor_input: Tensor


class AffectTTS:
    """The acoustic model; parameters live in ``self.params`` (name -> Tensor)."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor] | None = None, seed: int = 0,
                 pitch_range: tuple[float, float] = (-3.0, 3.0),
                 energy_range: tuple[float, float] = (-3.0, 3.0)):
        self.config = config
        self.params = dict(params) if params is not None else init_params(config, seed)
        missing = set(param_shapes(config)) - set(self.params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)[:5]}")
        self.pitch_range = pitch_range
        self.energy_range = energy_range

    @property
    def dtype(self):
        return self.params["phoneme_embedding"].dtype

    def astype(self, dtype) -> "AffectTTS":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return AffectTTS(self.config, params, pitch_range=self.pitch_range, energy_range=self.energy_range)

    def groups(self) -> dict[str, list[str]]:
        names = list(self.params)
        return {"backbone": [n for n in names if not is_prosody_param(n)],
                "prosody": [n for n in names if is_prosody_param(n)]}

    # -- building blocks ---------------------------------------------------
    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _attention(self, x: Tensor, mask: np.ndarray, prefix: str) -> Tensor:
        b, s, h = x.shape
        heads = self.config.heads
        depth = h // heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, s, heads, depth).transpose(0, 2, 1, 3)

        q = split(ops.linear(x, self._p(f"{prefix}.q.weight"), self._p(f"{prefix}.q.bias")))
        k = split(ops.linear(x, self._p(f"{prefix}.k.weight"), self._p(f"{prefix}.k.bias")))
        v = split(ops.linear(x, self._p(f"{prefix}.v.weight"), self._p(f"{prefix}.v.bias")))
        ctx = ops.attention(q, k, v, mask[:, None, None, :])
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, s, h)
        return ops.linear(ctx, self._p(f"{prefix}.o.weight"), self._p(f"{prefix}.o.bias"))

    def _fft_block(self, x: Tensor, mask: np.ndarray, prefix: str, rng, training: bool) -> Tensor:
        m = mask[..., None].astype(x.dtype)
        rate = self.config.dropout
        a = ops.dropout(self._attention(x, mask, f"{prefix}.attn"), rate, rng, training)
        x = ops.layer_norm(x + a, self._p(f"{prefix}.ln1.gain"), self._p(f"{prefix}.ln1.bias")) * m
        hdn = ops.relu(ops.conv1d(x, self._p(f"{prefix}.conv1.weight"), self._p(f"{prefix}.conv1.bias")))
        hdn = ops.dropout(hdn, rate, rng, training) * m
        hdn = ops.conv1d(hdn, self._p(f"{prefix}.conv2.weight"), self._p(f"{prefix}.conv2.bias"))
        hdn = ops.dropout(hdn, rate, rng, training)
        return ops.layer_norm(x + hdn, self._p(f"{prefix}.ln2.gain"), self._p(f"{prefix}.ln2.bias")) * m

    def _variance_predictor(self, x: Tensor, mask: np.ndarray, prefix: str, rng, training: bool) -> Tensor:
        m = mask[..., None].astype(x.dtype)
        rate = self.config.predictor_dropout
        hdn = x * m
        for i in (1, 2):
            hdn = ops.relu(ops.conv1d(hdn, self._p(f"{prefix}.conv{i}.weight"), self._p(f"{prefix}.conv{i}.bias")))
            hdn = ops.layer_norm(hdn, self._p(f"{prefix}.ln{i}.gain"), self._p(f"{prefix}.ln{i}.bias"))
            hdn = ops.dropout(hdn, rate, rng, training) * m
        out = ops.linear(hdn, self._p(f"{prefix}.out.weight"), self._p(f"{prefix}.out.bias"))
        return out.reshape(*x.shape[:2]) * mask.astype(x.dtype)

    # -- documented operations ---------------------------------------------
    def embed_phonemes(self, ids: np.ndarray) -> Tensor:
        return ops.embedding(self._p("phoneme_embedding"), ids)

    def prepend_speaker(self, phoneme_embeddings: Tensor, speaker: np.ndarray, mask: np.ndarray
                        ) -> tuple[Tensor, np.ndarray]:
        """Put the projected speaker embedding at sequence position 0."""
        speaker = np.asarray(speaker)
        if speaker.ndim != 2 or speaker.shape[1] != self.config.speaker_dim:
            raise ValueError(f"speaker embedding must be (batch, {self.config.speaker_dim}), got {speaker.shape}")
        slot = ops.linear(Tensor(speaker.astype(self.dtype)), self._p("speaker_proj.weight"),
                          self._p("speaker_proj.bias"))
        b, _, h = phoneme_embeddings.shape
        seq = ops.concat([slot.reshape(b, 1, h), phoneme_embeddings], axis=1)
        ext_mask = np.concatenate([np.ones((b, 1), dtype=np.float32), np.asarray(mask, dtype=np.float32)], axis=1)
        return seq, ext_mask

    def encode(self, ids: np.ndarray, mask: np.ndarray, speaker: np.ndarray, rng=None, training: bool = False
               ) -> Tensor:
        """E1: (B, L, H) encoder states with the speaker slot removed."""
        ids = np.asarray(ids)
        if ids.shape[1] + 1 > self.config.max_phonemes:
            raise ValueError(f"{ids.shape[1]} phonemes (+1 speaker slot) exceed max_phonemes "
                             f"{self.config.max_phonemes}")
        seq, ext_mask = self.prepend_speaker(self.embed_phonemes(ids), speaker, mask)
        x = (seq + sinusoid_table(seq.shape[1], self.config.hidden, self.dtype)) * ext_mask[..., None].astype(self.dtype)
        for i in range(self.config.encoder_layers):
            x = self._fft_block(x, ext_mask, f"encoder.{i}", rng, training)
        return x[:, 1:, :]

    def affect_vector(self, arousal_norm: np.ndarray, valence_norm: np.ndarray) -> Tensor:
        """e = a * v_A + v * v_V for normalised arousal/valence; (B, H)."""
        a = np.asarray(arousal_norm, dtype=self.dtype).reshape(-1, 1)
        v = np.asarray(valence_norm, dtype=self.dtype).reshape(-1, 1)
        va = self._p("prosody.arousal").reshape(1, -1)
        vv = self._p("prosody.valence").reshape(1, -1)
        return va * a + vv * v

    def condition(self, e1: Tensor, emotion: Tensor) -> Tensor:
        """E2 = [E1_i, e] W + b at every position."""
        b, length, h = e1.shape
        tiled = ops.broadcast_to(emotion.reshape(b, 1, h), (b, length, h))
        joined = ops.concat([e1, tiled], axis=-1)
        return ops.linear(joined, self._p("prosody.condition.weight"), self._p("prosody.condition.bias"))

    def predict_duration(self, x: Tensor, mask: np.ndarray, rng=None, training: bool = False) -> Tensor:
        """Log-domain durations, (B, L); zero on padding."""
        return self._variance_predictor(x, mask, "duration_predictor", rng, training)

    def predict_pitch(self, frames: Tensor, frame_mask: np.ndarray, rng=None, training: bool = False) -> Tensor:
        return self._variance_predictor(frames, frame_mask, "pitch_predictor", rng, training)

    def predict_energy(self, frames: Tensor, frame_mask: np.ndarray, rng=None, training: bool = False) -> Tensor:
        return self._variance_predictor(frames, frame_mask, "energy_predictor", rng, training)

    def pitch_bins(self, pitch: np.ndarray) -> np.ndarray:
        return bucketize(pitch, *self.pitch_range, self.config.buckets)

    def energy_bins(self, energy: np.ndarray) -> np.ndarray:
        return bucketize(energy, *self.energy_range, self.config.buckets)

    def add_variances(self, frames: Tensor, pitch: np.ndarray, energy: np.ndarray, frame_mask: np.ndarray) -> Tensor:
        """Add bucketed pitch and energy embeddings to regulated E1."""
        pitch, energy = np.asarray(pitch), np.asarray(energy)
        if pitch.shape != frames.shape[:2] or energy.shape != frames.shape[:2]:
            raise ValueError(f"pitch {pitch.shape} / energy {energy.shape} do not match frames {frames.shape[:2]}")
        out = frames + ops.embedding(self._p("pitch_embedding"), self.pitch_bins(pitch)) \
            + ops.embedding(self._p("energy_embedding"), self.energy_bins(energy))
        return out * np.asarray(frame_mask, dtype=self.dtype)[..., None]

    def decode(self, x: Tensor, frame_mask: np.ndarray, rng=None, training: bool = False) -> Tensor:
        """(B, T, mel_bins) log-mel from decoder input."""
        if x.shape[1] == 0:
            raise ValueError("cannot decode zero frames")
        m = np.asarray(frame_mask, dtype=self.dtype)
        x = (x + sinusoid_table(x.shape[1], self.config.hidden, self.dtype)) * m[..., None]
        for i in range(self.config.decoder_layers):
            x = self._fft_block(x, frame_mask, f"decoder.{i}", rng, training)
        return ops.linear(x, self._p("mel_proj.weight"), self._p("mel_proj.bias")) * m[..., None]

    def forward(self, batch: Batch, route: str = "e2", teacher_force: bool = True, training: bool = False,
                rng: np.random.Generator | None = None) -> ModelOutput:
        """Run the full model.

        ``route="e1"`` is stage-1 routing (predictors read E1, no affect);
        ``route="e2"`` feeds the prosody-conditioned E2 to the predictors.
        With ``teacher_force`` the ground-truth durations regulate lengths and
        ground-truth pitch/energy feed the decoder; predictions are still
        returned for the losses.
        """
        if route not in ("e1", "e2"):
            raise ValueError(f"unknown route {route!r}")
        mask = batch.mask
        e1 = self.encode(batch.ids, mask, batch.speaker, rng, training)
        if route == "e2":
            pred_in = self.condition(e1, self.affect_vector(batch.arousal, batch.valence))
        else:
            pred_in = e1
        log_dur = self.predict_duration(pred_in, mask, rng, training)
        if teacher_force:
            if batch.durations is None:
                raise ValueError("teacher forcing needs ground-truth durations")
            durations = np.asarray(batch.durations) * (mask > 0)
        else:
            durations = durations_from_log(log_dur.data, mask)
        frames_e1, frame_mask = length_regulate(e1, durations)
        frames_pred = frames_e1 if route == "e1" else length_regulate(pred_in, durations)[0]
        pitch = self.predict_pitch(frames_pred, frame_mask, rng, training)
        energy = self.predict_energy(frames_pred, frame_mask, rng, training)
        if teacher_force:
            pitch_in, energy_in = batch.pitch, batch.energy
            if pitch_in is None or energy_in is None or pitch_in.shape != frame_mask.shape:
                raise ValueError("teacher forcing needs pitch/energy aligned with the durations")
        else:
            pitch_in, energy_in = pitch.data, energy.data
        dec_in = self.add_variances(frames_e1, pitch_in, energy_in, frame_mask)
        mel = self.decode(dec_in, frame_mask, rng, training)
        return ModelOutput(mel=mel, log_duration=log_dur, pitch=pitch, energy=energy, durations=durations,
                           frame_mask=frame_mask, e1=e1, predictor_input=pred_in)
