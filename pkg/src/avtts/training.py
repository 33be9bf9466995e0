"""Two-stage training.

Stage 1 trains the backbone and the variance predictors with E1 routed to
the predictors. Stage 2 freezes the backbone and trains the prosody-control
block plus the predictors on affect-annotated data.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .dataset import Batch, DataError, FeatureStats, PreparedCorpus, batch_indices, collate
from .model import AffectTTS, ModelConfig, ModelOutput, is_pc_param, is_prosody_param
from .numerics import Adam, AdamState, Tensor, backward, ops

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "L_mel", "L_dur", "L_pitch", "L_energy", "total")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    warmup_steps: int = 4000
    stage1_steps: int = 2000
    stage2_steps: int = 2000
    mel_weight: float = 1.0
    duration_weight: float = 1.0
    pitch_weight: float = 1.0
    energy_weight: float = 1.0
    mel_loss: str = "mae"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    seed: int = 0
    checkpoint_interval: int = 0
    eval_interval: int = 0
    stats_scope: str = "corpus"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise ValueError("step counts must be >= 1")
        if self.mel_loss not in ("mae", "mse"):
            raise ValueError(f"mel_loss must be 'mae' or 'mse', got {self.mel_loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def lr_at(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (step + 1) / self.warmup_steps)


class FreezeViolation(RuntimeError):
    pass


def total_loss(out: ModelOutput, batch: Batch, cfg: TrainConfig = TrainConfig()) -> tuple[Tensor, dict[str, float]]:
    """Unweighted-by-default sum of mel, duration, pitch and energy losses.

    Mel: masked MAE (or MSE) on log-mel. Duration: masked MSE on log(d+1).
    Pitch/energy: masked MSE on standardised frame values.
    """
    frame_mask = out.frame_mask
    if batch.mel is None or batch.mel.shape[:2] != frame_mask.shape:
        raise ValueError(f"target mel {None if batch.mel is None else batch.mel.shape} "
                         f"does not match regulated frames {frame_mask.shape}")
    mel_mask = frame_mask[..., None]
    mel_fn = ops.masked_mae if cfg.mel_loss == "mae" else ops.masked_mse
    l_mel = mel_fn(out.mel, batch.mel, mel_mask)
    log_dur = np.log1p(np.asarray(batch.durations, dtype=out.log_duration.dtype))
    l_dur = ops.masked_mse(out.log_duration, log_dur, batch.mask)
    l_pitch = ops.masked_mse(out.pitch, batch.pitch, frame_mask)
    l_energy = ops.masked_mse(out.energy, batch.energy, frame_mask)
    total = l_mel * cfg.mel_weight + l_dur * cfg.duration_weight + l_pitch * cfg.pitch_weight \
        + l_energy * cfg.energy_weight
    parts = {"L_mel": float(l_mel.data), "L_dur": float(l_dur.data), "L_pitch": float(l_pitch.data),
             "L_energy": float(l_energy.data), "total": float(total.data)}
    return total, parts


def step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    """Counter-based generator so dropout masks depend only on (seed, stage, step)."""
    key = np.array([seed, (stage << 40) + step], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def model_from_checkpoint(ckpt: Checkpoint) -> AffectTTS:
    cfg = ModelConfig.from_dict(ckpt.model_config)
    params = {n: Tensor(a.copy(), requires_grad=True, name=n) for n, a in ckpt.params.items()}
    stats = FeatureStats.from_dict(ckpt.stats) if ckpt.stats else None
    model = AffectTTS(cfg, params)
    if stats is not None:
        model.pitch_range = (stats.pitch_min, stats.pitch_max)
        model.energy_range = (stats.energy_min, stats.energy_max)
    return model


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    model: AffectTTS


class Trainer:
    """One optimisation stage over a prepared corpus."""

    def __init__(self, stage: int, corpus: PreparedCorpus, stats: FeatureStats, config: TrainConfig,
                 model: AffectTTS, optimizer_state: AdamState | None = None, start_step: int = 0):
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        if not corpus.features:
            raise DataError("empty training manifest")
        if stage == 2:
            for f in corpus.features:
                if f.affect is None:
                    raise DataError(f"utterance {f.id} has no arousal/valence annotation (stage 2 needs one)")
        self.stage = stage
        self.corpus = corpus
        self.stats = stats
        self.config = config
        self.model = model
        self.step = start_step
        self.route = "e1" if stage == 1 else "e2"
        if stage == 1:
            trainable = [n for n in model.params if not is_pc_param(n)]
        else:
            trainable = [n for n in model.params if is_prosody_param(n)]
        self.trainable = trainable
        self.optimizer = Adam({n: model.params[n] for n in trainable}, lr=config.lr, beta1=config.beta1,
                              beta2=config.beta2, eps=config.eps, state=optimizer_state)
        self.frozen_snapshot = {n: model.params[n].data.tobytes() for n in model.params if n not in trainable}
        self.lengths = [int(f.durations.sum()) for f in corpus.features]
        self._epoch_cache: tuple[int, list[list[int]]] | None = None

    @property
    def max_steps(self) -> int:
        return self.config.stage1_steps if self.stage == 1 else self.config.stage2_steps

    def batch_for_step(self, step: int) -> Batch:
        n_batches = len(batch_indices(self.lengths, self.config.batch_size, self.config.seed, 0))
        epoch, pos = divmod(step, n_batches)
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            self._epoch_cache = (epoch, batch_indices(self.lengths, self.config.batch_size, self.config.seed, epoch))
        items = [self.corpus.features[i] for i in self._epoch_cache[1][pos]]
        return collate(items, self.corpus.speakers, self.stats, require_affect=self.stage == 2)

    def train_step(self) -> dict:
        batch = self.batch_for_step(self.step)
        rng = step_rng(self.config.seed, self.stage, self.step)
        out = self.model.forward(batch, route=self.route, teacher_force=True, training=True, rng=rng)
        loss, parts = total_loss(out, batch, self.config)
        grads = backward(loss, {n: self.model.params[n] for n in self.trainable})
        self.optimizer.step(grads, lr=self.config.lr_at(self.step))
        self.step += 1
        parts["step"] = self.step
        return parts

    def check_frozen(self) -> None:
        for name, blob in self.frozen_snapshot.items():
            if self.model.params[name].data.tobytes() != blob:
                raise FreezeViolation(f"frozen tensor {name} changed during stage {self.stage}")

    def checkpoint(self) -> Checkpoint:
        self.check_frozen()
        return Checkpoint(
            model_config=self.model.config.to_dict(),
            params={n: p.data.copy() for n, p in self.model.params.items()},
            stage=f"stage{self.stage}", step=self.step, stats=self.stats.to_dict(),
            optimizer=AdamState(lr=self.optimizer.state.lr, beta1=self.optimizer.state.beta1,
                                beta2=self.optimizer.state.beta2, eps=self.optimizer.state.eps,
                                step=self.optimizer.state.step,
                                m={k: v.copy() for k, v in self.optimizer.state.m.items()},
                                v={k: v.copy() for k, v in self.optimizer.state.v.items()}),
            train_config=self.config.to_dict())

    def run(self, until: int | None = None, metrics_path: str | Path | None = None,
            checkpoint_dir: str | Path | None = None, on_step: Callable[[dict], None] | None = None
            ) -> TrainResult:
        until = self.max_steps if until is None else until
        history = []
        writer = None
        fh = None
        if metrics_path is not None:
            new = not Path(metrics_path).exists() or self.step == 0
            fh = open(metrics_path, "w" if self.step == 0 else "a", newline="", encoding="utf-8")
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if new:
                writer.writeheader()
        try:
            while self.step < until:
                parts = self.train_step()
                history.append(parts)
                if writer is not None:
                    writer.writerow({k: parts[k] for k in METRIC_FIELDS})
                if on_step is not None:
                    on_step(parts)
                every = self.config.checkpoint_interval
                if checkpoint_dir is not None and every and self.step % every == 0:
                    save_checkpoint(self.checkpoint(), Path(checkpoint_dir) / f"stage{self.stage}_step{self.step}.ckpt")
        finally:
            if fh is not None:
                fh.close()
        ckpt = self.checkpoint()
        if checkpoint_dir is not None:
            save_checkpoint(ckpt, Path(checkpoint_dir) / f"stage{self.stage}.ckpt")
        return TrainResult(checkpoint=ckpt, history=history, model=self.model)


def train_stage1(corpus: PreparedCorpus, config: TrainConfig, model_config: ModelConfig,
                 stats: FeatureStats | None = None, **run_kwargs) -> TrainResult:
    """Train backbone and predictors from scratch with E1 routing."""
    if not corpus.features:
        raise DataError("empty training manifest")
    stats = stats or FeatureStats.fit(corpus.features, scope=config.stats_scope)
    model = AffectTTS(model_config, seed=config.seed, pitch_range=(stats.pitch_min, stats.pitch_max),
                      energy_range=(stats.energy_min, stats.energy_max))
    return Trainer(1, corpus, stats, config, model).run(**run_kwargs)


def train_stage2(corpus: PreparedCorpus, init: Checkpoint, config: TrainConfig, **run_kwargs) -> TrainResult:
    """Freeze the backbone from ``init`` and train the prosody group with E2 routing."""
    if init.stage != "stage1":
        raise ValueError(f"stage 2 starts from a stage-1 checkpoint, got {init.stage!r}")
    stats = FeatureStats.from_dict(init.stats)
    model = model_from_checkpoint(init)
    return Trainer(2, corpus, stats, config, model).run(**run_kwargs)


def resume(corpus: PreparedCorpus, ckpt: Checkpoint, config: TrainConfig | None = None, **run_kwargs) -> TrainResult:
    """Continue a stage from a mid-run checkpoint (same data order and dropout)."""
    stage = {"stage1": 1, "stage2": 2}.get(ckpt.stage)
    if stage is None:
        raise ValueError(f"unknown stage tag {ckpt.stage!r}")
    config = config or TrainConfig.from_dict(ckpt.train_config)
    model = model_from_checkpoint(ckpt)
    state = ckpt.optimizer
    opt = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps, step=state.step,
                    m={k: v.copy() for k, v in state.m.items()}, v={k: v.copy() for k, v in state.v.items()}) \
        if state is not None else None
    trainer = Trainer(stage, corpus, FeatureStats.from_dict(ckpt.stats), config, model,
                      optimizer_state=opt, start_step=ckpt.step)
    return trainer.run(**run_kwargs)
