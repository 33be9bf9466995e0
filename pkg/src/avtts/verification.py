"""Executable acceptance checks shared by ``avtts verify`` and the test suite.

Every check returns a :class:`CheckResult`; nothing here raises on a failed
property, so a suite always prints a complete table.
"""

from __future__ import annotations

import dataclasses
import functools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .audio import AudioConfig, extract_f0, griffin_lim, mel_spectrogram, n_frames, speaker_fingerprint
from .checkpoint import from_bytes, to_bytes
from .dataset import (AffectPoint, AlignmentDiscard, Batch, FeatureStats, PreparedCorpus,
                      features_from_synthetic, gen_synthetic_corpus, parse_alignment)
from .model import AffectTTS, ModelConfig, is_pc_param, is_prosody_param, length_regulate
from .numerics import Tensor, check_gradients, ops
from .text import DEFAULT_INVENTORY
from .synthesis import TeacherSignals, synthesize
from .training import TrainConfig, Trainer, resume, total_loss, train_stage1, train_stage2

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  [{self.criterion:2d}] {self.name}: {self.detail} " \
               f"({self.seconds:.1f}s)"


def _timed(criterion: int, name: str):
    def wrap(fn: Callable[[], tuple[bool, str]]):
        @functools.wraps(fn)
        def run() -> CheckResult:
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash is a failure, reported in the table
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
            return CheckResult(criterion, name, bool(ok), detail, time.perf_counter() - t0)
        run.criterion = criterion
        return run
    return wrap


# -- shared tiny setups ----------------------------------------------------

TINY_MODEL = ModelConfig(hidden=8, encoder_layers=1, decoder_layers=1, heads=2, conv_filter=12, conv_kernel=3,
                         predictor_channels=8, buckets=16, mel_bins=80, dropout=0.1, predictor_dropout=0.2)
COMPACT_MODEL = ModelConfig(hidden=64, encoder_layers=1, decoder_layers=1, conv_filter=128, conv_kernel=3,
                            predictor_channels=64)


@functools.lru_cache(maxsize=None)
def synthetic_features(n_utts: int, n_speakers: int, seed: int, affect: bool) -> PreparedCorpus:
    return features_from_synthetic(gen_synthetic_corpus(n_utts, n_speakers, seed, affect=affect))


def strip_affect(corpus: PreparedCorpus) -> PreparedCorpus:
    feats = [dataclasses.replace(f, arousal=None, valence=None) for f in corpus.features]
    return PreparedCorpus(feats, corpus.speakers)


def _random_batch(rng: np.random.Generator, model_cfg: ModelConfig, b: int = 2, max_len: int = 4) -> tuple:
    lengths = rng.integers(2, max_len + 1, size=b)
    width = int(lengths.max())
    ids = np.zeros((b, width), np.int64)
    mask = np.zeros((b, width), np.float32)
    durations = np.zeros((b, width), np.int64)
    for i, n in enumerate(lengths):
        ids[i, :n] = rng.integers(3, model_cfg.n_symbols, size=n)
        mask[i, :n] = 1
        durations[i, :n] = rng.integers(1, 4, size=n)
    frames = int(durations.sum(axis=1).max())
    frame_mask = np.zeros((b, frames), np.float32)
    for i in range(b):
        frame_mask[i, :durations[i].sum()] = 1
    speaker = rng.standard_normal((b, 256))
    speaker /= np.linalg.norm(speaker, axis=1, keepdims=True)
    return Batch(ids=ids, mask=mask, speaker=speaker, arousal=rng.uniform(0, 1, b), valence=rng.uniform(0, 1, b),
                 durations=durations, mel=rng.standard_normal((b, frames, model_cfg.mel_bins)) * frame_mask[..., None],
                 pitch=rng.standard_normal((b, frames)) * frame_mask, energy=rng.standard_normal((b, frames)) * frame_mask,
                 frame_mask=frame_mask)


# -- criterion 1: gradients ------------------------------------------------

def op_gradient_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict]]:
    """One scalar-valued probe per differentiable op."""
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    w = r(2, 3, 4)
    key_mask = np.array([[[1, 1, 1, 0]], [[1, 1, 0, 0]]], dtype=np.float64)
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    positions, valid = np.array([[0, 0, 1, 2], [1, 1, 1, 0]]), np.array([[1, 1, 1, 1], [1, 1, 1, 0]], np.float64)
    mask3 = (rng.uniform(size=(2, 3, 4)) > 0.3).astype(np.float64)
    target = r(2, 3, 4)

    def s(t: Tensor) -> Tensor:  # weighted sum so every output coordinate matters
        return ops.sum(ops.mul(t, np.cos(np.arange(t.data.size, dtype=np.float64)).reshape(t.shape) + 1.5))

    return {
        "add": (lambda p: s(ops.add(p["a"], p["b"])), {"a": r(2, 3, 4), "b": r(3, 1)}),
        "sub": (lambda p: s(ops.sub(p["a"], p["b"])), {"a": r(2, 3), "b": r(3)}),
        "mul": (lambda p: s(ops.mul(p["a"], p["b"])), {"a": r(2, 3, 4), "b": r(1, 4)}),
        "matmul": (lambda p: s(ops.matmul(p["a"], p["b"])), {"a": r(2, 3, 4), "b": r(4, 5)}),
        "linear": (lambda p: s(ops.linear(p["x"], p["w"], p["b"])), {"x": r(2, 3, 4), "w": r(4, 5), "b": r(5)}),
        "reshape": (lambda p: s(ops.reshape(p["x"], (4, 6))), {"x": r(2, 3, 4)}),
        "transpose": (lambda p: s(ops.transpose(p["x"], (2, 0, 1))), {"x": r(2, 3, 4)}),
        "broadcast_to": (lambda p: s(ops.broadcast_to(p["x"], (2, 3, 4))), {"x": r(3, 1)}),
        "index": (lambda p: s(ops.index(p["x"], (slice(None), np.array([0, 2, 2])))), {"x": r(2, 3, 4)}),
        "sum": (lambda p: s(ops.sum(p["x"], axis=1, keepdims=True)), {"x": r(2, 3, 4)}),
        "mean": (lambda p: s(ops.mean(p["x"], axis=(0, 2))), {"x": r(2, 3, 4)}),
        "concat": (lambda p: s(ops.concat([p["a"], p["b"]], axis=-1)), {"a": r(2, 3), "b": r(2, 2)}),
        "exp": (lambda p: s(ops.exp(p["x"])), {"x": r(2, 3)}),
        "relu": (lambda p: s(ops.relu(p["x"])), {"x": r(3, 4) + np.sign(r(3, 4)) * 0.1}),
        "softmax": (lambda p: s(ops.softmax(p["x"], axis=-1)), {"x": r(2, 3, 4)}),
        "layer_norm": (lambda p: s(ops.layer_norm(p["x"], p["g"], p["b"])), {"x": r(2, 3, 4), "g": r(4), "b": r(4)}),
        "embedding": (lambda p: s(ops.embedding(p["t"], ids)), {"t": r(4, 3)}),
        "conv1d": (lambda p: s(ops.conv1d(p["x"], p["w"], p["b"])), {"x": r(2, 5, 3), "w": w, "b": r(4)}),
        "conv1d_k3": (lambda p: s(ops.conv1d(p["x"], p["w"])), {"x": r(2, 5, 2), "w": r(3, 2, 3)}),
        "dropout": (lambda p: s(ops.dropout(p["x"], 0.4, np.random.default_rng(5), True)), {"x": r(3, 4)}),
        "gather_rows": (lambda p: s(ops.gather_rows(p["x"], positions, valid)), {"x": r(2, 3, 4)}),
        "attention": (lambda p: s(ops.attention(p["q"], p["k"], p["v"], key_mask)),
                      {"q": r(2, 4, 3), "k": r(2, 4, 3), "v": r(2, 4, 3)}),
        "masked_mse": (lambda p: ops.masked_mse(p["x"], target, mask3), {"x": r(2, 3, 4)}),
        "masked_mae": (lambda p: ops.masked_mae(p["x"], target, mask3), {"x": r(2, 3, 4)}),
    }


def full_loss_gradient(stage: int, seed: int = 0, max_entries: int = 4):
    """Gradient check of the stage-1 or stage-2 total loss over its trainable tensors."""
    rng = np.random.default_rng([seed, stage])
    cfg = TINY_MODEL
    model = AffectTTS(cfg, seed=seed).astype(np.float64)
    model.pitch_range = model.energy_range = (-2.0, 2.0)
    for name, p in model.params.items():  # move off the identity / zero init so every path is active
        p.data += 0.05 * rng.standard_normal(p.shape)
    batch = _random_batch(rng, cfg)
    route = "e1" if stage == 1 else "e2"
    # keep mel residuals away from the MAE kink so the probe stays on one side of it
    ref = model.forward(batch, route=route, teacher_force=True, training=True, rng=np.random.default_rng(seed))
    resid = batch.mel - ref.mel.data
    batch.mel = batch.mel + np.where(np.abs(resid) < 1e-2, 2e-2 * np.where(resid < 0, -1.0, 1.0), 0.0) \
        * batch.frame_mask[..., None]
    trainable = (lambda n: not is_pc_param(n)) if stage == 1 else is_prosody_param
    names = [n for n in model.params if trainable(n)]
    frozen = {n: p.data for n, p in model.params.items() if n not in names}

    def fn(leaves: dict[str, Tensor]) -> Tensor:
        params = {n: Tensor(a) for n, a in frozen.items()}
        params.update(leaves)
        m = AffectTTS(cfg, params, pitch_range=(-2.0, 2.0), energy_range=(-2.0, 2.0))
        out = m.forward(batch, route=route, teacher_force=True, training=True,
                        rng=np.random.default_rng(seed))
        return total_loss(out, batch)[0]

    return check_gradients(fn, {n: model.params[n].data for n in names}, max_entries=max_entries, seed=seed)


@_timed(1, "gradient correctness")
def check_gradients_all() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst, where = 0.0, ""
    for name, (fn, inputs) in op_gradient_cases(rng).items():
        res = check_gradients(fn, inputs)
        if res.max_rel_error >= worst:
            worst, where = res.max_rel_error, f"{name}: {res.worst}"
    for stage in (1, 2):
        res = full_loss_gradient(stage)
        if res.max_rel_error >= worst:
            worst, where = res.max_rel_error, f"stage{stage} loss: {res.worst}"
    return worst < GRAD_TOL, f"max relative error {worst:.2e} (< {GRAD_TOL:g}); worst at {where}"


# -- criterion 2: AV isolation ---------------------------------------------

def _perturbed_model(cfg: ModelConfig, seed: int) -> AffectTTS:
    model = AffectTTS(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.startswith("prosody."):
            p.data += rng.standard_normal(p.shape).astype(p.dtype)
    return model


@_timed(2, "AV isolation under teacher forcing")
def check_av_isolation() -> tuple[bool, str]:
    cfg = dataclasses.replace(TINY_MODEL, hidden=16, conv_filter=32, predictor_channels=16)
    model = _perturbed_model(cfg, seed=3)
    rng = np.random.default_rng(3)
    ids = rng.integers(3, cfg.n_symbols, size=7)
    durations = rng.integers(0, 5, size=7)
    durations[0] = max(durations[0], 1)
    t = int(durations.sum())
    teacher = TeacherSignals(durations, rng.standard_normal(t), rng.standard_normal(t))
    speaker = rng.standard_normal(256)
    speaker /= np.linalg.norm(speaker)
    outs = [synthesize(model, ids, speaker, AffectPoint(a, a), "e2", teacher) for a in (1, 4, 7)]
    same = all(np.array_equal(o.mel, outs[0].mel) and o.mel.tobytes() == outs[0].mel.tobytes() for o in outs)
    moved = any(not np.array_equal(o.pitch, outs[0].pitch) for o in outs[1:])
    return same and moved, f"mel bit-identical across (1,1),(4,4),(7,7): {same}; predicted pitch responds: {moved}"


# -- criterion 3: freeze contract ------------------------------------------

@_timed(3, "stage-2 freeze contract")
def check_freeze(stage2_steps: int = 500) -> tuple[bool, str]:
    corpus = synthetic_features(16, 2, 11, True)
    tc = TrainConfig(batch_size=8, lr=1e-3, warmup_steps=20, stage1_steps=20, stage2_steps=stage2_steps, seed=1)
    s1 = train_stage1(strip_affect(corpus), tc, COMPACT_MODEL).checkpoint
    s2 = train_stage2(corpus, s1, tc).checkpoint
    backbone = [n for n in s1.params if not is_prosody_param(n)]
    changed = [n for n in backbone if s1.params[n].tobytes() != s2.params[n].tobytes()]
    da = float(np.max(np.abs(s2.params["prosody.arousal"] - s1.params["prosody.arousal"])))
    dv = float(np.max(np.abs(s2.params["prosody.valence"] - s1.params["prosody.valence"])))
    ok = not changed and da > 0 and dv > 0 and s2.step == stage2_steps
    return ok, f"{len(backbone)} backbone tensors, {len(changed)} changed; max|dv_A|={da:.3g}, max|dv_V|={dv:.3g}"


# -- criterion 4: overfit --------------------------------------------------

OVERFIT_STEPS = 1500


@functools.lru_cache(maxsize=1)
def overfit_history() -> tuple[dict, ...]:
    corpus = strip_affect(synthetic_features(8, 2, 0, False))
    tc = TrainConfig(batch_size=8, lr=1e-3, warmup_steps=100, stage1_steps=OVERFIT_STEPS, seed=0)
    return tuple(train_stage1(corpus, tc, COMPACT_MODEL).history)


@_timed(4, "stage-1 overfit on 8 utterances")
def check_overfit() -> tuple[bool, str]:
    hist = overfit_history()
    l10, last = hist[9]["L_mel"], hist[-1]["L_mel"]
    drop = 1 - last / l10
    return drop >= 0.9 and len(hist) <= OVERFIT_STEPS, \
        f"mel loss {l10:.3f} at step 10 -> {last:.3f} at step {len(hist)} ({100 * drop:.1f}% drop, need >= 90%)"


def window_means(values, window: int = 100, upto: int = 1000) -> np.ndarray:
    """Mean loss of consecutive ``window``-step blocks over the first ``upto`` steps."""
    v = np.asarray(values[:upto], dtype=np.float64)
    return v[: len(v) // window * window].reshape(-1, window).mean(axis=1)


# -- criterion 5: affect monotonicity -------------------------------------

@functools.lru_cache(maxsize=1)
def affect_model(seed: int = 7):
    affect = synthetic_features(64, 4, seed, True)
    tc = TrainConfig(batch_size=16, lr=1e-3, warmup_steps=100, stage1_steps=1000, stage2_steps=500, seed=0)
    s1 = train_stage1(strip_affect(affect), tc, COMPACT_MODEL).checkpoint
    return train_stage2(affect, s1, tc), affect


def arousal_sweep(result, corpus: PreparedCorpus, held_seed: int, arousals=(1, 4, 7), valence: float = 4.0):
    held = gen_synthetic_corpus(1, 1, held_seed)[0]
    ids = np.asarray(DEFAULT_INVENTORY.encode(held.phonemes), dtype=np.int64)
    speaker = corpus.speakers[corpus.features[0].speaker]
    rows = []
    for a in arousals:
        out = synthesize(result.model, ids, speaker, AffectPoint(a, valence), "e2")
        rows.append((a, out.pitch_mean, int(out.durations.sum())))
    return rows


@_timed(5, "arousal monotonicity on held-out sentence")
def check_monotonicity() -> tuple[bool, str]:
    result, corpus = affect_model()
    rows = arousal_sweep(result, corpus, held_seed=1007)
    pitch = [r[1] for r in rows]
    frames = [r[2] for r in rows]
    ok = pitch[0] < pitch[1] < pitch[2] and frames[0] > frames[1] > frames[2]
    table = ", ".join(f"a={a}: pitch {p:+.3f} frames {f}" for a, p, f in rows)
    return ok, table


# -- criterion 6: DSP oracles ----------------------------------------------

def _tone(freq: float, seconds: float, cfg: AudioConfig, amp: float = 0.5) -> np.ndarray:
    t = np.arange(int(seconds * cfg.sample_rate)) / cfg.sample_rate
    return amp * np.sin(2 * np.pi * freq * t)


@_timed(6, "DSP oracles")
def check_dsp() -> tuple[bool, str]:
    cfg = AudioConfig()
    worst = 0.0
    for f in np.arange(100.0, 301.0, 10.0):
        f0 = extract_f0(_tone(f, 0.5, cfg), cfg).f0[4:-4]
        worst = max(worst, float(np.max(np.abs(f0 - f)) / max(5.0, 0.02 * f)))
    rng = np.random.default_rng(6)
    lengths = rng.integers(cfg.fft_size // 2 + 1, 3 * cfg.sample_rate, size=100)
    frames_ok = all(mel_spectrogram(np.zeros(n), cfg).shape[0] == n_frames(n, cfg) == 1 + n // cfg.hop
                    for n in lengths)
    tone = _tone(220.0, 1.0, cfg)
    mel = mel_spectrogram(tone, cfg)
    wav = griffin_lim(mel, cfg, iters=60, seed=0)
    spec = np.abs(np.fft.rfft(wav * np.hanning(len(wav))))
    peak = float(np.fft.rfftfreq(len(wav), 1 / cfg.sample_rate)[np.argmax(spec)])
    mel2 = mel_spectrogram(wav, cfg)
    t = min(len(mel), len(mel2))
    r = float(np.corrcoef(mel[:t].ravel(), mel2[:t].ravel())[0, 1])
    ok = worst <= 1.0 and frames_ok and abs(peak - 220) <= 10 and r > 0.9
    return ok, (f"F0 worst error {worst:.3g} of tolerance; frame formula exact on 100 lengths: {frames_ok}; "
                f"Griffin-Lim peak {peak:.1f} Hz, mel r={r:.3f}")


# -- criterion 7: length regulator -----------------------------------------

def length_regulator_laws(durations: np.ndarray, split: int, hidden: np.ndarray) -> tuple[bool, bool, bool]:
    """Frame count, concatenation homomorphism and zero-duration elision for one case."""
    x = Tensor(hidden[None])
    out, mask = length_regulate(x, durations[None])
    count = out.shape[1] == int(durations.sum()) and mask.sum() == durations.sum()
    a, _ = length_regulate(Tensor(hidden[None, :split]), durations[None, :split])
    b, _ = length_regulate(Tensor(hidden[None, split:]), durations[None, split:])
    homo = np.array_equal(np.concatenate([a.data[0], b.data[0]], axis=0), out.data[0])
    keep = durations > 0
    c, _ = length_regulate(Tensor(hidden[None, keep]), durations[None, keep])
    elide = np.array_equal(c.data[0], out.data[0])
    return count, homo, elide


@_timed(7, "length-regulator laws")
def check_length_regulator(cases: int = 1000) -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    bad = []
    for i in range(cases):
        n = int(rng.integers(1, 12))
        d = rng.integers(0, 6, size=n)
        h = rng.standard_normal((n, 3)).astype(np.float32)
        laws = length_regulator_laws(d, int(rng.integers(0, n + 1)), h)
        if not all(laws):
            bad.append((i, laws))
    return not bad, f"{cases} random cases, {len(bad)} violations" + (f"; first {bad[0]}" if bad else "")


# -- criterion 8: alignment ------------------------------------------------

@_timed(8, "alignment ingestion")
def check_alignment(cases: int = 200) -> tuple[bool, str]:
    cfg = AudioConfig()
    lines = ["AA1\t0\t0.1", "B\t0.1\t0.25", "K\t0.25\t0.5"]
    durations = parse_alignment(lines, ["AA1", "B", "K"], cfg)
    example = durations == [9, 13, 21] and sum(durations) == 43
    rng = np.random.default_rng(8)
    symbols = ["AA1", "AE1", "B", "D", "K", "S", "T", "IY0", "OW2", "M"]
    missed = 0
    for _ in range(cases):
        n = int(rng.integers(1, 9))
        transcript = [symbols[i] for i in rng.integers(len(symbols), size=n)]
        bounds = np.cumsum(rng.uniform(0.03, 0.2, n + 1))
        labels = list(transcript)
        labels[int(rng.integers(n))] = str(rng.choice(["ZH", "OY1", "UH2", "NG"]))
        rows = [f"{p}\t{s:.6f}\t{e:.6f}" for p, s, e in zip(labels, bounds[:-1], bounds[1:])]
        try:
            parse_alignment(rows, transcript, cfg)
            missed += 1
        except AlignmentDiscard:
            pass
    return example and missed == 0, f"example -> {durations} (sum {sum(durations)}); " \
                                    f"{cases - missed}/{cases} mismatched transcripts discarded"


# -- criterion 9: determinism and resume -----------------------------------

@_timed(9, "determinism and bit-exact resume")
def check_determinism(steps: int = 30, split: int = 13) -> tuple[bool, str]:
    corpus = strip_affect(synthetic_features(12, 2, 9, False))
    cfg = dataclasses.replace(COMPACT_MODEL, hidden=32, conv_filter=64, predictor_channels=32)
    tc = TrainConfig(batch_size=4, lr=1e-3, warmup_steps=10, stage1_steps=steps, seed=5)
    a = to_bytes(train_stage1(corpus, tc, cfg).checkpoint)
    b = to_bytes(train_stage1(corpus, tc, cfg).checkpoint)
    stats = FeatureStats.fit(corpus.features)
    model = AffectTTS(cfg, seed=tc.seed, pitch_range=(stats.pitch_min, stats.pitch_max),
                      energy_range=(stats.energy_min, stats.energy_max))
    partial = Trainer(1, corpus, stats, tc, model).run(until=split).checkpoint
    resumed = to_bytes(resume(corpus, from_bytes(to_bytes(partial))).checkpoint)
    return a == b and a == resumed, f"same seed identical: {a == b}; resume at {split}/{steps} identical: " \
                                    f"{a == resumed}"


# -- criterion 10: speaker conditioning ------------------------------------

@_timed(10, "speaker conditioning")
def check_speakers() -> tuple[bool, str]:
    cfg = AudioConfig()
    model = AffectTTS(dataclasses.replace(TINY_MODEL, hidden=16, conv_filter=32, predictor_channels=16), seed=10)
    low = speaker_fingerprint(_tone(120.0, 1.0, cfg) + 0.3 * _tone(240.0, 1.0, cfg), cfg)
    high = speaker_fingerprint(_tone(280.0, 1.0, cfg) + 0.1 * _tone(840.0, 1.0, cfg), cfg)
    same = speaker_fingerprint(_tone(120.0, 1.0, cfg) + 0.3 * _tone(240.0, 1.0, cfg), cfg)
    ids = np.array([5, 9, 2, 30, 41])
    teacher = TeacherSignals(np.array([2, 3, 1, 2, 2]), np.zeros(10), np.zeros(10))
    m_low, m_high, m_same = (synthesize(model, ids, s, AffectPoint(4, 4), "e2", teacher).mel
                             for s in (low, high, same))
    diff = float(np.max(np.abs(m_low - m_high)))
    ident = m_low.tobytes() == m_same.tobytes()
    return diff > 1e-4 and ident, f"distinct speakers max|diff|={diff:.3g} (> 1e-4); identical speakers " \
                                  f"bit-identical: {ident}"


SUITES: dict[str, list[Callable[[], CheckResult]]] = {
    "gradients": [check_gradients_all],
    "dsp": [check_dsp, check_alignment],
    "invariants": [check_av_isolation, check_length_regulator, check_speakers, check_determinism],
    "training": [check_freeze, check_overfit, check_monotonicity],
}
SUITES["all"] = sorted((c for name in ("gradients", "dsp", "invariants", "training") for c in SUITES[name]),
                       key=lambda c: c.criterion)


def run_suite(name: str, echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    results = []
    for check in SUITES[name]:
        res = check()
        results.append(res)
        if echo is not None:
            echo(res.line())
    return results
