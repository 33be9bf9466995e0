"""Deterministic parameter initialisation."""

from __future__ import annotations

import zlib

import numpy as np

SCHEMES = ("xavier_uniform", "zeros", "ones", "embedding_normal")


def xavier_bound(shape: tuple[int, ...]) -> float:
    """Glorot bound; conv kernels (K, in, out) count the receptive field in both fans."""
    if len(shape) < 2:
        raise ValueError(f"xavier init needs at least 2 axes, got {shape}")
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in = shape[-2] * receptive
    fan_out = shape[-1] * receptive
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init(shape, scheme: str, seed: int, dtype=np.float32) -> np.ndarray:
    shape = tuple(int(n) for n in shape)
    if any(n <= 0 for n in shape):
        raise ValueError(f"invalid shape {shape}")
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "ones":
        return np.ones(shape, dtype=dtype)
    rng = np.random.default_rng(seed)
    if scheme == "xavier_uniform":
        bound = xavier_bound(shape)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    if scheme == "embedding_normal":
        # std 1/sqrt(H), H = embedding width
        return (rng.standard_normal(shape) / np.sqrt(shape[-1])).astype(dtype)
    raise ValueError(f"unknown init scheme {scheme!r}; expected one of {SCHEMES}")


def name_seed(seed: int, name: str) -> int:
    """Stable per-parameter seed so adding a tensor never shifts the others."""
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) % (2**63)
