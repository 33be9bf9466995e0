"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward

# Denominator floor for relative error; gradients smaller than this are
# compared in absolute terms. Central differences of an O(10) float64 loss
# carry ~2 ulp / 2h = 2e-10 of roundoff, so the floor sits well above that.
REL_FLOOR = 1e-5


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(
    fn: Callable[[dict[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare ``backward`` of ``fn`` against 64-bit central differences.

    ``fn`` receives leaf tensors built from ``inputs`` (cast to float64) and
    must return a scalar. At most ``max_entries`` coordinates per input are
    probed, chosen with a seeded generator.
    """
    rng = np.random.default_rng(seed)
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    analytic = backward(fn(leaves), leaves)

    def evaluate(name: str, flat_idx: int, delta: float) -> float:
        probe = {k: Tensor(v.copy()) for k, v in base.items()}
        probe[name].data.reshape(-1)[flat_idx] += delta
        return float(fn(probe).data)

    worst, worst_name, checked = 0.0, "", 0
    for name, value in base.items():
        n = value.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        for i in idx:
            numeric = (evaluate(name, int(i), h) - evaluate(name, int(i), -h)) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            err = float(relative_error(np.asarray(a), np.asarray(numeric)))
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{int(i)}] analytic={a:.6g} numeric={numeric:.6g}"
    return GradCheckResult(worst, worst_name, checked)
