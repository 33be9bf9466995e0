"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Updates a fixed set of named parameters in place."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9, state: AdamState | None = None):
        self.params = dict(params)
        self.state = state or AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params.items():
            self.state.m.setdefault(name, np.zeros_like(p.data))
            self.state.v.setdefault(name, np.zeros_like(p.data))
            if self.state.m[name].shape != p.shape or self.state.v[name].shape != p.shape:
                raise ShapeError(f"optimizer moments for {name} have shape "
                                 f"{self.state.m[name].shape}, parameter is {p.shape}")

    def step(self, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        st = self.state
        if st.step < 0:
            raise ValueError(f"negative step counter {st.step}")
        lr = st.lr if lr is None else lr
        st.step += 1
        t = st.step
        dtype = next(iter(self.params.values())).dtype if self.params else np.float32
        c1 = dtype.type(1.0 - st.beta1 ** t)
        c2 = dtype.type(1.0 - st.beta2 ** t)
        b1, b2 = dtype.type(st.beta1), dtype.type(st.beta2)
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
            m = st.m[name]
            v = st.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + dtype.type(st.eps))
            p.data -= dtype.type(lr) * update


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """Functional form: one Adam update of ``params`` in place, advancing ``state``."""
    Adam(params, state=state).step(grads)
    return state
