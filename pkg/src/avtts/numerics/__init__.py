"""Minimal tensor engine: reverse-mode autodiff, seeded init, Adam."""

from . import ops
from .gradcheck import GradCheckResult, check_gradients
from .init import init, name_seed, xavier_bound
from .optim import Adam, AdamState, adam_step
from .tensor import Graph, ShapeError, Tensor, backward

__all__ = [
    "Adam",
    "AdamState",
    "GradCheckResult",
    "Graph",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "check_gradients",
    "init",
    "name_seed",
    "ops",
    "xavier_bound",
]
