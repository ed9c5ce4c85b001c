"""Minimal reverse-mode tensor engine with double backward for the critic's op set."""
from ._core import (
    ComputationGraph,
    Function,
    Tensor,
    backward,
    backward_as_graph,
    default_dtype,
    get_default_dtype,
    grad,
    is_grad_enabled,
    leaves,
    no_grad,
    set_default_dtype,
    set_grad_enabled,
    strict_mode,
)
from . import functional, ops
from .io import load_tensors, save_tensors
from .module import Module, kaiming_uniform
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "ComputationGraph",
    "Function",
    "Module",
    "Tensor",
    "adam_step",
    "backward",
    "backward_as_graph",
    "default_dtype",
    "functional",
    "get_default_dtype",
    "grad",
    "is_grad_enabled",
    "kaiming_uniform",
    "leaves",
    "load_tensors",
    "no_grad",
    "ops",
    "save_tensors",
    "set_default_dtype",
    "set_grad_enabled",
    "strict_mode",
]
