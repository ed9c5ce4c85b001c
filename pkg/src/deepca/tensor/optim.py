"""Adam with bias correction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._core import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.0,
              beta2: float = 0.9, eps: float = 1e-8, strict: bool = True) -> bool:
    """One in-place Adam update of ``params`` (numpy arrays).

    Returns False when the update was skipped because a gradient was
    non-finite in lenient mode; raises in strict mode.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        if strict:
            raise FloatingPointError("non-finite gradient passed to adam_step")
        log.warning("non-finite gradient; Adam update skipped at step %d", state.step)
        return False
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p -= (lr * update).astype(p.dtype, copy=False)
    return True


class Adam:
    """Optimizer over a fixed list of parameter tensors.

    Defaults follow common WGAN-GP practice (beta1 = 0, beta2 = 0.9).
    """

    def __init__(self, params, lr: float = 1e-4, betas=(0.0, 0.9), eps: float = 1e-8, strict: bool = True):
        self.params: list[Tensor] = list(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.strict = strict
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        return adam_step([p.data for p in self.params], grads, self.state, self.lr,
                         self.betas[0], self.betas[1], self.eps, strict=self.strict)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, step: int, arrays: dict[str, np.ndarray]) -> None:
        self.state.step = int(step)
        n = len(self.params)
        if arrays:
            self.state.m = [np.array(arrays[f"m.{i}"]) for i in range(n)]
            self.state.v = [np.array(arrays[f"v.{i}"]) for i in range(n)]
        else:
            self.state.m, self.state.v = [], []
