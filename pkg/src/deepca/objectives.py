"""Conditional WGAN-GP losses and the alternating critic/generator schedule."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Critic, Generator, critic_input
from .tensor import Adam, Tensor, backward, grad, is_grad_enabled, no_grad, ops, set_grad_enabled

LOG_COLUMNS = ("step", "update", "critic_loss", "gen_loss", "w_estimate", "gp", "l1")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_gp: float = 10.0
    lambda_l1: float = 100.0
    critic_iters_per_gen: int = 2

    def validate(self) -> None:
        if not (self.lambda_gp > 0 and self.lambda_l1 > 0 and self.critic_iters_per_gen >= 1):
            raise ValueError(f"loss weights must be positive, got {self}")


@contextlib.contextmanager
def frozen(module):
    """Treat a module's parameters as constants inside the block."""
    params = module.parameters()
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


# ---------------------------------------------------------------- scalar objectives


def critic_objective(e_real, e_fake, gp, weights: LossWeights = LossWeights()):
    """Minimised by the critic: ``E_fake - E_real + lambda_gp * GP``."""
    return e_fake - e_real + weights.lambda_gp * gp


def generator_objective(e_fake, l1, weights: LossWeights = LossWeights()):
    """Minimised by the generator: ``-E_fake + lambda_l1 * l1``."""
    return -e_fake + weights.lambda_l1 * l1


# ---------------------------------------------------------------- terms


def wasserstein_terms(critic, real, fake):
    """(E_real, E_fake): batch means of the critic scores."""
    if real.shape[0] != fake.shape[0]:
        raise ValueError(f"batch sizes differ: {real.shape[0]} vs {fake.shape[0]}")
    return ops.mean(critic(real)), ops.mean(critic(fake))


def draw_eps(rng: np.random.Generator, n: int, dtype=np.float32) -> np.ndarray:
    """One U[0, 1] mixing weight per sample, shaped to broadcast over a 5-d batch."""
    return rng.uniform(0.0, 1.0, size=(n, 1, 1, 1, 1)).astype(dtype)


def interpolate(real, fake, rng: np.random.Generator | None = None, eps=None):
    """``eps * real + (1 - eps) * fake`` with one ``eps`` per sample."""
    if real.shape != fake.shape:
        raise ValueError(f"interpolate: shapes differ {real.shape} vs {fake.shape}")
    real = real if isinstance(real, Tensor) else Tensor(real)
    fake = fake if isinstance(fake, Tensor) else Tensor(fake)
    if eps is None:
        eps = draw_eps(rng, real.shape[0], real.dtype)
    eps = np.broadcast_to(np.asarray(eps, dtype=real.dtype).reshape(-1, *([1] * (real.ndim - 1))),
                          (real.shape[0],) + (1,) * (real.ndim - 1))
    e = Tensor(np.ascontiguousarray(eps))
    return e * real + (1.0 - e) * fake


def gradient_penalty(critic, mixed, channels=None):
    """Batch mean of ``(||d critic / d input||_2 - 1)^2``, one norm per sample.

    ``channels`` restricts the norm to a subset of input channels (e.g.
    ``[0]`` for the prediction channel only); by default all channels count.
    The result stays differentiable with respect to the critic parameters.
    """
    leaf = Tensor(mixed.data if isinstance(mixed, Tensor) else mixed, requires_grad=True)
    outer = is_grad_enabled()
    with set_grad_enabled(True):  # the penalty is itself a gradient, so it needs a tape even under no_grad
        scores = critic(leaf)
        (g,) = grad(ops.sum(scores), [leaf], create_graph=outer)
    if g is None:
        g = Tensor(np.zeros_like(leaf.data))
    if channels is not None:
        g = ops.concat([g[:, c : c + 1] for c in channels], axis=1)
    norms = ops.l2_norm(ops.reshape(g, (g.shape[0], -1)), axis=1)
    return ops.mean((norms - 1.0) ** 2)


def l1_loss(pred, target):
    """Mean absolute error over every voxel and sample."""
    return ops.mean(ops.abs(pred - target))


def critic_loss(critic: Critic, generator: Generator, batch, weights: LossWeights = LossWeights(),
                rng: np.random.Generator | None = None, eps=None, gp_channels=None):
    """Critic-side loss with a detached generator sample. Returns (loss, parts)."""
    x, y = batch
    with no_grad():
        fake = generator(x)
    real_in = critic_input(y, x)
    fake_in = critic_input(fake.detach(), x)
    n = real_in.shape[0]
    scores = critic(ops.concat([real_in, fake_in], axis=0))
    e_real = ops.mean(scores[:n])
    e_fake = ops.mean(scores[n:])
    mixed = interpolate(real_in, fake_in, rng=rng, eps=eps)
    gp = gradient_penalty(critic, mixed, gp_channels)
    loss = critic_objective(e_real, e_fake, gp, weights)
    return loss, {"e_real": e_real.item(), "e_fake": e_fake.item(), "gp": gp.item()}


def generator_loss(critic: Critic, generator: Generator, batch, weights: LossWeights = LossWeights()):
    """Generator-side loss with the critic frozen. Returns (loss, parts)."""
    x, y = batch
    fake = generator(x)
    with frozen(critic):
        e_fake = ops.mean(critic(critic_input(fake, x)))
    l1 = l1_loss(fake, y)
    loss = generator_objective(e_fake, l1, weights)
    return loss, {"e_fake": e_fake.item(), "l1": l1.item()}


# ---------------------------------------------------------------- schedule


@dataclass
class TrainState:
    generator: Generator
    critic: Critic
    gen_opt: Adam
    critic_opt: Adam
    rng: np.random.Generator
    step: int = 0
    critic_updates: int = 0
    generator_updates: int = 0
    gp_channels: list | None = None
    rows: list = field(default_factory=list)

    @classmethod
    def create(cls, generator, critic, rng, lr: float = 1e-4, betas=(0.0, 0.9), gp_channels=None):
        return cls(generator, critic, Adam(generator.parameters(), lr, betas), Adam(critic.parameters(), lr, betas),
                   rng, gp_channels=gp_channels)


def _check_finite(name: str, value: float, step: int) -> None:
    if not math.isfinite(value):
        raise NonFiniteLoss(f"non-finite {name} ({value}) at step {step}; update aborted")


def _as_tensor(a):
    return a if isinstance(a, Tensor) else Tensor(a)


def train_step(state: TrainState, batch, weights: LossWeights = LossWeights()) -> dict:
    """``critic_iters_per_gen`` critic updates (fresh eps each), then one generator update.

    Appends one log row per update to ``state.rows`` and returns the step
    summary.  A non-finite loss raises before the optimizer touches weights.
    """
    weights.validate()
    x, y = (_as_tensor(a) for a in batch)
    if x.shape[0] == 0:
        raise ValueError("train_step: empty batch")
    state.step += 1
    summary = {}
    for _ in range(weights.critic_iters_per_gen):
        state.critic_opt.zero_grad()
        loss, parts = critic_loss(state.critic, state.generator, (x, y), weights, rng=state.rng,
                                  gp_channels=state.gp_channels)
        _check_finite("critic_loss", loss.item(), state.step)
        backward(loss, state.critic.parameters())
        state.critic_opt.step()
        state.critic_updates += 1
        w = parts["e_real"] - parts["e_fake"]
        state.rows.append({"step": state.step, "update": "critic", "critic_loss": loss.item(), "gen_loss": "",
                           "w_estimate": w, "gp": parts["gp"], "l1": ""})
        summary.update(critic_loss=loss.item(), w_estimate=w, gp=parts["gp"])

    state.gen_opt.zero_grad()
    loss, parts = generator_loss(state.critic, state.generator, (x, y), weights)
    _check_finite("generator_loss", loss.item(), state.step)
    backward(loss, state.generator.parameters())
    state.gen_opt.step()
    state.generator_updates += 1
    state.rows.append({"step": state.step, "update": "generator", "critic_loss": "", "gen_loss": loss.item(),
                       "w_estimate": "", "gp": "", "l1": parts["l1"]})
    summary.update(generator_loss=loss.item(), l1=parts["l1"])
    return summary
