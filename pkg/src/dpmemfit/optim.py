"""Noise injection and parameter updates.

The clipped gradient SUM arrives in Parameter.grad (that is what the
two-pass clipping step leaves behind). dp_noise_and_average turns it into
the noisy mean (G + σ_n·C·z)/B in place; sgd_step / adam_step then apply a
standard update. Noise is drawn per parameter in lexicographic name order
from the run's generator, so a run is reproducible from its seed alone.

σ_n = 0 skips the generator entirely: the private path with zero noise and
an infinite clip bound is the non-private path, same bits, same draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .errors import ConfigError, StateError

OPTIMIZER_KINDS = ("dp-sgd", "dp-adam")


@dataclass
class OptimizerState:
    """Update rule plus per-parameter Adam moments (empty for SGD)."""

    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    t: int = 0
    m: dict[str, E.Tensor] = field(default_factory=dict)
    v: dict[str, E.Tensor] = field(default_factory=dict)

    def release(self) -> None:
        for buf in (*self.m.values(), *self.v.values()):
            buf.release()
        self.m.clear()
        self.v.clear()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_hat": self.eps_hat,
            "steps_applied": self.t,
        }


def init_optimizer(model, kind: str, learning_rate: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps_hat: float = 1e-8) -> OptimizerState:
    if kind not in OPTIMIZER_KINDS:
        raise ConfigError(f"unknown optimizer {kind!r}; choose from {OPTIMIZER_KINDS}")
    if not (learning_rate > 0):
        raise ConfigError(f"learning rate must be positive, got {learning_rate}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ConfigError(f"adam betas must lie in [0, 1), got {beta1}, {beta2}")
    state = OptimizerState(kind=kind, learning_rate=learning_rate,
                           beta1=beta1, beta2=beta2, eps_hat=eps_hat)
    if kind == "dp-adam":
        with E.alloc_category("optimizer_state"):
            for p in model.trainable_parameters():
                state.m[p.name] = E.Tensor(np.zeros(p.shape, dtype=p.tensor.numpy().dtype))
                state.v[p.name] = E.Tensor(np.zeros(p.shape, dtype=p.tensor.numpy().dtype))
    return state


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


def dp_noise_and_average(grad, clip_bound: float, noise_multiplier: float,
                         batch_size: int, rng: np.random.Generator):
    """(G + σ_n·C·z)/B, computed in place on the gradient buffer.

    z is standard Gaussian per element. σ_n = 0 reduces to G/B exactly and
    never touches the generator.
    """
    if noise_multiplier < 0:
        raise ConfigError(f"noise multiplier must be non-negative, got {noise_multiplier}")
    if batch_size < 1:
        raise ConfigError(f"batch size must be positive, got {batch_size}")
    arr = grad.numpy() if isinstance(grad, E.Tensor) else np.asarray(grad)
    if noise_multiplier > 0:
        if not (clip_bound > 0) or math.isinf(clip_bound):
            raise ConfigError(f"noise needs a finite positive clip bound, got {clip_bound}")
        with E.alloc_category("dp_buffers"):
            z = E.Tensor(rng.standard_normal(arr.shape).astype(arr.dtype, copy=False))
        arr += (noise_multiplier * clip_bound) * z.numpy()
        z.release()
    arr /= arr.dtype.type(batch_size)
    return grad


def noise_and_average_grads(model, clip_bound: float, noise_multiplier: float,
                            batch_size: int, rng: np.random.Generator) -> None:
    """Apply dp_noise_and_average to every trainable gradient.

    Parameters are visited in lexicographic name order; this is the
    documented generator-consumption order that makes runs reproducible.
    """
    for p in sorted(model.trainable_parameters(), key=lambda p: p.name):
        if p.grad is None:
            raise StateError(f"trainable parameter {p.name} has no gradient to noise")
        dp_noise_and_average(p.grad, clip_bound, noise_multiplier, batch_size, rng)


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------


def sgd_step(params, state: OptimizerState) -> None:
    if state.kind != "dp-sgd":
        raise ConfigError(f"sgd_step with optimizer kind {state.kind!r}")
    state.t += 1
    for p in sorted(params, key=lambda p: p.name):
        if p.grad is None:
            raise StateError(f"parameter {p.name} has no gradient")
        p.tensor.numpy()[...] -= state.learning_rate * p.grad.numpy()


def adam_step(params, state: OptimizerState) -> None:
    if state.kind != "dp-adam":
        raise ConfigError(f"adam_step with optimizer kind {state.kind!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p in sorted(params, key=lambda p: p.name):
        if p.grad is None:
            raise StateError(f"parameter {p.name} has no gradient")
        g = p.grad.numpy()
        m = state.m[p.name].numpy()
        v = state.v[p.name].numpy()
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        denom = np.sqrt(v / bc2)
        denom += state.eps_hat
        p.tensor.numpy()[...] -= state.learning_rate * (m / bc1) / denom


def optimizer_step(model, state: OptimizerState) -> None:
    """One update over the model's trainable parameters."""
    params = model.trainable_parameters()
    if state.kind == "dp-sgd":
        sgd_step(params, state)
    else:
        adam_step(params, state)
