"""L-infinity gradient attackers: PGD, I-FGSM and GD (PGD without the ball projection)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import TRAIN, Model

PGD = "PGD"
IFGSM = "IFGSM"
GD = "GD"
KINDS = (PGD, IFGSM, GD)

LossFn = Callable[[Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class AttackSpec:
    """Attacker configuration; ``epsilon`` and ``alpha`` are in [0, 1] pixel units."""

    kind: str = PGD
    epsilon: float = 4 / 255
    alpha: float = 1 / 255
    steps: int = 5
    random_init: bool = True
    clip_lo: float = 0.0
    clip_hi: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.clip_lo > self.clip_hi:
            raise ValueError("clip_lo must not exceed clip_hi")
        if self.kind == PGD and not self.random_init:
            raise ValueError("PGD uses random initialization; use IFGSM for a deterministic start")
        if self.kind == IFGSM and self.random_init:
            raise ValueError("IFGSM starts from the clean input (random_init=False)")


def eps255(value: float) -> float:
    return value / 255.0


def default_spec(epsilon_255: int) -> AttackSpec:
    """PGD with alpha=1/255 and ``epsilon+1`` steps (a single step when epsilon is 1)."""
    if epsilon_255 < 0:
        raise ValueError("epsilon must be non-negative")
    if epsilon_255 > 16:
        raise ValueError("epsilon_255 above 16 is outside the supported sweep range")
    steps = 1 if epsilon_255 == 1 else epsilon_255 + 1
    return AttackSpec(PGD, epsilon_255 / 255.0, 1 / 255.0, steps, True)


def spec_for(kind: str, epsilon_255: int) -> AttackSpec:
    """``default_spec`` hyper-parameters with a different attacker kind."""
    base = default_spec(epsilon_255)
    return AttackSpec(kind, base.epsilon, base.alpha, base.steps, kind != IFGSM)


def _ce(logits: Tensor, y: np.ndarray) -> Tensor:
    return ad.softmax_cross_entropy(logits, y)


def input_gradient(model: Model, x, y, route: int = 0, loss_fn: Optional[LossFn] = None) -> np.ndarray:
    """Gradient of the loss w.r.t. the input through a train-mode forward on ``route``.

    BN layers use batch statistics but their running statistics are left alone,
    and no parameter receives a gradient.
    """
    loss_fn = loss_fn or _ce
    xt = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    with model.frozen_stats(), model.frozen_params():
        with ad.Tape() as tape:
            loss = loss_fn(model.forward(xt, route, TRAIN), np.asarray(y))
        if loss._tape is None:
            return np.zeros(xt.shape)
        grads = tape.backward(loss)
    return grads.get(xt.node_id, np.zeros(xt.shape))


def attack(model: Model, x, y, spec: AttackSpec, route: int = 0,
           rng: Optional[np.random.Generator] = None, loss_fn: Optional[LossFn] = None) -> np.ndarray:
    """Return adversarial inputs for ``x``; the model is left bit-identical."""
    x0 = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x0.size and (x0.min() < spec.clip_lo or x0.max() > spec.clip_hi):
        raise ValueError(f"input outside clip range [{spec.clip_lo}, {spec.clip_hi}]")
    model.check_route(route)
    eps = spec.epsilon
    if spec.random_init:
        if rng is None:
            raise ValueError("random_init attacks need an explicit rng")
        noise = rng.uniform(-eps, eps, size=x0.shape) if eps > 0 else 0.0
        xa = np.clip(x0 + noise, spec.clip_lo, spec.clip_hi)
    else:
        xa = x0.copy()
    project = spec.kind != GD
    lo, hi = x0 - eps, x0 + eps
    for _ in range(spec.steps):
        g = input_gradient(model, xa, y, route, loss_fn)
        xa = np.clip(xa + spec.alpha * np.sign(g), spec.clip_lo, spec.clip_hi)
        if project:
            xa = np.minimum(np.maximum(xa, lo), hi)
    return xa
