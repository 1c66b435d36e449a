"""RMSProp (TF-style, momentum on the scaled step) and SGD with momentum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np

RMSPROP = "rmsprop"
SGD_MOMENTUM = "sgd_momentum"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = RMSPROP
    learning_rate: float = 1e-3
    decay: float = 0.9
    momentum: float = 0.9
    epsilon: float = 1e-8
    weight_decay: float = 1e-5
    lr_decay: float = 0.97
    lr_decay_epochs: float = 1.0

    def __post_init__(self):
        if self.kind not in (RMSPROP, SGD_MOMENTUM):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1 or not 0 <= self.decay < 1:
            raise ValueError("momentum and decay must lie in [0, 1)")
        if self.lr_decay_epochs <= 0:
            raise ValueError("lr_decay_epochs must be positive")

    def lr_at(self, epoch: int) -> float:
        """Staircase exponential decay: ``lr * lr_decay ** floor(epoch / lr_decay_epochs)``."""
        return self.learning_rate * self.lr_decay ** int(np.floor(epoch / self.lr_decay_epochs))


def optimizer_update(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                     state: Dict[str, Dict[str, np.ndarray]], cfg: OptimizerConfig,
                     lr: Optional[float] = None, no_decay: Iterable[str] = ()) -> None:
    """Update ``params`` in place from ``grads``; names missing from ``grads`` are skipped.

    RMSProp: ``s = decay*s + (1-decay)*g^2``, ``m = momentum*m + lr*g/sqrt(s+eps)``, ``p -= m``.
    SGD: ``m = momentum*m + g``, ``p -= lr*m``.  Weight decay adds ``wd*p`` to ``g``
    except for names in ``no_decay``.
    """
    lr = cfg.learning_rate if lr is None else lr
    skip = set(no_decay)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if cfg.weight_decay and name not in skip:
            g = g + cfg.weight_decay * p
        st = state.get(name)
        if st is None:
            st = state[name] = {"m": np.zeros_like(p)}
            if cfg.kind == RMSPROP:
                st["s"] = np.zeros_like(p)
        if cfg.kind == RMSPROP:
            st["s"] = cfg.decay * st["s"] + (1.0 - cfg.decay) * g * g
            st["m"] = cfg.momentum * st["m"] + lr * g / np.sqrt(st["s"] + cfg.epsilon)
            p -= st["m"]
        else:
            st["m"] = cfg.momentum * st["m"] + g
            p -= lr * st["m"]


class Optimizer:
    """Binds an :class:`OptimizerConfig` to a model's named parameters."""

    def __init__(self, named_params, cfg: OptimizerConfig, no_decay: Iterable[str] = ()):
        self.params = dict(named_params)
        self.cfg = cfg
        self.state: Dict[str, Dict[str, np.ndarray]] = {}
        self.no_decay = set(no_decay)
        self.lr = cfg.learning_rate

    def set_epoch(self, epoch: int) -> None:
        self.lr = self.cfg.lr_at(epoch)

    def step(self, grads_by_name: Dict[str, np.ndarray]) -> None:
        arrays = {k: t.data for k, t in self.params.items()}
        optimizer_update(arrays, grads_by_name, self.state, self.cfg, self.lr, self.no_decay)
