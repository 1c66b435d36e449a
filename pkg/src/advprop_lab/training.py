"""Training regimes: vanilla, Madry, mixed with shared BN, pretrain-then-finetune,
AdvProp and fine-grained AdvProp (separate route for augmented clean data)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, attack, default_spec
from .data import Dataset, augment
from .layers import TRAIN, Model
from .optim import OptimizerConfig, Optimizer

log = logging.getLogger(__name__)

VANILLA = "vanilla"
MADRY = "madry"
MIXED = "mixed_shared_bn"
PRETRAIN_FINETUNE = "pretrain_finetune"
ADVPROP = "advprop"
FINEGRAINED = "advprop_finegrained"
REGIMES = (VANILLA, MADRY, MIXED, PRETRAIN_FINETUNE, ADVPROP, FINEGRAINED)
MIN_ROUTES = {ADVPROP: 2, FINEGRAINED: 3}


class RegimeError(ValueError):
    """Invalid regime / model combination."""


@dataclass(frozen=True)
class TrainConfig:
    regime: str = VANILLA
    epochs: int = 20
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    attack: AttackSpec = field(default_factory=lambda: default_spec(2))
    seed: int = 0
    pretrain_fraction: float = 0.5
    augmentation: bool = False
    adv_loss_weight: float = 1.0
    decay_bn: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise RegimeError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (train-mode batch norm)")
        if not 0.0 < self.pretrain_fraction < 1.0:
            raise ValueError("pretrain_fraction must lie in (0, 1)")

    def check_model(self, model: Model) -> None:
        need = MIN_ROUTES.get(self.regime, 1)
        if model.num_routes < need:
            raise RegimeError(f"regime {self.regime} requires K >= {need} BN routes, model has K={model.num_routes}")

    def describe(self) -> Dict[str, str]:
        o, a = self.optimizer, self.attack
        return {
            "regime": self.regime, "epochs": str(self.epochs), "batch_size": str(self.batch_size),
            "seed": str(self.seed), "optimizer": o.kind, "lr": repr(o.learning_rate),
            "lr_decay": repr(o.lr_decay), "lr_decay_epochs": repr(o.lr_decay_epochs),
            "opt_decay": repr(o.decay), "opt_momentum": repr(o.momentum),
            "weight_decay": repr(o.weight_decay), "decay_bn": str(int(self.decay_bn)),
            "attack_kind": a.kind, "attack_epsilon": repr(a.epsilon), "attack_alpha": repr(a.alpha),
            "attack_steps": str(a.steps), "attack_random_init": str(int(a.random_init)),
            "pretrain_fraction": repr(self.pretrain_fraction),
            "augmentation": str(int(self.augmentation)), "adv_loss_weight": repr(self.adv_loss_weight),
        }


@dataclass
class StepReport:
    clean_loss: float = 0.0
    adv_loss: float = 0.0
    total_loss: float = 0.0
    grad_norm: float = 0.0
    aug_loss: float = 0.0


def loss_gradients(model: Model, terms: Sequence[Tuple[np.ndarray, np.ndarray, int, float]]):
    """Forward each ``(x, y, route, weight)`` term in train mode on one tape and
    backpropagate the weighted sum.  Returns (per-term losses, total, grads by name)."""
    named = model.named_parameters()
    with ad.Tape() as tape:
        losses = [ad.softmax_cross_entropy(model.forward(ad.Tensor(x), route, TRAIN), y)
                  for x, y, route, _ in terms]
        total = losses[0] if terms[0][3] == 1.0 else ad.mul(losses[0], terms[0][3])
        for loss, (_, _, _, w) in zip(losses[1:], terms[1:]):
            total = ad.add(total, loss if w == 1.0 else ad.mul(loss, w))
    by_id = tape.backward(total) if total._tape is not None else {}
    grads = {name: by_id[p.node_id] for name, p in named.items() if p.node_id in by_id}
    return [l.item() for l in losses], total.item(), grads


def _grad_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def _check_batch(batch) -> Tuple[np.ndarray, np.ndarray]:
    x, y = batch
    if len(y) == 0:
        raise ValueError("empty batch")
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def vanilla_step(model: Model, batch, opt: Optimizer) -> StepReport:
    x, y = _check_batch(batch)
    (lc,), total, grads = loss_gradients(model, [(x, y, 0, 1.0)])
    opt.step(grads)
    return StepReport(clean_loss=lc, total_loss=total, grad_norm=_grad_norm(grads))


def madry_step(model: Model, batch, spec: AttackSpec, opt: Optimizer,
               rng: Optional[np.random.Generator] = None) -> StepReport:
    x, y = _check_batch(batch)
    xa = attack(model, x, y, spec, 0, rng)
    (la,), total, grads = loss_gradients(model, [(xa, y, 0, 1.0)])
    opt.step(grads)
    return StepReport(adv_loss=la, total_loss=total, grad_norm=_grad_norm(grads))


def mixed_shared_bn_step(model: Model, batch, spec: AttackSpec, opt: Optimizer,
                         rng: Optional[np.random.Generator] = None, adv_weight: float = 1.0) -> StepReport:
    x, y = _check_batch(batch)
    xa = attack(model, x, y, spec, 0, rng)
    (lc, la), total, grads = loss_gradients(model, [(x, y, 0, 1.0), (xa, y, 0, adv_weight)])
    opt.step(grads)
    return StepReport(clean_loss=lc, adv_loss=la, total_loss=total, grad_norm=_grad_norm(grads))


def advprop_step(model: Model, batch, spec: AttackSpec, opt: Optimizer,
                 rng: Optional[np.random.Generator] = None, adv_weight: float = 1.0) -> StepReport:
    """Attack through the auxiliary route, then one update on clean (route 0) + adversarial (route 1) loss."""
    if model.num_routes < 2:
        raise RegimeError("advprop needs K >= 2 BN routes")
    x, y = _check_batch(batch)
    xa = attack(model, x, y, spec, 1, rng)
    (lc, la), total, grads = loss_gradients(model, [(x, y, 0, 1.0), (xa, y, 1, adv_weight)])
    opt.step(grads)
    return StepReport(clean_loss=lc, adv_loss=la, total_loss=total, grad_norm=_grad_norm(grads))


def finegrained_step(model: Model, clean_batch, augmented_batch, spec: AttackSpec, opt: Optimizer,
                     rng: Optional[np.random.Generator] = None, adv_weight: float = 1.0) -> StepReport:
    """Route 0: clean; route 1: augmented clean; route 2: adversarial examples of the augmented batch."""
    if model.num_routes < 3:
        raise RegimeError("fine-grained advprop needs K >= 3 BN routes")
    x, y = _check_batch(clean_batch)
    xg, yg = _check_batch(augmented_batch)
    xa = attack(model, xg, yg, spec, 2, rng)
    (lc, lg, la), total, grads = loss_gradients(
        model, [(x, y, 0, 1.0), (xg, yg, 1, 1.0), (xa, yg, 2, adv_weight)])
    opt.step(grads)
    return StepReport(clean_loss=lc, adv_loss=la, aug_loss=lg, total_loss=total, grad_norm=_grad_norm(grads))


def make_optimizer(model: Model, cfg: TrainConfig) -> Optimizer:
    named = model.named_parameters()
    no_decay = () if cfg.decay_bn else [n for n in named if n.endswith((".gamma", ".beta"))]
    return Optimizer(named, cfg.optimizer, no_decay)


def train(model: Model, dataset: Dataset, cfg: TrainConfig, eval_set: Optional[Dataset] = None,
          eval_limit: Optional[int] = None) -> Tuple[Model, List[Dict[str, float]]]:
    """Run ``cfg.regime`` for ``cfg.epochs`` seeded epochs; returns the model and per-epoch history."""
    from .metrics import evaluate

    cfg.check_model(model)
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset ({len(dataset)}) smaller than one batch ({cfg.batch_size})")
    opt = make_optimizer(model, cfg)
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    attack_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    pre_epochs = int(math.floor(cfg.pretrain_fraction * cfg.epochs))
    eval_set = eval_set if eval_set is not None else dataset
    if eval_limit is not None and len(eval_set) > eval_limit:
        eval_set = eval_set.subset(np.arange(eval_limit))
    history: List[Dict[str, float]] = []

    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        regime = cfg.regime
        if regime == PRETRAIN_FINETUNE:
            regime = MADRY if epoch < pre_epochs else VANILLA
        sums = StepReport()
        steps = 0
        for x, y in dataset.batches(cfg.batch_size, shuffle_rng):
            if cfg.augmentation and regime != FINEGRAINED:
                x = augment(x, int(aug_rng.integers(2**31)))
            if regime == VANILLA:
                rep = vanilla_step(model, (x, y), opt)
            elif regime == MADRY:
                rep = madry_step(model, (x, y), cfg.attack, opt, attack_rng)
            elif regime == MIXED:
                rep = mixed_shared_bn_step(model, (x, y), cfg.attack, opt, attack_rng, cfg.adv_loss_weight)
            elif regime == ADVPROP:
                rep = advprop_step(model, (x, y), cfg.attack, opt, attack_rng, cfg.adv_loss_weight)
            else:
                xg = augment(x, int(aug_rng.integers(2**31)))
                rep = finegrained_step(model, (x, y), (xg, y), cfg.attack, opt, attack_rng, cfg.adv_loss_weight)
            for f in ("clean_loss", "adv_loss", "aug_loss", "total_loss", "grad_norm"):
                setattr(sums, f, getattr(sums, f) + getattr(rep, f))
            steps += 1
        record = {"epoch": epoch + 1, "lr": opt.lr, "phase": regime}
        for f in ("clean_loss", "adv_loss", "aug_loss", "total_loss", "grad_norm"):
            record[f] = getattr(sums, f) / max(steps, 1)
        record["eval_acc"] = evaluate(model, eval_set, 0)
        history.append(record)
        log.info("epoch %d %s loss=%.4f acc=%.4f", epoch + 1, regime, record["total_loss"], record["eval_acc"])
    return model, history
