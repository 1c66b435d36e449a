"""Desk-scale experiments: the regime comparison on synthetic digits and the
two-domain BN routing check.

Desk runs take tens of minutes per seed, so results are cached as report files
keyed by the experiment setup, the seed and a digest of the package source.
Training is deterministic, so a cache hit is the same numbers a fresh run
would produce.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Dict, Optional

import numpy as np

from .attacks import default_spec
from .data import Dataset, make_digit_splits, synth_two_domain
from .layers import build_desknet
from .metrics import corruption_errors, eval_loss, evaluate, mce_from_tables, route_gap_probe
from .optim import Optimizer, OptimizerConfig
from .reports import read_report, write_report
from .training import ADVPROP, MADRY, MIXED, VANILLA, TrainConfig, loss_gradients, train

log = logging.getLogger(__name__)

DESK_REGIMES = {VANILLA: 1, MADRY: 1, MIXED: 1, ADVPROP: 2}


@dataclass(frozen=True)
class DeskSetup:
    n_train: int = 10000
    n_test: int = 2000
    epochs: int = 20
    epsilon_255: int = 2
    batch_size: int = 64
    learning_rate: float = 1e-3
    data_seed: int = 0


def source_digest() -> str:
    """Hash of every module and data file in the package."""
    h = hashlib.sha256()
    root = resources.files("advprop_lab")
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith((".py", ".cfg")):
            h.update(entry.name.encode())
            h.update(entry.read_bytes())
    return h.hexdigest()[:16]


def run_key(setup: DeskSetup, seed: int) -> str:
    text = ";".join(f"{k}={v}" for k, v in sorted(asdict(setup).items()))
    return hashlib.sha256(f"{text};seed={seed};src={source_digest()}".encode()).hexdigest()[:20]


def desk_config(regime: str, setup: DeskSetup, seed: int) -> TrainConfig:
    return TrainConfig(regime=regime, epochs=setup.epochs, batch_size=setup.batch_size,
                       optimizer=OptimizerConfig(learning_rate=setup.learning_rate),
                       attack=default_spec(setup.epsilon_255), seed=seed)


def desk_run(setup: DeskSetup, seed: int, splits=None) -> Dict[str, float]:
    """Train every regime in ``DESK_REGIMES`` from the same initialization and
    shuffle seed; return clean accuracy, the AdvProp route gap and its mCE
    against the vanilla model."""
    train_set, test_set = splits or make_digit_splits(setup.n_train, setup.n_test, setup.data_seed)
    out: Dict[str, float] = {"seed": seed}
    models = {}
    for regime, k in DESK_REGIMES.items():
        start = time.time()
        model = build_desknet(1, train_set.num_classes, k, image_size=train_set.shape[1], seed=seed)
        train(model, train_set, desk_config(regime, setup, seed), eval_set=test_set, eval_limit=500)
        models[regime] = model
        out[f"{regime}.test_top1"] = evaluate(model, test_set, 0)
        out[f"{regime}.seconds"] = round(time.time() - start, 1)
        log.info("seed %d %s: test top-1 %.4f (%.0fs)", seed, regime, out[f"{regime}.test_top1"],
                 out[f"{regime}.seconds"])
    main, aux, gap = route_gap_probe(models[ADVPROP], test_set)
    out.update({"advprop.route_main": main, "advprop.route_aux": aux, "advprop.route_gap": gap})
    base = corruption_errors(models[VANILLA], test_set, seed=seed)
    ours = corruption_errors(models[ADVPROP], test_set, seed=seed)
    res = mce_from_tables(ours, base)
    out["advprop.mce"] = res.mce
    for kind, ce in res.ce.items():
        out[f"advprop.ce.{kind}"] = 100.0 * ce
    out["mce.excluded"] = len(res.excluded)
    return out


def cached_desk_run(setup: DeskSetup, seed: int, cache_dir: Optional[str] = None) -> Dict[str, float]:
    """``desk_run`` with results stored under ``cache_dir`` (no caching when None)."""
    if cache_dir is None:
        return {k: float(v) for k, v in desk_run(setup, seed).items()}
    path = os.path.join(cache_dir, f"desk-{run_key(setup, seed)}.txt")
    if os.path.exists(path):
        return {k: float(v) for k, v in read_report(path).items()}
    result = {k: float(v) for k, v in desk_run(setup, seed).items()}
    write_report(path, result)
    return result


def default_cache_dir() -> str:
    return os.environ.get("ADVPROP_LAB_CACHE", os.path.join(os.getcwd(), ".advprop_cache"))


# ---------------------------------------------------------------------------
# two-domain routing


def train_domain_routed(model, dataset: Dataset, epochs: int, batch_size: int, seed: int,
                        routed: bool, lr: float = 1e-3) -> None:
    """Each pooled batch is either split by domain (domain d -> route d) or sent
    through route 0 as one mixture; the samples seen are identical."""
    opt = Optimizer(model.named_parameters(), OptimizerConfig(learning_rate=lr),
                    [n for n in model.named_parameters() if n.endswith((".gamma", ".beta"))])
    rng = np.random.default_rng([seed, 0])
    for epoch in range(epochs):
        opt.set_epoch(epoch)
        for idx in np.array_split(rng.permutation(len(dataset)), len(dataset) // batch_size):
            x, y, d = dataset.images[idx], dataset.labels[idx], dataset.domains[idx]
            if routed:
                terms = [(x[d == r], y[d == r], r, 1.0) for r in (0, 1) if np.sum(d == r) >= 2]
            else:
                terms = [(x, y, 0, 1.0)]
            _, _, grads = loss_gradients(model, terms)
            opt.step(grads)


def domain_eval_loss(model, dataset: Dataset, routed: bool) -> float:
    """Mean eval-mode loss over both domains, each through its own route when ``routed``."""
    total = 0.0
    for r in (0, 1):
        part = dataset.subset(np.flatnonzero(dataset.domains == r))
        total += eval_loss(model, part, r if routed else 0) * len(part)
    return total / len(dataset)


def domain_routing_run(seed: int, shift: float = 0.5, n_per_domain: int = 500, epochs: int = 10,
                       batch_size: int = 32, noise_sigma: float = 0.1) -> Dict[str, float]:
    """Eval loss of a two-route model (one BN route per domain) against a
    single-route model trained on the pooled mixture, from the same init."""
    train_set = synth_two_domain(n_per_domain, shift, noise_sigma, seed=seed)
    test_set = synth_two_domain(n_per_domain, shift, noise_sigma, seed=seed + 7919)
    out: Dict[str, float] = {}
    for name, k, routed in (("two_route", 2, True), ("single_route", 1, False)):
        model = build_desknet(1, 2, k, image_size=train_set.shape[1], seed=seed)
        train_domain_routed(model, train_set, epochs, batch_size, seed, routed)
        out[f"{name}.eval_loss"] = domain_eval_loss(model, test_set, routed)
    return out
