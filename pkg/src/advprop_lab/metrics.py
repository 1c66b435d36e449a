"""Top-1 accuracy, corruption error tables / mCE, and the main-vs-auxiliary BN probe."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import CORRUPTIONS, CorruptionSpec, Dataset, corrupt, corruption_suite
from .layers import EVAL, Model

ErrorTable = Dict[Tuple[str, int], float]


def predict(model: Model, images: np.ndarray, route: int = 0, batch_size: int = 500) -> np.ndarray:
    """Eval-mode argmax predictions (ties go to the lowest class index)."""
    model.check_route(route)
    preds = []
    for i in range(0, len(images), batch_size):
        logits = model.forward(images[i:i + batch_size], route, EVAL).data
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def evaluate(model: Model, dataset: Dataset, route: int = 0, batch_size: int = 500) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, dataset.images, route, batch_size) == dataset.labels))


def eval_loss(model: Model, dataset: Dataset, route: int = 0, batch_size: int = 500) -> float:
    """Mean eval-mode cross-entropy."""
    from .autodiff import softmax_cross_entropy

    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total = 0.0
    for i in range(0, len(dataset), batch_size):
        logits = model.forward(dataset.images[i:i + batch_size], route, EVAL)
        total += softmax_cross_entropy(logits, dataset.labels[i:i + batch_size]).item() * len(logits.data)
    return total / len(dataset)


def corruption_seed(base_seed: int, spec: CorruptionSpec) -> int:
    return base_seed * 1000 + CORRUPTIONS.index(spec.kind) * 10 + spec.severity


def corruption_errors(model: Model, test_set: Dataset, suite: Optional[Sequence[CorruptionSpec]] = None,
                      route: int = 0, seed: int = 0, table=None) -> ErrorTable:
    """Top-1 error for every corruption in ``suite`` (each with its own derived seed)."""
    suite = corruption_suite() if suite is None else list(suite)
    if not suite:
        raise ValueError("empty corruption suite")
    out: ErrorTable = {}
    for spec in suite:
        images = corrupt(test_set.images, spec, corruption_seed(seed, spec), table)
        preds = predict(model, images, route)
        out[(spec.kind, spec.severity)] = float(np.mean(preds != test_set.labels))
    return out


@dataclass
class MCEResult:
    mce: float
    ce: Dict[str, float]
    excluded: List[str] = field(default_factory=list)


def mce_from_tables(model_errors: ErrorTable, baseline_errors: ErrorTable) -> MCEResult:
    """CE_kind = sum_s E_model / sum_s E_baseline; mCE = 100 * mean over kinds.

    Kinds where the baseline makes no error are excluded and listed.
    """
    if not model_errors:
        raise ValueError("empty corruption suite")
    kinds = sorted({k for k, _ in model_errors}, key=lambda k: CORRUPTIONS.index(k) if k in CORRUPTIONS else 99)
    ce: Dict[str, float] = {}
    excluded = []
    for kind in kinds:
        sev = [s for k, s in model_errors if k == kind]
        base = sum(baseline_errors[(kind, s)] for s in sev)
        if base == 0:
            excluded.append(kind)
            continue
        ce[kind] = sum(model_errors[(kind, s)] for s in sev) / base
    if not ce:
        raise ValueError("baseline has zero error on every corruption kind")
    return MCEResult(100.0 * float(np.mean(list(ce.values()))), ce, excluded)


def mce(model: Model, baseline_model: Model, test_set: Dataset,
        suite: Optional[Sequence[CorruptionSpec]] = None, route: int = 0, seed: int = 0) -> float:
    ours = corruption_errors(model, test_set, suite, route, seed)
    base = ours if baseline_model is model else corruption_errors(baseline_model, test_set, suite, 0, seed)
    return mce_from_tables(ours, base).mce


def route_gap_probe(model: Model, clean_test_set: Dataset) -> Tuple[float, float, float]:
    """(accuracy with main BNs, accuracy with the first auxiliary BNs, main - aux)."""
    if model.num_routes < 2:
        raise ValueError("route gap probe needs a model with K >= 2 BN routes")
    acc_main = evaluate(model, clean_test_set, 0)
    acc_aux = evaluate(model, clean_test_set, 1)
    return acc_main, acc_aux, acc_main - acc_aux


@dataclass
class MetricsReport:
    clean_top1: float
    errors: ErrorTable = field(default_factory=dict)
    mce: Optional[float] = None
    route_gap: Optional[float] = None

    def as_dict(self) -> Dict[str, float]:
        out: Dict[str, float] = {"clean_top1": self.clean_top1}
        for (kind, sev), err in self.errors.items():
            out[f"error.{kind}.{sev}"] = err
        if self.mce is not None:
            out["mce"] = self.mce
        if self.route_gap is not None:
            out["route_gap"] = self.route_gap
        return out
