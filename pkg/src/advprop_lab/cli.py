"""Command-line interface: train / eval / attack / sweep / probe / strip / replicate / make-data."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Dict, Optional, Sequence

import numpy as np

from . import checkpoint as ck
from .attacks import GD, KINDS, PGD, AttackSpec, attack, default_spec
from .data import (Dataset, corruption_suite, load_corruption_table, digit_split, load_idx_dir, make_digit_splits,
                   save_idx_dir, synth_blobs, synth_two_domain)
from .experiments import DESK_REGIMES, DeskSetup, cached_desk_run
from .layers import RouteError, build_desknet
from .metrics import MetricsReport, corruption_errors, evaluate, mce_from_tables, route_gap_probe
from .optim import RMSPROP, SGD_MOMENTUM, OptimizerConfig
from .reports import format_report, write_report
from .training import MIN_ROUTES, REGIMES, RegimeError, TrainConfig, train

log = logging.getLogger("advprop_lab")


class CLIError(Exception):
    """A user-facing error; printed as a one-line diagnostic."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


# ---------------------------------------------------------------------------
# data sources


def resolve_data(source: str, split: str, limit: Optional[int] = None, seed: int = 0) -> Dataset:
    """``source`` is an IDX directory or one of ``synth-digits``, ``synth-blobs``, ``synth-two-domain``."""
    if source == "synth-digits":
        return digit_split(split, limit or (10000 if split == "train" else 2000), seed)
    if source == "synth-blobs":
        ds = synth_blobs(limit or 1000, seed=seed if split == "train" else seed + 1, template_seed=seed)
    elif source.startswith("synth-two-domain"):
        shift = float(source.split(":", 1)[1]) if ":" in source else 0.5
        n = (limit or 1000) // 2
        ds = synth_two_domain(n, shift, 0.1, seed if split == "train" else seed + 1)
    elif os.path.isdir(source):
        try:
            return load_idx_dir(source, split, limit)
        except (FileNotFoundError, ValueError) as e:
            raise CLIError(str(e)) from None
    else:
        raise CLIError(f"data source {source!r} is neither a directory nor a known generator")
    ds.split = split
    return ds


def _read_model(path):
    try:
        ckpt = ck.read_checkpoint(path)
        return ckpt, ck.to_model(ckpt)
    except FileNotFoundError:
        raise CLIError(f"checkpoint not found: {path}") from None
    except ck.CheckpointError as e:
        raise CLIError(f"bad checkpoint {path}: {e}") from None


# ---------------------------------------------------------------------------
# argument groups


def _attack_args(p: argparse.ArgumentParser, steps: bool = False) -> None:
    p.add_argument("--attack-eps255", type=int, default=2, help="L-inf budget in 1/255 pixel units")
    p.add_argument("--attack-kind", choices=KINDS, default=PGD)
    if steps:
        p.add_argument("--attack-steps", type=int, default=None, help="default: eps+1 (1 when eps is 1)")
        p.add_argument("--attack-alpha255", type=float, default=1.0)
        p.add_argument("--no-random-init", action="store_true", help="GD only: start from the clean input")


def _train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--regime", choices=REGIMES, default="vanilla")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=(RMSPROP, SGD_MOMENTUM), default=RMSPROP)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--lr-decay", type=float, default=0.97)
    p.add_argument("--pretrain-fraction", type=float, default=0.5)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--k-routes", type=int, default=None, help="BN routes (default: minimum the regime needs)")
    p.add_argument("--bn-share-affine", action="store_true", help="share gamma/beta across BN routes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", default="synth-digits")
    p.add_argument("--train-limit", type=int, default=None)
    p.add_argument("--test-limit", type=int, default=None)
    _attack_args(p, steps=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advprop-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a DeskNet under one regime")
    _train_args(p)
    p.add_argument("--out", required=True, help="output directory (checkpoint + report)")

    p = sub.add_parser("sweep", help="one training run per attack strength")
    _train_args(p)
    p.add_argument("--eps-list", required=True, help="comma-separated epsilons in 1/255 units, e.g. 1,2,3,4")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="accuracy and (optionally) the corruption suite")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="synth-digits")
    p.add_argument("--test-limit", type=int, default=None)
    p.add_argument("--route", type=int, default=0)
    p.add_argument("--corruptions", action="store_true", help="evaluate all 8x5 corruptions")
    p.add_argument("--corruption-table", default=None, help="key-value file overriding severity constants")
    p.add_argument("--baseline", default=None, help="checkpoint of the mCE baseline model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="report file")

    p = sub.add_parser("attack", help="generate adversarial examples and report robust accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="synth-digits")
    p.add_argument("--test-limit", type=int, default=None)
    p.add_argument("--route", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    _attack_args(p, steps=True)
    p.add_argument("--out", required=True, help="output directory (IDX files + report)")

    p = sub.add_parser("probe", help="main vs auxiliary BN accuracy on clean data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="synth-digits")
    p.add_argument("--test-limit", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("strip", help="drop auxiliary BN routes for inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("replicate", help="vanilla / madry / mixed / advprop comparison on synthetic digits")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--n-train", type=int, default=10000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--attack-eps255", type=int, default=2)
    p.add_argument("--cache-dir", default=None, help="reuse/store per-seed results here")
    p.add_argument("--out", default=None, help="report file")

    p = sub.add_parser("make-data", help="write the synthetic digit set as IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=10000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# commands


def attack_spec_from(args) -> AttackSpec:
    if args.attack_eps255 < 0:
        raise CLIError("--attack-eps255 must be non-negative")
    base = default_spec(args.attack_eps255)
    steps = base.steps if getattr(args, "attack_steps", None) is None else args.attack_steps
    alpha = getattr(args, "attack_alpha255", 1.0) / 255.0
    kind = args.attack_kind
    random_init = kind == PGD or (kind == GD and not getattr(args, "no_random_init", False))
    try:
        return AttackSpec(kind, base.epsilon, alpha, steps, random_init)
    except ValueError as e:
        raise CLIError(str(e)) from None


def train_config_from(args, epsilon_255: Optional[int] = None, seed: Optional[int] = None) -> TrainConfig:
    if epsilon_255 is not None:
        args.attack_eps255 = epsilon_255
    try:
        opt = OptimizerConfig(args.optimizer, args.lr, weight_decay=args.weight_decay, lr_decay=args.lr_decay)
        return TrainConfig(regime=args.regime, epochs=args.epochs, batch_size=args.batch_size, optimizer=opt,
                           attack=attack_spec_from(args), seed=args.seed if seed is None else seed,
                           pretrain_fraction=args.pretrain_fraction, augmentation=args.augment)
    except ValueError as e:
        raise CLIError(str(e)) from None


def _routes_for(args) -> int:
    need = MIN_ROUTES.get(args.regime, 1)
    k = need if args.k_routes is None else args.k_routes
    if k < 1:
        raise CLIError("--k-routes must be at least 1")
    if k < need:
        raise CLIError(f"regime {args.regime} requires --k-routes >= {need} (got {k})")
    return k


def run_training(args, out_dir: str, cfg: TrainConfig) -> Dict[str, object]:
    k = _routes_for(args)
    train_set = resolve_data(args.data, "train", args.train_limit, 0)
    test_set = resolve_data(args.data, "test", args.test_limit, 0)
    c, h, w = train_set.shape
    if h != w:
        raise CLIError("DeskNet expects square images")
    model = build_desknet(c, train_set.num_classes, k, image_size=h, seed=cfg.seed,
                          share_affine=args.bn_share_affine)
    try:
        model, history = train(model, train_set, cfg, eval_set=test_set)
    except RegimeError as e:
        raise CLIError(str(e)) from None
    described = cfg.describe()
    meta = {"regime": cfg.regime, "seed": str(cfg.seed), "epoch": str(cfg.epochs),
            "config_digest": ck.config_digest(described), "data": args.data}
    os.makedirs(out_dir, exist_ok=True)
    ck.save_checkpoint(model, meta, os.path.join(out_dir, "model.ckpt"))
    report: Dict[str, object] = {f"config.{k}": v for k, v in described.items()}
    report["config.k_routes"] = k
    report["config.data"] = args.data
    report["config.digest"] = meta["config_digest"]
    for rec in history:
        for key in ("clean_loss", "adv_loss", "aug_loss", "total_loss", "grad_norm", "eval_acc", "lr"):
            report[f"epoch.{rec['epoch']}.{key}"] = rec[key]
    report["train_top1"] = evaluate(model, train_set, 0)
    report["test_top1"] = evaluate(model, test_set, 0)
    if k >= 2:
        acc_main, acc_aux, gap = route_gap_probe(model, test_set)
        report["route_gap.main"] = acc_main
        report["route_gap.aux"] = acc_aux
        report["route_gap"] = gap
    write_report(os.path.join(out_dir, "report.txt"), report)
    return report


def cmd_train(args) -> int:
    cfg = train_config_from(args)
    _routes_for(args)
    report = run_training(args, args.out, cfg)
    print(f"{cfg.regime}: test top-1 {report['test_top1']:.4f} after {cfg.epochs} epochs -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    try:
        eps_list = [int(e) for e in args.eps_list.split(",") if e.strip()]
    except ValueError:
        raise CLIError(f"--eps-list must be comma-separated integers, got {args.eps_list!r}") from None
    if not eps_list:
        raise CLIError("--eps-list is empty")
    _routes_for(args)
    base_seed = args.seed
    summary: Dict[str, object] = {}
    for i, eps in enumerate(eps_list):
        cfg = train_config_from(args, epsilon_255=eps, seed=base_seed + i)
        out_dir = os.path.join(args.out, f"eps{eps}")
        report = run_training(args, out_dir, cfg)
        summary[f"eps{eps}.test_top1"] = report["test_top1"]
        summary[f"eps{eps}.seed"] = base_seed + i
        print(f"eps={eps}/255: test top-1 {report['test_top1']:.4f} -> {out_dir}")
    write_report(os.path.join(args.out, "sweep_report.txt"), summary)
    return 0


def cmd_eval(args) -> int:
    _, model = _read_model(args.checkpoint)
    try:
        model.check_route(args.route)
    except RouteError as e:
        raise CLIError(f"route absent: {e}") from None
    test_set = resolve_data(args.data, "test", args.test_limit, 0)
    report = MetricsReport(evaluate(model, test_set, args.route))
    if args.corruptions:
        table = load_corruption_table(args.corruption_table) if args.corruption_table else None
        report.errors = corruption_errors(model, test_set, corruption_suite(), args.route, args.seed, table)
        if args.baseline:
            _, base = _read_model(args.baseline)
            base_err = corruption_errors(base, test_set, corruption_suite(), 0, args.seed, table)
            report.mce = mce_from_tables(report.errors, base_err).mce
    items = report.as_dict()
    if args.out:
        write_report(args.out, items)
    else:
        sys.stdout.write(format_report(items))
    msg = f"top-1 {report.clean_top1:.4f} on route {args.route}"
    if report.mce is not None:
        msg += f", mCE {report.mce:.2f}"
    print(msg, file=sys.stderr)
    return 0


def cmd_attack(args) -> int:
    _, model = _read_model(args.checkpoint)
    try:
        model.check_route(args.route)
    except RouteError as e:
        raise CLIError(f"route absent: {e}") from None
    spec = attack_spec_from(args)
    test_set = resolve_data(args.data, "test", args.test_limit, 0)
    rng = np.random.default_rng(args.seed)
    adv = np.concatenate([attack(model, x, y, spec, args.route, rng)
                          for x, y in test_set.batches(100, None, drop_last=False)])
    adv_set = Dataset(adv, test_set.labels, "test", "adversarial", test_set.num_classes)
    os.makedirs(args.out, exist_ok=True)
    if adv.shape[1] == 1:
        save_idx_dir(args.out, adv_set, adv_set)
    report = {"attack.kind": spec.kind, "attack.epsilon": spec.epsilon, "attack.alpha": spec.alpha,
              "attack.steps": spec.steps, "attack.random_init": spec.random_init,
              "clean_top1": evaluate(model, test_set, 0), "adv_top1": evaluate(model, adv_set, 0),
              "max_linf": float(np.abs(adv - test_set.images).max())}
    write_report(os.path.join(args.out, "report.txt"), report)
    print(f"{spec.kind} eps={spec.epsilon * 255:g}/255: clean {report['clean_top1']:.4f}, "
          f"adversarial {report['adv_top1']:.4f}")
    return 0


def cmd_probe(args) -> int:
    _, model = _read_model(args.checkpoint)
    if model.num_routes < 2:
        raise CLIError("route absent: probe needs a checkpoint with auxiliary BN routes (K >= 2)")
    test_set = resolve_data(args.data, "test", args.test_limit, 0)
    acc_main, acc_aux, gap = route_gap_probe(model, test_set)
    items = {"acc_main": acc_main, "acc_aux": acc_aux, "route_gap": gap}
    if args.out:
        write_report(args.out, items)
    else:
        sys.stdout.write(format_report(items))
    print(f"main {acc_main:.4f}, auxiliary {acc_aux:.4f}, gap {gap:+.4f}", file=sys.stderr)
    return 0


def cmd_strip(args) -> int:
    ckpt, _ = _read_model(args.checkpoint)
    try:
        stripped = ck.strip_aux(ckpt)
    except ck.CheckpointError as e:
        raise CLIError(str(e)) from None
    ck.write_checkpoint(stripped, args.out)
    print(f"stripped {ckpt.payload_size() - stripped.payload_size()} auxiliary floats -> {args.out}")
    return 0


def cmd_replicate(args) -> int:
    try:
        seeds = [int(x) for x in args.seeds.split(",") if x.strip()]
        setup = DeskSetup(args.n_train, args.n_test, args.epochs, args.attack_eps255)
    except ValueError as e:
        raise CLIError(f"bad replicate arguments: {e}") from None
    if not seeds:
        raise CLIError("--seeds is empty")
    runs = [cached_desk_run(setup, seed, args.cache_dir) for seed in seeds]
    items: Dict[str, object] = {}
    for run in runs:
        for key, value in run.items():
            if key != "seed":
                items[f"seed{int(run['seed'])}.{key}"] = value
    for key in runs[0]:
        if key != "seed":
            items[f"mean.{key}"] = float(np.mean([r[key] for r in runs]))
    if args.out:
        write_report(args.out, items)
    else:
        sys.stdout.write(format_report(items))
    summary = ", ".join(f"{r} {items[f'mean.{r}.test_top1']:.4f}" for r in DESK_REGIMES)
    print(f"mean clean top-1 over seeds {seeds}: {summary}; advprop mCE {items['mean.advprop.mce']:.1f}, "
          f"route gap {items['mean.advprop.route_gap']:+.4f}", file=sys.stderr)
    return 0


def cmd_make_data(args) -> int:
    train_set, test_set = make_digit_splits(args.n_train, args.n_test, args.seed)
    save_idx_dir(args.out, train_set, test_set)
    print(f"wrote {len(train_set)} train / {len(test_set)} test digits to {args.out}")
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "eval": cmd_eval, "attack": cmd_attack,
            "probe": cmd_probe, "strip": cmd_strip, "replicate": cmd_replicate, "make-data": cmd_make_data}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except CLIError as e:
        print(f"advprop-lab: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"advprop-lab: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
