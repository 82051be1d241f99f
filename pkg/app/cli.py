"""Command-line interface: one subcommand per pipeline step plus the full ablation."""
import argparse
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError

from app.config import Config, FUSION_RULES
from app.confusion import (
    derive_weight_matrix,
    load_partition,
    load_rates,
    partition_from_rates,
    save_confusion_csv,
    save_partition,
    save_weight_csv,
)
from app.data import generate, load_dataset, save_dataset, train_validation_split
from app.errors import ConfNetError
from app.graph import run_experiment, run_sweep, train_baseline, train_new_loss, train_subnets
from app.loss import gradcheck
from app.metrics import confusion_of, evaluate, render_ablation_table, save_iou_plot_data, save_report
from app.model import load_checkpoint, save_checkpoint
from app.schemas import ExperimentConfig, FusionConfig
from app.tools import normalize_key, parse_key_value_file

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Bad flags, missing inputs or an invalid configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _class_range(text: str):
    """``"2..12"`` or a single class count."""
    try:
        if ".." in text:
            lo, hi = (int(part) for part in text.split("..", 1))
        else:
            lo = hi = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'MIN..MAX' or an integer, got '{text}'")
    if lo < 2 or hi < lo:
        raise argparse.ArgumentTypeError(f"class range needs 2 <= MIN <= MAX, got '{text}'")
    return lo, hi


def _checked(kind, rule: str, ok: Callable[[Any], bool]):
    """argparse ``type=`` that parses with ``kind`` and rejects values failing ``ok``."""
    def parse(text: str):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {kind.__name__}, got '{text}'")
        if not ok(value):
            raise argparse.ArgumentTypeError(f"must be {rule}, got '{text}'")
        return value
    return parse


_open_unit = _checked(float, "in (0, 1)", lambda v: 0.0 < v < 1.0)
_non_negative_int = _checked(int, ">= 0", lambda v: v >= 0)
_positive_int = _checked(int, ">= 1", lambda v: v >= 1)
_fd_step = _checked(float, "in [1e-8, 1e-3]", lambda v: 1e-8 <= v <= 1e-3)
_positive_float = _checked(float, "> 0", lambda v: v > 0.0)
_unit_floor = _checked(float, "in (0, 1]", lambda v: 0.0 < v <= 1.0)


def _seed_list(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated seeds, got '{text}'")


def _add_experiment_flags(parser: argparse.ArgumentParser):
    """``--config FILE`` plus one flag per :class:`ExperimentConfig` key."""
    parser.add_argument("--config", help="Flat 'key = value' config file; flags override it")
    for name, field in ExperimentConfig.model_fields.items():
        key = field.alias or name
        flag = "--" + key.replace("_", "-")
        if field.annotation is bool:
            parser.add_argument(flag, dest=key, action="store_const", const=True, default=None,
                                help=field.description)
        else:
            parser.add_argument(flag, dest=key, default=None, help=field.description)


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults < environment < config file < flags."""
    values: Dict[str, Any] = {}
    try:
        if args.config:
            values.update(parse_key_value_file(args.config))
        for key in ExperimentConfig.keys():
            value = getattr(args, key, None)
            if value is not None:
                values[normalize_key(key)] = value
        return ExperimentConfig.from_flat(values)
    except (ValueError, FileNotFoundError) as e:
        raise UsageError(str(e))


def _require_dataset(cfg: ExperimentConfig, command: str) -> str:
    if not cfg.dataset:
        raise UsageError(f"{command} needs --dataset")
    return cfg.dataset


def cmd_generate(args) -> int:
    cfg = experiment_config(args)
    dataset = generate(cfg.synthetic_spec())
    print(f"wrote {save_dataset(dataset, args.out)} ({dataset.sample_count} samples, {dataset.class_count} classes)")
    if args.split:
        stem, _ = os.path.splitext(args.out)
        train, validation = train_validation_split(dataset, cfg.seed)
        print(f"wrote {save_dataset(train, stem + '.train.cfds')} ({train.sample_count} samples)")
        print(f"wrote {save_dataset(validation, stem + '.validation.cfds')} ({validation.sample_count} samples)")
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    cfg = experiment_config(args)
    train = load_dataset(_require_dataset(cfg, "train-baseline"))
    model, report = train_baseline(cfg, train)
    save_checkpoint(model, args.out)
    final = report.loss_curve[-1] if report.loss_curve else float("nan")
    print(f"wrote {args.out} ({report.steps} steps, final loss {final:.6f})")
    return EXIT_OK


def cmd_confusion(args) -> int:
    model = load_checkpoint(args.model)
    dataset = load_dataset(args.dataset)
    cm = confusion_of(model, dataset, FusionConfig(rule=args.fusion_rule))
    save_confusion_csv(cm, args.out, "normalized" if args.normalized else "counts")
    print(f"wrote {args.out}")
    if args.weights:
        save_weight_csv(derive_weight_matrix(cm, args.diagonal_floor), dataset.class_names, args.weights)
        print(f"wrote {args.weights}")
    return EXIT_OK


def cmd_groups(args) -> int:
    rates = load_rates(args.confusion)
    partition = partition_from_rates(rates, args.threshold, args.max_groups)
    save_partition(partition, args.out)
    for g in partition.groups:
        print(" ".join(str(c) for c in g.class_indices))
    print(f"wrote {args.out} ({len(partition.groups)} groups)")
    return EXIT_OK


def cmd_train_subnets(args) -> int:
    cfg = experiment_config(args)
    if args.new_loss and not args.confusion:
        raise UsageError("--new-loss needs --confusion")
    train = load_dataset(_require_dataset(cfg, "train-subnets"))
    baseline = load_checkpoint(args.model)
    partition = load_partition(args.partition, baseline.class_count, cfg.threshold)
    if args.new_loss:
        weights = derive_weight_matrix(load_rates(args.confusion), cfg.diagonal_floor)
        _, model, reports = train_new_loss(baseline, partition, train, cfg, weights)
    else:
        model, reports = train_subnets(baseline, partition, train, cfg)
    save_checkpoint(model, args.out)
    print(f"wrote {args.out} ({model.head_count} heads, {sum(r.steps for r in reports)} steps)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.model)
    dataset = load_dataset(args.dataset)
    partition = load_partition(args.partition, model.class_count) if args.partition else None
    report = evaluate(model, dataset, partition, FusionConfig(rule=args.fusion_rule))
    if args.out:
        save_report(report, args.out)
    if args.plot_data:
        save_iou_plot_data(report, args.plot_data)
    print(f"mIoU {report.miou:.6f}  accuracy {report.accuracy:.6f}  intra-group mass {report.total_intra_group_mass:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = experiment_config(args)
    if cfg.dataset and not os.path.isfile(cfg.dataset):
        raise UsageError(f"no such file: {cfg.dataset}")
    if args.seeds:
        summary = run_sweep(cfg, args.seeds)
        print(f"arm ordering held for {summary['ordering_holds']} of {len(args.seeds)} seeds")
        return EXIT_OK
    result = run_experiment(cfg)
    sys.stdout.write(render_ablation_table(result))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    k_min, k_max = args.k
    report = gradcheck(trials=args.trials, k_min=k_min, k_max=k_max, seed=args.seed,
                       step=args.step, tolerance=args.tolerance)
    print(f"trials {report.trials}  K {report.k_min}..{report.k_max}  max relative error {report.max_relative_error:.3e}")
    if not report.passed:
        print(f"FAILED: worst case K={report.worst_class_count} lambda={report.worst_lambda}")
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="confnet", description="Confusing-group subnets and the weighted cross-entropy loss")
    parser.add_argument("--verbose", action="store_true", help="Log stages and epochs at INFO")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", help="Write a synthetic dataset")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True, help="Destination .cfds file")
    p.add_argument("--split", action="store_true", help="Also write the 80/20 train and validation files")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-baseline", help="Train encoder and head 0 with cross-entropy")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True, help="Destination checkpoint")
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("confusion", help="Confusion matrix of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="Destination CSV")
    p.add_argument("--normalized", action="store_true", help="Write row-normalized rates instead of counts")
    p.add_argument("--weights", help="Also write the derived loss weight matrix here")
    p.add_argument("--diagonal-floor", type=_unit_floor, default=Config.DIAGONAL_FLOOR)
    p.add_argument("--fusion-rule", choices=FUSION_RULES, default=Config.FUSION_RULE)
    p.set_defaults(func=cmd_confusion)

    p = sub.add_parser("groups", help="Confusing groups from a confusion CSV")
    p.add_argument("--confusion", required=True)
    p.add_argument("--threshold", type=_open_unit, default=Config.THRESHOLD)
    p.add_argument("--max-groups", type=_non_negative_int, default=None)
    p.add_argument("--out", required=True, help="Destination partition file")
    p.set_defaults(func=cmd_groups)

    p = sub.add_parser("train-subnets", help="Attach and train one head per confusing group")
    _add_experiment_flags(p)
    p.add_argument("--model", required=True, help="Baseline checkpoint")
    p.add_argument("--partition", required=True)
    p.add_argument("--new-loss", action="store_true", help="Fine-tune head 0 and train heads with the weighted loss")
    p.add_argument("--confusion", help="Confusion CSV the loss weights are derived from")
    p.add_argument("--out", required=True, help="Destination checkpoint")
    p.set_defaults(func=cmd_train_subnets)

    p = sub.add_parser("evaluate", help="mIoU, accuracy and confusion mass of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--partition", help="Groups to report on; defaults to the model's own")
    p.add_argument("--fusion-rule", choices=FUSION_RULES, default=Config.FUSION_RULE)
    p.add_argument("--out", help="Destination JSON report")
    p.add_argument("--plot-data", help="Write 'class iou' lines here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="Run the four-arm ablation")
    _add_experiment_flags(p)
    p.add_argument("--seeds", type=_seed_list, help="Comma-separated seeds for a sweep")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="Compare the analytic loss gradient with finite differences")
    p.add_argument("--trials", type=_positive_int, default=200)
    p.add_argument("--k", type=_class_range, default=(2, 12), help="Class-count range, e.g. 2..12")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=_fd_step, default=1e-6)
    p.add_argument("--tolerance", type=_positive_float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE

    try:
        Config.validate()
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else Config.LOG_LEVEL)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfNetError, ValidationError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
