"""Per-class IoU, mean IoU, accuracy and confusion-mass summaries."""
import logging
import math
from typing import List, Optional

import numpy as np

from app.confusion import ConfusionMatrix, accumulate, group_mass, normalize
from app.data import Dataset
from app.ensemble import predict
from app.model import ModelState
from app.schemas import ARM_NAMES, AblationResult, EvalReport, FusionConfig, GroupPartition
from app.tools import format_float, read_lines, write_text

logger = logging.getLogger(__name__)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """``TP / (TP + FP + FN)`` per class; NaN where the denominator is zero."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(cm.class_count, np.nan)
    np.divide(tp, denom, out=iou, where=denom > 0)
    return iou


def mean_defined(values) -> Optional[float]:
    defined = [float(v) for v in values if v is not None and not math.isnan(v)]
    if not defined:
        return None
    return float(np.mean(defined))


def intra_group_mass(cm_or_rates, partition: GroupPartition) -> List[float]:
    """Off-diagonal normalized confusion summed inside each group."""
    rates = normalize(cm_or_rates) if isinstance(cm_or_rates, ConfusionMatrix) else np.asarray(cm_or_rates)
    return [group_mass(rates, g.class_indices) for g in partition.groups]


def report_from_confusion(cm: ConfusionMatrix, partition: Optional[GroupPartition] = None) -> EvalReport:
    """Every report field derived from the confusion counts alone."""
    partition = partition or GroupPartition.from_groups([], cm.class_count)
    iou = iou_per_class(cm)
    total = cm.total
    miou = mean_defined(iou)
    return EvalReport(
        class_names=list(cm.class_names),
        sample_count=total,
        per_class_iou=[None if math.isnan(v) else float(v) for v in iou],
        miou=0.0 if miou is None else miou,
        accuracy=float(np.trace(cm.counts)) / total if total else 0.0,
        confusion_counts=cm.counts.tolist(),
        groups=[list(g.class_indices) for g in partition.groups],
        intra_group_confusion_mass=intra_group_mass(cm, partition),
        group_miou=[mean_defined(iou[g.class_indices]) for g in partition.groups],
    )


def confusion_of(model: ModelState, dataset: Dataset, fusion_cfg: Optional[FusionConfig] = None) -> ConfusionMatrix:
    _, predicted = predict(model, dataset.features, None, fusion_cfg)
    cm = ConfusionMatrix(dataset.class_count, class_names=list(dataset.class_names))
    return accumulate(cm, dataset.labels, predicted)


def evaluate(model: ModelState, dataset: Dataset, partition: Optional[GroupPartition] = None,
             fusion_cfg: Optional[FusionConfig] = None) -> EvalReport:
    """
    Predict every sample and summarize.

    ``partition`` selects the groups reported on; it may differ from the
    model's own heads so that a model without subnets can be scored on the
    same groups.
    """
    cm = confusion_of(model, dataset, fusion_cfg)
    report = report_from_confusion(cm, partition or model.partition())
    logger.info(f"evaluated {dataset.sample_count} samples: mIoU {report.miou:.4f}, accuracy {report.accuracy:.4f}")
    return report


def save_report(report: EvalReport, path: str) -> str:
    return write_text(path, report.model_dump_json(indent=2) + "\n")


def load_report(path: str) -> EvalReport:
    return EvalReport.model_validate_json("\n".join(read_lines(path)))


def save_iou_plot_data(report: EvalReport, path: str) -> str:
    """Two columns, class index and IoU; undefined classes are left out."""
    lines = [f"{i} {format_float(v)}" for i, v in enumerate(report.per_class_iou) if v is not None]
    return write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _change(value: float, base: float) -> str:
    if base == 0.0:
        return "n/a"
    return f"{100.0 * (value - base) / base:+.2f}%"


def render_ablation_table(result: AblationResult) -> str:
    """Markdown table with one row per arm and the change against the CE-only arm."""
    base = result.arms["ce"]
    groups = [" ".join(map(str, g.class_indices)) for g in result.partition.groups]
    header = ["arm", "mIoU", "accuracy"] + [f"group {g} mIoU" for g in groups] + ["intra-group mass", "mIoU vs ce", "mass vs ce"]
    lines = [
        f"# Ablation (seed {result.seed})",
        "",
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
    ]
    for arm in ARM_NAMES:
        r = result.arms[arm]
        row = [arm, _fmt(r.miou), _fmt(r.accuracy)] + [_fmt(v) for v in r.group_miou]
        row += [
            f"{r.total_intra_group_mass:.4f}",
            _change(r.miou, base.miou),
            _change(r.total_intra_group_mass, base.total_intra_group_mass),
        ]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"
