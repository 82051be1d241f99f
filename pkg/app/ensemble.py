"""Mapping subnet output spaces onto the full label space and fusing the results."""
import io
import csv
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.config import Config
from app.errors import InvalidInputError, InvalidPartitionError, ShapeError
from app.model import ModelState, head_logits, check_features
from app.numeric import softmax
from app.schemas import ConfusingGroup, FusionConfig, GroupPartition
from app.tools import format_float, write_text

logger = logging.getLogger(__name__)

DEGENERATE_MASS = 1e-12


@dataclass
class OutputSpaceMap:
    """Source index ``s >= 1`` maps to ``in_group[s - 1]``; source 0 spreads over ``others_targets``."""
    group: ConfusingGroup
    target_class_count: int
    in_group: np.ndarray
    others_targets: np.ndarray

    @classmethod
    def from_group(cls, group: ConfusingGroup, target_class_count: int) -> "OutputSpaceMap":
        if group.class_indices[-1] >= target_class_count:
            raise InvalidPartitionError(
                f"group {group.class_indices} does not fit {target_class_count} target classes"
            )
        inside = np.asarray(group.class_indices, dtype=np.int64)
        others = np.asarray([c for c in range(target_class_count) if c not in group], dtype=np.int64)
        return cls(group, target_class_count, inside, others)

    @property
    def source_size(self) -> int:
        return len(self.group) + 1


def transform_batch(source: np.ndarray, space: OutputSpaceMap, reference: np.ndarray) -> np.ndarray:
    """Row-wise :func:`transform` of N x (|G|+1) source distributions."""
    src = np.asarray(source, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != space.source_size:
        raise ShapeError(f"source must be N x {space.source_size}, got {src.shape}")
    if ref.shape != (src.shape[0], space.target_class_count):
        raise ShapeError(f"reference must be {src.shape[0]} x {space.target_class_count}, got {ref.shape}")

    target = np.zeros_like(ref)
    target[:, space.in_group] = src[:, 1:]
    others_mass = src[:, 0]
    if space.others_targets.size == 0:
        # no classes outside the group: drop any stray "others" mass
        spill = others_mass > 0.0
        if np.any(spill):
            target[spill] = target[spill] / target[spill].sum(axis=1, keepdims=True)
        return target

    ref_out = ref[:, space.others_targets]
    r = ref_out.sum(axis=1)
    proportional = r >= DEGENERATE_MASS
    out = np.empty_like(ref_out)
    safe_r = np.where(proportional, r, 1.0)
    out[proportional] = (others_mass[:, None] * ref_out / safe_r[:, None])[proportional]
    out[~proportional] = (others_mass[:, None] / space.others_targets.size).repeat(
        space.others_targets.size, axis=1
    )[~proportional]
    target[:, space.others_targets] = out
    return target


def transform(source_probs, space: OutputSpaceMap, reference_probs) -> np.ndarray:
    """
    Map one subnet distribution into the full label space.

    In-group classes copy their source entry. The "others" entry is split
    over the out-group classes in proportion to ``reference_probs`` (subnet
    0's distribution), or uniformly when that reference puts no mass there.
    """
    src = np.asarray(source_probs, dtype=np.float64)
    ref = np.asarray(reference_probs, dtype=np.float64)
    if src.ndim != 1 or ref.ndim != 1:
        raise ShapeError("transform expects two probability vectors")
    return transform_batch(src[None, :], space, ref[None, :])[0]


def _stack(distributions) -> np.ndarray:
    if isinstance(distributions, np.ndarray):
        stacked = distributions.astype(np.float64)
    else:
        if len(distributions) == 0:
            raise InvalidInputError("nothing to fuse")
        shapes = {np.shape(d) for d in distributions}
        if len(shapes) != 1:
            raise ShapeError(f"distributions have different shapes: {sorted(shapes)}")
        stacked = np.stack([np.asarray(d, dtype=np.float64) for d in distributions])
    if stacked.shape[0] == 0:
        raise InvalidInputError("nothing to fuse")
    return stacked


def fuse(distributions, cfg: Optional[FusionConfig] = None) -> np.ndarray:
    """
    Combine distributions over the same K classes.

    Sum rule: arithmetic mean. Product rule: geometric mean of the entries
    clamped below at 1e-12. Both are renormalized. Accepts a list of
    K-vectors or of N x K matrices (fused row by row).
    """
    cfg = cfg or FusionConfig()
    stacked = _stack(distributions)
    if cfg.rule == "sum":
        combined = np.mean(stacked, axis=0)
    else:
        combined = np.exp(np.mean(np.log(np.maximum(stacked, Config.FUSION_FLOOR)), axis=0))
    return combined / np.sum(combined, axis=-1, keepdims=True)


def output_maps(model: ModelState) -> List[OutputSpaceMap]:
    return [OutputSpaceMap.from_group(h.group, model.class_count) for h in model.heads[1:]]


def _check_partition(model: ModelState, partition: Optional[GroupPartition]):
    if partition is None:
        return
    model_groups = [h.group.class_indices for h in model.heads[1:]]
    if [g.class_indices for g in partition.groups] != model_groups:
        raise InvalidPartitionError(
            f"partition groups {[g.class_indices for g in partition.groups]} do not match model heads {model_groups}"
        )


def head_distributions(model: ModelState, features) -> List[np.ndarray]:
    """Softmax output of every head, head 0 first."""
    x = check_features(model, features)
    hidden = model.encoder.features(x)
    return [softmax(head_logits(head, hidden)) for head in model.heads]


def predict(model: ModelState, features, partition: Optional[GroupPartition] = None,
            cfg: Optional[FusionConfig] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Fused class distribution and argmax class per sample.

    Returns:
        ``(N x K probabilities, N predicted classes)``; ties go to the smaller index
    """
    cfg = cfg or FusionConfig()
    _check_partition(model, partition)
    dists = head_distributions(model, features)
    reference = dists[0]
    members = [reference] if cfg.include_subnet0 else []
    for probs, space in zip(dists[1:], output_maps(model)):
        members.append(transform_batch(probs, space, reference))
    if not members:
        members = [reference]
    fused = fuse(members, cfg)
    return fused, np.argmax(fused, axis=1)


def save_predictions_csv(path: str, probabilities: np.ndarray, classes: np.ndarray,
                         class_names: Sequence[str]) -> str:
    """One row per sample: index, argmax class, then the K fused probabilities."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "class"] + [f"p_{name}" for name in class_names])
    for i, (row, c) in enumerate(zip(probabilities, classes)):
        writer.writerow([i, int(c)] + [format_float(v) for v in row])
    return write_text(path, buf.getvalue())
