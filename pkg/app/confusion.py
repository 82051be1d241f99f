"""Confusion matrices, discriminative confusing groups and the loss weight matrix."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from app.config import Config
from app.errors import InvalidInputError, InvalidPartitionError, ParseError, RangeError, ShapeError
from app.data import check_labels
from app.schemas import ConfusingGroup, GroupPartition
from app.tools import format_float, read_lines, read_matrix_csv, write_matrix_csv, write_text

logger = logging.getLogger(__name__)

KINDS = ("counts", "normalized", "weights")


@dataclass
class ConfusionMatrix:
    """Counts of (true class, predicted class) pairs; rows are the true class."""
    class_count: int
    counts: np.ndarray = None
    class_names: Optional[List[str]] = None

    def __post_init__(self):
        if self.class_count < 2:
            raise InvalidInputError("a confusion matrix needs at least two classes")
        if self.counts is None:
            self.counts = np.zeros((self.class_count, self.class_count), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.class_count, self.class_count):
            raise ShapeError(f"counts must be {self.class_count}x{self.class_count}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise InvalidInputError("confusion counts must be non-negative")
        if self.class_names is None:
            self.class_names = [f"class{i}" for i in range(self.class_count)]
        if len(self.class_names) != self.class_count:
            raise ShapeError(f"{len(self.class_names)} names for {self.class_count} classes")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def normalized(self) -> np.ndarray:
        return normalize(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return self.class_count == other.class_count and np.array_equal(self.counts, other.counts)


@dataclass
class WeightMatrix:
    """The loss weights ``C = [c_ij]``: entries in [0, 1], positive diagonal."""
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 2:
            raise ShapeError(f"weight matrix must be K x K with K >= 2, got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0.0) or np.any(w > 1.0):
            raise InvalidInputError("weight entries must lie in [0, 1]")
        if np.any(np.diag(w) <= 0.0):
            raise InvalidInputError("weight diagonal must be strictly positive")
        self.weights = w

    @property
    def class_count(self) -> int:
        return int(self.weights.shape[0])

    @classmethod
    def identity(cls, class_count: int) -> "WeightMatrix":
        return cls(np.eye(class_count))


def accumulate(cm: ConfusionMatrix, true_labels, predicted_labels) -> ConfusionMatrix:
    """Return ``cm`` with one count added per (truth, prediction) pair."""
    truth = check_labels(true_labels, cm.class_count)
    pred = check_labels(predicted_labels, cm.class_count)
    if truth.shape != pred.shape:
        raise ShapeError(f"{truth.size} true labels but {pred.size} predictions")
    k = cm.class_count
    tally = np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(k, cm.counts + tally, list(cm.class_names))


def normalize(cm: ConfusionMatrix) -> np.ndarray:
    """Row-normalized rates; rows without any sample stay all-zero."""
    counts = cm.counts.astype(np.float64)
    row_sums = counts.sum(axis=1, keepdims=True)
    rates = np.zeros_like(counts)
    np.divide(counts, row_sums, out=rates, where=row_sums > 0)
    return rates


def _check_rates(rates) -> np.ndarray:
    m = np.asarray(rates, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise ShapeError(f"rates must be K x K with K >= 2, got {m.shape}")
    return m


def group_mass(rates: np.ndarray, group: Sequence[int]) -> float:
    """Sum of the off-diagonal rates inside ``group``."""
    idx = np.asarray(list(group), dtype=np.int64)
    block = rates[np.ix_(idx, idx)]
    return float(block.sum() - np.trace(block))


def partition_from_rates(rates, threshold: float, max_groups: Optional[int] = None) -> GroupPartition:
    """
    Group classes by thresholded confusion.

    Classes i != j share an edge when ``max(m_ij, m_ji) >= threshold``; the
    groups are the connected components with at least two members.

    Args:
        rates: K x K row-normalized confusion rates
        threshold: Edge threshold tau in (0, 1)
        max_groups: Keep only this many groups, the most confused first

    Returns:
        Partition with groups ordered by their smallest member
    """
    if not 0.0 < threshold < 1.0:
        raise RangeError(f"threshold {threshold} outside (0, 1)")
    m = _check_rates(rates)
    k = m.shape[0]
    adjacency = np.maximum(m, m.T) >= threshold
    np.fill_diagonal(adjacency, False)
    _, component = connected_components(csr_matrix(adjacency), directed=False)

    groups: List[List[int]] = []
    for label in np.unique(component):
        members = sorted(int(c) for c in np.flatnonzero(component == label))
        if len(members) >= 2:
            groups.append(members)

    if max_groups is not None and len(groups) > max_groups:
        ranked = sorted(groups, key=lambda g: (-group_mass(m, g), g[0]))
        dropped = ranked[max_groups:]
        groups = ranked[:max_groups]
        logger.info(f"keeping {max_groups} of {len(ranked)} groups, dropped {dropped}")

    return GroupPartition.from_groups(groups, k, threshold)


def partition_groups(cm: ConfusionMatrix, threshold: float, max_groups: Optional[int] = None) -> GroupPartition:
    """Discriminative confusing groups from a confusion matrix."""
    return partition_from_rates(normalize(cm), threshold, max_groups)


def derive_weight_matrix(cm_or_rates, diagonal_floor: float = Config.DIAGONAL_FLOOR) -> WeightMatrix:
    """``c_ij = m_ij`` off the diagonal and ``c_ii = max(m_ii, diagonal_floor)``."""
    if not 0.0 < diagonal_floor <= 1.0:
        raise RangeError(f"diagonal_floor {diagonal_floor} outside (0, 1]")
    if isinstance(cm_or_rates, ConfusionMatrix):
        rates = normalize(cm_or_rates)
    else:
        rates = _check_rates(cm_or_rates)
    weights = np.clip(rates, 0.0, 1.0)
    np.fill_diagonal(weights, np.maximum(np.diag(weights), diagonal_floor))
    return WeightMatrix(weights)


def restrict_weight_matrix(weights: WeightMatrix, group: ConfusingGroup,
                           diagonal_floor: float = Config.DIAGONAL_FLOOR) -> WeightMatrix:
    """
    Weight matrix over a subnet's source space (index 0 = "others").

    The in-group block is copied; the others row and column sum the
    out-group entries, clipped to [0, 1].
    """
    c = weights.weights
    k = c.shape[0]
    inside = np.asarray(group.class_indices, dtype=np.int64)
    if inside[-1] >= k:
        raise InvalidPartitionError(f"group {group.class_indices} references a class >= {k}")
    outside = np.asarray([i for i in range(k) if i not in group], dtype=np.int64)
    size = len(group) + 1
    r = np.zeros((size, size))
    r[1:, 1:] = c[np.ix_(inside, inside)]
    if outside.size:
        r[1:, 0] = c[np.ix_(inside, outside)].sum(axis=1)
        r[0, 1:] = c[np.ix_(outside, inside)].sum(axis=0)
        r[0, 0] = c[np.ix_(outside, outside)].sum()
    r = np.clip(r, 0.0, 1.0)
    np.fill_diagonal(r, np.maximum(np.diag(r), diagonal_floor))
    return WeightMatrix(r)


def save_confusion_csv(cm: ConfusionMatrix, path: str, kind: str = "counts") -> str:
    """Export counts or normalized rates."""
    if kind == "counts":
        rows = [[str(int(v)) for v in row] for row in cm.counts]
    elif kind == "normalized":
        rows = [[format_float(v) for v in row] for row in normalize(cm)]
    else:
        raise InvalidInputError(f"confusion CSV kind must be counts or normalized, got '{kind}'")
    return write_matrix_csv(path, kind, cm.class_names, rows)


def save_weight_csv(weights: WeightMatrix, names: Sequence[str], path: str) -> str:
    rows = [[format_float(v) for v in row] for row in weights.weights]
    return write_matrix_csv(path, "weights", names, rows)


def load_matrix_csv(path: str) -> Tuple[str, List[str], np.ndarray]:
    """Read any matrix CSV; returns ``(kind, names, values)``."""
    kind, names, rows = read_matrix_csv(path)
    if kind not in KINDS:
        raise ParseError(f"unknown matrix kind '{kind}'", path, 1)
    try:
        values = np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
    except ValueError as e:
        raise ParseError(f"bad number: {e}", path)
    if len(names) < 2:
        raise ParseError("need at least two classes", path, 2)
    return kind, names, values


def load_confusion_csv(path: str) -> ConfusionMatrix:
    """Read a counts CSV back into a :class:`ConfusionMatrix`."""
    kind, names, values = load_matrix_csv(path)
    if kind != "counts":
        raise ParseError(f"expected kind=counts, got kind={kind}", path, 1)
    if np.any(values != np.round(values)) or np.any(values < 0):
        raise ParseError("counts must be non-negative integers", path)
    return ConfusionMatrix(len(names), values.astype(np.int64), names)


def load_rates(path: str) -> np.ndarray:
    """Normalized rates from either a counts or a normalized CSV."""
    kind, names, values = load_matrix_csv(path)
    if kind == "counts":
        return normalize(ConfusionMatrix(len(names), values.astype(np.int64), names))
    if kind == "normalized":
        return values
    raise ParseError(f"kind={kind} is not a confusion matrix", path, 1)


def save_partition(partition: GroupPartition, path: str) -> str:
    """One group per line, class indices separated by spaces."""
    text = "".join(" ".join(str(c) for c in g.class_indices) + "\n" for g in partition.groups)
    return write_text(path, text)


def load_partition(path: str, class_count: int, threshold: Optional[float] = None) -> GroupPartition:
    groups = []
    for number, raw in enumerate(read_lines(path), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            members = [int(tok) for tok in line.split()]
        except ValueError:
            raise ParseError(f"group line must hold integers, got '{line}'", path, number)
        if len(members) < 2 or len(set(members)) != len(members):
            raise InvalidPartitionError(f"{path}:{number}: a group needs at least two distinct classes")
        if min(members) < 0 or max(members) >= class_count:
            raise InvalidPartitionError(f"{path}:{number}: class index outside [0, {class_count})")
        groups.append(members)
    try:
        return GroupPartition.from_groups(groups, class_count, threshold)
    except ValueError as e:
        raise InvalidPartitionError(str(e))
