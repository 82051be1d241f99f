"""Synthetic datasets with planted confusable classes, the .cfds format and label remapping."""
import logging
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import GenerationError, InvalidInputError, InvalidLabelError, ParseError, ShapeError
from app.numeric import Rng, derive_seed
from app.schemas import ConfusingGroup, SyntheticSpec
from app.tools import format_float, read_lines, write_text

logger = logging.getLogger(__name__)

DATASET_SUFFIX = ".cfds"
SEPARATION = 6.0  # minimum center distance between unrelated classes, in units of cluster_spread
SIGMAS_PER_SPREAD = 4.0
MAX_PLACEMENT_TRIES = 1000
MAX_RESTARTS = 20

_SPLIT_STREAM = 0x5B1
_PLACEMENT_STREAM = 0xC3E


@dataclass
class Dataset:
    """Feature rows with integer labels in ``[0, class_count)``."""
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    class_names: List[str]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be N x D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows")
        if self.features.shape[0] < 1:
            raise InvalidInputError("a dataset needs at least one sample")
        if self.class_count < 2:
            raise InvalidInputError("a dataset needs at least two classes")
        if len(self.class_names) != self.class_count:
            raise ShapeError(f"{len(self.class_names)} class names for {self.class_count} classes")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("feature rows must be finite")
        check_labels(self.labels, self.class_count)

    @property
    def sample_count(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def class_counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.class_count).tolist()

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count, list(self.class_names))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and self.class_names == other.class_names
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )


@dataclass
class RemappedLabels:
    """Labels in a subnet's source space; index 0 is the "others" class."""
    labels: np.ndarray
    source_space_size: int


def check_labels(labels, class_count: int) -> np.ndarray:
    """Return ``labels`` as int64, raising if any lies outside ``[0, class_count)``."""
    arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= class_count):
        bad = int(arr[(arr < 0) | (arr >= class_count)][0])
        raise InvalidLabelError(f"label {bad} outside [0, {class_count})")
    return arr


def _pair_distances(spec: SyntheticSpec) -> Dict[Tuple[int, int], float]:
    distances: Dict[Tuple[int, int], float] = {}
    for pair in spec.confusable_pairs:
        key = (min(pair.a, pair.b), max(pair.a, pair.b))
        d = 2.0 * spec.cluster_spread * (1.0 - pair.overlap)
        if key in distances and distances[key] != d:
            raise GenerationError(f"conflicting overlaps for pair {key}")
        distances[key] = d
    return distances


def _placement_order(class_count: int, distances: Dict[Tuple[int, int], float]) -> List[int]:
    """Breadth-first order so every paired class follows one of its partners."""
    neighbours: Dict[int, List[int]] = {c: [] for c in range(class_count)}
    for a, b in distances:
        neighbours[a].append(b)
        neighbours[b].append(a)
    order: List[int] = []
    seen = set()
    for start in range(class_count):
        if start in seen:
            continue
        seen.add(start)
        queue = deque([start])
        while queue:
            c = queue.popleft()
            order.append(c)
            for n in sorted(neighbours[c]):
                if n not in seen:
                    seen.add(n)
                    queue.append(n)
    return order


def _on_spheres(anchors: np.ndarray, radii: np.ndarray, rng: Rng) -> Optional[np.ndarray]:
    """A random point at distance ``radii[k]`` from every ``anchors[k]``, or None if there is none."""
    p0, d0 = anchors[0], radii[0]
    if len(anchors) == 1:
        return p0 + d0 * rng.unit_vector(p0.size)
    # subtracting the first sphere equation from the others leaves a linear system
    a = 2.0 * (anchors[1:] - p0)
    b = np.sum(anchors[1:] ** 2, axis=1) - np.sum(p0 ** 2) - radii[1:] ** 2 + d0 ** 2
    base = np.linalg.lstsq(a, b, rcond=None)[0]
    _, s, vt = np.linalg.svd(a)
    rank = int(np.sum(s > 1e-12 * max(1.0, float(s.max()))))
    null = vt[rank:]
    r = base - p0
    r_null = null @ r
    h2 = d0 ** 2 - float(np.sum((r - null.T @ r_null) ** 2))
    if h2 < -1e-9 * max(1.0, d0 ** 2):
        return None
    if null.shape[0] == 0:
        return base
    t = -r_null + np.sqrt(max(h2, 0.0)) * rng.unit_vector(null.shape[0])
    return base + null.T @ t


def _place_centers(spec: SyntheticSpec, rng: Rng) -> np.ndarray:
    k, dim, spread = spec.class_count, spec.feature_dim, spec.cluster_spread
    distances = _pair_distances(spec)
    order = _placement_order(k, distances)
    half_width = 3.0 * spread * (2.0 * k) ** (1.0 / dim)
    min_sep = SEPARATION * spread

    for restart in range(MAX_RESTARTS):
        centers: Dict[int, np.ndarray] = {}
        for c in order:
            partners = [p for p in sorted(centers) if (min(c, p), max(c, p)) in distances]
            anchors = np.stack([centers[p] for p in partners]) if partners else None
            radii = np.array([distances[(min(c, p), max(c, p))] for p in partners])
            for _ in range(MAX_PLACEMENT_TRIES):
                if partners:
                    candidate = _on_spheres(anchors, radii, rng)
                    if candidate is None:
                        continue
                else:
                    candidate = (2.0 * rng.uniform(dim) - 1.0) * half_width
                if _feasible(c, candidate, centers, distances, min_sep):
                    centers[c] = candidate
                    break
            else:
                logger.debug(f"restart {restart}: could not place class {c}")
                break
        if len(centers) == k:
            return np.stack([centers[c] for c in range(k)])
    raise GenerationError(
        f"could not place {k} cluster centers in {dim} dimensions after {MAX_RESTARTS} restarts"
    )


def _feasible(c, candidate, centers, distances, min_sep) -> bool:
    for other, center in centers.items():
        dist = float(np.linalg.norm(candidate - center))
        key = (min(c, other), max(c, other))
        if key in distances:
            if abs(dist - distances[key]) > 1e-9 * max(1.0, distances[key]):
                return False
        elif dist < min_sep:
            return False
    return True


def generate(spec: SyntheticSpec) -> Dataset:
    """
    Generate one Gaussian cluster per class.

    Confusable pairs sit ``2 * spread * (1 - overlap)`` apart; every other pair
    of centers is at least ``6 * spread`` apart. Samples are ordered by class.

    Args:
        spec: Dataset recipe

    Returns:
        The generated dataset, identical for identical recipes
    """
    rng = Rng(spec.seed)
    centers = _place_centers(spec, Rng.from_seed(spec.seed, _PLACEMENT_STREAM))
    sigma = spec.cluster_spread / SIGMAS_PER_SPREAD
    counts = spec.counts()
    blocks, labels = [], []
    for c, n in enumerate(counts):
        noise = rng.gaussian(n * spec.feature_dim, 0.0, sigma).reshape(n, spec.feature_dim)
        blocks.append(centers[c] + noise)
        labels.append(np.full(n, c, dtype=np.int64))
    logger.info(f"generated {sum(counts)} samples, K={spec.class_count}, D={spec.feature_dim}")
    return Dataset(np.vstack(blocks), np.concatenate(labels), spec.class_count, spec.names())


def remap_for_group(labels, group: ConfusingGroup, class_count: int) -> RemappedLabels:
    """Map in-group labels to their 1-based group position and everything else to 0."""
    arr = check_labels(labels, class_count)
    if group.class_indices[-1] >= class_count:
        raise InvalidLabelError(f"group {group.class_indices} references a class >= {class_count}")
    table = np.zeros(class_count, dtype=np.int64)
    for pos, c in enumerate(group.class_indices, start=1):
        table[c] = pos
    return RemappedLabels(labels=table[arr], source_space_size=len(group) + 1)


def train_validation_split(dataset: Dataset, seed: int, validation_fraction: float = 0.2) -> Tuple[Dataset, Dataset]:
    """Deterministic split; both parts keep the original sample order."""
    n = dataset.sample_count
    if n < 2:
        raise InvalidInputError("need at least two samples to split")
    n_val = min(n - 1, max(1, int(round(n * validation_fraction))))
    order = Rng.from_seed(derive_seed(seed, _SPLIT_STREAM)).permutation(n)
    val_idx = np.sort(order[:n_val])
    train_idx = np.sort(order[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


def save_dataset(dataset: Dataset, path: str) -> str:
    """Write ``N D K``, the class names, then one ``features... label`` row per sample."""
    lines = [
        f"{dataset.sample_count} {dataset.feature_dim} {dataset.class_count}",
        " ".join(dataset.class_names),
    ]
    for row, label in zip(dataset.features, dataset.labels):
        lines.append(" ".join([format_float(v) for v in row] + [str(int(label))]))
    return write_text(path, "\n".join(lines) + "\n")


def load_dataset(path: str) -> Dataset:
    """Parse a .cfds file, reporting the offending line on malformed input."""
    lines = read_lines(path)
    if not lines:
        raise ParseError("empty dataset file", path, 1)
    header = lines[0].split()
    if len(header) != 3:
        raise ParseError(f"header must be 'N D K', got '{lines[0]}'", path, 1)
    try:
        n, dim, k = (int(tok) for tok in header)
    except ValueError:
        raise ParseError(f"header must hold three integers, got '{lines[0]}'", path, 1)
    if n < 1 or dim < 1 or k < 2:
        raise ParseError(f"invalid sizes N={n} D={dim} K={k}", path, 1)
    if len(lines) < 2:
        raise ParseError("missing class-name line", path, 2)
    names = lines[1].split()
    if len(names) != k:
        raise ParseError(f"expected {k} class names, got {len(names)}", path, 2)

    body = lines[2:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != n:
        raise ParseError(f"expected {n} sample rows, got {len(body)}", path, 2 + len(body))
    features = np.empty((n, dim), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for i, raw in enumerate(body):
        number = i + 3
        tokens = raw.split()
        if len(tokens) != dim + 1:
            raise ParseError(f"expected {dim + 1} columns, got {len(tokens)}", path, number)
        try:
            features[i] = [float(t) for t in tokens[:dim]]
            label = int(tokens[dim])
        except ValueError as e:
            raise ParseError(f"bad number: {e}", path, number)
        if not np.all(np.isfinite(features[i])):
            raise ParseError("non-finite feature value", path, number)
        if label < 0 or label >= k:
            raise InvalidLabelError(f"{path}:{number}: label {label} outside [0, {k})")
        labels[i] = label
    return Dataset(features, labels, k, names)


def nearest_centroid_predict(train: Dataset, features: np.ndarray, class_count: Optional[int] = None) -> np.ndarray:
    """Classify rows by the closest class mean of ``train``; used to probe separability."""
    k = class_count or train.class_count
    centroids = np.stack([
        train.features[train.labels == c].mean(axis=0) if np.any(train.labels == c)
        else np.full(train.feature_dim, np.inf)
        for c in range(k)
    ])
    d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)
