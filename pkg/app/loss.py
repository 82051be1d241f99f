"""Cross-entropy, the confusion-weighted cross-entropy and its gradient w.r.t. the logits.

The weighted loss for a sample of true class ``i`` is::

    L = -c_ii * log q_i - lam * sum_{j != i} c_ij * log(1 - q_j)

Both log arguments are clamped below at ``epsilon``. The gradient is the
closed form in :func:`improved_ce_grad`; :func:`finite_diff_grad` is the
oracle it is checked against.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple, Union

import numpy as np

from app.config import Config
from app.confusion import WeightMatrix
from app.errors import InvalidInputError, RangeError, ShapeError
from app.numeric import Rng, softmax
from app.schemas import GradcheckReport

logger = logging.getLogger(__name__)

GRADCHECK_LAMBDAS = (0.0, 0.5, 1.0, 5.0)


@dataclass
class OneHotLabel:
    """True class ``class_index`` out of ``class_count``."""
    class_index: int
    class_count: int

    def __post_init__(self):
        if self.class_count < 2:
            raise InvalidInputError("need at least two classes")
        if not 0 <= self.class_index < self.class_count:
            raise RangeError(f"label {self.class_index} outside [0, {self.class_count})")

    def vector(self) -> np.ndarray:
        p = np.zeros(self.class_count)
        p[self.class_index] = 1.0
        return p


@dataclass
class LossConfig:
    """``lam`` balances the penalty term against the correct-class term; ``weight_matrix`` is C."""
    lam: float
    weight_matrix: WeightMatrix
    epsilon: float = Config.LOG_EPSILON

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0.0:
            raise InvalidInputError(f"lambda must be a finite non-negative number, got {self.lam}")
        if not 0.0 < self.epsilon <= 1e-3:
            raise InvalidInputError(f"epsilon must lie in (0, 1e-3], got {self.epsilon}")

    @property
    def class_count(self) -> int:
        return self.weight_matrix.class_count

    @classmethod
    def standard(cls, class_count: int, epsilon: float = Config.LOG_EPSILON) -> "LossConfig":
        """Plain cross-entropy expressed as ``lam = 0``, ``C = I``."""
        return cls(0.0, WeightMatrix.identity(class_count), epsilon)


LabelLike = Union[OneHotLabel, int]


def _label_index(label: LabelLike, class_count: int) -> int:
    if isinstance(label, OneHotLabel):
        if label.class_count != class_count:
            raise ShapeError(f"label is over {label.class_count} classes, distribution over {class_count}")
        return label.class_index
    index = int(label)
    if not 0 <= index < class_count:
        raise RangeError(f"label {index} outside [0, {class_count})")
    return index


def _check_probabilities(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size < 2:
        raise ShapeError(f"expected a probability vector over K >= 2 classes, got shape {q.shape}")
    if not np.all(np.isfinite(q)) or np.any(q < 0.0) or np.any(q > 1.0):
        raise InvalidInputError("probabilities must be finite and lie in [0, 1]")
    if abs(float(q.sum()) - 1.0) > 1e-9:
        raise InvalidInputError(f"probabilities sum to {float(q.sum())!r}, not 1")
    return q


def _row_terms(probs: np.ndarray, labels: np.ndarray, cfg: LossConfig):
    rows = np.arange(probs.shape[0])
    w = cfg.weight_matrix.weights[labels]
    c_true = w[rows, labels]
    w_off = w.copy()
    w_off[rows, labels] = 0.0
    return rows, c_true, w_off


def _losses(probs: np.ndarray, labels: np.ndarray, cfg: LossConfig) -> np.ndarray:
    rows, c_true, w_off = _row_terms(probs, labels, cfg)
    correct = -np.log(np.maximum(probs[rows, labels], cfg.epsilon))
    penalty = np.sum(w_off * np.log(np.maximum(1.0 - probs, cfg.epsilon)), axis=1)
    return c_true * correct - cfg.lam * penalty


def _grads(probs: np.ndarray, labels: np.ndarray, cfg: LossConfig) -> np.ndarray:
    rows, c_true, w_off = _row_terms(probs, labels, cfg)
    clamped = np.minimum(probs, 1.0 - cfg.epsilon)
    ratio = clamped / (clamped - 1.0)
    shared = c_true + cfg.lam * np.sum(w_off * ratio, axis=1)
    grad = probs * shared[:, None] - cfg.lam * ratio * w_off
    grad[rows, labels] -= c_true
    return grad


def standard_ce(q, label: LabelLike, epsilon: float = Config.LOG_EPSILON) -> float:
    """``-log(max(q_i, epsilon))`` for true class ``i``."""
    q = _check_probabilities(q)
    i = _label_index(label, q.size)
    return float(-np.log(np.maximum(q[i:i + 1], epsilon))[0])


def improved_ce(q, label: LabelLike, cfg: LossConfig) -> float:
    """Confusion-weighted cross-entropy of one probability vector."""
    q = _check_probabilities(q)
    if cfg.class_count != q.size:
        raise ShapeError(f"C is {cfg.class_count}x{cfg.class_count} but q has {q.size} entries")
    i = _label_index(label, q.size)
    return float(_losses(q[None, :], np.array([i]), cfg)[0])


def improved_ce_grad(logits, label: LabelLike, cfg: LossConfig) -> np.ndarray:
    """
    Gradient of :func:`improved_ce` composed with softmax, w.r.t. the logits.

    For ``k == i``: ``q_k (c_ii + lam S) - c_ii``; for ``k != i``:
    ``q_k (c_ii + lam S) - lam c_ik q_k / (q_k - 1)``, where
    ``S = sum_{j != i} c_ij q_j / (q_j - 1)`` and every ``q_j`` in a
    denominator is clamped to at most ``1 - epsilon``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError(f"logits must be a vector, got shape {z.shape}")
    q = softmax(z)
    if cfg.class_count != q.size:
        raise ShapeError(f"C is {cfg.class_count}x{cfg.class_count} but logits have {q.size} entries")
    i = _label_index(label, q.size)
    return _grads(q[None, :], np.array([i]), cfg)[0]


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], logits, step: float = 1e-6) -> np.ndarray:
    """Central differences ``(L(z + h e_k) - L(z - h e_k)) / 2h`` per coordinate."""
    if not 1e-8 <= step <= 1e-3:
        raise RangeError(f"finite-difference step {step} outside [1e-8, 1e-3]")
    z = np.asarray(logits, dtype=np.float64)
    grad = np.zeros_like(z)
    for k in range(z.size):
        plus = z.copy()
        minus = z.copy()
        plus[k] += step
        minus[k] -= step
        grad[k] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * step)
    return grad


def batch_loss_and_grad(logits_batch, labels, cfg: LossConfig,
                        sample_weights=None) -> Tuple[float, np.ndarray]:
    """
    Mean loss over a batch and its gradient w.r.t. every logit.

    Args:
        logits_batch: N x K logits
        labels: N true classes
        cfg: Loss configuration over K classes
        sample_weights: Optional non-negative weight per row; the weighted
            sum is still divided by N

    Returns:
        ``(mean loss, N x K gradient already scaled by 1/N)``
    """
    z = np.asarray(logits_batch, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z.ndim != 2:
        raise ShapeError(f"logits batch must be N x K, got shape {z.shape}")
    if z.shape[0] != y.size:
        raise ShapeError(f"{z.shape[0]} logit rows but {y.size} labels")
    if z.shape[0] == 0:
        raise InvalidInputError("empty batch")
    if z.shape[1] != cfg.class_count:
        raise ShapeError(f"C is {cfg.class_count}x{cfg.class_count} but logits have {z.shape[1]} columns")
    if y.min() < 0 or y.max() >= cfg.class_count:
        raise RangeError(f"labels must lie in [0, {cfg.class_count})")
    probs = softmax(z)
    n = z.shape[0]
    if sample_weights is None:
        return float(np.sum(_losses(probs, y, cfg)) / n), _grads(probs, y, cfg) / n
    w = np.asarray(sample_weights, dtype=np.float64).reshape(-1)
    if w.size != n:
        raise ShapeError(f"{w.size} sample weights for {n} rows")
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise RangeError("sample weights must be finite and non-negative")
    return float(np.sum(w * _losses(probs, y, cfg)) / n), _grads(probs, y, cfg) * (w / n)[:, None]


def class_balance_weights(labels, class_count: int, scheme: str = "sqrt_inv") -> np.ndarray:
    """
    Per-sample weights that counter class imbalance.

    ``inv`` weighs class ``c`` by ``1 / n_c``, ``sqrt_inv`` by ``1 / sqrt(n_c)``
    and ``none`` by 1. Weights are scaled so their mean over ``labels`` is 1.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise InvalidInputError("no labels to balance")
    if y.min() < 0 or y.max() >= class_count:
        raise RangeError(f"labels must lie in [0, {class_count})")
    if scheme == "none":
        return np.ones(y.size)
    powers = {"inv": 1.0, "sqrt_inv": 0.5}
    if scheme not in powers:
        raise InvalidInputError(f"unknown balancing scheme '{scheme}'")
    counts = np.bincount(y, minlength=class_count).astype(np.float64)
    per_class = np.zeros(class_count)
    present = counts > 0
    per_class[present] = counts[present] ** -powers[scheme]
    w = per_class[y]
    return w * (y.size / np.sum(w))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute difference scaled by the larger gradient's magnitude (floor 1e-8)."""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def random_weight_matrix(rng: Rng, class_count: int) -> WeightMatrix:
    """Entries uniform in [0, 1) with a unit diagonal."""
    w = rng.uniform(class_count * class_count).reshape(class_count, class_count)
    np.fill_diagonal(w, 1.0)
    return WeightMatrix(w)


def gradcheck(
    trials: int = 200,
    k_min: int = 2,
    k_max: int = 12,
    lambdas: Sequence[float] = GRADCHECK_LAMBDAS,
    seed: int = 0,
    step: float = 1e-6,
    tolerance: float = 1e-5,
) -> GradcheckReport:
    """
    Compare :func:`improved_ce_grad` with central differences on random instances.

    Each trial draws K in ``[k_min, k_max]``, standard-normal logits, a random
    label and a random C with unit diagonal; lambda cycles through ``lambdas``.
    """
    if trials < 1:
        raise RangeError("trials must be positive")
    if k_min < 2 or k_max < k_min:
        raise RangeError(f"invalid class-count range {k_min}..{k_max}")
    rng = Rng(seed)
    worst, worst_k, worst_lam = 0.0, k_min, float(lambdas[0])
    for t in range(trials):
        k = k_min + int(rng.next_u64() % (k_max - k_min + 1))
        lam = float(lambdas[t % len(lambdas)])
        label = int(rng.next_u64() % k)
        logits = rng.gaussian(k)
        cfg = LossConfig(lam, random_weight_matrix(rng, k))
        analytic = improved_ce_grad(logits, label, cfg)
        numeric = finite_diff_grad(lambda z: improved_ce(softmax(z), label, cfg), logits, step)
        err = relative_error(analytic, numeric)
        if err > worst:
            worst, worst_k, worst_lam = err, k, lam
    logger.info(f"gradcheck: {trials} trials, max relative error {worst:.3e}")
    return GradcheckReport(
        trials=trials,
        k_min=k_min,
        k_max=k_max,
        step=step,
        tolerance=tolerance,
        max_relative_error=worst,
        worst_class_count=worst_k,
        worst_lambda=worst_lam,
        passed=worst < tolerance,
    )
