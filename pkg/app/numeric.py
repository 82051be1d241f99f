"""Dense numeric kernel: softmax, SGD with momentum, learning-rate schedule and PRNG.

Matrices are plain ``numpy.float64`` arrays in row-major order. Everything here
is pure or writes only to arrays the caller owns.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from app.errors import InvalidInputError, RangeError, ShapeError
from app.schemas import SgdConfig

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U30, _U27, _U31, _U11 = (np.uint64(s) for s in (30, 27, 31, 11))
_TWO_POW_M53 = 1.0 / float(1 << 53)


def splitmix64_mix(z: int) -> int:
    """Finalizer of the splitmix64 generator on a 64-bit integer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64
    z = (z ^ (z >> _U30)) * np.uint64(_MIX1)
    z = (z ^ (z >> _U27)) * np.uint64(_MIX2)
    return z ^ (z >> _U31)


def derive_seed(seed: int, *keys: int) -> int:
    """Independent substream seed: fold each key in with XOR, then mix."""
    s = seed & MASK64
    for key in keys:
        s = splitmix64_mix(s ^ (key & MASK64))
    return s


@dataclass
class Rng:
    """splitmix64 generator; the same seed yields the same stream everywhere."""
    state: int

    def __post_init__(self):
        self.state &= MASK64

    @classmethod
    def from_seed(cls, seed: int, *keys: int) -> "Rng":
        return cls(derive_seed(seed, *keys) if keys else seed)

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return splitmix64_mix(self.state)

    def next_u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs, identical to ``n`` calls of :meth:`next_u64`."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
        states = steps + np.uint64(self.state)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return _mix_array(states)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits."""
        return (self.next_u64_array(n) >> _U11).astype(np.float64) * _TWO_POW_M53

    def gaussian(self, n: int, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
        """``n`` normal draws via Box-Muller on pairs of uniforms."""
        pairs = (n + 1) // 2
        raw = self.next_u64_array(2 * pairs)
        u1 = ((raw[0::2] >> _U11).astype(np.float64) + 1.0) * _TWO_POW_M53  # (0, 1]
        u2 = (raw[1::2] >> _U11).astype(np.float64) * _TWO_POW_M53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return mean + stddev * z[:n]

    def unit_vector(self, dim: int) -> np.ndarray:
        while True:
            v = self.gaussian(dim)
            norm = float(np.linalg.norm(v))
            if norm > 1e-12:
                return v / norm

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64_array(n)
        return np.argsort(keys, kind="stable")


def rng_gaussian(rng: Rng, mean: float, stddev: float, size: int = 1) -> np.ndarray:
    """Draw ``size`` Gaussian samples from ``rng``."""
    return rng.gaussian(size, mean, stddev)


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and return ``x`` as a finite 2-D float64 array."""
    try:
        m = np.asarray(x, dtype=np.float64)
    except ValueError:
        raise ShapeError(f"{name} rows have different lengths")
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return m


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a vector, or row-wise of a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim not in (1, 2):
        raise ShapeError(f"softmax expects a vector or matrix, got shape {z.shape}")
    if z.shape[-1] < 2:
        raise ShapeError("softmax needs at least two classes")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax input contains non-finite values")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def sgd_step(
    params: np.ndarray,
    grads: np.ndarray,
    velocity: np.ndarray,
    cfg: SgdConfig,
    lr_current: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """One momentum step: ``v <- mu*v + g + wd*w``, ``w <- w - lr*v``."""
    if params.shape != grads.shape or params.shape != velocity.shape:
        raise ShapeError(
            f"sgd_step shapes differ: params {params.shape}, grads {grads.shape}, velocity {velocity.shape}"
        )
    new_velocity = cfg.momentum * velocity + grads + cfg.weight_decay * params
    return params - lr_current * new_velocity, new_velocity


def linear_lr(step: int, cfg: SgdConfig) -> float:
    """``lr0 * (1 - step / total_steps)`` for ``0 <= step < total_steps``."""
    if step < 0 or step >= cfg.total_steps:
        raise RangeError(f"step {step} outside [0, {cfg.total_steps})")
    return cfg.learning_rate_initial * (1.0 - step / cfg.total_steps)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def add_bias(x: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if bias.ndim != 1 or x.ndim != 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias of shape {bias.shape} does not fit {x.shape}")
    return x + bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, pre_activation: np.ndarray) -> np.ndarray:
    """Zero the gradient wherever the pre-activation was <= 0."""
    if grad.shape != pre_activation.shape:
        raise ShapeError(f"gradient {grad.shape} does not match pre-activation {pre_activation.shape}")
    return np.where(pre_activation > 0.0, grad, 0.0)
