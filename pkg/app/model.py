"""Shared MLP feature encoder with one linear classification head per subnet.

Head 0 covers the full label space. Head ``h >= 1`` covers one confusing group
plus an "others" class at source index 0.
"""
import copy
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.config import Config
from app.data import RemappedLabels
from app.errors import InvalidInputError, InvalidLabelError, InvalidPartitionError, ParseError, RangeError, ShapeError
from app.loss import LossConfig, batch_loss_and_grad
from app.numeric import Rng, add_bias, as_matrix, linear_lr, matmul, relu, relu_backward, sgd_step
from app.schemas import ConfusingGroup, GroupPartition, SgdConfig, TrainingReport
from app.tools import format_float, read_lines, write_text

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "CONFNET-CHECKPOINT"
CHECKPOINT_VERSION = 1

_INIT_STREAM = 0x1A17
_TRAIN_STREAM = 0x7EA1
_ENCODER_KEY = 0xE0C


@dataclass
class Encoder:
    """Two hidden ReLU layers, D -> H -> H."""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        d, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, h) or self.b2.shape != (h,):
            raise ShapeError("encoder parameter shapes are inconsistent")

    @property
    def input_dim(self) -> int:
        return int(self.w1.shape[0])

    @property
    def hidden_dim(self) -> int:
        return int(self.w1.shape[1])

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Pre- and post-activations of both layers, for backprop."""
        z1 = add_bias(matmul(x, self.w1), self.b1)
        a1 = relu(z1)
        z2 = add_bias(matmul(a1, self.w2), self.b2)
        return z1, a1, z2, relu(z2)

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[3]


@dataclass
class SubnetHead:
    """Linear map from the encoder features to one subnet's output space."""
    weights: np.ndarray
    bias: np.ndarray
    group: Optional[ConfusingGroup] = None

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError("head weight and bias shapes are inconsistent")
        if self.output_dim < 2:
            raise ShapeError("a head needs at least two outputs")
        if self.group is not None and self.output_dim != len(self.group) + 1:
            raise ShapeError(f"head for group {self.group.class_indices} must have {len(self.group) + 1} outputs")

    @property
    def output_dim(self) -> int:
        return int(self.weights.shape[1])

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}


@dataclass
class ModelState:
    """Encoder plus M heads; head 0 first."""
    encoder: Encoder
    heads: List[SubnetHead]
    rng_seed: int = Config.SEED
    class_names: Optional[List[str]] = None

    def __post_init__(self):
        if not self.heads:
            raise InvalidInputError("a model needs at least head 0")
        if self.heads[0].group is not None:
            raise InvalidPartitionError("head 0 must cover the full label space")
        if self.class_names is None:
            self.class_names = [f"class{i}" for i in range(self.class_count)]
        if len(self.class_names) != self.class_count:
            raise ShapeError(f"{len(self.class_names)} class names for {self.class_count} classes")
        if any(not n or any(ch.isspace() for ch in n) for n in self.class_names):
            raise InvalidInputError("class names must be non-empty and contain no whitespace")
        for head in self.heads:
            if head.weights.shape[0] != self.encoder.hidden_dim:
                raise ShapeError("head input size differs from the encoder width")
        seen = set()
        for head in self.heads[1:]:
            if head.group is None:
                raise InvalidPartitionError("heads 1..M-1 need a confusing group")
            for c in head.group.class_indices:
                if c >= self.class_count:
                    raise InvalidPartitionError(f"group class {c} outside [0, {self.class_count})")
                if c in seen:
                    raise InvalidPartitionError(f"class {c} is in two subnet groups")
                seen.add(c)

    @property
    def head_count(self) -> int:
        return len(self.heads)

    @property
    def class_count(self) -> int:
        return self.heads[0].output_dim

    def partition(self) -> GroupPartition:
        return GroupPartition.from_groups([h.group for h in self.heads[1:]], self.class_count)


def _gaussian_matrix(rng: Rng, rows: int, cols: int) -> np.ndarray:
    return rng.gaussian(rows * cols, 0.0, math.sqrt(2.0 / rows)).reshape(rows, cols)


def _init_head(hidden_dim: int, output_dim: int, group: Optional[ConfusingGroup], seed: int, index: int) -> SubnetHead:
    rng = Rng.from_seed(seed, _INIT_STREAM, index)
    return SubnetHead(_gaussian_matrix(rng, hidden_dim, output_dim), np.zeros(output_dim), group)


def _groups_of(partition: Union[GroupPartition, Sequence, None], class_count: int) -> List[ConfusingGroup]:
    if partition is None:
        return []
    if isinstance(partition, GroupPartition):
        if partition.class_count != class_count:
            raise InvalidPartitionError(
                f"partition is over {partition.class_count} classes, model over {class_count}"
            )
        return list(partition.groups)
    groups = [g if isinstance(g, ConfusingGroup) else ConfusingGroup(class_indices=list(g)) for g in partition]
    seen = set()
    for g in groups:
        for c in g.class_indices:
            if c >= class_count or c in seen:
                raise InvalidPartitionError(f"groups overlap or exceed the label space at class {c}")
            seen.add(c)
    return groups


def init_model(input_dim: int, hidden_dim: int, class_count: int,
               partition: Union[GroupPartition, Sequence, None], seed: int,
               class_names: Optional[Sequence[str]] = None) -> ModelState:
    """
    Build an encoder plus head 0 plus one head per confusing group.

    Weights are Gaussian with standard deviation ``sqrt(2 / fan_in)``; biases
    are zero. Every component draws from its own substream of ``seed``.
    """
    if input_dim < 1 or hidden_dim < 1:
        raise InvalidInputError("input and hidden dimensions must be positive")
    if class_count < 2:
        raise InvalidInputError("need at least two classes")
    groups = _groups_of(partition, class_count)
    rng = Rng.from_seed(seed, _INIT_STREAM, _ENCODER_KEY)
    w1 = _gaussian_matrix(rng, input_dim, hidden_dim)
    w2 = _gaussian_matrix(rng, hidden_dim, hidden_dim)
    encoder = Encoder(w1, np.zeros(hidden_dim), w2, np.zeros(hidden_dim))
    heads = [_init_head(hidden_dim, class_count, None, seed, 0)]
    heads += [_init_head(hidden_dim, len(g) + 1, g, seed, i) for i, g in enumerate(groups, start=1)]
    return ModelState(encoder, heads, seed, None if class_names is None else list(class_names))


def attach_group_heads(base: ModelState, partition: Union[GroupPartition, Sequence, None],
                       seed: Optional[int] = None) -> ModelState:
    """Copy of ``base`` (encoder and head 0) with freshly initialized group heads."""
    seed = base.rng_seed if seed is None else seed
    groups = _groups_of(partition, base.class_count)
    hidden = base.encoder.hidden_dim
    heads = [copy.deepcopy(base.heads[0])]
    heads += [_init_head(hidden, len(g) + 1, g, seed, i) for i, g in enumerate(groups, start=1)]
    return ModelState(copy.deepcopy(base.encoder), heads, seed, list(base.class_names))


def freeze_encoder(model: ModelState) -> ModelState:
    model.encoder.frozen = True
    return model


def _check_head(model: ModelState, head_index: int) -> SubnetHead:
    if not 0 <= head_index < model.head_count:
        raise RangeError(f"head index {head_index} outside [0, {model.head_count})")
    return model.heads[head_index]


def check_features(model: ModelState, features) -> np.ndarray:
    x = as_matrix(features, "features")
    if x.shape[1] != model.encoder.input_dim:
        raise ShapeError(f"features have {x.shape[1]} columns, encoder expects {model.encoder.input_dim}")
    return x


def head_logits(head: SubnetHead, hidden: np.ndarray) -> np.ndarray:
    return add_bias(matmul(hidden, head.weights), head.bias)


def forward(model: ModelState, features, head_index: int) -> np.ndarray:
    """Encoder then the selected head's linear map; logits, no softmax."""
    head = _check_head(model, head_index)
    x = check_features(model, features)
    return head_logits(head, model.encoder.features(x))


def train_head(
    model: ModelState,
    features,
    labels,
    head_index: int,
    loss_cfg: LossConfig,
    sgd_cfg: SgdConfig,
    epochs: int,
    batch_size: int,
    seed: Optional[int] = None,
    sample_weights=None,
) -> TrainingReport:
    """
    Train one head in place with mini-batch SGD.

    The encoder is updated only when training head 0 while it is not frozen.
    Batches are shuffled from the head's own substream of ``seed`` (default:
    the model seed), so heads can be trained in any order.

    Args:
        model: Model to update
        features: N x D inputs
        labels: N labels in the head's output space, or :class:`RemappedLabels`
        head_index: Head to train
        loss_cfg: Loss over the head's output space
        sgd_cfg: Optimizer settings; ``total_steps`` is derived here
        epochs: Passes over the data
        batch_size: Samples per step
        sample_weights: Optional per-row loss weights, e.g. from ``app.loss.class_balance_weights``

    Returns:
        Per-epoch mean training loss
    """
    head = _check_head(model, head_index)
    x = check_features(model, features)
    if isinstance(labels, RemappedLabels):
        labels = labels.labels
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} feature rows but {y.size} labels")
    if y.size and (y.min() < 0 or y.max() >= head.output_dim):
        raise InvalidLabelError(f"labels must lie in [0, {head.output_dim}) for head {head_index}")
    if loss_cfg.class_count != head.output_dim:
        raise ShapeError(f"loss is over {loss_cfg.class_count} classes, head {head_index} over {head.output_dim}")
    if epochs < 0 or batch_size < 1:
        raise RangeError("epochs must be >= 0 and batch_size >= 1")
    w = None
    if sample_weights is not None:
        w = np.asarray(sample_weights, dtype=np.float64).reshape(-1)
        if w.size != y.size:
            raise ShapeError(f"{w.size} sample weights for {y.size} labels")

    train_encoder = head_index == 0 and not model.encoder.frozen
    report = TrainingReport(head_index=head_index, epochs=epochs, steps=0, trained_encoder=train_encoder)
    n = x.shape[0]
    if epochs == 0 or n == 0:
        return report

    batches = math.ceil(n / batch_size)
    sgd = sgd_cfg.model_copy(update={"total_steps": epochs * batches})
    rng = Rng.from_seed(model.rng_seed if seed is None else seed, _TRAIN_STREAM, head_index)
    hidden = None if train_encoder else model.encoder.features(x)

    params: Dict[str, np.ndarray] = {f"head.{k}": v for k, v in head.parameters().items()}
    if train_encoder:
        params.update({f"encoder.{k}": v for k, v in model.encoder.parameters().items()})
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if train_encoder:
                z1, a1, z2, a2 = _encoder_forward(params, x[idx])
            else:
                a2 = hidden[idx]
            logits = a2 @ params["head.weights"] + params["head.bias"]
            loss, g_logits = batch_loss_and_grad(logits, y[idx], loss_cfg, None if w is None else w[idx])
            total += loss * idx.size

            grads = {
                "head.weights": a2.T @ g_logits,
                "head.bias": g_logits.sum(axis=0),
            }
            if train_encoder:
                g_z2 = relu_backward(g_logits @ params["head.weights"].T, z2)
                g_z1 = relu_backward(g_z2 @ params["encoder.w2"].T, z1)
                grads["encoder.w2"] = a1.T @ g_z2
                grads["encoder.b2"] = g_z2.sum(axis=0)
                grads["encoder.w1"] = x[idx].T @ g_z1
                grads["encoder.b1"] = g_z1.sum(axis=0)

            lr = linear_lr(step, sgd)
            for name in params:
                params[name], velocity[name] = sgd_step(params[name], grads[name], velocity[name], sgd, lr)
            step += 1
        report.loss_curve.append(total / n)
        logger.debug(f"head {head_index} epoch {epoch + 1}/{epochs}: loss {total / n:.6f}")

    head.weights, head.bias = params["head.weights"], params["head.bias"]
    if train_encoder:
        enc = model.encoder
        enc.w1, enc.b1, enc.w2, enc.b2 = (params[f"encoder.{k}"] for k in ("w1", "b1", "w2", "b2"))
    report.steps = step
    return report


def _encoder_forward(params: Dict[str, np.ndarray], x: np.ndarray):
    z1 = x @ params["encoder.w1"] + params["encoder.b1"]
    a1 = relu(z1)
    z2 = a1 @ params["encoder.w2"] + params["encoder.b2"]
    return z1, a1, z2, relu(z2)


def accuracy(model: ModelState, features, labels, head_index: int = 0) -> float:
    """Fraction of rows whose argmax logit equals the label."""
    pred = np.argmax(forward(model, features, head_index), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# Checkpoint format: magic + version, dimensions, seed, freeze flag, one line per
# head, then every parameter block (encoder first, heads in index order).

def save_checkpoint(model: ModelState, path: str) -> str:
    enc = model.encoder
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"dims {enc.input_dim} {enc.hidden_dim} {model.class_count} {model.head_count}",
        f"seed {model.rng_seed}",
        f"frozen {int(enc.frozen)}",
        f"classes {' '.join(model.class_names)}",
    ]
    for i, head in enumerate(model.heads):
        members = " ".join(str(c) for c in head.group.class_indices) if head.group else "-"
        lines.append(f"head {i} {head.output_dim} {members}")
    blocks = [("encoder.w1", enc.w1), ("encoder.b1", enc.b1), ("encoder.w2", enc.w2), ("encoder.b2", enc.b2)]
    for i, head in enumerate(model.heads):
        blocks += [(f"head{i}.weights", head.weights), (f"head{i}.bias", head.bias)]
    for name, values in blocks:
        matrix = np.atleast_2d(values)
        lines.append(f"param {name} {matrix.shape[0]} {matrix.shape[1]}")
        lines.extend(" ".join(format_float(v) for v in row) for row in matrix)
    return write_text(path, "\n".join(lines) + "\n")


class _Cursor:
    def __init__(self, path: str):
        self.path = path
        self.lines = read_lines(path)
        self.pos = 0

    def next(self, expected: str) -> List[str]:
        if self.pos >= len(self.lines):
            raise ParseError(f"unexpected end of file, expected {expected}", self.path, self.pos + 1)
        tokens = self.lines[self.pos].split()
        self.pos += 1
        return tokens

    def peek(self) -> Optional[str]:
        if self.pos >= len(self.lines):
            return None
        tokens = self.lines[self.pos].split()
        return tokens[0] if tokens else None

    def fail(self, message: str) -> ParseError:
        return ParseError(message, self.path, self.pos)

    def ints(self, tokens: List[str]) -> List[int]:
        try:
            return [int(t) for t in tokens]
        except ValueError:
            raise self.fail(f"expected integers, got {tokens}")


def load_checkpoint(path: str) -> ModelState:
    cur = _Cursor(path)
    magic = cur.next("header")
    if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
        raise cur.fail("not a checkpoint file")
    if magic[1] != str(CHECKPOINT_VERSION):
        raise cur.fail(f"unsupported checkpoint version {magic[1]}")
    dims = cur.next("dims")
    if len(dims) != 5 or dims[0] != "dims":
        raise cur.fail("expected 'dims D H K M'")
    d, h, k, m = cur.ints(dims[1:])
    if min(d, h, m) < 1 or k < 2:
        raise cur.fail(f"invalid dimensions D={d} H={h} K={k} M={m}")
    seed_line = cur.next("seed")
    if len(seed_line) != 2 or seed_line[0] != "seed":
        raise cur.fail("expected 'seed <n>'")
    seed = cur.ints(seed_line[1:])[0]
    frozen_line = cur.next("frozen")
    if len(frozen_line) != 2 or frozen_line[0] != "frozen":
        raise cur.fail("expected 'frozen 0|1'")
    frozen = bool(cur.ints(frozen_line[1:])[0])
    names = None
    if cur.peek() == "classes":
        names = cur.next("classes")[1:]
        if len(names) != k:
            raise cur.fail(f"expected {k} class names, got {len(names)}")

    head_specs = []
    for i in range(m):
        tokens = cur.next(f"head {i}")
        if len(tokens) < 4 or tokens[0] != "head" or tokens[1] != str(i):
            raise cur.fail(f"expected 'head {i} <outputs> <members|->'")
        out = cur.ints([tokens[2]])[0]
        group = None if tokens[3:] == ["-"] else ConfusingGroup(class_indices=cur.ints(tokens[3:]))
        head_specs.append((out, group))

    def block(name: str, rows: int, cols: int) -> np.ndarray:
        tokens = cur.next(f"param {name}")
        if tokens[:2] != ["param", name] or cur.ints(tokens[2:]) != [rows, cols]:
            raise cur.fail(f"expected 'param {name} {rows} {cols}'")
        out = np.empty((rows, cols))
        for r in range(rows):
            values = cur.next(f"row {r} of {name}")
            if len(values) != cols:
                raise cur.fail(f"expected {cols} values in {name}")
            try:
                out[r] = [float(v) for v in values]
            except ValueError:
                raise cur.fail(f"bad number in {name}")
        return out

    w1 = block("encoder.w1", d, h)
    b1 = block("encoder.b1", 1, h)[0]
    w2 = block("encoder.w2", h, h)
    b2 = block("encoder.b2", 1, h)[0]
    heads = []
    for i, (out, group) in enumerate(head_specs):
        weights = block(f"head{i}.weights", h, out)
        bias = block(f"head{i}.bias", 1, out)[0]
        heads.append(SubnetHead(weights, bias, group))
    if heads[0].output_dim != k:
        raise ParseError(f"head 0 has {heads[0].output_dim} outputs, header says {k}", path)
    return ModelState(Encoder(w1, b1, w2, b2, frozen), heads, seed, names)
