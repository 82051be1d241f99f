"""Pydantic data models for configuration, partitions and reports."""
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import Config

FusionRule = Literal["sum", "product"]
BalanceScheme = Literal["none", "sqrt_inv", "inv"]

ARM_NAMES = ("ce", "ce+subnets", "newce", "newce+subnets")

MAX_SEED = 2 ** 64


class SgdConfig(BaseModel):
    """SGD with momentum, weight decay and a linear learning-rate schedule."""
    learning_rate_initial: float = Field(..., gt=0.0, description="Learning rate at step 0")
    momentum: float = Field(0.9, ge=0.0, lt=1.0, description="Momentum coefficient")
    weight_decay: float = Field(0.0005, ge=0.0, description="L2 weight decay")
    total_steps: int = Field(1, ge=1, description="Length of the linear schedule")


class ConfusablePair(BaseModel):
    """Two classes whose clusters are planted close together."""
    a: int = Field(..., ge=0, description="First class index")
    b: int = Field(..., ge=0, description="Second class index")
    overlap: float = Field(..., ge=0.0, le=1.0, description="0 = well separated, 1 = coincident")

    @model_validator(mode="after")
    def _distinct(self):
        if self.a == self.b:
            raise ValueError(f"confusable pair needs two distinct classes, got ({self.a}, {self.b})")
        return self

    @classmethod
    def parse(cls, text: str) -> "ConfusablePair":
        """Parse ``a:b:overlap``."""
        parts = text.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"expected 'a:b:overlap', got '{text}'")
        return cls(a=int(parts[0]), b=int(parts[1]), overlap=float(parts[2]))

    def format(self) -> str:
        return f"{self.a}:{self.b}:{self.overlap!r}"


class SyntheticSpec(BaseModel):
    """Recipe for a Gaussian-cluster dataset with planted confusions."""
    class_count: int = Field(..., ge=2, description="Number of classes K")
    feature_dim: int = Field(..., ge=1, description="Feature dimension D")
    samples_per_class: Union[int, List[int]] = Field(
        ..., description="Uniform count or one count per class"
    )
    confusable_pairs: List[ConfusablePair] = Field(default_factory=list)
    cluster_spread: float = Field(1.0, gt=0.0, description="Cluster radius scale")
    seed: int = Field(..., ge=0, lt=MAX_SEED, description="64-bit generator seed")
    class_names: Optional[List[str]] = Field(None, description="Defaults to class0..classK-1")

    @model_validator(mode="after")
    def _check(self):
        k = self.class_count
        if isinstance(self.samples_per_class, list):
            if len(self.samples_per_class) != k:
                raise ValueError(
                    f"samples_per_class has {len(self.samples_per_class)} entries, expected {k}"
                )
        counts = self.counts()
        if any(c < 1 for c in counts):
            raise ValueError("every class needs at least one sample")
        for pair in self.confusable_pairs:
            if pair.a >= k or pair.b >= k:
                raise ValueError(f"pair ({pair.a}, {pair.b}) references a class >= {k}")
        if self.class_names is not None:
            if len(self.class_names) != k:
                raise ValueError(f"expected {k} class names, got {len(self.class_names)}")
            if any(not n or any(ch.isspace() for ch in n) for n in self.class_names):
                raise ValueError("class names must be non-empty and contain no whitespace")
        return self

    def counts(self) -> List[int]:
        if isinstance(self.samples_per_class, int):
            return [self.samples_per_class] * self.class_count
        return list(self.samples_per_class)

    def names(self) -> List[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return [f"class{i}" for i in range(self.class_count)]


class ConfusingGroup(BaseModel):
    """A sorted set of at least two mutually confused classes."""
    model_config = ConfigDict(frozen=True)

    class_indices: List[int] = Field(..., min_length=2)

    @field_validator("class_indices")
    @classmethod
    def _sorted_unique(cls, v: List[int]) -> List[int]:
        if any(i < 0 for i in v):
            raise ValueError("class indices must be non-negative")
        if len(set(v)) != len(v):
            raise ValueError(f"duplicate class index in group {v}")
        return sorted(v)

    def __len__(self) -> int:
        return len(self.class_indices)

    def __contains__(self, c: int) -> bool:
        return c in self.class_indices

    def position(self, c: int) -> int:
        """1-based source index of class ``c``; 0 means "others"."""
        if c in self.class_indices:
            return self.class_indices.index(c) + 1
        return 0


class GroupPartition(BaseModel):
    """Disjoint confusing groups plus the classes left out of every group."""
    class_count: int = Field(..., ge=2)
    threshold: Optional[float] = Field(None, gt=0.0, lt=1.0)
    groups: List[ConfusingGroup] = Field(default_factory=list)
    ungrouped: List[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _disjoint_cover(self):
        seen = set()
        for g in self.groups:
            for c in g.class_indices:
                if c >= self.class_count:
                    raise ValueError(f"group {g.class_indices} references class >= {self.class_count}")
                if c in seen:
                    raise ValueError(f"class {c} appears in more than one group")
                seen.add(c)
        complement = [c for c in range(self.class_count) if c not in seen]
        if sorted(self.ungrouped) != complement:
            raise ValueError("ungrouped classes must be exactly the classes outside every group")
        return self

    @classmethod
    def from_groups(cls, groups, class_count: int, threshold: Optional[float] = None) -> "GroupPartition":
        groups = [g if isinstance(g, ConfusingGroup) else ConfusingGroup(class_indices=list(g)) for g in groups]
        groups = sorted(groups, key=lambda g: g.class_indices[0])
        members = {c for g in groups for c in g.class_indices}
        return cls(
            class_count=class_count,
            threshold=threshold,
            groups=groups,
            ungrouped=[c for c in range(class_count) if c not in members],
        )


class FusionConfig(BaseModel):
    """How transformed subnet distributions are combined."""
    rule: FusionRule = Field(Config.FUSION_RULE, description="sum or product rule")
    include_subnet0: bool = Field(True, description="Fuse subnet 0 alongside the group heads")


class TrainingReport(BaseModel):
    """Loss curve of one head training run."""
    head_index: int
    epochs: int
    steps: int
    trained_encoder: bool
    loss_curve: List[float] = Field(default_factory=list, description="Mean training loss per epoch")


class EvalReport(BaseModel):
    """Segmentation-style evaluation of one model configuration."""
    class_names: List[str]
    sample_count: int
    per_class_iou: List[Optional[float]] = Field(..., description="None where IoU is undefined")
    miou: float
    accuracy: float
    confusion_counts: List[List[int]]
    groups: List[List[int]] = Field(default_factory=list)
    intra_group_confusion_mass: List[float] = Field(default_factory=list)
    group_miou: List[Optional[float]] = Field(default_factory=list)
    iou_convention: str = Field("undefined-excluded", description="How zero-denominator IoUs enter the mean")

    @property
    def total_intra_group_mass(self) -> float:
        return float(sum(self.intra_group_confusion_mass))


class AblationResult(BaseModel):
    """Four ablation arms evaluated on the same held-out split."""
    seed: int
    partition: GroupPartition
    arms: Dict[str, EvalReport]

    @model_validator(mode="after")
    def _all_arms(self):
        missing = [a for a in ARM_NAMES if a not in self.arms]
        if missing:
            raise ValueError(f"missing ablation arms: {missing}")
        return self


class GradcheckReport(BaseModel):
    """Summary of analytic-vs-finite-difference gradient comparisons."""
    trials: int
    k_min: int
    k_max: int
    step: float
    tolerance: float
    max_relative_error: float
    worst_class_count: int
    worst_lambda: float
    passed: bool


class ExperimentConfig(BaseModel):
    """Flat experiment settings; every field is a config-file key and a CLI flag."""
    model_config = ConfigDict(populate_by_name=True)

    dataset: Optional[str] = Field(None, description="Path to a .cfds file; overrides the synthetic recipe")
    class_count: int = Field(8, ge=2)
    feature_dim: int = Field(8, ge=1)
    samples_per_class: Union[int, List[int]] = Field(
        default_factory=lambda: [4800, 600, 4800, 600, 600, 600, 600, 600]
    )
    pairs: List[ConfusablePair] = Field(
        default_factory=lambda: [
            ConfusablePair(a=0, b=1, overlap=0.85),
            ConfusablePair(a=2, b=3, overlap=0.85),
        ]
    )
    cluster_spread: float = Field(1.0, gt=0.0)

    threshold: float = Field(Config.THRESHOLD, gt=0.0, lt=1.0, description="Group edge threshold tau")
    max_groups: Optional[int] = Field(None, ge=0, description="Keep only the most confused groups")
    lambda_: float = Field(Config.LAMBDA, ge=0.0, alias="lambda", description="Weight of the penalty term")
    diagonal_floor: float = Field(Config.DIAGONAL_FLOOR, gt=0.0, le=1.0)
    subnet_balance: BalanceScheme = Field(
        "sqrt_inv", description="Class weighting of group-head training: none, sqrt_inv or inv"
    )

    hidden_dim: int = Field(32, ge=1)
    baseline_epochs: int = Field(30, ge=0)
    subnet_epochs: int = Field(20, ge=0)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(0.01, gt=0.0)
    subnet_learning_rate: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0005, ge=0.0)

    fusion_rule: FusionRule = Field(Config.FUSION_RULE)
    seed: int = Field(Config.SEED, ge=0, lt=MAX_SEED)
    output_dir: str = Field(Config.OUTPUT_DIR)
    plot_data: bool = Field(False, description="Also write per-class IoU plot files")

    @field_validator("samples_per_class", mode="before")
    @classmethod
    def _parse_counts(cls, v):
        if isinstance(v, str):
            parts = [p for p in v.replace(",", " ").split() if p]
            if len(parts) == 1:
                return int(parts[0])
            return [int(p) for p in parts]
        return v

    @field_validator("pairs", mode="before")
    @classmethod
    def _parse_pairs(cls, v):
        if isinstance(v, str):
            return [ConfusablePair.parse(p) for p in v.split(",") if p.strip()]
        return v

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            class_count=self.class_count,
            feature_dim=self.feature_dim,
            samples_per_class=self.samples_per_class,
            confusable_pairs=self.pairs,
            cluster_spread=self.cluster_spread,
            seed=self.seed,
        )

    def baseline_sgd(self) -> SgdConfig:
        return SgdConfig(
            learning_rate_initial=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )

    def subnet_sgd(self) -> SgdConfig:
        return SgdConfig(
            learning_rate_initial=self.subnet_learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )

    def fusion(self) -> FusionConfig:
        return FusionConfig(rule=self.fusion_rule)

    @classmethod
    def keys(cls) -> List[str]:
        """Config-file keys, which are also the CLI flag names."""
        return [f.alias or name for name, f in cls.model_fields.items()]

    @classmethod
    def from_flat(cls, values: Dict[str, Any]) -> "ExperimentConfig":
        """Validate a flat ``key -> value`` mapping; unknown keys are rejected."""
        known = set(cls.keys()) | set(cls.model_fields)
        unknown = sorted(k for k in values if k not in known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls.model_validate(values)

    def to_flat_text(self) -> str:
        """``key = value`` lines that :meth:`from_flat` reads back; output_dir is left out."""
        lines = []
        for name, f in type(self).model_fields.items():
            if name == "output_dir":
                continue
            value = getattr(self, name)
            if value is None:
                continue
            if name == "pairs":
                text = ",".join(p.format() for p in value)
            elif isinstance(value, list):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.alias or name} = {text}")
        return "\n".join(lines) + "\n"


class PredictRequest(BaseModel):
    """Feature rows to classify with the served model."""
    features: List[List[float]] = Field(..., min_length=1, description="N x D feature rows")
    rule: Optional[FusionRule] = Field(None, description="Overrides the configured fusion rule")


class PredictResponse(BaseModel):
    """Fused class distributions and argmax classes."""
    rule: FusionRule
    classes: List[int]
    class_names: List[str]
    probabilities: List[List[float]]


class GradcheckRequest(BaseModel):
    """Parameters of a gradient check run."""
    trials: int = Field(200, ge=1, le=10000)
    k_min: int = Field(2, ge=2)
    k_max: int = Field(12, ge=2, le=256)
    seed: int = Field(0, ge=0, lt=MAX_SEED)

    @model_validator(mode="after")
    def _ordered(self):
        if self.k_max < self.k_min:
            raise ValueError(f"k_max ({self.k_max}) must be >= k_min ({self.k_min})")
        return self
