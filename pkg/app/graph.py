"""LangGraph workflow for the four-arm ablation experiment."""
import functools
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple, TypedDict

from langgraph.graph import END, StateGraph

from app.confusion import (
    ConfusionMatrix,
    WeightMatrix,
    accumulate,
    derive_weight_matrix,
    partition_groups,
    restrict_weight_matrix,
    save_confusion_csv,
    save_partition,
    save_weight_csv,
)
from app.data import Dataset, generate, load_dataset, remap_for_group, save_dataset, train_validation_split
from app.ensemble import predict, save_predictions_csv
from app.errors import StageError
from app.loss import LossConfig, class_balance_weights
from app.metrics import evaluate, render_ablation_table, save_iou_plot_data, save_report
from app.model import ModelState, attach_group_heads, freeze_encoder, init_model, save_checkpoint, train_head
from app.numeric import derive_seed
from app.schemas import ARM_NAMES, AblationResult, ExperimentConfig, GroupPartition, TrainingReport
from app.tools import write_text

logger = logging.getLogger(__name__)

ARM_KEYS = {arm: i + 1 for i, arm in enumerate(ARM_NAMES)}


class ExperimentState(TypedDict, total=False):
    """State object for the LangGraph workflow."""
    cfg: ExperimentConfig
    dataset: Dataset
    train: Dataset
    validation: Dataset
    confusion: ConfusionMatrix
    partition: GroupPartition
    weights: WeightMatrix
    models: Dict[str, ModelState]
    training: Dict[str, List[TrainingReport]]
    result: AblationResult
    artifacts: List[str]


def stage(name: str):
    """Re-raise any failure inside a node as a :class:`StageError` naming the stage."""
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(state: ExperimentState) -> ExperimentState:
            logger.info(f"stage {name}")
            try:
                return fn(state)
            except StageError:
                raise
            except Exception as e:
                raise StageError(name, e) from e
        return wrapper
    return decorate


def arm_seed(cfg: ExperimentConfig, arm: str) -> int:
    return derive_seed(cfg.seed, ARM_KEYS[arm])


def train_baseline(cfg: ExperimentConfig, train: Dataset) -> Tuple[ModelState, TrainingReport]:
    """Encoder and head 0 trained with standard cross-entropy; the encoder is frozen afterwards."""
    model = init_model(train.feature_dim, cfg.hidden_dim, train.class_count, None, arm_seed(cfg, "ce"),
                       train.class_names)
    report = train_head(
        model, train.features, train.labels, 0, LossConfig.standard(train.class_count),
        cfg.baseline_sgd(), cfg.baseline_epochs, cfg.batch_size,
    )
    freeze_encoder(model)
    return model, report


def train_group_heads(model: ModelState, train: Dataset, cfg: ExperimentConfig,
                      weights: Optional[WeightMatrix] = None) -> List[TrainingReport]:
    """
    Train heads 1..M-1 on the frozen encoder, with CE or the restricted weighted loss.

    Samples are weighted by their source-space class under ``cfg.subnet_balance``.
    """
    reports = []
    for index, head in enumerate(model.heads[1:], start=1):
        remapped = remap_for_group(train.labels, head.group, train.class_count)
        balance = class_balance_weights(remapped.labels, remapped.source_space_size, cfg.subnet_balance)
        if weights is None:
            loss_cfg = LossConfig.standard(remapped.source_space_size)
        else:
            loss_cfg = LossConfig(cfg.lambda_, restrict_weight_matrix(weights, head.group, cfg.diagonal_floor))
        reports.append(train_head(
            model, train.features, remapped, index, loss_cfg, cfg.subnet_sgd(),
            cfg.subnet_epochs, cfg.batch_size, sample_weights=balance,
        ))
    return reports


def train_subnets(baseline: ModelState, partition: GroupPartition, train: Dataset,
                  cfg: ExperimentConfig) -> Tuple[ModelState, List[TrainingReport]]:
    """Baseline encoder and head 0 plus CE-trained group heads."""
    model = attach_group_heads(freeze_encoder(baseline), partition, arm_seed(cfg, "ce+subnets"))
    return model, train_group_heads(model, train, cfg)


def train_new_loss(baseline: ModelState, partition: GroupPartition, train: Dataset, cfg: ExperimentConfig,
                   weights: WeightMatrix) -> Tuple[ModelState, ModelState, List[TrainingReport]]:
    """
    Fine-tune a copy of head 0 with the weighted loss, then add weighted-loss group heads.

    Returns:
        ``(head-0-only model, model with group heads, training reports)``
    """
    head0 = attach_group_heads(freeze_encoder(baseline), None, arm_seed(cfg, "newce"))
    report = train_head(
        head0, train.features, train.labels, 0, LossConfig(cfg.lambda_, weights),
        cfg.subnet_sgd(), cfg.subnet_epochs, cfg.batch_size,
    )
    full = attach_group_heads(head0, partition, arm_seed(cfg, "newce+subnets"))
    return head0, full, [report] + train_group_heads(full, train, cfg, weights)


@stage("load_data")
def load_data_node(state: ExperimentState) -> ExperimentState:
    """Node: Load the dataset file or generate the synthetic one."""
    cfg = state["cfg"]
    if cfg.dataset:
        state["dataset"] = load_dataset(cfg.dataset)
    else:
        state["dataset"] = generate(cfg.synthetic_spec())
    return state


@stage("split")
def split_node(state: ExperimentState) -> ExperimentState:
    """Node: 80/20 train/validation split."""
    state["train"], state["validation"] = train_validation_split(state["dataset"], state["cfg"].seed)
    return state


@stage("train_baseline")
def train_baseline_node(state: ExperimentState) -> ExperimentState:
    """Node: CE baseline."""
    model, report = train_baseline(state["cfg"], state["train"])
    state["models"] = {"ce": model}
    state["training"] = {"ce": [report]}
    return state


@stage("confusion")
def confusion_node(state: ExperimentState) -> ExperimentState:
    """Node: Confusion matrix of the baseline on the training split."""
    train = state["train"]
    _, predicted = predict(state["models"]["ce"], train.features)
    cm = ConfusionMatrix(train.class_count, class_names=list(train.class_names))
    state["confusion"] = accumulate(cm, train.labels, predicted)
    return state


@stage("groups")
def groups_node(state: ExperimentState) -> ExperimentState:
    """Node: Confusing groups and the loss weight matrix."""
    cfg = state["cfg"]
    state["partition"] = partition_groups(state["confusion"], cfg.threshold, cfg.max_groups)
    state["weights"] = derive_weight_matrix(state["confusion"], cfg.diagonal_floor)
    logger.info(f"groups: {[g.class_indices for g in state['partition'].groups]}")
    return state


@stage("train_subnets")
def train_subnets_node(state: ExperimentState) -> ExperimentState:
    """Node: CE group heads on the frozen baseline encoder."""
    model, reports = train_subnets(state["models"]["ce"], state["partition"], state["train"], state["cfg"])
    state["models"]["ce+subnets"] = model
    state["training"]["ce+subnets"] = reports
    return state


@stage("train_new_loss")
def train_new_loss_node(state: ExperimentState) -> ExperimentState:
    """Node: Weighted-loss head 0, with and without weighted-loss group heads."""
    head0, full, reports = train_new_loss(
        state["models"]["ce"], state["partition"], state["train"], state["cfg"], state["weights"],
    )
    state["models"]["newce"] = head0
    state["models"]["newce+subnets"] = full
    state["training"]["newce"] = reports[:1]
    state["training"]["newce+subnets"] = reports[1:]
    return state


@stage("evaluate")
def evaluate_node(state: ExperimentState) -> ExperimentState:
    """Node: Score every arm on the validation split."""
    cfg = state["cfg"]
    arms = {
        arm: evaluate(state["models"][arm], state["validation"], state["partition"], cfg.fusion())
        for arm in ARM_NAMES
    }
    state["result"] = AblationResult(seed=cfg.seed, partition=state["partition"], arms=arms)
    return state


@stage("write_artifacts")
def write_artifacts_node(state: ExperimentState) -> ExperimentState:
    """Node: Write every stage output to the output directory."""
    cfg = state["cfg"]
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    path = functools.partial(os.path.join, out)
    names = state["dataset"].class_names
    written = [
        write_text(path("config.txt"), cfg.to_flat_text()),
        save_dataset(state["dataset"], path("dataset.cfds")),
        save_dataset(state["train"], path("train.cfds")),
        save_dataset(state["validation"], path("validation.cfds")),
        save_confusion_csv(state["confusion"], path("confusion_train.csv"), "counts"),
        save_confusion_csv(state["confusion"], path("confusion_train_normalized.csv"), "normalized"),
        save_weight_csv(state["weights"], names, path("weights.csv")),
        save_partition(state["partition"], path("partition.txt")),
    ]
    result = state["result"]
    for arm in ARM_NAMES:
        slug = arm.replace("+", "_")
        model = state["models"][arm]
        report = result.arms[arm]
        written.append(save_checkpoint(model, path(f"model_{slug}.ckpt")))
        written.append(save_report(report, path(f"report_{slug}.json")))
        cm = ConfusionMatrix(len(names), report.confusion_counts, list(names))
        written.append(save_confusion_csv(cm, path(f"confusion_{slug}.csv"), "counts"))
        probs, classes = predict(model, state["validation"].features, None, cfg.fusion())
        written.append(save_predictions_csv(path(f"predictions_{slug}.csv"), probs, classes, names))
        if cfg.plot_data:
            written.append(save_iou_plot_data(report, path(f"iou_{slug}.dat")))
    training = {arm: [r.model_dump() for r in reports] for arm, reports in state["training"].items()}
    written.append(write_text(path("training.json"), json.dumps(training, indent=2, sort_keys=True) + "\n"))
    written.append(write_text(path("ablation.json"), result.model_dump_json(indent=2) + "\n"))
    written.append(write_text(path("ablation.md"), render_ablation_table(result)))
    state["artifacts"] = written
    return state


def build_graph():
    """Build and return the LangGraph workflow."""
    workflow = StateGraph(ExperimentState)

    nodes = [
        ("load_data", load_data_node),
        ("split", split_node),
        ("train_baseline", train_baseline_node),
        ("confusion", confusion_node),
        ("groups", groups_node),
        ("train_subnets", train_subnets_node),
        ("train_new_loss", train_new_loss_node),
        ("evaluate", evaluate_node),
        ("write_artifacts", write_artifacts_node),
    ]
    for name, fn in nodes:
        workflow.add_node(name, fn)

    # Linear flow
    workflow.set_entry_point(nodes[0][0])
    for (src, _), (dst, _) in zip(nodes, nodes[1:]):
        workflow.add_edge(src, dst)
    workflow.add_edge(nodes[-1][0], END)

    return workflow.compile()


def run_experiment(cfg: ExperimentConfig) -> AblationResult:
    """
    Execute the complete ablation for one configuration.

    Args:
        cfg: Experiment configuration

    Returns:
        AblationResult with the four evaluated arms
    """
    initial_state: ExperimentState = {"cfg": cfg}
    graph = build_graph()
    final_state = graph.invoke(initial_state)
    return final_state["result"]


def arm_ordering_holds(result: AblationResult) -> bool:
    """CE < CE+subnets <= newCE+subnets in mIoU."""
    m = {arm: report.miou for arm, report in result.arms.items()}
    return m["ce"] < m["ce+subnets"] <= m["newce+subnets"]


def run_sweep(cfg: ExperimentConfig, seeds: Sequence[int]) -> Dict[str, Any]:
    """Run the ablation once per seed into ``<output_dir>/seed-<n>`` and summarize."""
    per_seed = {}
    for seed in seeds:
        run_cfg = cfg.model_copy(update={"seed": seed, "output_dir": os.path.join(cfg.output_dir, f"seed-{seed}")})
        result = run_experiment(run_cfg)
        per_seed[str(seed)] = {
            "ordering_holds": arm_ordering_holds(result),
            "miou": {arm: r.miou for arm, r in result.arms.items()},
            "intra_group_mass": {arm: r.total_intra_group_mass for arm, r in result.arms.items()},
        }
    summary = {
        "seeds": [int(s) for s in seeds],
        "ordering_holds": sum(1 for v in per_seed.values() if v["ordering_holds"]),
        "runs": per_seed,
    }
    write_text(os.path.join(cfg.output_dir, "sweep.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
