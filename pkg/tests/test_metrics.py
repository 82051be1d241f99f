"""Tests for IoU metrics, evaluation reports and the ablation table."""
import numpy as np
import pytest

from app.confusion import ConfusionMatrix, load_confusion_csv, save_confusion_csv
from app.data import Dataset
from app.metrics import (
    evaluate,
    intra_group_mass,
    iou_per_class,
    load_report,
    render_ablation_table,
    report_from_confusion,
    save_iou_plot_data,
    save_report,
)
from app.model import init_model
from app.schemas import ARM_NAMES, AblationResult, GroupPartition


def _constant_model(class_count, predicted):
    """Zero weights with a bias that always picks ``predicted``."""
    model = init_model(2, 3, class_count, None, 0)
    for arr in list(model.encoder.parameters().values()) + list(model.heads[0].parameters().values()):
        arr[...] = 0.0
    model.heads[0].bias[predicted] = 1.0
    return model


def test_iou_perfect_prediction():
    """Diagonal counts give IoU 1 everywhere."""
    assert iou_per_class(ConfusionMatrix(3, np.diag([4, 2, 7]))).tolist() == [1.0, 1.0, 1.0]


def test_iou_undefined_class_excluded():
    """A class absent from truth and prediction is left out of the mean."""
    report = report_from_confusion(ConfusionMatrix(3, [[3, 1, 0], [1, 3, 0], [0, 0, 0]]))
    assert report.per_class_iou == [0.6, 0.6, None]
    assert report.miou == pytest.approx(0.6)


def test_oracle_confusion_scores_one():
    """Perfect predictions have mIoU and accuracy 1."""
    report = report_from_confusion(ConfusionMatrix(2, [[5, 0], [0, 5]]))
    assert report.miou == 1.0 and report.accuracy == 1.0


def test_constant_predictor():
    """Always predicting class 0 on balanced data."""
    data = Dataset(np.zeros((20, 2)), [0] * 10 + [1] * 10, 2, ["a", "b"])
    report = evaluate(_constant_model(2, 0), data)
    assert report.accuracy == 0.5
    assert report.confusion_counts == [[10, 0], [10, 0]]
    assert report.per_class_iou == [0.5, 0.0]
    assert report.miou == pytest.approx(0.25)


def test_intra_group_mass():
    """Off-diagonal rates summed inside each group."""
    m = np.eye(3)
    m[0, 1] = m[1, 0] = 0.1
    m[0, 0] = m[1, 1] = 0.9
    assert intra_group_mass(m, GroupPartition.from_groups([[0, 1]], 3)) == pytest.approx([0.2])
    assert intra_group_mass(np.eye(3), GroupPartition.from_groups([[0, 2]], 3)) == [0.0]
    assert intra_group_mass(m, GroupPartition.from_groups([], 3)) == []


def test_group_miou():
    """Per-group mIoU averages the defined IoUs of the members."""
    cm = ConfusionMatrix(3, [[3, 1, 0], [1, 3, 0], [0, 0, 4]])
    report = report_from_confusion(cm, GroupPartition.from_groups([[0, 1]], 3))
    assert report.group_miou == [pytest.approx(0.6)]
    assert report.intra_group_confusion_mass == [pytest.approx(0.5)]


def test_report_recomputed_from_csv(tmp_path):
    """The exported confusion CSV reproduces the report."""
    data = Dataset(np.random.default_rng(0).normal(size=(30, 2)), [0, 1, 2] * 10, 3, ["a", "b", "c"])
    model = init_model(2, 4, 3, None, 6)
    partition = GroupPartition.from_groups([[0, 2]], 3)
    report = evaluate(model, data, partition)
    cm = ConfusionMatrix(3, report.confusion_counts, report.class_names)
    path = save_confusion_csv(cm, str(tmp_path / "cm.csv"))
    assert report_from_confusion(load_confusion_csv(path), partition) == report


def test_evaluate_is_deterministic(tmp_path):
    """Identical inputs serialize to identical reports."""
    data = Dataset(np.random.default_rng(3).normal(size=(12, 2)), [0, 1] * 6, 2, ["a", "b"])
    model = init_model(2, 4, 2, None, 1)
    first = save_report(evaluate(model, data), str(tmp_path / "a.json"))
    second = save_report(evaluate(model, data), str(tmp_path / "b.json"))
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
    assert load_report(first) == load_report(second)


def test_iou_plot_data_skips_undefined(tmp_path):
    """Only defined IoUs are written."""
    report = report_from_confusion(ConfusionMatrix(3, [[2, 0, 0], [0, 0, 0], [0, 0, 1]]))
    save_iou_plot_data(report, str(tmp_path / "iou.dat"))
    assert (tmp_path / "iou.dat").read_text() == "0 1\n2 1\n"


def test_render_ablation_table():
    """One row per arm with the change against CE."""
    partition = GroupPartition.from_groups([[0, 1]], 2)
    base = report_from_confusion(ConfusionMatrix(2, [[3, 1], [1, 3]]), partition)
    better = report_from_confusion(ConfusionMatrix(2, [[4, 0], [1, 3]]), partition)
    arms = {arm: (base if arm == "ce" else better) for arm in ARM_NAMES}
    table = render_ablation_table(AblationResult(seed=1, partition=partition, arms=arms))
    rows = [line for line in table.splitlines() if line.startswith("| ")]
    assert len(rows) == 1 + len(ARM_NAMES)
    assert "group 0 1 mIoU" in rows[0]
    assert rows[1].startswith("| ce | 0.6000 |")
    assert "+0.00%" in rows[1]
