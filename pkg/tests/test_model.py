"""Tests for the encoder, subnet heads, training and checkpoints."""
import numpy as np
import pytest

from app.data import generate, remap_for_group
from app.errors import InvalidInputError, InvalidLabelError, InvalidPartitionError, ParseError, RangeError, ShapeError
from app.loss import LossConfig
from app.model import (
    Encoder,
    ModelState,
    SubnetHead,
    accuracy,
    attach_group_heads,
    forward,
    freeze_encoder,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train_head,
)
from app.schemas import ConfusingGroup, GroupPartition, SgdConfig, SyntheticSpec


def _params(model):
    arrays = list(model.encoder.parameters().values())
    for head in model.heads:
        arrays += list(head.parameters().values())
    return [a.copy() for a in arrays]


def _tiny_model():
    encoder = Encoder(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
    head = SubnetHead(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, -0.5]))
    return ModelState(encoder, [head])


def test_init_model_head_counts():
    """One head per group plus head 0."""
    assert init_model(4, 8, 6, None, 1).head_count == 1
    partition = GroupPartition.from_groups([[0, 1], [2, 3], [4, 5]], 6)
    model = init_model(4, 8, 6, partition, 1)
    assert model.head_count == 4
    assert [h.output_dim for h in model.heads] == [6, 3, 3, 3]


def test_init_model_is_deterministic():
    """Same seed, same parameters."""
    a, b = init_model(3, 5, 4, [[0, 1]], 9), init_model(3, 5, 4, [[0, 1]], 9)
    assert all(np.array_equal(x, y) for x, y in zip(_params(a), _params(b)))


def test_init_model_rejects_overlap():
    """Groups sharing a class are an invalid partition."""
    with pytest.raises(InvalidPartitionError):
        init_model(3, 5, 4, [[0, 1], [1, 2]], 9)


def test_forward_zero_weights():
    """All-zero parameters give zero logits."""
    model = init_model(3, 4, 3, None, 0)
    for arr in list(model.encoder.parameters().values()) + list(model.heads[0].parameters().values()):
        arr[...] = 0.0
    assert np.array_equal(forward(model, np.ones((2, 3)), 0), np.zeros((2, 3)))


def test_forward_hand_computed():
    """Identity encoder, ReLU, then the head's affine map."""
    logits = forward(_tiny_model(), np.array([[1.0, -1.0], [2.0, 3.0]]), 0)
    assert logits.tolist() == [[1.5, 1.5], [11.5, 15.5]]


def test_forward_bad_head_index():
    """Head indices outside the model are a range error."""
    with pytest.raises(RangeError):
        forward(_tiny_model(), np.zeros((1, 2)), 1)


def test_train_zero_epochs_changes_nothing():
    """Zero epochs leaves every parameter untouched."""
    model = init_model(2, 4, 2, None, 3)
    before = _params(model)
    train_head(model, np.ones((4, 2)), [0, 1, 0, 1], 0, LossConfig.standard(2),
               SgdConfig(learning_rate_initial=0.1), 0, 2)
    assert all(np.array_equal(x, y) for x, y in zip(before, _params(model)))


def test_frozen_encoder_is_not_updated():
    """Training with a frozen encoder only moves the head."""
    model = freeze_encoder(init_model(2, 4, 2, None, 3))
    before = [a.copy() for a in model.encoder.parameters().values()]
    head_before = model.heads[0].weights.copy()
    report = train_head(model, np.random.default_rng(0).normal(size=(20, 2)), [0, 1] * 10, 0,
                        LossConfig.standard(2), SgdConfig(learning_rate_initial=0.1), 3, 4)
    after = list(model.encoder.parameters().values())
    assert all(np.array_equal(x, y) for x, y in zip(before, after))
    assert not np.array_equal(head_before, model.heads[0].weights)
    assert not report.trained_encoder
    assert report.steps == 15


def test_train_rejects_labels_outside_head():
    """Head labels must fit the head's output space."""
    model = init_model(2, 4, 3, [[0, 1]], 3)
    with pytest.raises(InvalidLabelError):
        train_head(model, np.zeros((2, 2)), [0, 3], 1, LossConfig.standard(3),
                   SgdConfig(learning_rate_initial=0.1), 1, 2)


def test_train_separable_toy():
    """A well separated two-class problem is learned."""
    data = generate(SyntheticSpec(class_count=2, feature_dim=2, samples_per_class=100, seed=4))
    model = init_model(2, 8, 2, None, 4)
    report = train_head(model, data.features, data.labels, 0, LossConfig.standard(2),
                        SgdConfig(learning_rate_initial=0.01), 50, 20)
    assert report.trained_encoder
    assert report.loss_curve[-1] < report.loss_curve[0]
    assert accuracy(model, data.features, data.labels) >= 0.99


def test_train_group_head_with_remapped_labels():
    """Group heads train on labels remapped into their source space."""
    data = generate(SyntheticSpec(class_count=3, feature_dim=2, samples_per_class=30, seed=8))
    model = freeze_encoder(init_model(2, 6, 3, [[0, 2]], 8))
    remapped = remap_for_group(data.labels, ConfusingGroup(class_indices=[0, 2]), 3)
    report = train_head(model, data.features, remapped, 1, LossConfig.standard(3),
                        SgdConfig(learning_rate_initial=0.01), 2, 10)
    assert report.head_index == 1
    assert len(report.loss_curve) == 2


def test_attach_group_heads_copies_base():
    """The base model is left alone and head 0 is shared by value."""
    base = init_model(3, 4, 4, None, 5)
    model = attach_group_heads(base, [[1, 2]])
    assert base.head_count == 1 and model.head_count == 2
    assert np.array_equal(model.heads[0].weights, base.heads[0].weights)
    model.heads[0].weights[0, 0] += 1.0
    assert model.heads[0].weights[0, 0] != base.heads[0].weights[0, 0]


def test_checkpoint_round_trip(tmp_path):
    """Every parameter, group and the freeze flag survive a save and load."""
    model = freeze_encoder(init_model(3, 5, 6, [[0, 4], [1, 2, 3]], 17))
    path = save_checkpoint(model, str(tmp_path / "m.ckpt"))
    loaded = load_checkpoint(path)
    assert loaded.encoder.frozen
    assert loaded.rng_seed == 17
    assert [h.group for h in loaded.heads] == [h.group for h in model.heads]
    assert all(np.array_equal(x, y) for x, y in zip(_params(model), _params(loaded)))


def test_checkpoint_rejects_garbage(tmp_path):
    """Files that are not checkpoints fail to parse."""
    path = tmp_path / "bad.ckpt"
    path.write_text("hello\n")
    with pytest.raises(ParseError):
        load_checkpoint(str(path))


def test_checkpoint_keeps_class_names(tmp_path):
    """Class names survive a save and load; files without them get class0.."""
    model = init_model(2, 3, 3, None, 4, ["road", "car", "tree"])
    path = save_checkpoint(model, str(tmp_path / "m.ckpt"))
    assert load_checkpoint(path).class_names == ["road", "car", "tree"]
    assert attach_group_heads(model, [[0, 1]]).class_names == ["road", "car", "tree"]
    lines = [line for line in open(path).read().splitlines() if not line.startswith("classes ")]
    (tmp_path / "old.ckpt").write_text("\n".join(lines) + "\n")
    assert load_checkpoint(str(tmp_path / "old.ckpt")).class_names == ["class0", "class1", "class2"]


def test_model_rejects_bad_class_names():
    """Names must match the class count and contain no whitespace."""
    with pytest.raises(ShapeError):
        init_model(2, 3, 3, None, 4, ["a", "b"])
    with pytest.raises(InvalidInputError):
        init_model(2, 3, 3, None, 4, ["a", "b c", "d"])


def test_group_heads_train_in_any_order():
    """Training head 1 then head 2 gives the same parameters as the reverse order."""
    data = generate(SyntheticSpec(class_count=5, feature_dim=3, samples_per_class=40, seed=6))
    groups = [[0, 1], [2, 3]]
    first = freeze_encoder(init_model(3, 6, 5, groups, 6))
    second = attach_group_heads(first, groups, 6)
    sgd = SgdConfig(learning_rate_initial=0.02)

    def train(model, index):
        remapped = remap_for_group(data.labels, model.heads[index].group, 5)
        train_head(model, data.features, remapped, index, LossConfig.standard(3), sgd, 3, 16)

    train(first, 1)
    train(first, 2)
    train(second, 2)
    train(second, 1)
    assert all(np.array_equal(x, y) for x, y in zip(_params(first), _params(second)))


def test_separable_loss_curve_mostly_decreases():
    """On a separable toy the epoch loss rarely goes up."""
    data = generate(SyntheticSpec(class_count=3, feature_dim=2, samples_per_class=60, seed=9))
    model = freeze_encoder(init_model(2, 8, 3, None, 9))
    report = train_head(model, data.features, data.labels, 0, LossConfig.standard(3),
                        SgdConfig(learning_rate_initial=0.002, momentum=0.0, weight_decay=0.0), 40, 60)
    curve = report.loss_curve
    rises = sum(1 for a, b in zip(curve, curve[1:]) if b > a + 1e-12)
    assert rises <= 0.05 * (len(curve) - 1)


def test_sample_weights_in_training():
    """Unit weights match unweighted training and the weight count must match the rows."""
    data = generate(SyntheticSpec(class_count=2, feature_dim=2, samples_per_class=20, seed=2))
    sgd = SgdConfig(learning_rate_initial=0.05)
    plain = freeze_encoder(init_model(2, 4, 2, None, 2))
    weighted = freeze_encoder(init_model(2, 4, 2, None, 2))
    train_head(plain, data.features, data.labels, 0, LossConfig.standard(2), sgd, 3, 8)
    train_head(weighted, data.features, data.labels, 0, LossConfig.standard(2), sgd, 3, 8,
               sample_weights=np.ones(40))
    assert weighted.heads[0].weights == pytest.approx(plain.heads[0].weights, abs=1e-12)
    with pytest.raises(ShapeError):
        train_head(weighted, data.features, data.labels, 0, LossConfig.standard(2), sgd, 1, 8,
                   sample_weights=np.ones(3))
