"""Tests for confusion matrices, confusing groups and loss weights."""
import numpy as np
import pytest

from app.confusion import (
    ConfusionMatrix,
    WeightMatrix,
    accumulate,
    derive_weight_matrix,
    load_confusion_csv,
    load_partition,
    load_rates,
    normalize,
    partition_from_rates,
    partition_groups,
    restrict_weight_matrix,
    save_confusion_csv,
    save_partition,
    save_weight_csv,
)
from app.errors import InvalidInputError, InvalidLabelError, InvalidPartitionError, RangeError
from app.schemas import ConfusingGroup, GroupPartition


def _five_class_rates():
    m = np.full((5, 5), 0.001)
    m[0, 1] = m[1, 0] = 0.1
    m[2, 3] = 0.08
    m[3, 4] = 0.07
    np.fill_diagonal(m, 0.0)
    np.fill_diagonal(m, 1.0 - m.sum(axis=1))
    return m


def _groups(partition):
    return [g.class_indices for g in partition.groups]


def test_accumulate_tally():
    """Each (truth, prediction) pair adds one count."""
    cm = accumulate(ConfusionMatrix(2), [0, 0, 1], [0, 1, 1])
    assert cm.counts.tolist() == [[1, 1], [0, 1]]
    assert cm.total == 3


def test_accumulate_perfect_and_empty():
    """Perfect predictions stay diagonal; empty input changes nothing."""
    cm = accumulate(ConfusionMatrix(3), [0, 1, 2, 2], [0, 1, 2, 2])
    assert np.array_equal(cm.counts, np.diag([1, 1, 2]))
    assert accumulate(cm, [], []) == cm


def test_accumulate_rejects_bad_label():
    """Labels outside the class range are rejected."""
    with pytest.raises(InvalidLabelError):
        accumulate(ConfusionMatrix(2), [0, 2], [0, 1])


def test_normalize_rows():
    """Rows divide by their sums; empty rows stay zero."""
    rates = normalize(ConfusionMatrix(3, [[1, 1, 0], [0, 1, 0], [0, 0, 0]]))
    assert rates.tolist() == [[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]
    assert np.array_equal(normalize(ConfusionMatrix(3, np.eye(3) * 4)), np.eye(3))


def test_partition_known_groups():
    """Components of the thresholded graph become groups."""
    partition = partition_from_rates(_five_class_rates(), 0.05)
    assert _groups(partition) == [[0, 1], [2, 3, 4]]
    assert partition.ungrouped == []


def test_partition_high_threshold_and_identity():
    """No rate reaches the threshold, so every class is ungrouped."""
    assert _groups(partition_from_rates(_five_class_rates(), 0.2)) == []
    partition = partition_groups(ConfusionMatrix(4, np.eye(4) * 10), 0.05)
    assert partition.groups == []
    assert partition.ungrouped == [0, 1, 2, 3]


def test_partition_one_directional_confusion():
    """An edge needs the rate in only one direction."""
    m = np.eye(3)
    m[0, 2], m[0, 0] = 0.2, 0.8
    assert _groups(partition_from_rates(m, 0.1)) == [[0, 2]]


def test_partition_recovers_planted_blocks():
    """Block-structured rates give back exactly the planted blocks."""
    rng = np.random.default_rng(2024)
    for _ in range(100):
        k = int(rng.integers(4, 21))
        labels = rng.integers(0, max(2, k // 2), size=k)
        m = rng.uniform(0.0, 0.001, size=(k, k))
        for i in range(k):
            for j in range(k):
                if i != j and labels[i] == labels[j]:
                    m[i, j] = rng.uniform(0.05, 0.1)
        expected = []
        for block in np.unique(labels):
            members = sorted(int(c) for c in np.flatnonzero(labels == block))
            if len(members) >= 2:
                expected.append(members)
        expected.sort(key=lambda g: g[0])
        assert _groups(partition_from_rates(m, 0.01)) == expected


def test_partition_is_permutation_invariant():
    """Relabeling classes relabels the groups the same way."""
    rng = np.random.default_rng(7)
    m = rng.uniform(0.0, 0.1, size=(8, 8))
    perm = rng.permutation(8)
    permuted = m[np.ix_(perm, perm)]
    original = {tuple(g) for g in _groups(partition_from_rates(m, 0.08))}
    mapped = {tuple(sorted(int(perm[c]) for c in g)) for g in _groups(partition_from_rates(permuted, 0.08))}
    assert mapped == original


def test_max_groups_keeps_most_confused():
    """The cap keeps the groups with the largest intra-group mass."""
    partition = partition_from_rates(_five_class_rates(), 0.05, max_groups=1)
    assert _groups(partition) == [[0, 1]]
    assert partition.ungrouped == [2, 3, 4]


def test_partition_threshold_range():
    """The threshold must lie in (0, 1)."""
    with pytest.raises(RangeError):
        partition_from_rates(np.eye(3), 1.0)


def test_derive_weight_matrix():
    """Off-diagonal rates copy over; the diagonal is floored."""
    assert np.array_equal(derive_weight_matrix(np.eye(3), 0.1).weights, np.eye(3))
    c = derive_weight_matrix(np.array([[0.9, 0.1], [0.2, 0.8]]), 0.5)
    assert c.weights.tolist() == [[0.9, 0.1], [0.2, 0.8]]
    c = derive_weight_matrix(ConfusionMatrix(2, [[0, 0], [1, 3]]), 0.5)
    assert c.weights.tolist() == [[0.5, 0.0], [0.25, 0.75]]


def test_weight_matrix_validation():
    """Entries outside [0, 1] or a zero diagonal are rejected."""
    with pytest.raises(InvalidInputError):
        WeightMatrix(np.array([[1.0, 1.5], [0.0, 1.0]]))
    with pytest.raises(InvalidInputError):
        WeightMatrix(np.array([[0.0, 0.5], [0.5, 1.0]]))


def test_restrict_weight_matrix():
    """The others row and column sum out-group weights."""
    c = WeightMatrix(np.array([
        [1.0, 0.1, 0.0, 0.2],
        [0.3, 1.0, 0.4, 0.1],
        [0.0, 0.2, 1.0, 0.3],
        [0.1, 0.1, 0.1, 1.0],
    ]))
    r = restrict_weight_matrix(c, ConfusingGroup(class_indices=[1, 2]), 1.0).weights
    assert r.shape == (3, 3)
    assert r[1:, 1:].tolist() == [[1.0, 0.4], [0.2, 1.0]]
    assert r[1, 0] == pytest.approx(0.4)
    assert r[0, 1] == pytest.approx(0.2)
    assert r[0, 0] == 1.0


def test_confusion_csv_round_trip(tmp_path):
    """Counts survive a CSV round trip and load as rates."""
    cm = ConfusionMatrix(3, [[5, 1, 0], [2, 6, 0], [0, 0, 4]], ["a", "b", "c"])
    path = save_confusion_csv(cm, str(tmp_path / "cm.csv"))
    assert load_confusion_csv(path) == cm
    assert np.allclose(load_rates(path), normalize(cm))
    rates_path = save_confusion_csv(cm, str(tmp_path / "rates.csv"), "normalized")
    assert np.array_equal(load_rates(rates_path), normalize(cm))


def test_weight_csv_kind(tmp_path):
    """Weight matrices are written with their own kind."""
    path = save_weight_csv(WeightMatrix.identity(2), ["a", "b"], str(tmp_path / "w.csv"))
    assert (tmp_path / "w.csv").read_text().startswith("# kind=weights\n")
    assert path.endswith("w.csv")


def test_partition_file_round_trip(tmp_path):
    """One group per line; an empty partition is an empty file."""
    partition = GroupPartition.from_groups([[2, 4], [0, 1]], 6, 0.05)
    path = save_partition(partition, str(tmp_path / "groups.txt"))
    assert (tmp_path / "groups.txt").read_text() == "0 1\n2 4\n"
    assert load_partition(path, 6, 0.05) == partition
    empty = save_partition(GroupPartition.from_groups([], 3), str(tmp_path / "empty.txt"))
    assert (tmp_path / "empty.txt").read_text() == ""
    assert load_partition(empty, 3).groups == []


def test_partition_file_rejects_overlap(tmp_path):
    """Overlapping groups in a file are an invalid partition."""
    path = tmp_path / "groups.txt"
    path.write_text("0 1\n1 2\n")
    with pytest.raises(InvalidPartitionError):
        load_partition(str(path), 4)
