import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from siamix import objectives as O
from siamix.errors import ConfigError, ContractError, DataError, ShapeError
from siamix.gradcheck import grad_check
from siamix.tensor import Tensor

import oracles


def rand_case(rng, b=2, n=2, h=4, w=4):
    return rng.standard_normal((b, n, h, w)) * 2, rng.integers(0, n, (b, h, w))


def hard_logits(labels, n, margin=20.0):
    return np.moveaxis(np.eye(n)[labels], -1, 1) * margin


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------
def test_wce_uniform_weights_equals_ce(rng):
    x, y = rand_case(rng)
    plain = O.weighted_cross_entropy(Tensor(x), y).item()
    uniform = O.weighted_cross_entropy(Tensor(x), y, [1.0, 1.0]).item()
    assert abs(plain - uniform) < 1e-9
    assert abs(plain - oracles.cross_entropy_loop(x, y)) < 1e-9


def test_wce_saturates(rng):
    y = rng.integers(0, 2, (1, 3, 3))
    assert O.weighted_cross_entropy(Tensor(hard_logits(y, 2)), y).item() < 1e-6


def test_wce_doubling_class_one_weight(rng):
    x, y = rand_case(rng, h=5, w=5)
    base = oracles.cross_entropy_loop(x, y, [1.0, 1.0])
    only0 = oracles.cross_entropy_loop(x, y, [1.0, 0.0])
    doubled = O.weighted_cross_entropy(Tensor(x), y, [1.0, 2.0]).item()
    class1 = base - only0
    assert abs(doubled - (only0 + 2 * class1)) < 1e-9
    assert abs(doubled - oracles.cross_entropy_loop(x, y, [1.0, 2.0])) < 1e-9


def test_label_out_of_range_names_pixel():
    y = np.zeros((1, 2, 2), int)
    y[0, 1, 0] = 3
    with pytest.raises(DataError, match=r"\(0, 1, 0\)"):
        O.weighted_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), y)


def test_bad_class_weights():
    with pytest.raises(ConfigError):
        O.weighted_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 2), int), [1.0, 0.0])


def test_label_shape_mismatch():
    with pytest.raises(ShapeError):
        O.focal_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 3, 2), int))


# ---------------------------------------------------------------------------
# focal
# ---------------------------------------------------------------------------
def test_focal_gamma_zero_is_ce(rng):
    for _ in range(10):
        x, y = rand_case(rng, n=3)
        assert abs(O.focal_loss(Tensor(x), y, 0.0).item() - O.weighted_cross_entropy(Tensor(x), y).item()) < 1e-9


def test_focal_single_pixel_value():
    p = 0.9
    logits = np.array([0.0, math.log(p / (1 - p))]).reshape(1, 2, 1, 1)
    value = O.focal_loss(Tensor(logits), np.ones((1, 1, 1), int), 2.0).item()
    assert abs(value - 0.01 * -math.log(0.9)) < 1e-12
    assert abs(value - 1.0536e-3) < 1e-7


def test_focal_matches_loop(rng):
    x, y = rand_case(rng, n=3)
    for gamma in (0.5, 1.0, 2.0):
        assert abs(O.focal_loss(Tensor(x), y, gamma).item() - oracles.focal_loop(x, y, gamma)) < 1e-9


@given(st.integers(0, 10_000))
def test_focal_bounded_by_ce(seed):
    x, y = rand_case(np.random.default_rng(seed))
    assert O.focal_loss(Tensor(x), y, 2.0).item() <= O.focal_loss(Tensor(x), y, 0.0).item() + 1e-12


def test_focal_negative_gamma():
    with pytest.raises(ConfigError):
        O.focal_loss(Tensor(np.zeros((1, 2, 1, 1))), np.zeros((1, 1, 1), int), -1.0)


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------
def test_dice_perfect_and_disjoint(rng):
    y = rng.integers(0, 2, (1, 8, 8))
    y[0, 0, 0] = 1
    assert O.dice_loss(Tensor(hard_logits(y, 2, 40)), y).item() < 1e-3
    assert O.dice_loss(Tensor(hard_logits(1 - y, 2, 40)), y).item() > 0.98


def test_dice_set_arithmetic():
    # 100 labelled pixels, 100 predicted, 50 shared
    y = np.zeros((1, 20, 20), int)
    y[0, :5, :] = 1
    pred = np.zeros_like(y)
    pred[0, :2, :] = 1
    pred[0, 2, :10] = 1
    pred[0, 10:12, :] = 1
    pred[0, 12, :10] = 1
    label_set = {tuple(p) for p in np.argwhere(y[0])}
    pred_set = {tuple(p) for p in np.argwhere(pred[0])}
    assert (len(label_set), len(pred_set), len(label_set & pred_set)) == (100, 100, 50)
    assert oracles.dice_sets(pred_set, label_set) == 0.5
    value = O.dice_loss(Tensor(hard_logits(pred, 2, 60)), y, smooth=0.0).item()
    assert abs(value - 0.5) < 1e-9


@given(st.integers(0, 10_000))
def test_dice_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    x, y = rand_case(rng, n=int(rng.integers(2, 4)))
    v = O.dice_loss(Tensor(x * 5), y).item()
    assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# composite
# ---------------------------------------------------------------------------
def test_composite_dice_focal(rng):
    x, y = rand_case(rng)
    spec = O.LossSpec.parse("dice:1,focal:1")
    total = O.composite_loss(spec, Tensor(x), y).item()
    assert abs(total - (O.dice_loss(Tensor(x), y).item() + O.focal_loss(Tensor(x), y).item())) < 1e-9


def test_composite_wce_uniform(rng):
    x, y = rand_case(rng)
    spec = O.LossSpec.parse("wce:1", class_weights=(1.0, 1.0))
    assert abs(O.composite_loss(spec, Tensor(x), y).item() - oracles.cross_entropy_loop(x, y)) < 1e-9


def test_zero_weight_component_is_bitwise_noop(rng):
    x, y = rand_case(rng)
    a = O.composite_loss(O.LossSpec.parse("dice:1,focal:1"), Tensor(x), y).item()
    b = O.composite_loss(O.LossSpec.parse("dice:1,focal:1,wce:0"), Tensor(x), y).item()
    assert a == b


@pytest.mark.parametrize("text", ["", "dice:0,focal:0", "lovasz:1", "dice:-1", "dice:x"])
def test_invalid_loss_specs(text):
    with pytest.raises(ConfigError):
        O.LossSpec.parse(text)


@pytest.mark.parametrize("kind", ["wce", "focal", "dice"])
def test_loss_gradients(kind):
    rng = np.random.default_rng(7)
    spec = O.LossSpec(((kind, 1.0),), class_weights=(0.7, 1.3) if kind == "wce" else None, gamma=1.5)
    labels = rng.integers(0, 2, (2, 4, 4))
    assert grad_check(lambda z: O.composite_loss(spec, z, labels), [rng.standard_normal((2, 2, 4, 4))]) < 1e-5


def test_inverse_frequency_weights():
    labels = [np.array([[0, 0, 0, 1]])]
    w = O.inverse_frequency_weights(labels, 2)
    assert abs(np.mean(w) - 1) < 1e-12
    assert abs(w[1] / w[0] - 3) < 1e-12
    assert O.inverse_frequency_weights([np.zeros((2, 2), int)], 2)[1] > 0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------
def test_confusion_identity_and_all_positive(rng):
    y = rng.integers(0, 2, (6, 6))
    c = O.confusion_counts(y, y, 1)
    assert c.fp == c.fn == 0
    c = O.confusion_counts(np.ones((10, 10), int), np.zeros((10, 10), int), 1)
    assert c.fp == 100 and c.total == 100


def test_confusion_matches_loop_100(rng):
    for _ in range(100):
        n = int(rng.integers(2, 4))
        pred, lab = rng.integers(0, n, (16, 16)), rng.integers(0, n, (16, 16))
        cls = int(rng.integers(0, n))
        c = O.confusion_counts(pred, lab, cls)
        assert (c.tp, c.fp, c.fn, c.tn) == oracles.confusion_loop(pred, lab, cls)


def test_confusion_shape_mismatch():
    with pytest.raises(ShapeError):
        O.confusion_counts(np.zeros((2, 2)), np.zeros((3, 2)))


def test_negative_counts_rejected():
    with pytest.raises(ContractError):
        O.ConfusionCounts(-1, 0, 0, 0)


def test_f1_iou_values():
    s = O.f1_iou(O.ConfusionCounts(50, 10, 10, 0))
    assert abs(s.f1 - 100 / 120) < 1e-12 and abs(s.iou - 50 / 70) < 1e-12
    assert tuple(O.f1_iou(O.ConfusionCounts(5, 0, 0, 3))) == (1.0, 1.0)
    z = O.f1_iou(O.ConfusionCounts(0, 0, 0, 9))
    assert (z.f1, z.iou, z.degenerate) == (0.0, 0.0, True)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_iou_f1_identity(tp, fp, fn):
    s = O.f1_iou(O.ConfusionCounts(tp, fp, fn, 0))
    if tp + fp + fn:
        assert abs(s.iou - s.f1 / (2 - s.f1)) < 1e-12


def test_metrics_report_csv_roundtrip(rng):
    report = O.MetricsReport(2)
    for _ in range(3):
        report.update(rng.integers(0, 2, (1, 8, 8)), rng.integers(0, 2, (1, 8, 8)))
    lines = report.to_csv().strip().splitlines()
    assert lines[0] == "class,TP,FP,FN,TN,F1,IoU"
    assert len(lines) == 3
    for row, counts in zip(lines[1:], report.counts):
        fields = row.split(",")
        assert tuple(map(int, fields[1:5])) == (counts.tp, counts.fp, counts.fn, counts.tn)
        assert sum(map(int, fields[1:5])) == 3 * 64
    mean = report.class_mean
    assert abs(mean.f1 - (report.score(0).f1 + report.score(1).f1) / 2) < 1e-12
