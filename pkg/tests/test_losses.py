import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import FD_RTOL, numeric_grad, rel_err
from fslidar.classspace import build_class_space
from fslidar.errors import BaseLabelInNovelStage, InvalidLabel, NonFiniteLogit, NotASimplexRow
from fslidar.losses import (base_stage_loss, class_weights, cross_entropy, grouped_lovasz, grouped_probs,
                            label_counts, lovasz_softmax, lovasz_softmax_logits, novel_stage_loss,
                            plain_distillation, softmax, unbiased_cross_entropy, unbiased_distillation,
                            weighted_cross_entropy)

N_INSTANCES = 100


def _far_from_kinks(probs, labels, classes, gap=1e-3):
    """Lovász is piecewise linear in the sorted errors; keep FD away from order changes."""
    for c in classes:
        fg = labels == c
        err = np.sort(np.where(fg, 1.0 - probs[:, c], probs[:, c]))
        if len(err) > 1 and np.diff(err).min() < gap:
            return False
    return True


def _instances(cs, novel_stage=False, lovasz_classes=None, grouped=False):
    """Seeded (logits, labels, teacher) triples, resampled away from Lovász kinks."""
    rng = np.random.default_rng(1234)
    out = []
    allowed = np.concatenate([[0], cs.novel_dense]) if novel_stage else np.arange(cs.num_classes)
    while len(out) < N_INSTANCES:
        p = int(rng.integers(3, 10))
        z = rng.normal(0, 2, (p, cs.num_classes))
        y = rng.choice(allowed, p)
        t = softmax(rng.normal(0, 1, (p, cs.num_base_outputs)))
        if lovasz_classes is not None:
            probs = softmax(z)
            if grouped:
                probs = grouped_probs(probs, cs.background_group)
                y_check = np.where(y >= cs.num_base_outputs, y - cs.num_base_outputs + 1, 0)
            else:
                y_check = y
            if not _far_from_kinks(probs, y_check, lovasz_classes):
                continue
        out.append((z, y, t))
    return out


def _check(loss_fn, instances):
    worst = 0.0
    for z, y, t in instances:
        lv = loss_fn(z, y, t)
        num = numeric_grad(lambda x: loss_fn(x, y, t).value, z)
        worst = max(worst, rel_err(lv.grad, num))
    assert worst < FD_RTOL, worst


def test_weighted_ce_gradient(small_cs):
    w = np.random.default_rng(0).uniform(0.1, 2.0, small_cs.num_classes)
    _check(lambda z, y, t: weighted_cross_entropy(z, y, w), _instances(small_cs))


def test_plain_ce_gradient(small_cs):
    _check(lambda z, y, t: cross_entropy(z, y), _instances(small_cs))


def test_lovasz_gradient(small_cs):
    classes = np.arange(small_cs.num_classes)
    _check(lambda z, y, t: lovasz_softmax_logits(z, y), _instances(small_cs, lovasz_classes=classes))


def test_unbiased_ce_gradient(small_cs):
    _check(lambda z, y, t: unbiased_cross_entropy(z, y, small_cs), _instances(small_cs, novel_stage=True))


@pytest.mark.parametrize("mode", ["sum", "label"])
def test_unbiased_distillation_gradient(small_cs, mode):
    _check(lambda z, y, t: unbiased_distillation(z, t, small_cs, mode, y),
           _instances(small_cs, novel_stage=True))


def test_plain_distillation_gradient(small_cs):
    _check(lambda z, y, t: plain_distillation(z, t, small_cs), _instances(small_cs))


def test_base_stage_loss_gradient():
    cs = build_class_space([1, 2], [3], 0)
    w = class_weights([50, 10, 0])
    # base stage: three base-head outputs, labels from {u} ∪ base
    inst = []
    rng = np.random.default_rng(7)
    while len(inst) < N_INSTANCES:
        z = rng.normal(0, 2, (int(rng.integers(3, 10)), 3))
        y = rng.integers(0, 3, len(z))
        if _far_from_kinks(softmax(z), y, range(3)):
            inst.append((z, y, None))
    _check(lambda z, y, t: base_stage_loss(z, y, w), inst)
    assert cs.num_base_outputs == 3


def test_grouped_lovasz_gradient(small_cs):
    g = np.arange(1, 1 + len(small_cs.novel))
    _check(lambda z, y, t: grouped_lovasz(z, y, small_cs),
           _instances(small_cs, novel_stage=True, lovasz_classes=g, grouped=True))


@pytest.mark.parametrize("unbiased", [True, False])
def test_novel_stage_loss_gradient(small_cs, unbiased):
    g = np.arange(1, 1 + len(small_cs.novel))
    _check(lambda z, y, t: novel_stage_loss(z, y, t, small_cs, 0.7, unbiased=unbiased),
           _instances(small_cs, novel_stage=True, lovasz_classes=g, grouped=True))


def test_composite_gradient_is_sum_of_parts(small_cs):
    z, y, t = _instances(small_cs, novel_stage=True)[0]
    total = novel_stage_loss(z, y, t, small_cs, 0.5)
    parts = (unbiased_cross_entropy(z, y, small_cs).grad
             + 0.5 * unbiased_distillation(z, t, small_cs).grad + grouped_lovasz(z, y, small_cs).grad)
    assert np.allclose(total.grad, parts, atol=1e-15)


# --------------------------------------------------------------------------
# values

def _jaccard_loss(pred, gt):
    union = np.logical_or(pred, gt).sum()
    return 0.0 if union == 0 else 1.0 - np.logical_and(pred, gt).sum() / union


def test_lovasz_equals_jaccard_on_hard_predictions():
    for n in range(1, 5):
        for k in range(1, 4):
            for pred in itertools.product(range(k), repeat=n):
                probs = np.eye(k)[list(pred)]
                for gt in itertools.product(range(k), repeat=n):
                    lv = lovasz_softmax(probs, np.array(gt))
                    for c in range(k):
                        expect = _jaccard_loss(np.array(pred) == c, np.array(gt) == c)
                        assert abs(lv.parts["lovasz_per_class"][c] - expect) <= 1e-12


def test_lovasz_fractional_case():
    # p(c) = 0.6 on the first point, 0.4 on the second
    probs = np.array([[0.6, 0.4], [0.4, 0.6]])
    lv = lovasz_softmax(probs, np.array([0, 1]), class_set=[0])
    assert abs(lv.value - 0.4) <= 1e-12


def test_lovasz_stable_tie_break():
    probs = np.full((4, 2), 0.5)
    a = lovasz_softmax(probs, np.array([0, 1, 0, 1]))
    b = lovasz_softmax(probs, np.array([0, 1, 0, 1]))
    assert a.value == b.value and np.array_equal(a.grad, b.grad)


def test_weighted_ce_examples():
    z = np.zeros((4, 2))
    y = np.array([0, 0, 0, 1])
    lv = weighted_cross_entropy(z, y, class_weights([3, 1]))
    assert lv.value > 0
    w = class_weights([3, 1])
    assert w[1] > w[0]
    assert class_weights([0])[0] == 1.0
    assert list(label_counts([[0, 1, 1], [2]], 3)) == [1, 2, 1]
    # uniform weights reduce to plain CE scaled by 1/C
    lv_u = weighted_cross_entropy(z, y, np.ones(2))
    assert lv_u.value == pytest.approx(cross_entropy(z, y).value / 2)


def test_unbiased_ce_reduces_to_plain_ce_without_base_classes():
    cs = build_class_space([], [1, 2, 3], 0)
    rng = np.random.default_rng(5)
    for _ in range(200):
        z = rng.normal(0, 3, (7, 4))
        y = rng.integers(0, 4, 7)
        a, b = unbiased_cross_entropy(z, y, cs), cross_entropy(z, y)
        assert a.value == b.value
        assert np.array_equal(a.grad, b.grad)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000))
def test_grouped_probabilities_sum_to_one(seed):
    cs = build_class_space([1, 2, 3], [4, 5], 0)
    z = np.random.default_rng(seed).normal(0, 5, (6, cs.num_classes))
    gp = grouped_probs(softmax(z), cs.background_group)
    assert np.abs(gp.sum(axis=1) - 1.0).max() <= 1e-12


def test_distillation_invariant_inside_u_novel_group(small_cs):
    rng = np.random.default_rng(9)
    group = np.concatenate([[0], small_cs.novel_dense])
    for _ in range(100):
        z = rng.normal(0, 2, (5, small_cs.num_classes))
        t = softmax(rng.normal(0, 1, (5, small_cs.num_base_outputs)))
        # redistribute exp-mass inside the group while keeping its total
        mass = np.exp(z[:, group])
        share = rng.dirichlet(np.ones(len(group)), 5)
        z2 = z.copy()
        z2[:, group] = np.log(share * mass.sum(axis=1, keepdims=True))
        a = unbiased_distillation(z, t, small_cs).value
        b = unbiased_distillation(z2, t, small_cs).value
        assert abs(a - b) <= 1e-12


def test_loss_input_errors(small_cs):
    z = np.zeros((2, small_cs.num_classes))
    with pytest.raises(InvalidLabel):
        cross_entropy(z, [0, 9])
    with pytest.raises(NonFiniteLogit):
        cross_entropy(np.full((1, 3), np.nan), [0])
    with pytest.raises(BaseLabelInNovelStage):
        unbiased_cross_entropy(z, [1, 0], small_cs)
    with pytest.raises(NotASimplexRow):
        unbiased_distillation(z, np.ones((2, 3)), small_cs)
    with pytest.raises(NotASimplexRow):
        lovasz_softmax(np.ones((2, 2)), [0, 1])


def test_losses_are_nonnegative(small_cs):
    for z, y, t in _instances(small_cs, novel_stage=True)[:30]:
        assert novel_stage_loss(z, y, t, small_cs).value >= 0
        assert lovasz_softmax_logits(z, y).value >= 0
