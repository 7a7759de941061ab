"""Loss fixtures against high-precision oracles, identities, and grad checks."""

from types import SimpleNamespace

import mpmath
import numpy as np
import pytest

from pointcell import tensor as T
from pointcell.errors import ContractError, NumericError
from pointcell.losses import (
    LossConfig,
    classification_loss,
    detection_loss,
    gce_l2_loss,
    regression_loss,
    total_loss,
)
from pointcell.matching import GroundTruthSet, MatchResult
from pointcell.tensor import Tensor

mpmath.mp.dps = 50


def props(coords=None, objectness=None, class_probs=None):
    return SimpleNamespace(coords=coords, objectness=objectness, class_probs=class_probs)


def mr(delta, m):
    delta = np.asarray(delta, dtype=np.intp)
    return MatchResult(delta=delta, negatives=set(range(m)) - set(int(i) for i in delta))


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------


def test_regression_coincident_is_exactly_zero():
    p = props(coords=np.array([[10.0, 20.0]]))
    g = GroundTruthSet(np.array([[10.0, 20.0]]), np.array([0]))
    loss = regression_loss(p, g, mr([0], 1))
    assert loss.item() == 0.0


def test_regression_345_fixture():
    p = props(coords=np.array([[0.0, 0.0]]))
    g = GroundTruthSet(np.array([[3.0, 4.0]]), np.array([0]))
    assert abs(regression_loss(p, g, mr([0], 1)).item() - 5.0) < 1e-12


def test_regression_mean_of_three_random_pairs():
    rng = np.random.default_rng(0)
    coords = rng.uniform(0, 64, size=(5, 2))
    gt_xy = rng.uniform(0, 64, size=(3, 2))
    delta = [4, 0, 2]
    g = GroundTruthSet(gt_xy, np.zeros(3, dtype=int))
    got = regression_loss(props(coords=coords), g, mr(delta, 5)).item()
    want = np.mean([np.hypot(*(coords[delta[j]] - gt_xy[j])) for j in range(3)])
    assert abs(got - want) < 1e-12


def test_regression_empty_gt_returns_constant_zero():
    g = GroundTruthSet(np.empty((0, 2)), np.empty(0, dtype=int))
    loss = regression_loss(props(coords=np.zeros((3, 2))), g, mr([], 3))
    assert loss.item() == 0.0
    assert not loss.requires_grad


def test_regression_squared_variant():
    p = props(coords=np.array([[0.0, 0.0]]))
    g = GroundTruthSet(np.array([[3.0, 4.0]]), np.array([0]))
    assert abs(regression_loss(p, g, mr([0], 1), squared=True).item() - 25.0) < 1e-12


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


def test_detection_fixture_half_confidences():
    obj = np.array([[0.5, 0.5], [0.5, 0.5]])
    loss = detection_loss(props(objectness=obj), mr([0], 2), beta=0.6)
    want = float(mpmath.mpf("0.8") * mpmath.log(2))  # (1/2)(1.6 ln 2)
    assert abs(loss.item() - want) < 1e-12
    assert abs(want - 0.5545177444479562) < 1e-15


def test_detection_perfect_prediction_is_zero():
    obj = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    loss = detection_loss(props(objectness=obj), mr([0], 3), beta=0.6)
    assert loss.item() == 0.0


def test_detection_beta_zero_ignores_negatives():
    rng = np.random.default_rng(1)
    o = rng.uniform(0.1, 0.9, size=(4, 1))
    obj = np.concatenate([1 - o, o], axis=1)
    loss = detection_loss(props(objectness=obj), mr([2], 4), beta=0.0)
    want = -np.log(obj[2, 1]) / 4
    assert abs(loss.item() - want) < 1e-12


def test_detection_all_negative_image():
    obj = np.array([[0.8, 0.2], [0.9, 0.1]])
    loss = detection_loss(props(objectness=obj), mr([], 2), beta=0.6)
    want = -(0.6 * (np.log(0.8) + np.log(0.9))) / 2
    assert abs(loss.item() - want) < 1e-12


def test_detection_requires_a_proposal():
    with pytest.raises(ContractError):
        detection_loss(props(objectness=np.empty((0, 2))), mr([], 0), beta=0.6)


def test_detection_nonnegative_on_random_probs():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m = int(rng.integers(1, 8))
        o = rng.uniform(0.01, 0.99, size=(m, 1))
        obj = np.concatenate([1 - o, o], axis=1)
        n = int(rng.integers(0, m + 1))
        delta = rng.choice(m, size=n, replace=False)
        loss = detection_loss(props(objectness=obj), mr(delta, m), beta=0.6)
        assert loss.item() >= 0.0


# ---------------------------------------------------------------------------
# gce + l2
# ---------------------------------------------------------------------------


def test_gce_one_hot_equals_gamma():
    p = np.zeros(4)
    p[2] = 1.0
    assert abs(gce_l2_loss(p, 2, q=0.4, gamma=0.1).item() - 0.1) < 1e-15


def test_gce_uniform_fixture_against_mpmath():
    c, q, gamma = 4, 0.4, 0.1
    p = np.full(c, 1.0 / c)
    got = gce_l2_loss(p, 1, q=q, gamma=gamma).item()
    want = float((1 - mpmath.mpf(1) / c ** mpmath.mpf(q)) / mpmath.mpf(q) + mpmath.mpf(gamma) / 2)
    assert abs(got - want) < 1e-12
    assert abs(got - 1.114127) < 1e-6
    assert abs(got - 1.1141270562537065) < 1e-12


def test_gce_small_q_approaches_cross_entropy():
    rng = np.random.default_rng(3)
    raw = rng.uniform(0.2, 1.0, size=5)
    p = raw / raw.sum()
    got = gce_l2_loss(p, 3, q=1e-4, gamma=0.1).item()
    want = -np.log(p[3]) + 0.1 * np.linalg.norm(p)
    assert abs(got - want) / abs(want) < 1e-3


def test_gce_q1_is_exact_mae():
    rng = np.random.default_rng(4)
    raw = rng.uniform(0.1, 1.0, size=4)
    p = raw / raw.sum()
    got = gce_l2_loss(p, 0, q=1.0, gamma=0.1).item()
    want = (1.0 - p[0]) + 0.1 * np.linalg.norm(p)
    assert abs(got - want) < 1e-15


def test_gce_monotone_in_target_probability():
    # raise the target share, spread the rest proportionally
    prev = np.inf
    for t in np.linspace(0.1, 0.9, 9):
        p = np.full(4, (1 - t) / 3)
        p[1] = t
        cur = gce_l2_loss(p, 1, q=0.4, gamma=0.1).item()
        assert cur < prev
        prev = cur


def test_gce_validates_inputs():
    with pytest.raises(ContractError):
        gce_l2_loss(np.array([0.5, 0.5]), 0, q=0.0, gamma=0.1)
    with pytest.raises(ContractError):
        gce_l2_loss(np.array([0.5, 0.5]), 2, q=0.4, gamma=0.1)
    with pytest.raises(ContractError):
        gce_l2_loss(np.array([0.9, 0.5]), 0, q=0.4, gamma=0.1)


def test_gce_survives_zero_target_probability():
    p = np.array([0.0, 1.0])
    got = gce_l2_loss(p, 0, q=0.4, gamma=0.0).item()
    want = (1.0 - (1e-12) ** 0.4) / 0.4
    assert abs(got - want) < 1e-9
    assert np.isfinite(got)


# ---------------------------------------------------------------------------
# classification over matched pairs
# ---------------------------------------------------------------------------


def cfg(**kw):
    return LossConfig(**kw)


def test_classification_empty_gt_is_zero():
    g = GroundTruthSet(np.empty((0, 2)), np.empty(0, dtype=int))
    loss = classification_loss(props(class_probs=np.full((3, 4), 0.25)), g, mr([], 3), cfg())
    assert loss.item() == 0.0


def test_classification_sum_semantics():
    p = props(class_probs=np.full((4, 4), 0.25))
    g1 = GroundTruthSet(np.zeros((1, 2)), np.array([0]))
    g2 = GroundTruthSet(np.zeros((2, 2)), np.array([0, 0]))
    one = classification_loss(p, g1, mr([1], 4), cfg()).item()
    two = classification_loss(p, g2, mr([1, 2], 4), cfg()).item()
    assert abs(two - 2 * one) < 1e-12


def test_classification_equals_sum_of_row_losses():
    rng = np.random.default_rng(5)
    raw = rng.uniform(0.1, 1.0, size=(5, 3))
    probs = raw / raw.sum(axis=1, keepdims=True)
    delta = [3, 0, 4]
    labels = np.array([2, 0, 1])
    g = GroundTruthSet(rng.uniform(0, 10, size=(3, 2)), labels)
    got = classification_loss(props(class_probs=probs), g, mr(delta, 5), cfg()).item()
    want = sum(gce_l2_loss(probs[delta[j]], int(labels[j]), 0.4, 0.1).item() for j in range(3))
    assert abs(got - want) < 1e-12


def test_classification_mean_flag():
    rng = np.random.default_rng(6)
    raw = rng.uniform(0.1, 1.0, size=(4, 3))
    probs = raw / raw.sum(axis=1, keepdims=True)
    g = GroundTruthSet(np.zeros((2, 2)), np.array([1, 2]))
    s = classification_loss(props(class_probs=probs), g, mr([0, 3], 4), cfg()).item()
    m = classification_loss(props(class_probs=probs), g, mr([0, 3], 4), cfg(classification_mean=True)).item()
    assert abs(m - s / 2) < 1e-12


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------


def test_total_fixture():
    bd = total_loss(Tensor(5.0), Tensor(0.5), Tensor(1.0), cfg())
    assert abs(bd.total.item() - 1.51) < 1e-12


def test_total_lambda_zero_drops_regression():
    c = LossConfig(lam=0.0)
    a = total_loss(Tensor(5.0), Tensor(0.5), Tensor(1.0), c).total.item()
    b = total_loss(Tensor(99.0), Tensor(0.5), Tensor(1.0), c).total.item()
    assert a == b


def test_total_recomposition_random():
    rng = np.random.default_rng(7)
    r, d, c = rng.uniform(0, 5, size=3)
    bd = total_loss(Tensor(r), Tensor(d), Tensor(c), cfg())
    assert abs(bd.total.item() - (2e-3 * r + d + c)) < 1e-12
    sc = bd.scalars()
    assert abs(sc["reg"] - r) < 1e-15 and abs(sc["total"] - bd.total.item()) < 1e-15


def test_total_rejects_nonfinite_component():
    bad = Tensor(1.0)
    bad.data = np.asarray(np.inf)  # bypass construction check
    with pytest.raises(NumericError, match="det"):
        total_loss(Tensor(1.0), bad, Tensor(1.0), cfg())


def test_loss_config_validation():
    with pytest.raises(ContractError):
        LossConfig(q=0.0)
    with pytest.raises(ContractError):
        LossConfig(q=1.5)
    with pytest.raises(ContractError):
        LossConfig(beta=-0.1)


# ---------------------------------------------------------------------------
# gradients through logits and coordinates
# ---------------------------------------------------------------------------

TOL = 1e-5


def test_regression_grad_wrt_coords():
    gt_xy = np.array([[3.0, 4.0], [10.0, 12.0]])
    g = GroundTruthSet(gt_xy, np.array([0, 1]))
    res = mr([1, 0], 3)

    def f(coords):
        return regression_loss(props(coords=coords), g, res)

    x = Tensor(np.array([[1.0, 2.0], [5.0, 5.0], [8.0, 8.0]]), requires_grad=True)
    assert T.grad_check(f, x, epsilon=1e-6) < TOL


def test_detection_grad_wrt_logits():
    res = mr([0, 2], 4)

    def f(logits):
        obj = T.softmax(logits, axis=1)
        return detection_loss(props(objectness=obj), res, beta=0.6)

    x = Tensor(np.random.default_rng(8).normal(size=(4, 2)), requires_grad=True)
    assert T.grad_check(f, x, epsilon=1e-6) < TOL


def test_classification_grad_wrt_logits():
    g = GroundTruthSet(np.zeros((2, 2)), np.array([2, 0]))
    res = mr([1, 3], 5)
    c = cfg()

    def f(logits):
        probs = T.softmax(logits, axis=1)
        return classification_loss(props(class_probs=probs), g, res, c)

    x = Tensor(np.random.default_rng(9).normal(size=(5, 3)), requires_grad=True)
    assert T.grad_check(f, x, epsilon=1e-6) < TOL


def test_total_grad_wrt_everything():
    g = GroundTruthSet(np.array([[3.0, 4.0]]), np.array([1]))
    res = mr([0], 3)
    c = cfg()

    def f(x):
        coords = T.reshape(T.take_rows(T.reshape(x, (-1,)), np.arange(6)), (3, 2))
        obj = T.softmax(T.reshape(T.take_rows(T.reshape(x, (-1,)), np.arange(6, 12)), (3, 2)), axis=1)
        probs = T.softmax(T.reshape(T.take_rows(T.reshape(x, (-1,)), np.arange(12, 21)), (3, 3)), axis=1)
        p = props(coords=coords, objectness=obj, class_probs=probs)
        bd = total_loss(
            regression_loss(p, g, res),
            detection_loss(p, res, beta=c.beta),
            classification_loss(p, g, res, c),
            c,
        )
        return bd.total

    x = Tensor(np.random.default_rng(10).normal(size=21), requires_grad=True)
    assert T.grad_check(f, x, epsilon=1e-6) < TOL
