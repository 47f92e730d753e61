import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stncell.autodiff import Tensor, finite_diff_gradcheck
from stncell.errors import ContractError
from stncell.losses import (
    CLASS_NAMES,
    LossWeights,
    combined_loss,
    cross_entropy,
    localization_loss,
    one_hot,
)
from stncell.stn import CropGeometry, make_ground_truth_theta, rotation_theta

GEOM = CropGeometry()


def test_class_order_and_one_hot():
    assert CLASS_NAMES == ("granulocyte", "mitosis", "tumor")
    assert np.array_equal(one_hot(1), [0, 1, 0])
    assert np.array_equal(one_hot([2, 0]), [[0, 0, 1], [1, 0, 0]])
    with pytest.raises(ContractError):
        one_hot(3)
    with pytest.raises(ContractError):
        one_hot(-1)


def test_cross_entropy_examples():
    assert cross_entropy(np.array([1.0, 0, 0]), one_hot(0)).item() == 0.0
    assert cross_entropy(np.full(3, 1 / 3), one_hot(2)).item() == pytest.approx(np.log(3), abs=1e-12)
    assert cross_entropy(np.array([0.7, 0.2, 0.1]), one_hot(0)).item() == pytest.approx(0.35667494, abs=1e-8)


def test_cross_entropy_clamps_zero_probability():
    value = cross_entropy(np.array([0.0, 1.0, 0.0]), one_hot(0)).item()
    assert np.isfinite(value) and value == pytest.approx(-np.log(1e-12))


def test_cross_entropy_batch_mean():
    probs = np.array([[0.7, 0.2, 0.1], [0.2, 0.5, 0.3]])
    labels = one_hot([0, 1])
    expected = (-np.log(0.7) - np.log(0.5)) / 2
    assert cross_entropy(probs, labels).item() == pytest.approx(expected, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3), st.integers(0, 2))
def test_cross_entropy_non_negative(weights, label):
    probs = np.array(weights) / np.sum(weights)
    assert cross_entropy(probs, one_hot(label)).item() >= 0.0


def test_localization_loss_examples():
    gt = make_ground_truth_theta(GEOM, 8, -4)
    assert localization_loss(gt, gt).item() == 0.0
    off = gt.copy()
    off[0, 2] += 0.1
    assert localization_loss(off, gt).item() == pytest.approx(0.01, abs=1e-12)


def test_localization_loss_each_term():
    gt = make_ground_truth_theta(GEOM)
    skew = gt.copy()
    skew[0, 1] = 0.1  # also raises s_y: sqrt(0.1^2 + 0.5^2)
    expected = 0.01 + (np.hypot(0.1, 0.5) - 0.5) ** 2
    assert localization_loss(skew, gt).item() == pytest.approx(expected, abs=1e-12)
    unequal = gt.copy()
    unequal[1, 1] = 0.6
    assert localization_loss(unequal, gt).item() == pytest.approx(0.01 + 0.01, abs=1e-12)


def test_rotation_is_free():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = rng.uniform(0.1, 1.0)
        tx, ty = rng.uniform(-0.5, 0.5, size=2)
        gt = np.array([[s, 0, tx], [0, s, ty]])
        theta = rotation_theta(rng.uniform(0, 2 * np.pi), s, tx, ty)
        assert localization_loss(theta, gt).item() < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_localization_loss_non_negative(entries):
    theta = np.array(entries).reshape(2, 3)
    assert localization_loss(theta, make_ground_truth_theta(GEOM)).item() >= 0.0


def test_localization_loss_batch_mean():
    gt = np.stack([make_ground_truth_theta(GEOM)] * 2)
    theta = gt.copy()
    theta[0, 0, 2] = 0.2
    assert localization_loss(theta, gt).item() == pytest.approx(0.02, abs=1e-12)


def test_combined_loss_examples():
    assert combined_loss(0.0, 0.0).item() == 0.0
    assert combined_loss(0.2, 0.3, LossWeights(1.0)).item() == pytest.approx(0.5)
    assert combined_loss(0.2, 0.3, LossWeights(0.0)).item() == 0.2
    assert combined_loss(0.2, 0.3, LossWeights(2.0)).item() == pytest.approx(0.8)


def test_kappa_zero_blocks_classifier_gradient():
    l_cla = Tensor(np.array(0.3), requires_grad=True)
    l_loc = Tensor(np.array(0.2), requires_grad=True)
    combined_loss(l_loc, l_cla, LossWeights(0.0)).backward()
    assert l_loc.grad == 1.0 and l_cla.grad == 0.0


@pytest.mark.parametrize("kappa", [-1.0, np.inf, np.nan])
def test_invalid_kappa(kappa):
    with pytest.raises(ContractError):
        LossWeights(kappa)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    gt = make_ground_truth_theta(GEOM, 5, -9)
    for _ in range(5):
        theta = gt + rng.normal(0, 0.2, size=(2, 3))
        assert finite_diff_gradcheck(lambda t: localization_loss(t, gt), [theta], tol=1e-5).passed
        probs = rng.dirichlet(np.ones(3)) * 0.9 + 0.03
        assert finite_diff_gradcheck(lambda p: cross_entropy(p, one_hot(1)), [probs], tol=1e-5).passed
