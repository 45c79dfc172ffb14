import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pat import tensor as tn
from pat.loss import LossParams, asymmetric_loss, bce_loss, total_loss
from pat.tensor import ShapeError, Tensor


def loss_at(g, y, **kw):
    with tn.precision(np.float64):
        return asymmetric_loss(np.array([[g]]), Tensor(np.array([[y]])), LossParams(**kw)).item()


def test_positive_hand_value():
    assert loss_at(1, 0.5, gamma_pos=1) == pytest.approx(0.346574, abs=1e-6)


def test_negative_hand_value():
    assert loss_at(0, 0.6, gamma_neg=3, delta=0.1) == pytest.approx(0.086643, abs=1e-6)


def test_plain_log_loss_at_half():
    assert loss_at(1, 0.5, gamma_pos=0) == pytest.approx(math.log(2), abs=1e-9)
    assert loss_at(0, 0.5, gamma_neg=0, delta=0) == pytest.approx(math.log(2), abs=1e-9)


def test_zero_exponents_reduce_to_bce():
    rng = np.random.default_rng(0)
    g = rng.integers(0, 2, size=(100, 100))
    y = rng.uniform(1e-4, 1 - 1e-4, size=(100, 100))
    with tn.precision(np.float64):
        a = asymmetric_loss(g, Tensor(y), LossParams(0, 0, 0)).data
        b = bce_loss(g, Tensor(y)).data
    ref = -(g * np.log(y) + (1 - g) * np.log(1 - y))
    np.testing.assert_allclose(a, b, atol=1e-6)
    np.testing.assert_allclose(a, ref, atol=1e-6)


@pytest.mark.parametrize("y", [0.0, 1e-9, 0.03, 0.0999, 0.1])
def test_easy_negatives_are_discarded(y):
    with tn.precision(np.float64):
        yt = Tensor(np.array([[y]]), requires_grad=True)
        loss = tn.sum(asymmetric_loss(np.array([[0]]), yt, LossParams(delta=0.1)))
        loss.backward()
    assert loss.item() == 0.0
    assert yt.grad[0, 0] == 0.0


def test_confident_extremes_stay_finite():
    with tn.precision(np.float64):
        y = Tensor(np.array([[0.0, 1.0, 0.0, 1.0]]), requires_grad=True)
        loss = tn.sum(asymmetric_loss(np.array([[1, 0, 0, 1]]), y))
        loss.backward()
    assert np.isfinite(loss.item()) and np.isfinite(y.grad).all()


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_positive_loss_decreases_with_confidence(y, step):
    assert loss_at(1, y + step) < loss_at(1, y)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.11, 0.98), st.floats(0.001, 0.01))
def test_negative_loss_increases_with_confidence(y, step):
    assert loss_at(0, y + step) > loss_at(0, y)


def test_labels_validated():
    y = Tensor(np.full((2, 3), 0.5))
    with pytest.raises(ShapeError):
        asymmetric_loss(np.zeros((3, 2)), y)
    with pytest.raises(ValueError, match="0 or 1"):
        asymmetric_loss(np.full((2, 3), 0.5), y)


def test_params_validated():
    with pytest.raises(ValueError):
        LossParams(delta=1.0)
    with pytest.raises(ValueError):
        LossParams(gamma_neg=-1)


def test_total_loss_single_frame():
    with tn.precision(np.float64):
        y = Tensor(np.array([[0.5]]))
        total = total_loss(np.array([[1]]), {"fine": y}, {"fine": 1.0})
    assert total.item() == pytest.approx(0.346574, abs=1e-6)


def test_total_loss_weights_and_normalizes_by_length():
    rng = np.random.default_rng(1)
    g = rng.integers(0, 2, size=(6, 3))
    with tn.precision(np.float64):
        a = Tensor(rng.uniform(0.05, 0.95, size=(6, 3)))
        b = Tensor(rng.uniform(0.05, 0.95, size=(6, 3)))
        total = total_loss(g, {"fine": a, "coarse": b}, {"fine": 0.3, "coarse": 0.7}).item()
        la = asymmetric_loss(g, a).data.sum()
        lb = asymmetric_loss(g, b).data.sum()
    assert total == pytest.approx((0.3 * la + 0.7 * lb) / 6, rel=1e-12)


def test_total_loss_permutation_invariant():
    rng = np.random.default_rng(2)
    g = rng.integers(0, 2, size=(8, 4))
    y = rng.uniform(0.01, 0.99, size=(8, 4))
    perm = rng.permutation(8)
    with tn.precision(np.float64):
        a = total_loss(g, {"fine": Tensor(y)}, {"fine": 1.0}).item()
        b = total_loss(g[perm], {"fine": Tensor(y[perm])}, {"fine": 1.0}).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_total_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    g = rng.integers(0, 2, size=(4, 3))
    y0 = rng.uniform(0.15, 0.85, size=(4, 3))
    with tn.precision(np.float64):
        y = Tensor(y0.copy(), requires_grad=True)
        total_loss(g, {"fine": y}, {"fine": 1.0}).backward()
        h = 1e-6
        for idx in np.ndindex(y0.shape):
            up, down = y0.copy(), y0.copy()
            up[idx] += h
            down[idx] -= h
            fd = (total_loss(g, {"fine": Tensor(up)}, {"fine": 1.0}).item()
                  - total_loss(g, {"fine": Tensor(down)}, {"fine": 1.0}).item()) / (2 * h)
            assert y.grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)
