"""AdamW update arithmetic (against hand-computed steps) and stream laws."""

import numpy as np
import pytest

from vlmloop.errors import ShapeError
from vlmloop.optim import AdamW
from vlmloop.rng import Stream
from vlmloop.tensor import Tensor


def test_first_step_matches_hand_computation():
    # theta=1, g=2, lr=0.1, wd=0: m_hat=2, v_hat=4 -> update = 0.1 * 2/(2+eps)
    p = {"w": Tensor(np.array([1.0], dtype=np.float64))}
    opt = AdamW(lr=0.1, weight_decay=0.0)
    opt.step(p, {"w": np.array([2.0])})
    expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8)
    assert abs(p["w"].data[0] - expected) < 1e-12
    assert abs(p["w"].data[0] - 0.9) < 1e-8


def test_second_step_matches_manual_recurrence():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    theta = 0.7
    p = {"w": Tensor(np.array([theta], dtype=np.float64))}
    opt = AdamW(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=0.0)
    m = v = 0.0
    for t, g in enumerate([0.3, -1.2], start=1):
        opt.step(p, {"w": np.array([g])})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert abs(p["w"].data[0] - theta) < 1e-12


def test_zero_grad_zero_decay_leaves_param():
    p = {"w": Tensor(np.array([1.5], dtype=np.float64))}
    opt = AdamW(lr=0.1, weight_decay=0.0)
    opt.step(p, {"w": np.array([0.0])})
    assert p["w"].data[0] == 1.5


def test_decoupled_decay_shrinks_by_factor():
    lr, wd = 0.1, 0.2
    p = {"w": Tensor(np.array([2.0], dtype=np.float64))}
    opt = AdamW(lr=lr, weight_decay=wd)
    opt.step(p, {"w": np.array([0.0])})
    assert abs(p["w"].data[0] - 2.0 * (1 - lr * wd)) < 1e-12


def test_step_counter_increments_by_one():
    p = {"w": Tensor(np.zeros(3, dtype=np.float32))}
    opt = AdamW()
    for expected in (1, 2, 3):
        opt.step(p, {"w": np.ones(3, dtype=np.float32)})
        assert opt.t == expected


def test_shape_mismatch_rejected():
    p = {"w": Tensor(np.zeros(3, dtype=np.float32))}
    with pytest.raises(ShapeError):
        AdamW().step(p, {"w": np.zeros(4, dtype=np.float32)})


class TestStream:
    def test_same_path_same_draws(self):
        a = Stream(5).child("x").child("y").generator().random(8)
        b = Stream(5).child("x").child("y").generator().random(8)
        np.testing.assert_array_equal(a, b)

    def test_sibling_streams_differ(self):
        a = Stream(5).child("x").generator().random(8)
        b = Stream(5).child("y").generator().random(8)
        assert not np.array_equal(a, b)

    def test_seed_changes_draws(self):
        a = Stream(5).child("x").generator().random(8)
        b = Stream(6).child("x").generator().random(8)
        assert not np.array_equal(a, b)

    def test_order_independence(self):
        root = Stream(9)
        first = root.child("a").generator().random(4)
        _ = root.child("b").generator().random(4)
        again = root.child("a").generator().random(4)
        np.testing.assert_array_equal(first, again)
