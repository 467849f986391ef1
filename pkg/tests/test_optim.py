import math

import numpy as np
import pytest

from flier.optim import AdamW, EmaShadow, cosine_lr, layer_lrs, llrd_scale
from flier.tensor import ParameterSet, ShapeError


def single(value, depth=0):
    p = ParameterSet()
    p.add("w", np.asarray(value, dtype=float), depth)
    return p


def test_cosine_closed_forms():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3) == 0.0
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, abs=1e-19)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-3)
    with pytest.raises(ValueError):
        cosine_lr(-1, 100, 1e-3)


def test_llrd_scale_examples():
    assert llrd_scale(4, 4) == 1.0
    assert llrd_scale(3, 4) == 0.7
    assert llrd_scale(0, 3) == 0.7 ** 3
    assert math.isclose(llrd_scale(0, 3), 0.343, rel_tol=1e-12)
    with pytest.raises(ValueError):
        llrd_scale(5, 4)


def test_layer_lrs_give_probe_the_largest_rate():
    p = ParameterSet()
    for d in range(5):
        p.add(f"l{d}", np.zeros(1), d)
    lrs = layer_lrs(p, 1e-3, 0.7)
    assert max(lrs, key=lrs.get) == "l4"
    assert lrs["l0"] == pytest.approx(1e-3 * 0.7 ** 4)


def test_adamw_zero_grad_no_decay_is_identity():
    p = single([1.0, -2.0])
    opt = AdamW(p, weight_decay=0.0)
    for _ in range(5):
        p["w"].grad = np.zeros(2)
        opt.step(0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_constant_gradient_step_approaches_lr():
    p = single([0.0])
    opt = AdamW(p, weight_decay=0.0)
    lr = 1e-3
    prev = 0.0
    for _ in range(1000):
        p["w"].grad = np.array([0.37])
        opt.step(lr)
        step = prev - p["w"].data[0]
        prev = p["w"].data[0]
    assert step == pytest.approx(lr, rel=0.01)


def test_adamw_decay_is_decoupled_and_geometric():
    p = single([2.0])
    opt = AdamW(p, weight_decay=0.05)
    lr = 0.1
    for _ in range(10):
        p["w"].grad = np.zeros(1)
        opt.step(lr)
    assert p["w"].data[0] == pytest.approx(2.0 * (1 - lr * 0.05) ** 10, rel=1e-12)


def test_adamw_skips_params_without_grad_and_outside_names():
    p = ParameterSet()
    p.add("a", np.ones(2))
    p.add("b", np.ones(2))
    p.add("c", np.ones(2))
    opt = AdamW(p)
    p["a"].grad = np.ones(2)
    p["b"].grad = np.ones(2)
    opt.step(0.1, names={"a"})
    assert not np.array_equal(p["a"].data, np.ones(2))
    np.testing.assert_array_equal(p["b"].data, np.ones(2))
    np.testing.assert_array_equal(p["c"].data, np.ones(2))
    assert set(opt.state) == {"a"}


def test_ema_momentum_extremes():
    p = single([1.0, 2.0])
    frozen = EmaShadow(p, 1.0)
    follow = EmaShadow(p, 0.0)
    p["w"].data = np.array([5.0, 6.0])
    frozen.update(p)
    follow.update(p)
    np.testing.assert_array_equal(frozen.shadow["w"], [1.0, 2.0])
    np.testing.assert_array_equal(follow.shadow["w"], [5.0, 6.0])


def test_ema_geometric_series():
    p = single([0.0])
    ema = EmaShadow(p, 0.9998)
    c = 3.0
    p["w"].data = np.array([c])
    k = 10_000
    for _ in range(k):
        ema.update(p)
    assert abs(ema.shadow["w"][0] - c * (1 - 0.9998 ** k)) < 1e-9


def test_ema_mismatch_errors():
    ema = EmaShadow(single([0.0, 0.0]), 0.9)
    with pytest.raises(ShapeError):
        ema.update(single([0.0]))
    other = ParameterSet()
    other.add("v", np.zeros(2))
    with pytest.raises(KeyError):
        ema.update(other)


def test_ema_applied_restores_raw_weights():
    p = single([1.0])
    ema = EmaShadow(p, 0.0)
    p["w"].data = np.array([4.0])
    ema.update(p)
    p["w"].data = np.array([9.0])
    with ema.applied(p):
        assert p["w"].data[0] == 4.0
    assert p["w"].data[0] == 9.0
