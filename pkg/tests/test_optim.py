"""Optimizer oracles: the single-step hand values plus a two-step reference
implementation written independently of the production code."""
import numpy as np
import pytest

from tamperkit.optim import AdamW
from tamperkit.tensor import Tensor


def param(value, dtype=np.float64):
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=True, dtype=dtype)


def test_single_step_unit_gradient():
    # w=1, g=1, lr=0.1: mhat=vhat=1 at t=1, so w -> 1 - 0.1*1/(1+1e-8) ~ 0.9
    p = param([1.0])
    opt = AdamW({"w": p}, lr=0.1)
    p.grad = np.asarray([1.0])
    opt.step()
    assert abs(float(p.data[0]) - 0.9) < 1e-8


def test_weight_decay_only():
    # zero gradient, wd=0.01, lr=0.1: pure decay leaves w = 1 - 0.001 = 0.999
    p = param([1.0])
    opt = AdamW({"w": p}, lr=0.1, weight_decay=0.01)
    p.grad = np.zeros(1)
    opt.step()
    assert abs(float(p.data[0]) - 0.999) < 1e-12


def test_zero_gradient_zero_decay_is_identity():
    p = param([[1.5, -2.5]])
    opt = AdamW({"w": p}, lr=0.1)
    p.grad = np.zeros((1, 2))
    opt.step()
    np.testing.assert_array_equal(p.data, [[1.5, -2.5]])


def test_missing_gradient_raises_and_names_parameter():
    a, b = param([1.0]), param([2.0])
    opt = AdamW({"a": a, "b": b}, lr=0.1)
    a.grad = np.asarray([1.0])
    with pytest.raises(RuntimeError, match="b"):
        opt.step()


def test_two_steps_match_reference():
    rng = np.random.default_rng(17)
    w0 = rng.standard_normal((3, 2))
    g1 = rng.standard_normal((3, 2))
    g2 = rng.standard_normal((3, 2))
    lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.02

    # independent reference: textbook Adam with decoupled decay
    w, m, v = w0.copy(), np.zeros_like(w0), np.zeros_like(w0)
    for t, g in [(1, g1), (2, g2)]:
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w = w - lr * mhat / (np.sqrt(vhat) + eps) - lr * wd * w

    p = param(w0)
    opt = AdamW({"w": p}, lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    p.grad = g1.copy()
    opt.step()
    p.grad = g2.copy()
    opt.step()
    np.testing.assert_allclose(p.data, w, rtol=1e-12, atol=1e-14)


def test_gradients_cleared_after_step():
    p = param([1.0])
    opt = AdamW({"w": p}, lr=0.1)
    p.grad = np.asarray([1.0])
    opt.step()
    assert p.grad is None


def test_state_dict_round_trip_continues_identically():
    rng = np.random.default_rng(23)
    w0 = rng.standard_normal(4)
    grads = [rng.standard_normal(4) for _ in range(4)]

    pa = param(w0.copy())
    oa = AdamW({"w": pa}, lr=0.01, weight_decay=0.1)
    for g in grads[:2]:
        pa.grad = g.copy()
        oa.step()
    snap_w = pa.data.copy()
    snap_state = oa.state_dict()

    # resume into a fresh optimizer; the next two steps must match exactly
    for g in grads[2:]:
        pa.grad = g.copy()
        oa.step()

    pb = param(snap_w)
    ob = AdamW({"w": pb}, lr=0.01, weight_decay=0.1)
    ob.load_state_dict(snap_state)
    assert ob.step_count == 2
    for g in grads[2:]:
        pb.grad = g.copy()
        ob.step()
    np.testing.assert_array_equal(pa.data, pb.data)


def test_float32_parameters_stay_float32():
    p = param([1.0], dtype=np.float32)
    opt = AdamW({"w": p}, lr=0.1, weight_decay=0.01)
    p.grad = np.asarray([1.0], dtype=np.float32)
    opt.step()
    assert p.data.dtype == np.float32


def test_empty_params_rejected():
    with pytest.raises(ValueError):
        AdamW({}, lr=0.1)
