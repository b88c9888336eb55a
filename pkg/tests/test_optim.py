"""Optimizer tests against a hand-rolled update oracle."""

import numpy as np
import pytest

from wbpose import autodiff as ad
from wbpose.errors import ShapeMismatch
from wbpose.optim import Adam, AdamConfig


def test_config_validation():
    with pytest.raises(ShapeMismatch):
        AdamConfig(lr=0.0)
    with pytest.raises(ShapeMismatch):
        AdamConfig(beta1=1.0)
    with pytest.raises(ShapeMismatch):
        AdamConfig(beta2=-0.1)
    with pytest.raises(ShapeMismatch):
        AdamConfig(eps=0.0)
    with pytest.raises(ShapeMismatch):
        AdamConfig(decay_step=0)


def test_matches_reference_update_rule():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(4, 3))
    p = ad.param(x0.copy())
    cfg = AdamConfig(lr=1e-2)
    opt = Adam({"x": p}, cfg)

    ref = x0.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t in range(1, 6):
        g = rng.normal(size=ref.shape)
        p.grad = g.copy()
        opt.step()
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mh = m / (1 - cfg.beta1 ** t)
        vh = v / (1 - cfg.beta2 ** t)
        ref = ref - cfg.lr * mh / (np.sqrt(vh) + cfg.eps)
        assert np.allclose(p.data, ref, atol=1e-14)


def test_step_size_is_capped_by_lr():
    # Adam with zero history moves at most ~lr per coordinate per step
    p = ad.param(np.zeros(5))
    opt = Adam([p], AdamConfig(lr=1e-3))
    p.grad = np.array([1e6, 1.0, 1e-12, -3.0, 0.0])
    opt.step()
    assert np.abs(p.data).max() <= 1e-3 + 1e-12


def test_lr_decay_schedule():
    p = ad.param(np.zeros(1))
    cfg = AdamConfig(lr=1e-2, decay_step=3, decay_factor=0.1)
    opt = Adam([p], cfg)
    seen = []
    for _ in range(5):
        p.grad = np.ones(1)
        opt.step()
        seen.append(opt.lr)
    assert seen[0] == seen[1] == pytest.approx(1e-2)
    assert seen[2] == seen[3] == seen[4] == pytest.approx(1e-3)


def test_missing_grad_freezes_param():
    a = ad.param(np.ones(2))
    b = ad.param(np.ones(2))
    opt = Adam({"a": a, "b": b}, AdamConfig(lr=1e-2))
    a.grad = np.ones(2)
    b.grad = None
    opt.step()
    assert not np.allclose(a.data, 1.0)
    assert np.array_equal(b.data, np.ones(2))


def test_zero_grad_clears():
    p = ad.param(np.ones(2))
    opt = Adam([p], AdamConfig())
    p.grad = np.ones(2)
    opt.zero_grad()
    assert p.grad is None


def test_converges_on_quadratic():
    target = np.array([1.5, -2.0, 0.25])
    p = ad.param(np.zeros(3))
    opt = Adam([p], AdamConfig(lr=5e-2))
    for _ in range(400):
        with ad.Tape():
            diff = p - ad.constant(target)
            loss = ad.tsum(diff * diff)
            ad.backward(loss, [p])
        opt.step()
        opt.zero_grad()
    assert np.abs(p.data - target).max() < 1e-3
