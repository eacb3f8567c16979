import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gavebid import diffcore as dc

D = torch.float64


def test_forward_examples():
    assert float(dc.sigmoid(torch.tensor(0.0, dtype=D))) == 0.5
    logits = torch.tensor([[3.0, -1.0, 2.0]], dtype=D)
    w = dc.masked_softmax(logits, torch.tensor([[False, True, False]]))
    assert w.tolist() == [[0.0, 1.0, 0.0]]
    x = torch.randn(4, 3, dtype=D)
    assert torch.equal(dc.matmul(x, torch.eye(3, dtype=D)), x)


def test_shape_errors():
    with pytest.raises(ValueError):
        dc.matmul(torch.zeros(2, 3), torch.zeros(4, 2))
    with pytest.raises(ValueError):
        dc.mul(torch.zeros(2), torch.zeros(3))
    with pytest.raises(ValueError):
        dc.add(torch.zeros(2, 3), torch.zeros(2))
    with pytest.raises(ValueError):
        dc.masked_softmax(torch.zeros(2, 3), torch.ones(2, 4, dtype=torch.bool))
    with pytest.raises(ValueError):
        dc.masked_softmax(torch.zeros(1, 2), torch.zeros(1, 2, dtype=torch.bool))
    with pytest.raises(ValueError):
        dc.embedding(torch.zeros(3, 2), torch.tensor([0.5]))


def test_backward_examples():
    x = torch.tensor(3.0, dtype=D, requires_grad=True)
    dc.backward(dc.mul(x, x))
    assert float(x.grad) == 6.0
    dc.backward(dc.mul(x, x))
    assert float(x.grad) == 12.0  # accumulates
    with pytest.raises(ValueError):
        dc.backward(torch.ones(2, requires_grad=True) * 2)

    logits = torch.randn(2, 4, dtype=D, requires_grad=True)
    allowed = torch.tensor([[True, True, False, False], [True, False, True, False]])
    w = dc.masked_softmax(logits, allowed)
    dc.backward((w * torch.randn(2, 4, dtype=D)).sum())
    assert torch.all(logits.grad[~allowed] == 0)


def test_expectile_examples():
    one = torch.ones(5, dtype=D)
    zero = torch.zeros(5, dtype=D)
    assert float(dc.expectile_loss(zero, one, 0.99)) == pytest.approx(0.99)
    assert float(dc.expectile_loss(one, zero, 0.99)) == pytest.approx(0.01)
    p, t = torch.randn(7, dtype=D), torch.randn(7, dtype=D)
    assert float(dc.expectile_loss(p, t, 0.5)) == pytest.approx(0.5 * float(((p - t) ** 2).mean()))
    for tau in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            dc.expectile_loss(p, t, tau)


@given(st.floats(0.51, 0.999), st.floats(0.01, 10))
def test_expectile_asymmetry(tau, r):
    zero = torch.zeros(1, dtype=D)
    over = dc.expectile_loss(torch.tensor([r], dtype=D), zero, tau)
    under = dc.expectile_loss(torch.tensor([-r], dtype=D), zero, tau)
    assert float(over) < float(under)


def test_masked_mean_ignores_masked():
    x = torch.tensor([1.0, 100.0, 3.0], dtype=D)
    assert float(dc.masked_mean(x, torch.tensor([True, False, True]))) == 2.0


def test_adamw_zero_grad_is_noop():
    p = torch.tensor([1.5, -2.0], dtype=D)
    st_ = dc.OptimizerState(lr=0.1)
    dc.adamw_step([p], [torch.zeros(2, dtype=D)], st_)
    assert p.tolist() == [1.5, -2.0]


def test_adamw_first_step_hand_computed():
    lr, wd, g = 0.1, 0.01, 0.5
    p = torch.tensor([1.0], dtype=D)
    st_ = dc.OptimizerState(lr=lr, weight_decay=wd)
    dc.adamw_step([p], [torch.tensor([g], dtype=D)], st_)
    # by hand: decay first, then m_hat = g, v_hat = g^2
    m_hat, v_hat = g, g * g
    expect = 1.0 * (1 - lr * wd) - lr * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert float(p) == pytest.approx(expect, abs=1e-15)
    assert float(p) == pytest.approx(1.0 - lr * wd - lr * math.copysign(1, g), abs=1e-7)
    # second step, hand-rolled recurrences
    g2 = -0.2
    m = 0.9 * (0.1 * g) + 0.1 * g2
    v = 0.999 * (0.001 * g * g) + 0.001 * g2 * g2
    expect2 = expect * (1 - lr * wd) - lr * (m / (1 - 0.9 ** 2)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    dc.adamw_step([p], [torch.tensor([g2], dtype=D)], st_)
    assert float(p) == pytest.approx(expect2, abs=1e-14)


def test_adamw_deterministic():
    def run():
        torch.manual_seed(0)
        p = torch.randn(5, dtype=D)
        st_ = dc.OptimizerState(lr=0.01, weight_decay=0.1)
        for _ in range(20):
            dc.adamw_step([p], [torch.sin(p)], st_)
        return p
    assert torch.equal(run(), run())


def test_clip_grad_norm():
    g = [torch.tensor([3.0, 4.0], dtype=D)]
    total = dc.clip_grad_norm(g, 1.0)
    assert total == 5.0
    assert torch.allclose(g[0], torch.tensor([0.6, 0.8], dtype=D))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ops_gradcheck(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 4, generator=g, dtype=D, requires_grad=True)
    w = torch.randn(4, 4, generator=g, dtype=D, requires_grad=True)
    lw = torch.randn(4, generator=g, dtype=D, requires_grad=True)
    lb = torch.randn(4, generator=g, dtype=D, requires_grad=True)
    allowed = torch.ones(3, 4, dtype=torch.bool).tril(1)
    probe = torch.randn(2, 3, 4, generator=g, dtype=D)

    def fn():
        h = dc.gelu(dc.layer_norm(dc.matmul(x, w), lw, lb))
        a = dc.masked_softmax(h, allowed)
        return (dc.mul(a, probe) + dc.sigmoid(h)).sum()

    errs = dc.gradcheck(fn, {"x": x, "w": w, "lw": lw, "lb": lb}, step=1e-3)
    assert max(errs.values()) < 1e-3


def test_relative_error_floor():
    z = torch.zeros(3, dtype=D)
    assert dc.relative_error(z, z) == 0.0
    assert dc.relative_error(torch.ones(3, dtype=D), torch.ones(3, dtype=D)) == 0.0


def test_checkpoint_roundtrip(tmp_path):
    params = {"a": torch.randn(2, 3, dtype=D), "b": torch.randn(4, dtype=D)}
    opt = dc.OptimizerState(lr=0.1)
    dc.adamw_step(list(params.values()), [torch.ones_like(p) for p in params.values()], opt)
    path = dc.save_checkpoint(tmp_path / "c.json", params, opt, {"note": 1})
    back, opt2, meta = dc.load_checkpoint(path)
    assert meta == {"note": 1}
    for k in params:
        assert torch.equal(back[k], params[k])
    assert opt2.step == 1 and torch.equal(opt2.exp_avg[0], opt.exp_avg[0])
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(dc.CheckpointError):
        dc.load_checkpoint(tmp_path / "bad.json")
    (tmp_path / "v.json").write_text('{"format_version": 7, "params": {}}')
    with pytest.raises(dc.CheckpointError):
        dc.load_checkpoint(tmp_path / "v.json")
