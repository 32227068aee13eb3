import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import assert_grad_close, numeric_grad
from spiketrack.autodiff import (
    AdamW,
    NumericalError,
    TemporalBatchNorm,
    adamw_step,
    backward,
    batchnorm,
    conv_out_size,
    conv_spatial,
    gelu,
    kaiming_uniform_,
    load_checkpoint,
    maxpool_spatial,
    save_checkpoint,
)

D = torch.float64


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=D)


def loop_conv(x, w, stride):
    c_in, h, wd, t = x.shape
    c_out, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((c_out, ho, wo, t))
    for o in range(c_out):
        for j in range(ho):
            for i in range(wo):
                for b in range(t):
                    patch = x[:, j * stride:j * stride + kh, i * stride:i * stride + kw, b]
                    out[o, j, i, b] = np.sum(patch * w[o])
    return out


def test_conv_identity_kernel():
    x = rand(3, 6, 5, 4)
    w = torch.zeros(3, 3, 1, 1, dtype=D)
    for c in range(3):
        w[c, c] = 1
    assert torch.equal(conv_spatial(x, w), x)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loop_oracle(stride):
    x, w = rand(2, 8, 8, 3, seed=1), rand(4, 2, 3, 3, seed=2)
    got = conv_spatial(x, w, stride=stride).numpy()
    np.testing.assert_allclose(got, loop_conv(x.numpy(), w.numpy(), stride), rtol=1e-12, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        conv_spatial(rand(2, 4, 4, 1), rand(1, 3, 3, 3))
    with pytest.raises(ValueError):
        conv_spatial(rand(2, 2, 2, 1), rand(1, 2, 3, 3))


def test_table1_shape_arithmetic():
    chain = [127]
    for k, s, pool in [(11, 2, True), (5, 1, True), (3, 1, False), (3, 1, False), (3, 1, False)]:
        chain.append(conv_out_size(chain[-1], k, s))
        if pool:
            chain.append(conv_out_size(chain[-1], 3, 2))
    assert chain == [127, 59, 29, 25, 12, 10, 8, 6]


def test_maxpool_constant_and_ties():
    x = torch.full((2, 7, 7, 3), 2.5, dtype=D)
    assert torch.equal(maxpool_spatial(x), torch.full((2, 3, 3, 3), 2.5, dtype=D))
    # ties route the gradient to the first (lowest linear index) maximum
    y = torch.zeros(1, 3, 3, 1, dtype=D, requires_grad=True)
    maxpool_spatial(y).sum().backward()
    assert y.grad[0, 0, 0, 0] == 1 and y.grad.sum() == 1


def test_gelu_zero():
    assert gelu(torch.zeros(3)).abs().max() == 0


def test_batchnorm_normalises():
    x = rand(4, 3, 5, 5, 6, seed=3) * 3 + 7
    rm, rv = torch.zeros(3, dtype=D), torch.ones(3, dtype=D)
    y = batchnorm(x, rm, rv)
    m = y.mean(dim=(0, 2, 3, 4))
    v = y.var(dim=(0, 2, 3, 4), unbiased=False)
    np.testing.assert_allclose(m.numpy(), 0, atol=1e-5)
    np.testing.assert_allclose(v.numpy(), 1, atol=1e-5)
    assert not torch.equal(rm, torch.zeros(3, dtype=D))


@pytest.mark.parametrize("over_time", [True, False])
def test_temporal_batchnorm_modes(over_time):
    bn = TemporalBatchNorm(3, over_time=over_time).double()
    bn.time_bins = 4
    x = rand(2 * 4, 3, 5, 5, seed=4) * 2 + 1
    y = bn(x).reshape(2, 4, 3, 5, 5)
    if over_time:
        np.testing.assert_allclose(y.mean(dim=(0, 1, 3, 4)).detach().numpy(), 0, atol=1e-6)
    else:
        np.testing.assert_allclose(y.mean(dim=(0, 3, 4)).detach().numpy(), 0, atol=1e-6)
    bn.eval()
    assert bn(x).shape == x.shape


def test_backward_sum_and_square():
    x = rand(5, seed=5).requires_grad_()
    (g,) = backward(x.sum(), [x])
    assert torch.equal(g, torch.ones(5, dtype=D))
    x.grad = None
    (g,) = backward((x * x).sum() / 2, [x])
    assert torch.allclose(g, x.detach())


def test_backward_leaves_non_parameters_untouched():
    x = rand(3, seed=6).requires_grad_()
    other = rand(3, seed=7).requires_grad_()
    backward((x * other).sum(), [x])
    assert x.grad is not None and other.grad is None


def test_backward_rejects_nan_and_nonscalar():
    x = rand(3, seed=8).requires_grad_()
    with pytest.raises(NumericalError):
        backward((x * float("nan")).sum(), [x])
    with pytest.raises(NumericalError):
        # finite loss whose gradient is NaN (masked sqrt of a negative)
        backward(torch.where(x > 100, torch.sqrt(-x.abs() - 1), torch.zeros_like(x)).sum(), [x])
    with pytest.raises(ValueError):
        backward(x * 2, [x])


# finite-difference checks, float64, h = 1e-4, rtol 1e-3

def fd_check(fn, *inputs, rtol=1e-3):
    inputs = [t.clone().requires_grad_() for t in inputs]
    mask = rand(*fn(*inputs).shape, seed=99)
    loss = lambda: (fn(*inputs) * mask).sum()
    grads = torch.autograd.grad(loss(), inputs)
    for t, g in zip(inputs, grads):
        assert_grad_close(g.numpy(), numeric_grad(loss, t), rtol)


def test_fd_conv():
    fd_check(lambda x, w, b: conv_spatial(x, w, b, stride=2), rand(2, 7, 7, 2, seed=10),
             rand(3, 2, 3, 3, seed=11), rand(3, seed=12))


def test_fd_maxpool():
    # random continuous input keeps window maxima away from ties
    fd_check(maxpool_spatial, rand(2, 7, 7, 2, seed=13))


def test_fd_batchnorm():
    def fn(x, w, b):
        return batchnorm(x, torch.zeros(2, dtype=D), torch.ones(2, dtype=D), w, b)
    fd_check(fn, rand(2, 2, 4, 4, 3, seed=14), rand(2, seed=15), rand(2, seed=16))


def test_fd_gelu():
    fd_check(gelu, rand(4, 5, seed=17))


def test_fd_elementwise():
    fd_check(lambda a, b: a * b + a.exp() - b / (1 + a * a), rand(3, 4, seed=18), rand(3, 4, seed=19))


def test_fd_temporal_batchnorm_per_bin():
    bn = TemporalBatchNorm(2, over_time=False).double()
    bn.time_bins = 3
    fd_check(bn, rand(2 * 3, 2, 4, 4, seed=20))


def test_kaiming_bound_and_seed():
    w = torch.empty(16, 4, 3, 3)
    kaiming_uniform_(w, torch.Generator().manual_seed(0))
    assert w.abs().max() <= np.sqrt(6 / 36)
    w2 = torch.empty(16, 4, 3, 3)
    kaiming_uniform_(w2, torch.Generator().manual_seed(0))
    assert torch.equal(w, w2)


def test_adamw_zero_grad_no_decay_keeps_params():
    p = rand(4, seed=21).requires_grad_()
    before = p.detach().clone()
    opt = AdamW([p], weight_decay=0.0)
    adamw_step([p], [torch.zeros(4, dtype=D)], opt)
    assert torch.equal(p.detach(), before)


def test_adamw_descends_quadratic():
    w = torch.tensor([1.0], dtype=D, requires_grad=True)
    opt = AdamW([w], lr_start=1e-3, lr_end=1e-3)
    adamw_step([w], [w.detach().clone()], opt)
    assert abs(w.item()) < 1


def test_adamw_reaches_quadratic_minimum():
    a = torch.tensor([[3.0, 0.5], [0.5, 1.0]], dtype=D)
    bvec = torch.tensor([1.0, -2.0], dtype=D)
    target = torch.linalg.solve(a, bvec)
    w = torch.zeros(2, dtype=D, requires_grad=True)
    opt = AdamW([w], lr_start=0.05, lr_end=0.005, epochs=500, weight_decay=0.0)
    for step in range(500):
        opt.set_epoch(step)
        g = a @ w.detach() - bvec
        adamw_step([w], [g], opt)
    assert torch.max(torch.abs(w.detach() - target)) < 1e-3


def test_adamw_schedule_endpoints():
    opt = AdamW([torch.zeros(1, requires_grad=True)])
    assert opt.lr_at(0) == pytest.approx(1e-3)
    assert opt.lr_at(50) == pytest.approx(1e-4, rel=1e-12)
    ratios = [opt.lr_at(e + 1) / opt.lr_at(e) for e in range(49)]
    assert np.ptp(ratios) < 1e-12


def test_adamw_shape_mismatch():
    p = torch.zeros(3, requires_grad=True)
    with pytest.raises(ValueError):
        adamw_step([p], [torch.zeros(2)], AdamW([p]))


def test_adamw_moments_round_trip():
    p = rand(3, seed=22).requires_grad_()
    opt = AdamW([p])
    adamw_step([p], [torch.ones(3, dtype=D)], opt)
    q = p.detach().clone().requires_grad_()
    opt2 = AdamW([q])
    opt2.load_moments(opt.moments(), opt.step_count)
    adamw_step([p], [torch.ones(3, dtype=D)], opt)
    adamw_step([q], [torch.ones(3, dtype=D)], opt2)
    assert torch.equal(p.detach(), q.detach())
    assert opt2.step_count == 2


def test_checkpoint_round_trip(tmp_path):
    t = {"a.weight": torch.randn(3, 2, 5), "b": torch.tensor(2.5), "c": torch.zeros(0, 4)}
    save_checkpoint(tmp_path / "m.ckpt", t, {"step": 7})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"step": 7}
    for k in t:
        assert torch.equal(back[k], t[k].float())


def test_checkpoint_version_refused(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"a": torch.ones(1)}, {})
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 7), st.integers(1, 3))
def test_conv_out_size_formula(n, k, s):
    if k > n:
        with pytest.raises(ValueError):
            conv_out_size(n, k, s)
    else:
        assert conv_out_size(n, k, s) == len(range(0, n - k + 1, s))
