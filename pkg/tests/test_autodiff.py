"""Reverse-mode autodiff: finite-difference oracles and graph mechanics."""

import numpy as np
import pytest

from nvs3d import autodiff as ad
from nvs3d.autodiff import Adam, SGD, Tensor, make_optimizer, numeric_grad
from nvs3d.errors import (DimensionMismatchError, MissingGradError,
                          NonScalarLossError)

RNG = np.random.default_rng(2024)


def check_grads(build, tensors, n_coords=20, rtol=1e-4, atol=1e-7):
    """Compare backward() grads against central finite differences.

    build() must construct the scalar loss from the (mutable) tensor data.
    """
    for t in tensors:
        t.zero_grad()
    build().backward()
    for t in tensors:
        assert t.grad is not None, "missing gradient"
        n = min(n_coords, t.size)
        coords = RNG.choice(t.size, size=n, replace=False)
        num = numeric_grad(lambda: float(build().data), t, coords)
        ana = t.grad.reshape(-1)[coords]
        scale = np.maximum(np.abs(num), np.abs(ana))
        err = np.abs(num - ana) / np.maximum(scale, atol / rtol)
        assert err.max() < rtol, (err.max(), num, ana)


def leaf(shape):
    return Tensor(RNG.standard_normal(shape), requires_grad=True)


def test_add_mul_neg_sub_grads():
    a, b = leaf((4, 5)), leaf((4, 5))
    w = Tensor(RNG.standard_normal((4, 5)))
    check_grads(lambda: ad.tsum(ad.mul(a + b, w)), [a, b])
    check_grads(lambda: ad.tsum(ad.mul(ad.mul(a, b), w)), [a, b])
    check_grads(lambda: ad.tsum(ad.mul(a - b, w)), [a, b])
    check_grads(lambda: ad.tsum(ad.mul(-a, w)), [a])


def test_broadcast_add_mul_grads():
    a, b = leaf((4, 5)), leaf((5,))
    w = Tensor(RNG.standard_normal((4, 5)))
    check_grads(lambda: ad.tsum(ad.mul(a + b, w)), [a, b])
    check_grads(lambda: ad.tsum(ad.mul(ad.mul(a, b), w)), [a, b])


def test_matmul_dense_grads():
    x, w, b = leaf((3, 4)), leaf((4, 6)), leaf((6,))
    m = Tensor(RNG.standard_normal((3, 6)))
    check_grads(lambda: ad.tsum(ad.mul(ad.matmul(x, w), m)), [x, w])
    check_grads(lambda: ad.tsum(ad.mul(ad.dense(x, w, b), m)), [x, w, b])
    with pytest.raises(DimensionMismatchError):
        ad.matmul(leaf((2, 3)), leaf((4, 2)))
    with pytest.raises(DimensionMismatchError):
        ad.dense(leaf((2, 3)), leaf((3, 4)), leaf((5,)))


def test_reshape_take_stack_grads():
    a = leaf((3, 4))
    w = Tensor(RNG.standard_normal(12))
    check_grads(lambda: ad.tsum(ad.mul(ad.reshape(a, (12,)), w)), [a])
    w2 = Tensor(RNG.standard_normal((2, 4)))
    idx = np.array([1, 1])  # repeated index must accumulate
    check_grads(lambda: ad.tsum(ad.mul(a[idx], w2)), [a])
    b = leaf((3, 4))
    w3 = Tensor(RNG.standard_normal((2, 3, 4)))
    check_grads(lambda: ad.tsum(ad.mul(ad.stack([a, b], axis=0), w3)), [a, b])


def test_reduction_grads():
    a = leaf((3, 4, 2))
    w = Tensor(RNG.standard_normal((3, 2)))
    check_grads(lambda: ad.tsum(ad.mul(ad.tsum(a, axis=1), w)), [a])
    check_grads(lambda: ad.tsum(ad.mul(ad.tmean(a, axis=1), w)), [a])
    check_grads(lambda: ad.tmean(a), [a])


def test_pointwise_nonlinearity_grads():
    a = Tensor(RNG.uniform(0.1, 3.0, size=(4, 4)), requires_grad=True)
    w = Tensor(RNG.standard_normal((4, 4)))
    check_grads(lambda: ad.tsum(ad.mul(ad.log(a), w)), [a])
    b = leaf((4, 4))
    check_grads(lambda: ad.tsum(ad.mul(ad.exp(b), w)), [b])
    check_grads(lambda: ad.tsum(ad.mul(ad.elu(b), w)), [b])
    check_grads(lambda: ad.tsum(ad.mul(ad.sigmoid(b), w)), [b])


def test_clip_grad_masks_saturated_entries():
    a = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    ad.tsum(ad.clip(a, 0.0, 1.0)).backward()
    assert np.array_equal(a.grad, [0.0, 1.0, 0.0])


def test_softmax_grads_and_normalization():
    for axis in (0, 1, -1):
        a = leaf((3, 5))
        s = ad.softmax(a, axis=axis)
        assert np.allclose(s.data.sum(axis=axis), 1.0)
        w = Tensor(RNG.standard_normal((3, 5)))
        check_grads(lambda: ad.tsum(ad.mul(ad.softmax(a, axis=axis), w)), [a])


def test_softmax_is_shift_stable():
    a = Tensor(np.array([1000.0, 1001.0, 999.0]))
    s = ad.softmax(a, axis=0).data
    assert np.all(np.isfinite(s)) and np.isclose(s.sum(), 1.0)


def test_conv2d_grads():
    for stride in (1, 2):
        x, k = leaf((2, 3, 6, 6)), leaf((4, 3, 3, 3))
        ho = 6 if stride == 1 else 3
        w = Tensor(RNG.standard_normal((2, 4, ho, ho)))
        check_grads(lambda: ad.tsum(ad.mul(ad.conv2d(x, k, stride=stride), w)),
                    [x, k])
    with pytest.raises(DimensionMismatchError):
        ad.conv2d(leaf((2, 3, 6, 6)), leaf((4, 2, 3, 3)))
    with pytest.raises(DimensionMismatchError):
        ad.conv2d(leaf((2, 3, 6, 6)), leaf((4, 3, 3, 3)), stride=3)


def test_conv3d_grads():
    for stride, (c, f) in ((1, (3, 4)), (2, (3, 4)), (1, (1, 8)), (1, (8, 1))):
        x, k = leaf((2, c, 6, 6, 6)), leaf((f, c, 3, 3, 3))
        do = 6 if stride == 1 else 3
        w = Tensor(RNG.standard_normal((2, f, do, do, do)))
        check_grads(lambda: ad.tsum(ad.mul(ad.conv3d(x, k, stride=stride), w)),
                    [x, k])


def test_conv3d_matches_naive_loop():
    x = RNG.standard_normal((1, 2, 4, 4, 4))
    k = RNG.standard_normal((3, 2, 3, 3, 3))
    out = ad.conv3d(Tensor(x), Tensor(k)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    want = np.zeros((1, 3, 4, 4, 4))
    for fi in range(3):
        for z in range(4):
            for y in range(4):
                for xx in range(4):
                    want[0, fi, z, y, xx] = np.sum(
                        xp[0, :, z:z + 3, y:y + 3, xx:xx + 3] * k[fi])
    assert np.allclose(out, want, atol=1e-10)


def test_tconv3d_grads_and_shape():
    x, k = leaf((2, 3, 4, 4, 4)), leaf((3, 2, 4, 4, 4))
    y = ad.tconv3d(x, k)
    assert y.shape == (2, 2, 8, 8, 8)
    w = Tensor(RNG.standard_normal(y.shape))
    check_grads(lambda: ad.tsum(ad.mul(ad.tconv3d(x, k), w)), [x, k])
    with pytest.raises(DimensionMismatchError):
        ad.tconv3d(leaf((2, 3, 4, 4, 4)), leaf((2, 2, 4, 4, 4)))
    with pytest.raises(DimensionMismatchError):
        ad.tconv3d(leaf((2, 3, 4, 4, 4)), leaf((3, 2, 3, 3, 3)))


def test_tconv3d_matches_upsample_oracle():
    # a one-hot input places one shifted copy of the kernel in the output
    x = np.zeros((1, 1, 2, 2, 2))
    x[0, 0, 1, 0, 1] = 1.0
    k = RNG.standard_normal((1, 1, 4, 4, 4))
    y = ad.tconv3d(Tensor(x), Tensor(k)).data
    want = np.zeros((1, 1, 6, 6, 6))  # output padded by 1 on each side
    want[0, 0, 2:6, 0:4, 2:6] = k[0, 0]
    assert np.allclose(y[0, 0], want[0, 0, 1:5, 1:5, 1:5], atol=1e-12)


def test_grad_accumulates_across_uses():
    a = Tensor(np.array([2.0]), requires_grad=True)
    loss = ad.tsum(ad.mul(a, a))  # d/da a^2 = 2a
    loss.backward()
    assert np.allclose(a.grad, [4.0])
    # a second backward pass accumulates into the same leaf grad
    ad.tsum(a).backward()
    assert np.allclose(a.grad, [5.0])
    a.zero_grad()
    assert a.grad is None


def test_backward_requires_scalar():
    a = leaf((2, 2))
    with pytest.raises(NonScalarLossError):
        ad.mul(a, a).backward()


def test_constants_collect_no_grads():
    a, c = leaf((3,)), Tensor(np.ones(3))
    ad.tsum(ad.mul(a, c)).backward()
    assert a.grad is not None and c.grad is None
    assert not c.requires_grad


def test_sgd_step_oracle():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = SGD({"p": p}, lr=0.1)
    p.grad = np.array([1.0, -2.0])
    opt.step()
    assert np.allclose(p.data, [0.9, 2.2])
    assert p.grad is None  # step() clears gradients


def test_adam_step_matches_reference():
    # hand-computed Adam update (beta1=0.9, beta2=0.999, eps=1e-8)
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    g1 = np.array([0.5])
    p.grad = g1.copy()
    opt.step()
    m = 0.1 * g1
    v = 0.001 * g1 ** 2
    mh = m / (1 - 0.9)
    vh = v / (1 - 0.999)
    want = 1.0 - 0.1 * mh / (np.sqrt(vh) + 1e-8)
    assert np.allclose(p.data, want, atol=1e-12)


def test_adam_converges_on_quadratic():
    p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.2)
    for _ in range(300):
        loss = ad.tsum(ad.mul(p, p))
        loss.backward()
        opt.step()
    assert np.all(np.abs(p.data) < 1e-2)


def test_optimizer_requires_grads():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = make_optimizer("sgd", {"p": p}, 0.1)
    with pytest.raises(MissingGradError):
        opt.step()
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", {"p": p}, 0.1)
