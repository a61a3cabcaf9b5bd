import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from momoe.autodiff import (
    SGD,
    Adam,
    ContractError,
    DimensionError,
    NonFiniteError,
    Tensor,
    TrainingDivergence,
    backward,
    cross_entropy,
    index_add,
    matmul,
    numerical_grad,
    relative_error,
    softmax,
    topk_indices,
    topk_mask,
)

RTOL = 1e-5


def fd_check(build, params, h=1e-6):
    """Compare reverse-mode gradients of scalar build() with central differences."""
    for p in params:
        p.grad = None
    backward(build())
    for p in params:
        num = numerical_grad(lambda: build().item(), p, h)
        assert relative_error(p.grad, num) < RTOL, p.name


def param(rng, *shape, name=None):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, Tensor(np.eye(2))).data, a.data)
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_of_sum():
    A = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    B = Tensor(np.ones((2, 2)))
    backward((A @ B).sum())
    num = numerical_grad(lambda: (A @ B).sum().item(), A)
    assert np.allclose(A.grad, [[2, 2], [2, 2]])
    assert np.allclose(num, [[2, 2], [2, 2]], atol=1e-8)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    s = softmax(Tensor([3.0, -np.inf, 2.0])).data
    e = math.e
    assert np.allclose(s, [e / (e + 1), 0.0, 1 / (e + 1)], atol=1e-12)
    assert s[1] == 0.0
    big = softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, 0.5)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_properties(v, c):
    s = softmax(Tensor(v)).data
    assert np.all(s >= 0) and abs(s.sum() - 1.0) < 1e-12
    assert np.allclose(softmax(Tensor(v + c)).data, s, atol=1e-12, rtol=0)


def test_softmax_rejects_nan():
    with pytest.raises(NonFiniteError):
        softmax(Tensor([np.nan, 1.0]))


def test_backward_square_and_normalization():
    x = Tensor(3.0, requires_grad=True)
    backward(x.square())
    assert x.grad == pytest.approx(6.0)
    v = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    backward(softmax(v).sum())
    assert np.allclose(v.grad, 0.0, atol=1e-15)


def test_backward_needs_scalar_root():
    with pytest.raises(ContractError):
        backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_leaf_gradients_accumulate_until_zeroed():
    x = Tensor(2.0, requires_grad=True)
    backward(x * 3.0)
    backward(x * 3.0)
    assert x.grad == pytest.approx(6.0)
    x.zero_grad()
    backward(x * 3.0)
    assert x.grad == pytest.approx(3.0)


def test_shared_subexpression_gradient():
    x = Tensor(1.5, requires_grad=True)
    y = x * x
    backward(y * y + y)  # x^4 + x^2
    assert x.grad == pytest.approx(4 * 1.5**3 + 2 * 1.5)


def test_logsumexp_composite_matches_fd():
    rng = np.random.default_rng(1)
    v = param(rng, 5, name="v")
    fd_check(lambda: (v.exp().sum()).log() * 2.0 - v.sum() / 5.0, [v])


@pytest.mark.parametrize("op", [
    "add", "sub", "mul", "div", "neg", "relu", "square", "sqrt", "exp", "log",
    "sigmoid", "softplus", "expm1_over", "sum_axis", "mean", "norm", "reshape", "T", "getitem",
])
def test_elementwise_ops_fd(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    a = param(rng, 3, 4, name="a")
    b = param(rng, 3, 4, name="b")
    row = param(rng, 4, name="row")
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True, name="pos")
    w = Tensor(rng.normal(size=(3, 4)))
    fns = {
        "add": (lambda: ((a + row) * w).sum(), [a, row]),
        "sub": (lambda: ((a - b) * w).sum() + (2.0 - row).sum(), [a, b, row]),
        "mul": (lambda: (a * b * w).sum(), [a, b]),
        "div": (lambda: (a / pos * w).sum() + (1.0 / pos).sum(), [a, pos]),
        "neg": (lambda: (-a * w).sum(), [a]),
        "relu": (lambda: (a.relu() * w).sum(), [a]),
        "square": (lambda: (a.square() * w).sum(), [a]),
        "sqrt": (lambda: (pos.sqrt() * w).sum(), [pos]),
        "exp": (lambda: (a.exp() * w).sum(), [a]),
        "log": (lambda: (pos.log() * w).sum(), [pos]),
        "sigmoid": (lambda: (a.sigmoid() * w).sum(), [a]),
        "softplus": (lambda: (a.softplus() * w).sum(), [a]),
        "expm1_over": (lambda: (a.expm1_over() * w).sum(), [a]),
        "sum_axis": (lambda: (a.sum(axis=0) * row).sum() + (a.sum(axis=1, keepdims=True) * w).sum(), [a, row]),
        "mean": (lambda: a.mean(axis=1).square().sum() + a.mean(), [a]),
        "norm": (lambda: a.norm(axis=1).sum() + b.norm(), [a, b]),
        "reshape": (lambda: (a.reshape(4, 3) @ Tensor(w.data[:, :3].T.copy())).sum(), [a]),
        "T": (lambda: (a.T @ Tensor(w.data)).square().sum(), [a]),
        "getitem": (lambda: (a[np.array([0, 2, 2])] * Tensor(w.data[:3])).sum() + a[1, 2] * 3.0, [a]),
    }
    fn, ps = fns[op]
    fd_check(fn, ps)


def test_expm1_over_near_zero():
    z = Tensor(np.array([0.0, 1e-9, -1e-9, 1e-3, 2.0]))
    expect = [1.0, 1.0, 1.0, math.expm1(1e-3) / 1e-3, math.expm1(2.0) / 2.0]
    assert np.allclose(z.expm1_over().data, expect, rtol=1e-12)


def test_matmul_and_broadcast_fd():
    rng = np.random.default_rng(3)
    x, W, b = param(rng, 5, 3), param(rng, 3, 4), param(rng, 4)
    col = param(rng, 5, 1)
    fd_check(lambda: ((x @ W + b) * col).square().sum(), [x, W, b, col])
    v = param(rng, 3)
    fd_check(lambda: (v.reshape(1, 3) @ W).sum() + (x @ v.reshape(3, 1)).square().sum(), [v, W, x])


def test_topk_mask_examples():
    g = Tensor([3.0, 1.0, 2.0])
    assert topk_mask(g, 2).data.tolist() == [3.0, -np.inf, 2.0]
    assert topk_mask(g, 3).data.tolist() == [3.0, 1.0, 2.0]
    assert topk_mask(Tensor([1.0, 1.0, 0.0]), 1).data.tolist() == [1.0, -np.inf, -np.inf]


def test_topk_tie_break_exhaustive():
    # every 3-element vector over {0, 1}: ties resolve to the lowest index
    for bits in range(8):
        g = np.array([(bits >> i) & 1 for i in range(3)], dtype=float)
        for k in (1, 2):
            idx = topk_indices(g[None, :], k)[0]
            order = sorted(range(3), key=lambda i: (-g[i], i))[:k]
            assert idx.tolist() == sorted(order)


def test_topk_rejects_bad_k():
    with pytest.raises(ContractError):
        topk_mask(Tensor([1.0, 2.0]), 3)
    with pytest.raises(ContractError):
        topk_mask(Tensor([1.0, 2.0]), 0)


def test_topk_softmax_gradient_flows_through_kept_entries():
    rng = np.random.default_rng(4)
    g = param(rng, 2, 5)
    w = Tensor(rng.normal(size=(2, 5)))
    fd_check(lambda: (softmax(topk_mask(g, 2)) * w).sum(), [g])
    dropped = np.ones((2, 5), dtype=bool)
    np.put_along_axis(dropped, topk_indices(g.data, 2), False, axis=1)
    assert np.all(g.grad[dropped] == 0.0)


def test_index_add_and_cross_entropy_fd():
    rng = np.random.default_rng(5)
    base = param(rng, 4, 3)
    src = param(rng, 2, 3)
    w = Tensor(rng.normal(size=(4, 3)))
    fd_check(lambda: (index_add(base, np.array([1, 3]), src) * w).sum(), [base, src])
    logits = param(rng, 6, 5)
    targets = rng.integers(0, 5, size=6)
    fd_check(lambda: cross_entropy(logits, targets), [logits])
    ref = -np.mean(np.log(np.exp(logits.data)[np.arange(6), targets] / np.exp(logits.data).sum(1)))
    assert cross_entropy(logits, targets).item() == pytest.approx(ref, rel=1e-12)


def test_nonfinite_inputs_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan]) + Tensor([1.0, 2.0])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf]) * 2.0


def test_sgd_example():
    p = Tensor(0.0, requires_grad=True)
    p.grad = np.array(1.0)
    SGD([p], lr=0.1).step()
    assert p.item() == pytest.approx(-0.1)


def test_adam_examples():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=1e-3, weight_decay=0.1)
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step()
    assert np.allclose(p.data, np.array([1.0, -2.0]) * (1 - 1e-4) ** 3)

    q = Tensor(0.5, requires_grad=True)
    q.grad = np.array(1.0)
    Adam([q]).step()
    # bias-corrected first step: lr * 1 / (1 + eps)
    assert 0.5 - q.item() == pytest.approx(1e-3 / (1 + 1e-8), rel=1e-9)


def test_optimizer_flags_nan_gradient():
    p = Tensor(1.0, requires_grad=True)
    p.grad = np.array(np.nan)
    with pytest.raises(TrainingDivergence):
        SGD([p], lr=0.1).step()
    with pytest.raises(TrainingDivergence):
        Adam([p]).step()
