import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from blow import numerics
from blow.errors import ConfigError, DimensionError, GradCheckError, SingularMatrixError


def loop_conv1d(x, w, b, groups=1):
    """Direct cross-correlation with 'same' zero padding."""
    B, C, T = x.shape
    O, K, W = w.shape
    pad = W // 2
    out = np.zeros((B, O, T))
    per_out = O // groups
    for n in range(B):
        for o in range(O):
            g = o // per_out
            for t in range(T):
                acc = b[o]
                for k in range(K):
                    for j in range(W):
                        src = t + j - pad
                        if 0 <= src < T:
                            acc += w[o, k, j] * x[n, g * K + k, src]
                out[n, o, t] = acc
    return out


def test_conv1d_zero_input_gives_bias():
    x = torch.zeros(2, 3, 5, dtype=torch.float64)
    w = torch.randn(4, 3, 3, dtype=torch.float64)
    b = torch.tensor([0.5, -1.0, 2.0, 0.0], dtype=torch.float64)
    out = numerics.conv1d(x, w, b)
    assert torch.equal(out, b[None, :, None].expand(2, 4, 5))


def test_conv1d_identity_kernel():
    x = torch.randn(1, 1, 9, dtype=torch.float64)
    w = torch.tensor([[[0.0, 1.0, 0.0]]], dtype=torch.float64)
    assert torch.equal(numerics.conv1d(x, w, torch.zeros(1, dtype=torch.float64)), x)


def test_conv1d_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8))
    w = rng.standard_normal((4, 3, 3))
    b = rng.standard_normal(4)
    got = numerics.conv1d(torch.tensor(x), torch.tensor(w), torch.tensor(b)).numpy()
    np.testing.assert_allclose(got, loop_conv1d(x, w, b), atol=1e-12, rtol=0)


def test_conv1d_grouped_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 7))
    w = rng.standard_normal((6, 2, 5))
    b = rng.standard_normal(6)
    got = numerics.conv1d(torch.tensor(x), torch.tensor(w), torch.tensor(b), groups=2).numpy()
    np.testing.assert_allclose(got, loop_conv1d(x, w, b, groups=2), atol=1e-12, rtol=0)


def test_grouped_equals_concatenated_slices():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(3, 6, 11, generator=g, dtype=torch.float64)
    w = torch.randn(6, 2, 3, generator=g, dtype=torch.float64)
    b = torch.randn(6, generator=g, dtype=torch.float64)
    whole = numerics.conv1d(x, w, b, groups=3)
    parts = [numerics.conv1d(x[:, 2 * i:2 * i + 2], w[2 * i:2 * i + 2], b[2 * i:2 * i + 2]) for i in range(3)]
    assert torch.equal(whole, torch.cat(parts, dim=1))


@pytest.mark.parametrize("shape,wshape,groups,axis", [
    ((2, 3, 8), (4, 2, 3), 1, "in_channels"),
    ((2, 3, 8), (4, 3, 2), 1, "width"),
    ((2, 3, 8), (4, 1, 3), 2, "groups"),
    ((3, 8), (4, 3, 3), 1, "rank"),
])
def test_conv1d_dimension_errors(shape, wshape, groups, axis):
    with pytest.raises(DimensionError) as info:
        numerics.conv1d(torch.zeros(shape), torch.zeros(wshape), groups=groups)
    assert info.value.axis == axis


def test_grad_check_polynomial():
    theta = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    report = numerics.grad_check(lambda: (theta ** 2).sum(), [theta], rel_tol=1e-8)
    name, idx, g_a, g_fd = report.worst
    assert g_a == pytest.approx(6.0)
    assert g_fd == pytest.approx(6.0, abs=1e-8)
    assert report.passed


def test_grad_check_constant_function():
    theta = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    report = numerics.grad_check(lambda: theta.sum() * 0 + 4.0, [theta])
    for _, _, g_a, g_fd, _ in report.errors:
        assert g_a == 0.0
        assert abs(g_fd) < 1e-9
    assert report.passed


def test_grad_check_aborts_on_nonfinite():
    theta = torch.tensor([-1.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(GradCheckError):
        numerics.grad_check(lambda: torch.log(theta).sum(), [theta])


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            return g * 3.0

    theta = torch.tensor([2.0], dtype=torch.float64, requires_grad=True)
    report = numerics.grad_check(lambda: Wrong.apply(theta).sum(), [theta])
    assert not report.passed


def test_kernel_gradients_pass_grad_check():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 4, 9, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(6, 2, 3, generator=g, dtype=torch.float64, requires_grad=True)
    b = torch.randn(6, generator=g, dtype=torch.float64, requires_grad=True)
    m = torch.randn(5, 6, generator=g, dtype=torch.float64, requires_grad=True)

    def f():
        h = torch.relu(numerics.conv1d(x, w, b, groups=2))
        h = torch.einsum("ij,bjt->bit", m, h)
        return torch.log(torch.sigmoid(h) + 0.5).sum()

    report = numerics.grad_check(f, [x, w, b, m], rel_tol=1e-4, names=["x", "w", "b", "m"])
    assert report.n_checked == x.numel() + w.numel() + b.numel() + m.numel()
    assert report.passed, report.worst


def _scalar_adam(theta, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        path.append(theta)
    return path


def test_adam_first_step_closed_form():
    p = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
    opt = numerics.make_adam([p], lr=1e-4)
    p.grad = torch.tensor([0.5], dtype=torch.float64)
    numerics.adam_step(opt)
    assert p.item() == pytest.approx(-1e-4, rel=1e-6)
    assert p.grad.item() == 0.0


def test_adam_zero_gradient_leaves_parameter():
    p = torch.nn.Parameter(torch.tensor([1.5], dtype=torch.float64))
    opt = numerics.make_adam([p], lr=1e-2)
    p.grad = torch.zeros(1, dtype=torch.float64)
    numerics.adam_step(opt)
    assert p.item() == 1.5


def test_adam_quadratic_matches_scalar_recursion():
    expected = _scalar_adam(1.0, lambda t: 2 * t, lr=0.1, steps=100)
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = numerics.make_adam([p], lr=0.1)
    got = []
    for _ in range(100):
        opt.zero_grad()
        (p ** 2).sum().backward()
        numerics.adam_step(opt)
        got.append(p.item())
    np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)
    assert abs(got[-1]) < 0.1
    # steady descent while far from the optimum
    first = np.abs(got[:8])
    assert np.all(np.diff(first) < 0)


def test_adam_is_deterministic():
    def run():
        g = torch.Generator().manual_seed(5)
        p = torch.nn.Parameter(torch.randn(10, generator=g, dtype=torch.float64))
        opt = numerics.make_adam([p], lr=0.01)
        for _ in range(20):
            opt.zero_grad()
            (p.sin() ** 2).sum().backward()
            numerics.adam_step(opt)
        return p.detach().clone()

    assert torch.equal(run(), run())


@pytest.mark.parametrize("lr", [0.0, -1e-3])
def test_adam_rejects_nonpositive_lr(lr):
    with pytest.raises(ConfigError):
        numerics.make_adam([torch.nn.Parameter(torch.zeros(1))], lr=lr)


def cofactor_det(a):
    """Laplace expansion along the first row."""
    n = len(a)
    if n == 1:
        return a[0][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in a[1:]]
        total += (-1) ** j * a[0][j] * cofactor_det(minor)
    return total


def permutation_det(a):
    """Leibniz formula, independent of any factorization."""
    n = len(a)
    total = 0.0
    for perm in itertools.permutations(range(n)):
        inversions = sum(1 for i in range(n) for j in range(i + 1, n) if perm[i] > perm[j])
        prod = 1.0
        for i, p in enumerate(perm):
            prod *= a[i][p]
        total += (-1) ** inversions * prod
    return total


def test_lu_identity():
    res = numerics.lu_det_inverse(torch.eye(8, dtype=torch.float64))
    assert res.logabsdet.item() == 0.0
    assert res.sign == 1
    assert torch.equal(res.inverse, torch.eye(8, dtype=torch.float64))


@pytest.mark.parametrize("c", [1, 3, 16])
def test_lu_scaled_identity(c):
    res = numerics.lu_det_inverse(2 * torch.eye(c, dtype=torch.float64))
    assert res.logabsdet.item() == pytest.approx(c * math.log(2), abs=1e-12)


def test_lu_matches_expansion_oracles():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((4, 4))
    det = cofactor_det(a.tolist())
    assert permutation_det(a.tolist()) == pytest.approx(det, rel=1e-12)
    res = numerics.lu_det_inverse(torch.tensor(a))
    assert res.logabsdet.item() == pytest.approx(math.log(abs(det)), abs=1e-12)
    assert res.sign == (1 if det > 0 else -1)


def test_lu_16x16_against_pivots_and_minor():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((16, 16)) + 4 * np.eye(16)
    res = numerics.lu_det_inverse(torch.tensor(a))
    lu, piv = torch.linalg.lu_factor(torch.tensor(a))
    assert res.logabsdet.item() == pytest.approx(torch.log(torch.diagonal(lu).abs()).sum().item(), abs=1e-12)
    sign, logdet = np.linalg.slogdet(a)
    assert res.logabsdet.item() == pytest.approx(logdet, abs=1e-10)
    assert res.sign == int(sign)
    minor = a[:4, :4]
    sub = numerics.lu_det_inverse(torch.tensor(minor))
    assert sub.logabsdet.item() == pytest.approx(math.log(abs(cofactor_det(minor.tolist()))), abs=1e-12)
    resid = (torch.tensor(a) @ res.inverse - torch.eye(16, dtype=torch.float64)).abs().max().item()
    assert resid < 1e-6 * 16


def test_lu_singular_reports_pivot():
    a = torch.tensor([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [1.0, 0.0, 1.0]], dtype=torch.float64)
    with pytest.raises(SingularMatrixError) as info:
        numerics.lu_det_inverse(a)
    assert info.value.pivot_index in (1, 2)


def test_lu_logdet_is_differentiable():
    g = torch.Generator().manual_seed(0)
    w = (torch.randn(5, 5, generator=g, dtype=torch.float64) + 3 * torch.eye(5)).requires_grad_()
    report = numerics.grad_check(lambda: numerics.lu_det_inverse(w, with_inverse=False).logabsdet, [w])
    assert report.passed, report.worst


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_lu_round_trip(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n)) + n * np.eye(n)
    v = rng.standard_normal(n)
    res = numerics.lu_det_inverse(torch.tensor(a))
    back = res.inverse.numpy() @ (a @ v)
    assert np.linalg.norm(back - v) <= 1e-8 * max(1.0, np.linalg.norm(v))
