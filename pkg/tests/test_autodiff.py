import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coattr import autodiff as ad


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def analytic_grad(build, x):
    v = ad.Var(x)
    out = build(v)
    out.backward()
    return v.grad


CASES = [
    lambda x: (x * x).sum(),
    lambda x: ad.tanh(x @ np.arange(6.0).reshape(3, 2) / 5).sum(),
    lambda x: ad.logsumexp(x),
    lambda x: (ad.exp(x / 3) / (1 + x * x)).sum(),
    lambda x: ad.sqrt(x * x + 1.0).sum() - x[1] * x[2],
    lambda x: (ad.stack([x[0], x[2] * 2, x[1]]) ** 2).sum(),
    lambda x: ad.log(ad.concatenate([x * x, x * x + 2]) + 1).sum(),
    lambda x: (x.reshape((3, 1)) * np.ones((3, 2))).sum() + (-x).sum() - (2 - x).sum(),
]


@pytest.mark.parametrize("case", range(len(CASES)))
def test_matches_finite_differences(case):
    f = CASES[case]
    x = np.array([0.3, -1.2, 0.7])
    num = numeric_grad(lambda z: float(np.asarray(f(z))), x)
    np.testing.assert_allclose(analytic_grad(f, x), num, rtol=1e-6, atol=1e-8)


def test_plain_numpy_passthrough():
    x = np.array([1.0, 2.0])
    assert isinstance(ad.tanh(x), np.ndarray)
    assert np.isclose(ad.logsumexp(np.array([0.0, 0.0])), np.log(2))


def test_shared_subexpression_accumulates():
    v = ad.Var(np.array(2.0))
    y = v * v
    z = y + y
    z.backward()
    assert np.isclose(v.grad, 8.0)


def test_fancy_index_gradient_accumulates_repeats():
    v = ad.Var(np.arange(4.0))
    out = v[np.array([0, 0, 3])].sum()
    out.backward()
    np.testing.assert_array_equal(v.grad, [2, 0, 0, 1])


def test_ndarray_matmul_defers_to_var():
    W = np.arange(6.0).reshape(2, 3)
    v = ad.Var(np.ones((3, 2)))
    out = (W @ v).sum()
    out.backward()
    np.testing.assert_allclose(v.grad, np.repeat(W.sum(axis=0)[:, None], 2, axis=1))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-3, 3)))
def test_logsumexp_gradient_is_softmax(x):
    g = analytic_grad(ad.logsumexp, x)
    e = np.exp(x - x.max())
    np.testing.assert_allclose(g, e / e.sum(), atol=1e-12)
