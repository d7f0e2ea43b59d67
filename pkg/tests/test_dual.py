"""Jet arithmetic against central finite differences."""

import numpy as np
import pytest

from drivelab import dual


def f_scalar(x, y):
    return dual.sin(x * y) + x / (y + 2.0) + dual.tanh(x) * y - 3.0 * x + y**3


def fd_grad(f, pt, h=1e-6):
    g = np.zeros(len(pt))
    for i in range(len(pt)):
        up = list(pt)
        dn = list(pt)
        up[i] += h
        dn[i] -= h
        g[i] = (f(*up) - f(*dn)) / (2 * h)
    return g


def fd_hess(f, pt, h=1e-4):
    n = len(pt)
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            pp = list(pt)
            pm = list(pt)
            mp = list(pt)
            mm = list(pt)
            pp[i] += h
            pp[j] += h
            pm[i] += h
            pm[j] -= h
            mp[i] -= h
            mp[j] += h
            mm[i] -= h
            mm[j] -= h
            H[i, j] = (f(*pp) - f(*pm) - f(*mp) + f(*mm)) / (4 * h * h)
    return H


@pytest.mark.parametrize("pt", [(0.7, 1.3), (-0.4, 2.1), (1.9, -0.8)])
def test_first_order_matches_fd(pt):
    x, y = dual.variables(list(pt), order=1)
    out = f_scalar(x, y)
    assert np.allclose(out.val, f_scalar(*pt))
    assert np.allclose(out.g, fd_grad(f_scalar, pt), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("pt", [(0.7, 1.3), (-0.4, 2.1)])
def test_second_order_matches_fd(pt):
    x, y = dual.variables(list(pt), order=2)
    out = f_scalar(x, y)
    H = fd_hess(f_scalar, pt)
    assert np.allclose(out.h, H, rtol=1e-4, atol=1e-6)
    assert np.allclose(out.h, out.h.T, atol=1e-14)


def test_batched_matches_scalar():
    rng = np.random.default_rng(0)
    xs = rng.uniform(0.2, 2.0, size=8)
    ys = rng.uniform(0.5, 2.0, size=8)
    xj = dual.variable(xs, 0, 2, order=2)
    yj = dual.variable(ys, 1, 2, order=2)
    out = f_scalar(xj, yj)
    assert out.val.shape == (8,)
    assert out.g.shape == (8, 2)
    assert out.h.shape == (8, 2, 2)
    for k in range(8):
        xk, yk = dual.variables([xs[k], ys[k]], order=2)
        ok = f_scalar(xk, yk)
        assert np.allclose(out.val[k], ok.val)
        assert np.allclose(out.g[k], ok.g)
        assert np.allclose(out.h[k], ok.h)


def test_division_and_rdiv():
    (x,) = dual.variables([1.7], order=2)
    out = 2.0 / x
    assert np.allclose(out.val, 2.0 / 1.7)
    assert np.allclose(out.g, [-2.0 / 1.7**2])
    assert np.allclose(out.h, [[4.0 / 1.7**3]])


def test_value_of_passthrough():
    assert dual.value_of(3.5) == 3.5
    (x,) = dual.variables([2.0])
    assert dual.value_of(x) == 2.0
