"""Forward-mode automatic differentiation with first- and second-order jets.

A ``Jet`` carries a value together with its gradient (and optionally its
Hessian) with respect to a fixed set of ``n_dirs`` seed directions.  Values
may be scalars or numpy arrays, so a single jet evaluation can differentiate
a whole batch of points at once: for a batch of shape ``S`` the gradient has
shape ``S + (n_dirs,)`` and the Hessian ``S + (n_dirs, n_dirs)``.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Jet", "variable", "variables", "value_of", "sin", "cos", "tanh", "sqrt", "exp"]


def _as_val(x):
    if type(x) is np.ndarray:
        return x
    return np.asarray(x, dtype=float)


class Jet:
    """Truncated Taylor jet: value, gradient and (optional) Hessian."""

    __slots__ = ("val", "g", "h")

    def __init__(self, val, g, h=None):
        self.val = _as_val(val)
        self.g = _as_val(g)
        self.h = None if h is None else _as_val(h)

    @property
    def order(self) -> int:
        return 1 if self.h is None else 2

    def __repr__(self):
        return f"Jet(val={self.val!r}, order={self.order})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Jet):
            h = None if self.h is None else self.h + other.h
            return Jet(self.val + other.val, self.g + other.g, h)
        return Jet(self.val + other, self.g, self.h)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.val, -self.g, None if self.h is None else -self.h)

    def __sub__(self, other):
        if isinstance(other, Jet):
            h = None if self.h is None else self.h - other.h
            return Jet(self.val - other.val, self.g - other.g, h)
        return Jet(self.val - other, self.g, self.h)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet):
            av, bv = self.val, other.val
            g = _ax(bv) * self.g + _ax(av) * other.g
            h = None
            if self.h is not None:
                h = _axx(bv) * self.h + _axx(av) * other.h + _outer_sym(self.g, other.g)
            return Jet(av * bv, g, h)
        if isinstance(other, (int, float)):
            return Jet(self.val * other, self.g * other, None if self.h is None else self.h * other)
        c = _as_val(other)
        return Jet(
            self.val * c,
            _ax(c) * self.g,
            None if self.h is None else _axx(c) * self.h,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            qv = self.val / other.val
            qg = (self.g - _ax(qv) * other.g) / _ax(other.val)
            qh = None
            if self.h is not None:
                qh = (self.h - _outer_sym(qg, other.g) - _axx(qv) * other.h) / _axx(other.val)
            return Jet(qv, qg, qh)
        return self * (1.0 / _as_val(other))

    def __rtruediv__(self, other):
        # other / self with other a constant
        inv = self.reciprocal()
        return inv * other

    def reciprocal(self):
        v = 1.0 / self.val
        return _chain(self, v, -v * v, 2.0 * v * v * v)

    def __pow__(self, p):
        if isinstance(p, Jet):
            raise TypeError("jet-valued exponents are not supported")
        if p == 2:
            return self * self
        v = self.val**p
        d1 = p * self.val ** (p - 1)
        d2 = p * (p - 1) * self.val ** (p - 2)
        return _chain(self, v, d1, d2)


def _ax(v):
    """Broadcast a value against gradient axes (no-op for 0-d values)."""
    v = _as_val(v)
    return v[..., None] if v.ndim else v


def _axx(v):
    v = _as_val(v)
    return v[..., None, None] if v.ndim else v


def _outer_sym(ga, gb):
    return ga[..., :, None] * gb[..., None, :] + gb[..., :, None] * ga[..., None, :]


def _chain(x: Jet, v, d1, d2):
    """Apply a scalar function with value v, first derivative d1, second d2."""
    g = _ax(d1) * x.g
    h = None
    if x.h is not None:
        h = _axx(d1) * x.h + 0.5 * _axx(d2) * _outer_sym(x.g, x.g)
    return Jet(v, g, h)


def variable(val, index: int, n_dirs: int, order: int = 1) -> Jet:
    """Seed a jet for the ``index``-th independent variable.

    ``val`` may be an array; the seed direction broadcasts over the batch.
    """
    val = _as_val(val)
    g = np.zeros(val.shape + (n_dirs,))
    g[..., index] = 1.0
    h = np.zeros(val.shape + (n_dirs, n_dirs)) if order == 2 else None
    return Jet(val, g, h)


def variables(vals, order: int = 1) -> list[Jet]:
    """Seed one jet per entry of ``vals`` (list of scalars/arrays)."""
    n = len(vals)
    return [variable(v, i, n, order) for i, v in enumerate(vals)]


def value_of(x):
    """Plain value of a jet or passthrough for ordinary numerics."""
    return x.val if isinstance(x, Jet) else x


def sin(x):
    if isinstance(x, Jet):
        return _chain(x, np.sin(x.val), np.cos(x.val), -np.sin(x.val))
    return np.sin(x)


def cos(x):
    if isinstance(x, Jet):
        return _chain(x, np.cos(x.val), -np.sin(x.val), -np.cos(x.val))
    return np.cos(x)


def tanh(x):
    if isinstance(x, Jet):
        t = np.tanh(x.val)
        d1 = 1.0 - t * t
        return _chain(x, t, d1, -2.0 * t * d1)
    return np.tanh(x)


def sqrt(x):
    if isinstance(x, Jet):
        r = np.sqrt(x.val)
        return _chain(x, r, 0.5 / r, -0.25 / (r * x.val))
    return np.sqrt(x)


def exp(x):
    if isinstance(x, Jet):
        e = np.exp(x.val)
        return _chain(x, e, e, e)
    return np.exp(x)
