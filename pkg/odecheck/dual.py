#  Authors: The odecheck contributors
#
#  License: 3-clause BSD, <LICENSE>
"""
Vector-mode forward automatic differentiation.

A `Dual` holds a value array `val` and a tangent array `eps` of shape `val.shape + (P,)`: one derivative per seeded
input. Right-hand side functions written with plain arithmetic operators work unchanged on `Dual` states, which is
how the solvers obtain sensitivities.

>>> x = Dual(2.0, [1.0, 0.0])
>>> y = Dual(3.0, [0.0, 1.0])
>>> z = x * y + x
>>> float(z.val)
8.0
>>> z.eps.tolist()
[4.0, 2.0]
"""
import numpy as np

try:
    # noinspection PyUnresolvedReferences
    from typing import Union, Sequence
except ImportError:
    pass


def _col(v):
    """Adds a trailing axis so that `v` broadcasts against tangent arrays."""
    return np.asarray(v)[..., None]


class Dual(object):
    """
    A value carrying P directional derivatives. Supports `+ - * / **` (constant exponent), unary minus, indexing
    along leading axes and iteration, mixing freely with floats and numpy arrays.
    """
    __slots__ = ('val', 'eps')

    # make numpy defer to our reflected operators (ndarray * Dual -> Dual.__rmul__)
    __array_ufunc__ = None

    def __init__(self, val, eps):
        val = np.asarray(val, dtype=float)
        eps = np.asarray(eps, dtype=float)
        if eps.shape[:-1] != val.shape:
            eps = np.broadcast_to(eps, val.shape + eps.shape[-1:])
        self.val = val
        self.eps = eps

    @classmethod
    def seed(cls, values):
        """
        Creates a vector `Dual` whose tangents are the identity: derivative i of component j is 1 iff i == j.

        :param values: a 1-D array-like
        :return:
        """
        values = np.asarray(values, dtype=float)
        return cls(values, np.eye(values.shape[0]))

    @property
    def n_tangents(self):
        return self.eps.shape[-1]

    @property
    def shape(self):
        return self.val.shape

    def __len__(self):
        return len(self.val)

    def __getitem__(self, item):
        return Dual(self.val[item], self.eps[item])

    def __iter__(self):
        for i in range(len(self.val)):
            yield self[i]

    def __repr__(self):
        return "Dual(%r, %r)" % (self.val, self.eps)

    # --- arithmetic
    def __neg__(self):
        return Dual(-self.val, -self.eps)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.eps + other.eps)
        return Dual(self.val + other, self.eps)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.eps - other.eps)
        return Dual(self.val - other, self.eps)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.eps)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.eps * _col(other.val) + _col(self.val) * other.eps)
        return Dual(self.val * other, self.eps * _col(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            val = self.val / other.val
            return Dual(val, (self.eps - _col(val) * other.eps) / _col(other.val))
        return Dual(self.val / other, self.eps / _col(other))

    def __rtruediv__(self, other):
        val = other / self.val
        return Dual(val, -_col(val / self.val) * self.eps)

    def __pow__(self, power):
        if isinstance(power, Dual):
            raise TypeError("Dual exponents are not supported")
        if power == 2:
            return Dual(self.val * self.val, _col(2.0 * self.val) * self.eps)
        return Dual(self.val ** power, _col(power * self.val ** (power - 1)) * self.eps)


# ----- functions that accept floats, arrays or Duals
def is_dual(x):
    return isinstance(x, Dual)


def value(x):
    """Returns the value part of `x` as a float array (`x` itself converted if it is not a Dual)."""
    if isinstance(x, Dual):
        return x.val
    return np.asarray(x, dtype=float)


def tangent(x, n_tangents=None):
    """
    Returns the tangent part of `x`. For a non-Dual `x`, returns zeros of shape `x.shape + (n_tangents,)` when
    `n_tangents` is given, else None.
    """
    if isinstance(x, Dual):
        return x.eps
    if n_tangents is None:
        return None
    return np.zeros(np.shape(x) + (n_tangents,))


def exp(x):
    if isinstance(x, Dual):
        val = np.exp(x.val)
        return Dual(val, _col(val) * x.eps)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(np.log(x.val), x.eps / _col(x.val))
    return np.log(x)


def sqrt(x):
    if isinstance(x, Dual):
        val = np.sqrt(x.val)
        return Dual(val, x.eps / _col(2.0 * val))
    return np.sqrt(x)


def square(x):
    if isinstance(x, Dual):
        return x ** 2
    return np.square(x)


def dsum(x):
    """Sum of all components of `x` (a scalar, Dual when `x` is one)."""
    if isinstance(x, Dual):
        p = x.eps.shape[-1]
        return Dual(np.sum(x.val), x.eps.reshape(-1, p).sum(axis=0))
    return np.sum(x)


def stack(items):
    """
    Stacks scalars (floats or 0-d Duals) or equally shaped arrays into an array along a new leading axis. The result
    is a Dual as soon as one item is.
    """
    items = list(items)
    duals = [i for i in items if isinstance(i, Dual)]
    if not duals:
        return np.array(items, dtype=float)
    p = duals[0].eps.shape[-1]
    vals = [value(i) for i in items]
    eps = [tangent(i, p) for i in items]
    return Dual(np.stack(vals), np.stack(eps))


def isfinite(x):
    """True iff every value (and every tangent) of `x` is finite."""
    if isinstance(x, Dual):
        return bool(np.all(np.isfinite(x.val)) and np.all(np.isfinite(x.eps)))
    return bool(np.all(np.isfinite(x)))


def components(x, n_tangents=0):
    """
    Flattens the value and tangents of `x` into a single 1-D float array: values first, then tangents in row-major
    order. A non-Dual `x` gets zero tangents so that arrays with and without tangents line up.
    """
    vals = np.ravel(value(x))
    if n_tangents == 0:
        return vals
    return np.concatenate([vals, np.ravel(tangent(x, n_tangents))])
