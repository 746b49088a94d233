import numpy as np
import pytest

from odecheck import dual
from odecheck.dual import Dual


def test_arithmetic_derivatives():
    """Product, quotient and power rules on two seeded inputs"""
    x = Dual(6.0, [1.0, 0.0])
    y = Dual(3.0, [0.0, 1.0])

    q = x / y
    assert float(q.val) == 2.0
    np.testing.assert_allclose(q.eps, [1 / 3, -2 / 3])

    r = 1.0 / Dual(2.0, [1.0])
    np.testing.assert_allclose(r.eps, [-0.25])

    c = Dual(2.0, [1.0]) ** 3
    assert float(c.val) == 8.0
    np.testing.assert_allclose(c.eps, [12.0])

    d = 5.0 - x
    assert float(d.val) == -1.0
    np.testing.assert_allclose(d.eps, [-1.0, 0.0])


def test_elementary_functions():
    """exp, log and sqrt carry the chain rule"""
    x = Dual(1.0, [1.0])
    np.testing.assert_allclose(dual.exp(x).eps, [np.e])
    np.testing.assert_allclose(dual.log(x).eps, [1.0])
    np.testing.assert_allclose(dual.sqrt(Dual(4.0, [1.0])).eps, [0.25])
    assert dual.exp(0.0) == 1.0


def test_numpy_arrays_defer_to_dual():
    """ndarray * Dual gives a Dual with the right tangents"""
    x = Dual.seed([1.0, 1.0])
    y = np.array([2.0, 3.0]) * x
    assert isinstance(y, Dual)
    np.testing.assert_allclose(y.val, [2.0, 3.0])
    np.testing.assert_allclose(y.eps, [[2.0, 0.0], [0.0, 3.0]])


def test_seed_and_indexing():
    x = Dual.seed([1.0, 2.0, 3.0])
    assert x.n_tangents == 3
    assert len(x) == 3
    second = x[1]
    assert float(second.val) == 2.0
    np.testing.assert_array_equal(second.eps, [0.0, 1.0, 0.0])
    assert [float(v.val) for v in x] == [1.0, 2.0, 3.0]


def test_stack_mixes_floats_and_duals():
    s = dual.stack([Dual(1.0, [1.0, 0.0]), 2.0])
    assert isinstance(s, Dual)
    np.testing.assert_array_equal(s.val, [1.0, 2.0])
    np.testing.assert_array_equal(s.eps, [[1.0, 0.0], [0.0, 0.0]])

    f = dual.stack([1.0, 2.0])
    assert not dual.is_dual(f)


def test_dsum_and_components():
    x = Dual([1.0, 2.0], [[1.0, 0.0], [0.0, 1.0]])
    total = dual.dsum(x * x)
    assert float(total.val) == 5.0
    np.testing.assert_allclose(total.eps, [2.0, 4.0])

    np.testing.assert_array_equal(dual.components(x, 2), [1.0, 2.0, 1.0, 0.0, 0.0, 1.0])
    np.testing.assert_array_equal(dual.components(np.array([1.0, 2.0]), 2), [1.0, 2.0, 0.0, 0.0, 0.0, 0.0])


def test_isfinite_checks_tangents():
    assert dual.isfinite(Dual(1.0, [1.0]))
    assert not dual.isfinite(Dual(1.0, [np.inf]))
    assert not dual.isfinite(np.array([1.0, np.nan]))


def test_dual_exponent_not_supported():
    with pytest.raises(TypeError):
        Dual(2.0, [1.0]) ** Dual(1.0, [0.0])
