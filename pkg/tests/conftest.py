"""Shared oracles and fixtures.

The finite-difference oracle here is the independent reference for every
gradient the engine produces; it never calls into the backward machinery.
"""

import numpy as np
import pytest

from ghostsr import tensor as T


def central_difference(f, arrays, eps=1e-5):
    """Central-difference gradients of a scalar function of several arrays.

    ``f`` must recompute its value from the current contents of ``arrays``
    (they are perturbed in place, one element at a time).
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f()
            flat[i] = orig - eps
            f_minus = f()
            flat[i] = orig
            gf[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def check_gradients(make_loss, arrays, tol=1e-6, eps=1e-5):
    """Assert analytic gradients match central differences in 64-bit mode.

    ``make_loss(*tensors)`` builds the graph from fresh parameter tensors
    wrapping ``arrays`` and returns the scalar loss tensor.
    """
    with T.using_dtype("float64"):
        params = [T.parameter(a) for a in arrays]
        loss = make_loss(*params)
        grads = T.backward(loss, params)

        def value():
            ps = [T.parameter(a) for a in arrays]
            return float(make_loss(*ps).data)

        numeric = central_difference(value, arrays, eps=eps)
        for p, num in zip(params, numeric):
            err = relative_error(grads[p], num)
            assert err < tol, f"gradient mismatch: relative error {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.using_dtype("float64"):
        yield
