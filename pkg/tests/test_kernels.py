import os
import subprocess
import sys

import numpy as np
import pytest

from medstat import kernels

BACKENDS = kernels.available_backends()


def _data(seed=0):
    rng = np.random.default_rng(seed)
    return rng, rng.normal(size=(3, 5, 7)) * 4


@pytest.mark.parametrize("name", BACKENDS)
def test_softmax_rows_normalized_and_stable(name):
    mod = kernels.backend_module(name)
    _, s = _data()
    s[0, 0, 0] = 800.0
    p = mod.softmax_rows(np.ascontiguousarray(s))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    np.testing.assert_allclose(p, e / e.sum(axis=-1, keepdims=True), rtol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_softmax_backward_is_vector_jacobian_product(name):
    mod = kernels.backend_module(name)
    rng, s = _data(1)
    s = s[:1, :1]  # one row: build the Jacobian explicitly
    p = mod.softmax_rows(np.ascontiguousarray(s))
    dp = rng.normal(size=p.shape)
    jac = np.diag(p[0, 0]) - np.outer(p[0, 0], p[0, 0])
    np.testing.assert_allclose(mod.softmax_rows_backward(p, dp)[0, 0], jac.T @ dp[0, 0], atol=1e-14)


@pytest.mark.parametrize("name", BACKENDS)
def test_layernorm_forward_statistics(name):
    mod = kernels.backend_module(name)
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 2.0, size=(6, 16))
    y, xhat, rstd = mod.layernorm_forward(x, np.ones(16), np.zeros(16), 1e-5)
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), x.var(axis=1) / (x.var(axis=1) + 1e-5), rtol=1e-12)
    np.testing.assert_allclose(rstd, 1 / np.sqrt(x.var(axis=1) + 1e-5), rtol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_layernorm_backward_matches_finite_differences(name):
    mod = kernels.backend_module(name)
    rng = np.random.default_rng(3)
    x, g, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    dy = rng.normal(size=(3, 5))
    _, xhat, rstd = mod.layernorm_forward(x, g, b, 1e-5)
    dx, dg, db = mod.layernorm_backward(dy, xhat, rstd, g)
    f = lambda x_, g_, b_: float((mod.layernorm_forward(x_, g_, b_, 1e-5)[0] * dy).sum())
    h = 1e-6
    for arr, grad in ((x, dx), (g, dg), (b, db)):
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            arr[i] += h
            up = f(x, g, b)
            arr[i] -= 2 * h
            down = f(x, g, b)
            arr[i] += h
            num[i] = (up - down) / (2 * h)
        np.testing.assert_allclose(grad, num, atol=1e-7)


@pytest.mark.skipif("compiled" not in BACKENDS, reason="compiled backend not built")
@pytest.mark.parametrize("kernel", kernels.KERNEL_NAMES)
def test_backends_agree(kernel):
    c, p = kernels.backend_module("compiled"), kernels.backend_module("python")
    rng = np.random.default_rng(4)
    if kernel == "highpass_fb":
        x = np.ascontiguousarray(rng.normal(size=(300, 3)).cumsum(axis=0))
        args = (x, 0.97)
    elif kernel == "softmax_rows":
        args = (np.ascontiguousarray(rng.normal(size=(2, 4, 6))),)
    elif kernel == "softmax_rows_backward":
        s = p.softmax_rows(rng.normal(size=(2, 4, 6)))
        args = (np.ascontiguousarray(s), np.ascontiguousarray(rng.normal(size=(2, 4, 6))))
    elif kernel == "layernorm_forward":
        args = (rng.normal(size=(5, 8)), rng.normal(size=8), rng.normal(size=8), 1e-5)
    else:
        _, xhat, rstd = p.layernorm_forward(rng.normal(size=(5, 8)), np.ones(8), np.zeros(8), 1e-5)
        args = (rng.normal(size=(5, 8)), xhat, rstd, rng.normal(size=8))
    a, b = getattr(c, kernel)(*args), getattr(p, kernel)(*args)
    for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        np.testing.assert_allclose(u, v, rtol=1e-11, atol=1e-12)


def test_use_backend_switches_module_attributes():
    before = kernels.BACKEND
    try:
        kernels.use_backend("python")
        assert kernels.softmax_rows is kernels.backend_module("python").softmax_rows
    finally:
        kernels.use_backend(before)
    with pytest.raises(ValueError):
        kernels.backend_module("gpu")


def test_environment_variable_forces_fallback():
    env = dict(os.environ, MEDSTAT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from medstat import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
