"""Both kernel backends against a direct-loop convolution."""
import numpy as np
import pytest

import oracles
from stpredict.autodiff import backend


def ref_conv(x, w, b):
    return np.stack([oracles.conv(xi, w, b if b is not None else np.zeros(w.shape[0])) for xi in x])


@pytest.mark.parametrize("k", [1, 3, 7])
@pytest.mark.parametrize("dtype,tol", [(np.float32, 2e-5), (np.float64, 1e-12)])
def test_conv_forward_matches_loops(kernels, k, dtype, tol):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 3, 5, 6)).astype(dtype)
    w = rng.standard_normal((4, 3, k, k)).astype(dtype)
    b = rng.standard_normal(4).astype(dtype)
    out, _ = kernels.conv2d_forward(x, w, b, (k - 1) // 2)
    assert out.dtype == dtype and out.shape == (2, 4, 5, 6)
    np.testing.assert_allclose(out, ref_conv(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64)),
                               atol=tol * 10, rtol=tol)


@pytest.mark.parametrize("k", [1, 3, 7])
def test_conv_backward_is_adjoint(kernels, k):
    # <conv(x), g> = <x, gx> = <w, gw> for a linear map
    rng = np.random.default_rng(10 + k)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((5, 3, k, k))
    g = rng.standard_normal((2, 5, 6, 6))
    out, cols = kernels.conv2d_forward(x, w, None, (k - 1) // 2)
    gx, gw, gb = kernels.conv2d_backward(g, x, w, cols, (k - 1) // 2)
    lhs = np.vdot(out, g)
    np.testing.assert_allclose(np.vdot(x, gx), lhs, rtol=1e-10)
    np.testing.assert_allclose(np.vdot(w, gw), lhs, rtol=1e-10)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)), rtol=1e-12)


def test_backends_agree():
    if len(backend.available()) < 2:
        pytest.skip("compiled kernels not built")
    from stpredict.autodiff import _ckernels, _npkernels
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 8, 8, 8)).astype(np.float32)
    w = rng.standard_normal((12, 8, 3, 3)).astype(np.float32)
    b = rng.standard_normal(12).astype(np.float32)
    a, ca = _ckernels.conv2d_forward(x, w, b, 1)
    n, cn = _npkernels.conv2d_forward(x, w, b, 1)
    np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-5)
    g = rng.standard_normal(a.shape).astype(np.float32)
    for u, v in zip(_ckernels.conv2d_backward(g, x, w, ca, 1), _npkernels.conv2d_backward(g, x, w, cn, 1)):
        np.testing.assert_allclose(u, v, rtol=1e-4, atol=1e-4)
    pre = rng.standard_normal((3, 24, 8, 8)).astype(np.float32)
    mem = rng.standard_normal((3, 8, 8, 8)).astype(np.float32)
    (o1, a1), (o2, a2) = _ckernels.gate_forward(pre, mem), _npkernels.gate_forward(pre, mem)
    np.testing.assert_allclose(o1, o2, rtol=1e-6, atol=1e-6)
    for u, v in zip(_ckernels.gate_backward(o1, mem, a1), _npkernels.gate_backward(o2, mem, a2)):
        np.testing.assert_allclose(u, v, rtol=1e-6, atol=1e-6)


def test_gate_activations_in_range(kernels):
    rng = np.random.default_rng(1)
    pre = rng.uniform(-6, 6, size=(4, 12, 5, 5))
    mem = rng.standard_normal((4, 4, 5, 5))
    out, act = kernels.gate_forward(pre, mem)
    g, sig = act[:, :4], act[:, 4:]
    assert np.all(np.abs(g) < 1) and np.all((sig > 0) & (sig < 1))
    np.testing.assert_allclose(out, sig[:, 4:] * mem + sig[:, :4] * g, rtol=1e-12)


def test_use_unknown_backend():
    with pytest.raises(ValueError):
        backend.use("fortran")
