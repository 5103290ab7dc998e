"""Central finite-difference gradient checking (runs in float64)."""
import numpy as np

from .tensor import Tensor


def numerical_grad(loss_fn, arrays, h=1e-3):
    """d loss_fn(*arrays) / d arrays by central differences.

    ``loss_fn`` takes float64 arrays and returns a float; arrays are perturbed
    in place and restored.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn(*arrays)
            flat[i] = orig - h
            fm = loss_fn(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradients(build_loss, arrays, h=1e-3, floor=1e-6):
    """Compare reverse-mode and finite-difference gradients.

    ``build_loss`` maps a list of leaf Tensors to a scalar Tensor. Returns the
    list of max relative errors, one per input array.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    build_loss(leaves).backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def f(*arrs):
        return float(build_loss([Tensor(x, dtype=np.float64) for x in arrs]).data)
    numeric = numerical_grad(f, arrays, h=h)
    return [rel_error(a, n, floor) for a, n in zip(analytic, numeric)]
