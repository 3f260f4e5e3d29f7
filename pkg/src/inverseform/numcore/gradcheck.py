"""Central finite-difference gradient checking."""

import numpy as np

from .tensor import Tensor


def numeric_grad(fn, arrays, index, h=1e-6):
    """Central difference of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(fn(*base))
        flat[i] = old - h
        fm = float(fn(*base))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """||analytic - numeric|| / (||numeric|| + floor), norms taken over the whole array."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return float(np.linalg.norm(analytic - numeric) / (np.linalg.norm(numeric) + floor))


def gradcheck(fn, arrays, h=1e-6, wrt=None):
    """Compare autodiff and finite-difference gradients of a scalar tensor function.

    ``fn`` receives one :class:`Tensor` per array and must return a scalar
    tensor. Returns the list of relative errors, one per checked input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*tensors).backward()

    def value(*arrs):
        return fn(*[Tensor(a) for a in arrs]).item()

    return [relative_error(tensors[i].grad, numeric_grad(value, arrays, i, h)) for i in wrt]
