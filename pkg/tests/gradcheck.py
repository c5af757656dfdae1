"""Central finite-difference gradient oracle shared by the test modules.

Deliberately independent of the reverse-mode machinery: it only ever calls
the forward function, perturbing one raw array element at a time.
"""

import numpy as np

from platescope.autodiff import Tape, Tensor, backward

STEP = 1e-5


def numerical_grad(f, arrays, step=STEP):
    """Central differences of a scalar-valued ``f(*arrays)`` w.r.t. each array.

    ``f`` must not mutate its inputs and must return a plain float.
    """
    grads = []
    for which, arr in enumerate(arrays):
        arr = np.array(arr, dtype=np.float64)
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*[a if j != which else arr for j, a in enumerate(arrays)])
            flat[i] = orig - step
            lo = f(*[a if j != which else arr for j, a in enumerate(arrays)])
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-8)
    return np.max(np.abs(a - b), initial=0.0) / denom


def reverse_mode_grads(build_loss, arrays):
    """Run ``build_loss`` over Tensor-wrapped arrays on a tape; return grads."""
    tensors = [Tensor(a) for a in arrays]
    with Tape():
        loss = build_loss(*tensors)
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def assert_grads_match(build_loss, arrays, tol=1e-4):
    """Compare reverse-mode grads against the finite-difference oracle."""
    analytic = reverse_mode_grads(build_loss, arrays)

    def scalar_f(*arrs):
        with Tape():
            out = build_loss(*[Tensor(a) for a in arrs])
        return out.item()

    numeric = numerical_grad(scalar_f, [np.asarray(a, dtype=np.float64) for a in arrays])
    for i, (ga, gn) in enumerate(zip(analytic, numeric)):
        err = rel_err(ga, gn)
        assert err < tol, f"operand {i}: rel err {err:.3e} >= {tol}"
