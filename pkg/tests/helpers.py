"""Shared independent oracles for the test suite.

Everything here is deliberately written against plain numpy / Python, not
against the library's own backward pass, so checks stay two-sided.
"""

from __future__ import annotations

import numpy as np

from vlnav import autodiff as ad


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Per-coordinate central finite differences of a scalar function f(x)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst per-coordinate relative error with an absolute floor on the denominator."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(build_loss, arrays: dict[str, ad.Array], h: float = 1e-5,
                    tol: float = 1e-4) -> float:
    """Compare tape gradients of ``build_loss(arrays)`` against central differences.

    ``build_loss`` must rebuild the graph from the current ``.data`` of each
    array on every call. Returns the worst relative error over all checked
    arrays and asserts it is below ``tol``.
    """
    ad.reset_tape()
    for a in arrays.values():
        a.grad = None
    loss = build_loss(arrays)
    ad.backward(loss)
    analytic = {k: (a.grad.copy() if a.grad is not None else np.zeros_like(a.data))
                for k, a in arrays.items()}

    worst = 0.0
    for name, arr in arrays.items():
        def scalar_fn(x, _name=name, _arr=arr):
            saved = _arr.data
            _arr.data = np.asarray(x, dtype=np.float64)
            with ad.no_grad():
                val = build_loss(arrays).item()
            _arr.data = saved
            return val

        numeric = central_difference(scalar_fn, arr.data.copy(), h=h)
        err = max_rel_err(analytic[name], numeric)
        assert err < tol, f"gradient mismatch for '{name}': rel err {err:.3e}"
        worst = max(worst, err)
    return worst
