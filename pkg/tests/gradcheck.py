"""Central finite-difference oracle for gradient checks.

Independent of the tape: perturbs raw parameter buffers and re-runs the
forward pass as plain numpy (no tape active). Checks run in float64 via
``precision("float64")`` so the eps=1e-3 central difference has ~1e-6
truncation error against O(1) gradients.
"""
import numpy as np

from pqrnn.tensor import GradientTape


def finite_difference(f, params, eps=1e-3):
    """Central-difference gradient of the scalar ``f()`` w.r.t. each tensor."""
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        grads.append(g.reshape(p.data.shape))
    return grads


def max_rel_err(a, b):
    """Relative error between two gradients, measured on the whole vector.

    ||a - b|| / max(||a||, ||b||): per-element ratios would report FD
    truncation (~eps^2 * f''') as error wherever a single component of the
    true gradient happens to sit near zero. The 1e-6 denominator floor
    keeps FD rounding noise (~1e-12 at eps=1e-3) from registering on
    gradients that are exactly zero, e.g. a bias feeding a
    mean-subtracting normalizer.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(forward, params, eps=1e-3, tol=1e-4):
    """Compare tape gradients of ``forward() -> scalar Tensor`` against FD.

    ``forward`` must be deterministic (fix any dropout masks up front).
    Returns the worst relative error over all parameters.
    """
    with GradientTape() as tape:
        loss = forward()
    tape.backward(loss)
    tape_grads = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    fd_grads = finite_difference(lambda: float(forward().data), params, eps=eps)
    worst = max(max_rel_err(tg, fg) for tg, fg in zip(tape_grads, fd_grads))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3g} >= {tol}"
    return worst
