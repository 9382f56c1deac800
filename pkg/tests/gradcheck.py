"""Finite-difference gradient checking against the tape's gradients."""

import numpy as np

from dcic import tensor as T


def gradcheck(f, tensors, rng, n_coords=6, step=1e-3, tol=1e-3):
    """Assert recorded grads match central differences on sampled coordinates.

    `f` must rebuild the loss from the given (float64) tensors on every call.
    Returns the worst relative error seen.
    """
    for t in tensors:
        t.zero_grad()
    with T.Tape() as tape:
        loss = f()
    T.backward(loss, tape)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            fd = (up - down) / (2 * step)
            rel = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6)
            worst = max(worst, rel)
            assert rel < tol, f"grad mismatch: fd={fd} analytic={grad[i]} rel={rel}"
    return worst


def uniform(rng, shape, lo=-1.0, hi=1.0):
    return T.parameter(rng.uniform(lo, hi, shape))
