"""Shared test utilities: central finite-difference gradient checking."""

import numpy as np

from weedhybrid import tensor as T


def gradcheck(build_loss, params, eps=1e-3, rtol=1e-3):
    """Check autodiff grads of a scalar loss against central finite differences.

    build_loss rebuilds the forward graph from scratch (closing over params);
    params is a list of Tensors whose data will be perturbed in place. Runs in
    whatever dtype the params carry; callers use float64 so the difference
    quotient is not drowned by storage rounding. Returns the max relative
    error seen; raises AssertionError past rtol.
    """
    for p in params:
        p.grad = None
    with T.Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    grads = []
    for p in params:
        assert p.grad is not None, "parameter missing gradient after backward"
        grads.append(p.grad.copy())
        p.grad = None

    worst = 0.0
    for p, ad in zip(params, grads):
        flat = p.data.reshape(-1)
        ad_flat = ad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = build_loss().item()
            flat[i] = keep - eps
            f_minus = build_loss().item()
            flat[i] = keep
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ad_flat[i] - fd)
            rel = err / max(abs(ad_flat[i]), abs(fd), 1e-6)
            worst = max(worst, rel)
            assert rel <= rtol, (
                f"gradient mismatch at element {i}: autodiff {ad_flat[i]:.8g} "
                f"vs finite difference {fd:.8g} (rel err {rel:.3g})")
    return worst


def rand_tensor(rng, shape, scale=1.0, requires_grad=True):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)
