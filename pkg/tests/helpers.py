"""Shared finite-difference helpers for the layer tests."""
import numpy as np


def f64(rng, *shape):
    return rng.normal(size=shape).astype(np.float64)


def check_layer(forward, backward, inputs, rng, eps=1e-6):
    """Finite-difference check of one layer on float64 inputs through a random linear readout."""
    out, cache = forward(*inputs)
    w = rng.normal(size=np.shape(out))
    grads = backward(w, cache)
    grads = grads if isinstance(grads, tuple) else (grads,)
    worst = 0.0
    for arr, g in zip(inputs, grads):
        flat = arr.reshape(-1)
        num = np.zeros(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = np.sum(forward(*inputs)[0] * w)
            flat[j] = orig - eps
            down = np.sum(forward(*inputs)[0] * w)
            flat[j] = orig
            num[j] = (up - down) / (2 * eps)
        err = np.abs(num - g.reshape(-1)) / np.maximum(np.maximum(np.abs(num), np.abs(g.reshape(-1))), 1e-8)
        worst = max(worst, float(err.max()))
    return worst
