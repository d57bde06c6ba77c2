import numpy as np

from .ops import ShapeError


def sgd_step(params, grads, learning_rate, weight_decay=0.0):
    """Return ``{name: p - lr * (g + wd * p)}`` for every name in ``params``.

    Names absent from ``grads`` are treated as having zero gradient.
    """
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, parameter has {np.shape(p)}")
        updated[name] = p - learning_rate * (g + weight_decay * p)
    return updated
