"""Central-difference gradient oracle, evaluated in float64 and independent of the backward code."""

import numpy as np

from deskcache.tensor import Tensor


def numeric_grads(fn, arrays, weights, h=1e-3):
    """d/dx of sum(weights * fn(*arrays)) for every array, by central differences."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            up = np.sum(weights * fn(*arrays))
            a[idx] = old - h
            down = np.sum(weights * fn(*arrays))
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def analytic_grads(op, arrays, weights):
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    y = op(*leaves)
    y.backward(weights)
    return [leaf.grad for leaf in leaves]


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check(op, arrays, rng, h=1e-3):
    """Largest relative error over the op's inputs."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def forward(*xs):
        return op(*[Tensor(x, dtype=np.float64) for x in xs]).data

    weights = rng.standard_normal(forward(*arrays).shape)
    num = numeric_grads(forward, arrays, weights, h)
    ana = analytic_grads(op, arrays, weights)
    return max(rel_error(a, n) for a, n in zip(ana, num))
