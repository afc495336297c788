"""Fused in-place optimizer updates over flat parameter buffers.

One pass over memory instead of a chain of numpy temporaries; the dense
layer has ~25M weights so the chained version dominates a training step.
Plain IEEE arithmetic (no fastmath), so results match the numpy formula.
"""

import numba
import numpy as np


@numba.njit(error_model="numpy", cache=True)
def sgd_momentum(p, g, vel, lr, momentum, decay):
    # decay * p is the gradient of the L2 penalty, folded in here
    for i in range(p.size):
        v = momentum * vel[i] + (g[i] + decay * p[i])
        vel[i] = v
        p[i] -= lr * v


@numba.njit(error_model="numpy", cache=True)
def adam(p, g, m, v, step_scale, inv_sqrt_bc2, beta1, beta2, eps, decay):
    # p -= lr * (m / bc1) / (sqrt(v / bc2) + eps), with step_scale = lr / bc1
    c1 = 1 - beta1
    c2 = 1 - beta2
    for i in range(p.size):
        gi = g[i] + decay * p[i]
        mi = beta1 * m[i] + c1 * gi
        vi = beta2 * v[i] + c2 * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step_scale * mi / (np.sqrt(vi) * inv_sqrt_bc2 + eps)
