"""Independent reference computations used to check the package."""

import numpy as np


def central_difference(learner, x, y, h=1e-6):
    """Finite-difference gradient of the learner's loss over its flat parameter vector."""
    theta = learner.flat_params()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        lu = learner.loss_and_grad(learner.unflatten(up), x, y)[0]
        ld = learner.loss_and_grad(learner.unflatten(down), x, y)[0]
        grad[i] = (lu - ld) / (2 * h)
    return grad


def analytic_flat(learner, x, y):
    grads = learner.loss_and_grad(learner.params, x, y)[1]
    return np.concatenate([grads[n].ravel() for n in sorted(grads)])


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def energy_oracle(samples, duration_s):
    """Mean power times duration in hours, the long way round."""
    total = 0.0
    for s in samples:
        total += s
    return (total / len(samples)) * (duration_s / 60.0 / 60.0)


def objective_oracle(P, E, LR, alpha, beta):
    return alpha * P + (1 - alpha) * beta * E + (1 - alpha) * (1 - beta) * LR
