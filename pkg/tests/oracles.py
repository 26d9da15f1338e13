"""Reference computations that share no code with the package."""

import numpy as np
from scipy.optimize import minimize


def box_distance(half, x):
    """Closed-form Euclidean distance from x to the box [-half, half]."""
    return float(np.linalg.norm(np.maximum(np.abs(x) - np.asarray(half), 0.0)))


def box_closest(half, x):
    return np.clip(x, -np.asarray(half), np.asarray(half))


def slsqp_projection(A, c, x):
    """Projection of x onto {y : A y + c <= 0} by a general-purpose NLP solver."""
    A = np.asarray(A, float)
    c = np.asarray(c, float)
    res = minimize(
        lambda y: 0.5 * np.sum((y - x) ** 2), x0=np.zeros_like(x), jac=lambda y: y - x,
        constraints=[{"type": "ineq", "fun": lambda y: -(A @ y + c), "jac": lambda y: -A}],
        method="SLSQP", options={"ftol": 1e-14, "maxiter": 500},
    )
    return res.x


def lse_direct(values):
    """Unshifted log-sum-exp with float128-free math; only for moderate inputs."""
    return float(np.log(np.sum(np.exp(np.asarray(values, float)))))


def central_diff(f, x, step=1e-6):
    x = np.asarray(x, float)
    f0 = np.asarray(f(x))
    jac = np.zeros(f0.shape + x.shape)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        jac[..., i] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * step)
    return jac


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))
