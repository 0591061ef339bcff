"""Dense-array numerics: each op exposes a forward and an exact analytic
backward, plus a central-finite-difference gradient checker used as the
validation oracle everywhere downstream.

A "grid" here is simply a 2-D float64 ndarray (row-major). All functions are
pure and deterministic; there is no tape or graph.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out[i,j] = sum_k x[i,k] w[k,j] + b[j]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: x {x.shape} incompatible with w {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias {b.shape} incompatible with w {w.shape}")
    return x @ w + b


def affine_backward(x, w, b, d_out):
    """Gradients of affine w.r.t. (x, w, b) given upstream d_out."""
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"affine_backward: upstream {d_out.shape} vs output {(x.shape[0], w.shape[1])}"
        )
    dx = d_out @ w.T
    dw = x.T @ d_out
    db = d_out.sum(axis=0)
    return dx, dw, db


def softmax_row(x: np.ndarray) -> np.ndarray:
    """Stable softmax of a 1-D vector (max-subtraction)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DomainError("softmax_row requires a nonempty 1-D vector")
    e = np.exp(x - x.max())
    return e / e.sum()


def softmax_row_backward(out: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Jacobian-vector product: dx = out * (d_out - <d_out, out>)."""
    out = np.asarray(out, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    if out.shape != d_out.shape:
        raise DimensionError(f"softmax_row_backward: {out.shape} vs {d_out.shape}")
    return out * (d_out - np.dot(d_out, out))


def sigmoid(x):
    """Numerically stable logistic function, elementwise on scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def sigmoid_grad(s):
    """Derivative of sigmoid expressed through its output s."""
    return s * (1.0 - s)


def grad_check(f, theta: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    `f(theta)` must return `(value, grad)` with grad the analytic gradient at
    theta. Error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    if h <= 0:
        raise DomainError("grad_check: step h must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    value, grad = f(theta)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise DomainError("grad_check: non-finite value or gradient at theta")
    if grad.shape != theta.shape:
        raise DimensionError(f"grad_check: grad {grad.shape} vs theta {theta.shape}")
    worst = 0.0
    for i in range(theta.size):
        probe = theta.copy().ravel()
        probe[i] += h
        up, _ = f(probe.reshape(theta.shape))
        probe[i] -= 2 * h
        down, _ = f(probe.reshape(theta.shape))
        if not (np.isfinite(up) and np.isfinite(down)):
            raise DomainError(f"grad_check: non-finite f at probe coordinate {i}")
        numeric = (up - down) / (2 * h)
        analytic = grad.ravel()[i]
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    return worst
