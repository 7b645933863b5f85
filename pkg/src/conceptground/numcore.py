"""Dense float64 kernels with hand-derived backward passes.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Functions that
take a ``d x n`` matrix also accept a stacked ``(batch, d, n)`` array, which the
model uses to push a whole concept batch through one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import NumericError, ShapeError

PROB_FLOOR = 1e-12


def _as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def affine(W: np.ndarray, b: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Return ``W @ X + b`` with ``b`` broadcast over columns.

    Args:
        W: ``p x d`` weights.
        b: ``p`` bias vector.
        X: ``d x n`` input, or a ``(batch, d, n)`` stack.

    Raises:
        ShapeError: if the operand shapes do not line up.
    """
    W, b, X = _as_f64(W), _as_f64(b), _as_f64(X)
    if W.ndim != 2 or b.ndim != 1 or X.ndim not in (2, 3):
        raise ShapeError(f"affine expects 2-D W, 1-D b, 2-D/3-D X; got W{W.shape}, b{b.shape}, X{X.shape}")
    if W.shape[1] != X.shape[-2]:
        raise ShapeError(f"affine: W{W.shape} cannot multiply X{X.shape}")
    if b.shape[0] != W.shape[0]:
        raise ShapeError(f"affine: bias b{b.shape} does not match W{W.shape}")
    return W @ X + b[:, None]


def affine_backward(
    grad_out: np.ndarray, W: np.ndarray, X: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(dW, db, dX)`` of ``affine`` given ``dL/d(output)``.

    Stacked inputs have their weight and bias gradients summed over the stack.
    """
    dX = W.T @ grad_out
    if grad_out.ndim == 3:
        dW = np.einsum("bpn,bdn->pd", grad_out, X)
        db = grad_out.sum(axis=(0, 2))
    else:
        dW = grad_out @ X.T
        db = grad_out.sum(axis=1)
    return dW, db, dX


def relu(X: np.ndarray) -> np.ndarray:
    return np.maximum(X, 0.0)


def relu_backward(grad_out: np.ndarray, pre: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return grad_out * (pre > 0.0)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    z = _as_f64(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out: np.ndarray, probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax: ``p * (g - <g, p>)``."""
    return probs * (grad_out - (grad_out * probs).sum(axis=axis, keepdims=True))


def cross_entropy(p: np.ndarray, target: int, floor: float = PROB_FLOOR) -> float:
    """``-log p[target]`` with the probability clamped below at ``floor``."""
    p = _as_f64(p)
    if not 0 <= target < p.shape[-1]:
        raise ShapeError(f"target {target} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[target], floor)))


def softmax_cross_entropy_backward(p: np.ndarray, target: int, floor: float = PROB_FLOOR) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax(z), target)`` with respect to ``z``.

    Zero when the target probability sits on the clamp, since the clamped loss
    is locally constant there.
    """
    if p[target] < floor:
        return np.zeros_like(p)
    g = p.copy()
    g[target] -= 1.0
    return g


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for one flat parameter vector."""

    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: np.ndarray = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Returns ``params`` for convenience.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(
            f"adam_step: params{params.shape}, grads{grads.shape}, state{state.m.shape} must match"
        )
    state.step += 1
    t = state.step
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params


def grad_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Compare an analytic gradient against central finite differences.

    ``fn`` maps a flat parameter vector to ``(loss, gradient)``. The result is
    the largest per-coordinate relative error
    ``|a - f| / max(|a|, |f|, 1e-8)``.

    Raises:
        NumericError: if the loss is non-finite at a perturbed point.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(params, dtype=np.float64)
    _, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        up, _ = fn(x.copy())
        x[i] = orig - eps
        down, _ = fn(x.copy())
        x[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"grad_check: non-finite loss when perturbing coordinate {i}")
        numeric = (up - down) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
