"""Dense numerics shared by the training modules.

Tensors are plain ``float64`` numpy arrays. The optimizer is AMSGrad with
bias correction on both moments; its moments double as the diagonal
quadratic loss model used by the quantization and pruning steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SINGULAR_COND = 1e12


class ShapeMismatchError(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; every stochastic op takes one of these."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))


def least_squares(B, w, ridge: float = 0.0) -> np.ndarray:
    """Solve ``argmin_a ||B a - w||^2 + ridge ||a||^2`` via the normal equations."""
    B = np.asarray(B, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if B.ndim != 2 or w.shape != (B.shape[0],):
        raise ShapeMismatchError(f"B {B.shape} incompatible with w {w.shape}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    gram = B.T @ B
    if ridge:
        gram = gram + ridge * np.eye(gram.shape[0])
    if gram.size and np.linalg.cond(gram) > SINGULAR_COND:
        raise SingularSystemError("regularized Gram matrix is numerically singular")
    return np.linalg.solve(gram, B.T @ w)


@dataclass
class AmsGradState:
    m: np.ndarray
    v: np.ndarray
    v_max: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, shape, **hyper) -> "AmsGradState":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape), 0, **hyper)

    @property
    def shape(self):
        return self.m.shape

    def first_moment(self) -> np.ndarray:
        """Bias-corrected first moment."""
        if self.step_count == 0:
            return np.zeros_like(self.m)
        return self.m / (1.0 - self.beta1**self.step_count)

    def second_moment(self) -> np.ndarray:
        """Bias-corrected running-max second moment."""
        if self.step_count == 0:
            return np.zeros_like(self.v_max)
        return self.v_max / (1.0 - self.beta2**self.step_count)

    def curvature(self) -> np.ndarray:
        """Diagonal of the quadratic model, ``sqrt(v_hat) + eps`` (never zero)."""
        return np.sqrt(self.second_moment()) + self.epsilon

    def copy(self) -> "AmsGradState":
        return AmsGradState(self.m.copy(), self.v.copy(), self.v_max.copy(),
                            self.step_count, self.beta1, self.beta2, self.epsilon)

    def select(self, keep) -> "AmsGradState":
        """Moments restricted to the entries in ``keep`` (index or boolean mask)."""
        return AmsGradState(self.m[keep], self.v[keep], self.v_max[keep],
                            self.step_count, self.beta1, self.beta2, self.epsilon)


def amsgrad_step(state: AmsGradState, grad, lr: float):
    """One AMSGrad step. Returns the new state and the additive update."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.shape:
        raise ShapeMismatchError(f"gradient {grad.shape} vs state {state.shape}")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    v_max = np.maximum(state.v_max, v)
    new = AmsGradState(m, v, v_max, t, b1, b2, state.epsilon)
    m_hat = m / (1.0 - b1**t)
    v_hat = v_max / (1.0 - b2**t)
    delta = -lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new, delta


def finite_diff_grad(f, theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(theta)
        flat[i] = orig - h
        down = f(theta)
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(theta.shape)
