"""Dense float64 kernels shared by the model and the analyses.

Everything here is a pure function of its inputs.  Binary operations check
shapes explicitly and refuse to broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class ShapeError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    """Raised when a cosine is requested for a zero-norm vector."""


class NondeterministicLossError(RuntimeError):
    pass


def as_vector(v, name="v") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name}: expected a vector, got shape {arr.shape}")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what="operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: cannot apply {m.shape} to {v.shape}")
    return m @ v


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_same_shape(a, b, "hadamard")
    return a * b


def sigmoid(v) -> np.ndarray:
    """Logistic function, evaluated without overflow for large |v|."""
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh_act(v) -> np.ndarray:
    return np.tanh(np.asarray(v, dtype=np.float64))


def softmax(v) -> np.ndarray:
    v = as_vector(v)
    shifted = np.exp(v - v.max())
    return shifted / shifted.sum()


def log_softmax(v) -> np.ndarray:
    v = as_vector(v)
    shifted = v - v.max()
    return shifted - np.log(np.exp(shifted).sum())


def cosine_similarity(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    check_same_shape(a, b, "cosine")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine undefined for a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def cosine_distance(a, b) -> float:
    """``1 - cos(a, b)``, clamped to ``[0, 2]`` against rounding."""
    return float(min(2.0, max(0.0, 1.0 - cosine_similarity(a, b))))


def cosine_distance_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Return the cosine distance and its gradient with respect to ``a``.

    The distance is *not* clamped here so that the value and the gradient
    describe the same smooth function.
    """
    check_same_shape(a, b, "cosine")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine undefined for a zero-norm vector")
    cos = np.dot(a, b) / (na * nb)
    grad = -(b / (na * nb) - cos * a / (na * na))
    return float(1.0 - cos), grad


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    epsilon: float
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    @property
    def failing(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if v >= self.tolerance]


def grad_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` where ``grads`` has the
    same keys and shapes as ``params``.  Parameters are perturbed in place
    and restored afterwards.  The relative error of an element is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps elements whose true
    gradient is (near) zero from amplifying round-off.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    loss0, grads = loss_fn(params)
    loss1, _ = loss_fn(params)
    if loss0 != loss1:
        raise NondeterministicLossError(
            f"loss_fn returned {loss0!r} then {loss1!r} for identical parameters"
        )
    report = GradCheckReport(epsilon=epsilon, tolerance=tolerance)
    for name, theta in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {analytic.shape}, expected {theta.shape}")
        worst, worst_ix = 0.0, ()
        for ix in np.ndindex(theta.shape):
            orig = theta[ix]
            theta[ix] = orig + epsilon
            fp = loss_fn(params)[0]
            theta[ix] = orig - epsilon
            fm = loss_fn(params)[0]
            theta[ix] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            a = analytic[ix]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if rel > worst:
                worst, worst_ix = rel, ix
        report.max_rel_error[name] = float(worst)
        report.worst_index[name] = worst_ix
    return report
