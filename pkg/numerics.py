"""
Dense float64 kernels shared by every layer.

All tensors are ``numpy.ndarray`` of dtype float64. Randomness always comes
from ``numpy.random.Generator`` over the PCG64 bit generator, seeded
explicitly; the platform default generator is never used.
"""

from typing import Callable, List, Sequence, Tuple, Union

import numpy as np

DTYPE = np.float64
RNG_ALGORITHM = "PCG64"
GRAD_CHECK_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when a kernel or an evaluated function produces NaN/Inf."""


def make_rng(seed: int) -> np.random.Generator:
    """Create the portable generator used everywhere in the package."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, count: int) -> List[np.random.Generator]:
    """Independent generators derived from one seed, one per consumer."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return [np.random.Generator(np.random.PCG64(child)) for child in np.random.SeedSequence(seed).spawn(count)]


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def stable_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """
    Softmax along an axis with the max subtracted first.

    Args:
        v: Finite scores, non-empty along ``axis``
        axis: Axis to normalise over

    Returns:
        Non-negative weights summing to one along ``axis``
    """
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty input")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("softmax input contains NaN or Inf")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def softmax_backward(weights: np.ndarray, d_weights: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. the scores given the softmax output and its upstream gradient."""
    inner = np.sum(weights * d_weights, axis=axis, keepdims=True)
    return weights * (d_weights - inner)


def init_normal(shape: Union[int, Sequence[int]], rng: np.random.Generator, std: float = 0.1) -> np.ndarray:
    """
    I.i.d. N(0, std^2) tensor.

    Args:
        shape: Positive dimensions
        rng: Generator from ``make_rng``
        std: Standard deviation (0.1 for every model parameter)

    Returns:
        float64 array of the requested shape
    """
    dims: Tuple[int, ...] = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
    if len(dims) == 0 or any(int(d) <= 0 for d in dims):
        raise ValueError(f"init_normal needs positive dimensions, got {dims}")
    return rng.normal(0.0, std, size=dims).astype(DTYPE, copy=False)


def numerical_gradient(f: Callable[[np.ndarray], float], p: np.ndarray, eps: float = GRAD_CHECK_EPS) -> np.ndarray:
    """Central finite differences of a scalar function."""
    p = np.array(p, dtype=DTYPE)
    grad = np.zeros_like(p)
    for i in range(p.size):
        original = p.flat[i]
        p.flat[i] = original + eps
        f_plus = f(p)
        p.flat[i] = original - eps
        f_minus = f(p)
        p.flat[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"function is not finite around coordinate {i}")
        grad.flat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def grad_check(f: Callable[[np.ndarray], float], p: np.ndarray, analytic_grad: np.ndarray,
               eps: float = GRAD_CHECK_EPS) -> float:
    """
    Compare an analytic gradient with central differences.

    Returns:
        max_i |g_num,i - g_ana,i| / max(1, |g_num,i|, |g_ana,i|)
    """
    analytic = np.asarray(analytic_grad, dtype=DTYPE)
    if analytic.shape != np.shape(p):
        raise ValueError(f"gradient shape {analytic.shape} does not match parameter shape {np.shape(p)}")
    numeric = numerical_gradient(f, p, eps)
    scale = np.maximum(1.0, np.maximum(np.abs(numeric), np.abs(analytic)))
    return float(np.max(np.abs(numeric - analytic) / scale))
