"""Shared numerical primitives: non-negative matrices, beta-divergences and
weighted power means (linear and log domain)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-12

# exponents closer to zero than this use the geometric-mean limit
GEOMETRIC_THRESHOLD = 1e-8


@dataclass(frozen=True)
class EpsilonPolicy:
    """Floor applied to denominators that are exact ratios in the math."""

    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


def as_nonneg(X, name: str = "matrix") -> np.ndarray:
    """Return ``X`` as a 2-D float64 array, checking every entry is >= 0."""
    A = np.asarray(X, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    if np.any(A < 0):
        raise ValueError(f"{name} has negative entries")
    return A


def beta_divergence(X, Y, beta: float = 1.0) -> float:
    """Sum of elementwise beta-divergences d_beta(x | y).

    beta=1 is the generalized KL divergence (with 0 log 0 = 0) and beta=2 the
    plain squared error, without the conventional 1/2 factor.
    """
    X = as_nonneg(X, "X")
    Y = as_nonneg(Y, "Y")
    if X.shape != Y.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {Y.shape}")
    if beta < 0:
        raise ValueError("beta must be >= 0")

    if beta == 2:
        return float(np.sum((X - Y) ** 2))
    if beta == 1:
        pos = X > 0
        if np.any(Y[pos] <= 0):
            raise ValueError("Y must be > 0 wherever X > 0 for beta=1")
        xlogxy = np.zeros_like(X)
        xlogxy[pos] = X[pos] * np.log(X[pos] / Y[pos])
        return float(np.sum(xlogxy - X + Y))
    if np.any(Y <= 0):
        raise ValueError(f"Y must be strictly positive for beta={beta}")
    if beta == 0:
        if np.any(X <= 0):
            raise ValueError("X must be strictly positive for beta=0")
        R = X / Y
        return float(np.sum(R - np.log(R) - 1.0))
    d = (X**beta + (beta - 1) * Y**beta - beta * X * Y ** (beta - 1)) / (beta * (beta - 1))
    return float(np.sum(d))


def _check_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
    return w


def power_mean(w, x, a: float) -> float:
    """Weighted power mean ``(sum_n w_n x_n**a) ** (1/a)``.

    ``a`` may be ``+inf`` / ``-inf`` (max / min over the support of ``w``);
    ``|a| < 1e-8`` gives the weighted geometric mean.
    """
    w = _check_weights(w)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != w.shape:
        raise ValueError("weights and values must have the same length")
    if np.any(x <= 0):
        raise ValueError("power mean needs strictly positive values")

    support = w > 0
    if np.isposinf(a):
        return float(np.max(x[support]))
    if np.isneginf(a):
        return float(np.min(x[support]))
    if abs(a) >= 1e-3:
        ws = w[support] / w[support].sum()
        return float(np.sum(ws * x[support] ** a) ** (1.0 / a))
    # near the geometric limit the direct form loses precision
    return float(np.exp(_log_power_mean(w, np.log(x), a)))


def log_power_mean(w, z, a: float):
    """Log-domain power mean ``(1/a) log sum_n w_n exp(a z_n)``.

    ``z`` may carry leading batch dimensions; the mean is taken over the
    last axis, which must match ``w``. Evaluated with max-subtraction so large
    ``a * z`` does not overflow.
    """
    w = _check_weights(w)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != w.shape[0]:
        raise ValueError("weights and values must have the same length")
    return _log_power_mean(w, z, a)


def _log_power_mean(w: np.ndarray, z: np.ndarray, a: float):
    support = w > 0
    zs = z[..., support]
    ws = w[support] / w[support].sum()
    if np.isposinf(a):
        out = zs.max(axis=-1)
    elif np.isneginf(a):
        out = zs.min(axis=-1)
    elif abs(a) < GEOMETRIC_THRESHOLD:
        out = zs @ ws
    else:
        # expm1/log1p keep full precision when a is close to zero
        ref = zs.max(axis=-1, keepdims=True) if a > 0 else zs.min(axis=-1, keepdims=True)
        s = np.expm1(a * (zs - ref)) @ ws
        out = ref[..., 0] + np.log1p(s) / a
    return float(out) if np.ndim(out) == 0 else out
