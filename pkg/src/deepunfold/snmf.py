"""Sparse NMF baseline: activation inference, per-source basis training and
Wiener-style reconstruction.

Inputs are used at their native scale. The sparsity weight ``mu`` interacts
with the magnitude of the features, so the same ``mu`` behaves differently on
rescaled spectrograms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DEFAULT_EPS, as_nonneg, beta_divergence


@dataclass(frozen=True)
class SnmfConfig:
    beta1: float = 1.0
    mu: float = 5.0
    iters: int = 25
    seed: int = 0
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass
class SourceBases:
    """Per-source basis matrices, stacked side by side in source order."""

    bases: list[np.ndarray]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.bases = [as_nonneg(W, "basis") for W in self.bases]
        if not self.bases:
            raise ValueError("need at least one source")
        rows = {W.shape[0] for W in self.bases}
        if len(rows) != 1:
            raise ValueError(f"all bases need the same row count, got {sorted(rows)}")
        if not self.names:
            self.names = [f"source{l}" for l in range(len(self.bases))]
        if len(self.names) != len(self.bases):
            raise ValueError("one name per source required")

    @property
    def n_sources(self) -> int:
        return len(self.bases)

    @property
    def rows(self) -> int:
        return self.bases[0].shape[0]

    @property
    def ranks(self) -> list[int]:
        return [W.shape[1] for W in self.bases]

    @property
    def stacked(self) -> np.ndarray:
        return np.hstack(self.bases)

    @property
    def ranges(self) -> list[slice]:
        """Row ranges of each source inside a stacked activation matrix."""
        out, start = [], 0
        for r in self.ranks:
            out.append(slice(start, start + r))
            start += r
        return out

    def last_rows(self, F: int) -> "SourceBases":
        if F > self.rows:
            raise ValueError(f"cannot take {F} rows from {self.rows}-row bases")
        return SourceBases([W[-F:].copy() for W in self.bases], list(self.names))


def normalize_columns(W) -> np.ndarray:
    """Scale every column to unit L2 norm."""
    W = as_nonneg(W, "W")
    norms = np.sqrt(np.sum(W * W, axis=0))
    if np.any(norms == 0):
        raise ValueError("cannot normalize an all-zero column")
    return W / norms


def init_activations(rank: int, n_frames: int, seed) -> np.ndarray:
    """Activations drawn uniformly from (0, 1]."""
    rng = np.random.default_rng(seed)
    return 1.0 - rng.random((rank, n_frames))


def h_update_step(W, M, H, beta1: float = 1.0, mu: float = 0.0, eps: float = DEFAULT_EPS):
    """One multiplicative update of the activations for D_beta(M|WH) + mu|H|_1."""
    W = np.asarray(W, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if W.shape[0] != M.shape[0] or W.shape[1] != H.shape[0] or H.shape[1] != M.shape[1]:
        raise ValueError(f"shape mismatch: W{W.shape} H{H.shape} M{M.shape}")
    V = np.maximum(W @ H, eps)
    if beta1 == 1:
        num = W.T @ (M / V)
        den = W.sum(axis=0)[:, None] + mu
    elif beta1 == 2:
        num = W.T @ M
        den = W.T @ V + mu
    else:
        num = W.T @ (M * V ** (beta1 - 2))
        den = W.T @ V ** (beta1 - 1) + mu
    return np.maximum(H * num / np.maximum(den, eps), eps)


def sparse_objective(W, M, H, beta1: float, mu: float) -> float:
    """``d(M | WH) + mu |H|_1``, the objective the multiplicative updates descend.

    At beta=2 the updates carry ``mu`` unscaled in the denominator, which
    majorizes the halved squared error, so the divergence term is halved there.
    """
    scale = 0.5 if beta1 == 2 else 1.0
    return scale * beta_divergence(M, W @ H, beta1) + mu * float(np.sum(H))


def infer_activations(W, M, config: SnmfConfig, H0=None, return_trace: bool = False):
    """Run ``config.iters`` activation updates from a seeded random start.

    With ``return_trace`` the objective after every update is returned too.
    """
    W = as_nonneg(W, "W")
    M = as_nonneg(M, "M")
    H = init_activations(W.shape[1], M.shape[1], config.seed) if H0 is None else np.array(H0, dtype=np.float64)
    trace = []
    for _ in range(config.iters):
        H = h_update_step(W, M, H, config.beta1, config.mu, config.eps)
        if return_trace:
            trace.append(sparse_objective(W, M, H, config.beta1, config.mu))
    return (H, trace) if return_trace else H


def _w_step(W, S, H, beta, eps):
    V = np.maximum(W @ H, eps)
    if beta == 1:
        num = (S / V) @ H.T
        den = np.broadcast_to(H.sum(axis=1), W.shape)
    elif beta == 2:
        num = S @ H.T
        den = V @ H.T
    else:
        num = (S * V ** (beta - 2)) @ H.T
        den = V ** (beta - 1) @ H.T
    return np.maximum(W * num / np.maximum(den, eps), eps)


def train_bases(S, R: int, config: SnmfConfig, return_trace: bool = False):
    """Learn ``R`` column-normalized sparse-NMF bases for one source.

    Bases start from ``R`` distinct training frames. Each iteration updates the
    activations, then takes a multiplicative basis step followed by column
    renormalization with the inverse scale pushed into the activations. The
    basis step is kept only if it does not raise the objective; otherwise the
    plain renormalized step is tried and, failing that, the bases stay put, so
    the returned objective trace never increases.
    """
    S = as_nonneg(S, "S")
    n_frames = S.shape[1]
    if R < 1:
        raise ValueError("R must be >= 1")
    if R > n_frames:
        raise ValueError(f"need at least R={R} exemplar frames, got {n_frames}")
    beta, mu, eps = config.beta1, config.mu, config.eps

    rng = np.random.default_rng(config.seed)
    idx = rng.choice(n_frames, size=R, replace=False)
    W = normalize_columns(np.maximum(S[:, idx], eps))
    H = 1.0 - rng.random((R, n_frames))

    trace = []
    for _ in range(config.iters):
        H = h_update_step(W, S, H, beta, mu, eps)
        current = sparse_objective(W, S, H, beta, mu)

        W_raw = _w_step(W, S, H, beta, eps)
        norms = np.sqrt(np.sum(W_raw * W_raw, axis=0))
        W_new = W_raw / norms
        for H_new in (H * norms[:, None], H):
            value = sparse_objective(W_new, S, H_new, beta, mu)
            if value <= current:
                W, H, current = W_new, H_new, value
                break
        trace.append(current)
    return (W, trace) if return_trace else W


def wiener_reconstruct(bases: SourceBases, H_all, M, l: int, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Mask the mixture with source ``l``'s share of the model spectrum."""
    H_all = np.asarray(H_all, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    W = bases.stacked
    if W.shape[1] != H_all.shape[0] or W.shape[0] != M.shape[0] or H_all.shape[1] != M.shape[1]:
        raise ValueError(f"shape mismatch: W{W.shape} H{H_all.shape} M{M.shape}")
    if not 0 <= l < bases.n_sources:
        raise ValueError(f"source index {l} out of range")
    part = bases.ranges[l]
    Lam_l = bases.bases[l] @ H_all[part]
    Lam = np.maximum(W @ H_all, eps)
    return Lam_l / Lam * M


def separate(bases: SourceBases, M_stacked, M_last, config: SnmfConfig, H0=None) -> list[np.ndarray]:
    """Baseline separation: infer with the context-stacked bases, reconstruct
    only the target (last) frame of each context window."""
    H = infer_activations(bases.stacked, M_stacked, config, H0=H0)
    last = bases.last_rows(np.asarray(M_last).shape[0])
    return [wiener_reconstruct(last, H, M_last, l, config.eps) for l in range(bases.n_sources)]
