"""Deep NMF: K unfolded KL multiplicative-update layers whose final C
parameter sets are untied and trained discriminatively.

Layer indexing
--------------
``H[0]`` is the random start. Update ``k`` (``k = 0 .. K-1``) maps ``H[k]`` to
``H[k+1]`` with the bases of layer ``k``; layer ``K`` holds the reconstruction
bases used by the Wiener mask. Layers ``K-C+1 .. K`` are untied: they carry
their own single-frame (F-row), unnormalized bases and see only the last frame
``M_last`` of the context-stacked mixture. All lower layers share the
column-normalized context bases ``Wbar`` and see ``M_stacked``. Layer 0 is
therefore always tied, ``C = 1`` trains only the reconstruction bases and
``C = 0`` is the plain sparse NMF pipeline.

Gradients are kept as (positive, negative) pairs of non-negative matrices
whose difference is the gradient of ``0.5 * sum_l gamma_l ||S~^l - S^l||^2``;
weights are updated by the ratio of the negative to the positive part.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import snmf
from .archive import load_archive, save_archive
from .numerics import DEFAULT_EPS, as_nonneg
from .snmf import SnmfConfig, SourceBases

log = logging.getLogger(__name__)


@dataclass
class GradPair:
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        if self.pos.shape != self.neg.shape:
            raise ValueError(f"pos {self.pos.shape} and neg {self.neg.shape} differ")
        if np.any(self.pos < 0) or np.any(self.neg < 0):
            raise ValueError("gradient parts must be non-negative")

    @property
    def grad(self) -> np.ndarray:
        return self.pos - self.neg

    @classmethod
    def zeros(cls, shape) -> "GradPair":
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class DeepNmfNetwork:
    K: int
    C: int
    Wbar: SourceBases
    F: int
    untied: dict[int, np.ndarray] = field(default_factory=dict)
    mu: float = 5.0
    gamma: tuple[float, ...] = ()
    speech: int = 0
    seed: int = 0
    eps: float = DEFAULT_EPS
    beta1: float = 1.0
    beta2: float = 2.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0 <= self.C <= self.K:
            raise ValueError(f"need 0 <= C <= K, got C={self.C}, K={self.K}")
        if self.F > self.Wbar.rows:
            raise ValueError("frame size F exceeds the context basis height")
        if not self.gamma:
            self.gamma = tuple(1.0 if l == self.speech else 0.0 for l in range(self.Wbar.n_sources))
        if len(self.gamma) != self.Wbar.n_sources:
            raise ValueError("one gamma weight per source required")
        expected = set(self.trained_layers)
        if set(self.untied) != expected:
            raise ValueError(f"untied layers {sorted(self.untied)} != {sorted(expected)}")
        for k, W in self.untied.items():
            W = as_nonneg(W, f"W[{k}]")
            if W.shape != (self.F, sum(self.Wbar.ranks)):
                raise ValueError(f"W[{k}] has shape {W.shape}")
            self.untied[k] = W

    @property
    def trained_layers(self) -> list[int]:
        return list(range(self.K - self.C + 1, self.K + 1))

    @property
    def ranges(self) -> list[slice]:
        return self.Wbar.ranges

    @property
    def R(self) -> int:
        return sum(self.Wbar.ranks)

    def is_untied(self, k: int) -> bool:
        return k in self.untied

    def basis(self, k: int) -> np.ndarray:
        if k in self.untied:
            return self.untied[k]
        if k == self.K:
            return self.Wbar.stacked[-self.F:]
        return self.Wbar.stacked

    def snmf_config(self, seed=None) -> SnmfConfig:
        return SnmfConfig(beta1=self.beta1, mu=self.mu, iters=self.K,
                          seed=self.seed if seed is None else seed, eps=self.eps)


@dataclass
class LayerTrace:
    """Forward-pass caches: activations, model spectra and source estimates."""

    H: list[np.ndarray]
    Lambda: list[np.ndarray]
    M_stacked: np.ndarray
    M_last: np.ndarray
    Shat: list[np.ndarray]

    def mixture(self, net: DeepNmfNetwork, k: int) -> np.ndarray:
        return self.M_last if (net.is_untied(k) or k == net.K) else self.M_stacked


def build_network(Wbar: SourceBases, K: int, C: int, mu: float = 5.0, F: int | None = None,
                  speech: int = 0, seed: int = 0, eps: float = DEFAULT_EPS) -> DeepNmfNetwork:
    """Untie the last ``C`` layers, each starting from the last ``F`` rows of
    the context bases."""
    if C > K:
        raise ValueError(f"C={C} exceeds K={K}")
    F = Wbar.rows if F is None else F
    init = Wbar.stacked[-F:]
    untied = {k: init.copy() for k in range(K - C + 1, K + 1)}
    return DeepNmfNetwork(K=K, C=C, Wbar=Wbar, F=F, untied=untied, mu=mu,
                          speech=speech, seed=seed, eps=eps)


def _reconstruct(net, W, H, M):
    Lam = np.maximum(W @ H, net.eps)
    return [W[:, part] @ H[part] / Lam * M for part in net.ranges]


def forward(net: DeepNmfNetwork, M_stacked, M_last, seed=None, H0=None) -> LayerTrace:
    M_stacked = as_nonneg(M_stacked, "M_stacked")
    M_last = as_nonneg(M_last, "M_last")
    if M_stacked.shape[0] != net.Wbar.rows or M_last.shape[0] != net.F:
        raise ValueError(f"mixture shapes {M_stacked.shape}/{M_last.shape} do not fit the network")
    if M_stacked.shape[1] != M_last.shape[1]:
        raise ValueError("stacked and last-frame mixtures differ in frame count")
    if H0 is None:
        H0 = snmf.init_activations(net.R, M_last.shape[1], net.seed if seed is None else seed)
    H = [np.asarray(H0, dtype=np.float64)]
    Lam = []
    for k in range(net.K):
        W = net.basis(k)
        M = M_last if net.is_untied(k) else M_stacked
        Lam.append(np.maximum(W @ H[k], net.eps))
        H.append(snmf.h_update_step(W, M, H[k], net.beta1, net.mu, net.eps))
    W = net.basis(net.K)
    Lam.append(np.maximum(W @ H[net.K], net.eps))
    Shat = _reconstruct(net, W, H[net.K], M_last)
    return LayerTrace(H=H, Lambda=Lam, M_stacked=M_stacked, M_last=M_last, Shat=Shat)


def _targets(net, S_target):
    if isinstance(S_target, np.ndarray):
        return {net.speech: S_target}
    if isinstance(S_target, dict):
        return S_target
    return dict(enumerate(S_target))


def loss(net: DeepNmfNetwork, trace: LayerTrace, S_target) -> float:
    """sum_l gamma_l * D_2(S^l | S~^l), without the 1/2 factor."""
    targets = _targets(net, S_target)
    total = 0.0
    for l, g in enumerate(net.gamma):
        if g:
            total += g * float(np.sum((trace.Shat[l] - targets[l]) ** 2))
    return total


def _top_parts(net, trace, S_target):
    """Per-source (pos, neg) coefficient matrices of the Wiener layer, before
    projection onto H (multiply by W^T) or W (multiply by H^T)."""
    M = trace.M_last
    W = net.basis(net.K)
    H = trace.H[net.K]
    Lam = trace.Lambda[net.K]
    targets = _targets(net, S_target)
    coef_pos = np.zeros((net.Wbar.n_sources, net.F, M.shape[1]))
    coef_neg = np.zeros_like(coef_pos)
    Lam2 = Lam * Lam
    Lam3 = Lam2 * Lam
    for l, g in enumerate(net.gamma):
        if not g:
            continue
        S = np.asarray(targets[l], dtype=np.float64)
        part = net.ranges[l]
        Lam_l = W[:, part] @ H[part]
        Lam_o = sum((W[:, p] @ H[p] for m, p in enumerate(net.ranges) if m != l),
                    np.zeros_like(Lam))
        for m in range(net.Wbar.n_sources):
            if m == l:
                coef_pos[m] += g * M * M * Lam_l * Lam_o / Lam3
                coef_neg[m] += g * M * S * Lam_o / Lam2
            else:
                coef_pos[m] += g * M * S * Lam_l / Lam2
                coef_neg[m] += g * M * M * Lam_l * Lam_l / Lam3
    return coef_pos, coef_neg


def top_layer_gradient(trace: LayerTrace, S_target, net: DeepNmfNetwork) -> GradPair:
    """Split gradient of the Wiener-filtered squared error w.r.t. ``H[K]``."""
    if net.beta2 != 2:
        raise ValueError("only the squared-error top layer is supported")
    W = net.basis(net.K)
    if np.shape(trace.H[net.K]) != (W.shape[1], trace.M_last.shape[1]):
        raise ValueError("trace does not match the network")
    coef_pos, coef_neg = _top_parts(net, trace, S_target)
    pos = np.zeros_like(trace.H[net.K])
    neg = np.zeros_like(pos)
    for m, part in enumerate(net.ranges):
        pos[part] = W[:, part].T @ coef_pos[m]
        neg[part] = W[:, part].T @ coef_neg[m]
    return GradPair(pos, neg)


def _layer_terms(k, trace, net):
    if not net.is_untied(k) or k >= net.K:
        raise ValueError(f"layer {k} is not an untied analysis layer")
    W = net.basis(k)
    H = trace.H[k]
    M = trace.M_last
    Lam = trace.Lambda[k]
    a = W.sum(axis=0) + net.mu           # alpha_r + mu
    Q = M / Lam
    Q2 = Q / Lam
    P = W.T @ Q                          # W^T (M / Lambda)
    return W, H, a, Q, Q2, P


def backprop_h(k: int, grad_next: GradPair, trace: LayerTrace, net: DeepNmfNetwork) -> GradPair:
    """Carry the split gradient from ``H[k+1]`` down to ``H[k]`` through an
    untied KL update layer."""
    W, H, a, Q, Q2, P = _layer_terms(k, trace, net)
    Wa = W / a
    den = a[:, None]
    Gp, Gn = grad_next.pos, grad_next.neg
    pos = P * Gp / den + W.T @ (Q2 * (Wa @ (H * Gn)))
    neg = P * Gn / den + W.T @ (Q2 * (Wa @ (H * Gp)))
    return GradPair(pos, neg)


def grad_w(k: int, grad_next: GradPair, trace: LayerTrace, net: DeepNmfNetwork,
           S_target=None) -> GradPair:
    """Split gradient w.r.t. the bases of untied layer ``k``.

    For ``k < K`` ``grad_next`` is the split gradient at ``H[k+1]``. For the
    reconstruction layer ``k == K`` the gradient comes straight from the
    Wiener output and ``S_target`` is required instead.
    """
    if k == net.K:
        if S_target is None:
            raise ValueError("the reconstruction layer gradient needs S_target")
        if not net.is_untied(k):
            raise ValueError(f"layer {k} is tied")
        coef_pos, coef_neg = _top_parts(net, trace, S_target)
        H = trace.H[net.K]
        pos = np.zeros_like(net.basis(k))
        neg = np.zeros_like(pos)
        for m, part in enumerate(net.ranges):
            pos[:, part] = coef_pos[m] @ H[part].T
            neg[:, part] = coef_neg[m] @ H[part].T
        return GradPair(pos, neg)

    W, H, a, Q, Q2, P = _layer_terms(k, trace, net)
    Wa = W / a
    den = a[:, None]
    Gp, Gn = grad_next.pos, grad_next.neg
    shared = W * (Q2 @ (H * H * (Gp + Gn) / den).T)

    def half(G_same, G_cross):
        t1 = Q @ (H * G_same / den).T
        t2 = (Q2 * (Wa @ (H * G_cross))) @ H.T
        t4 = np.sum(H * P * G_cross, axis=1) / (a * a)
        return t1 + t2 - shared + t4[None, :]

    # the subtracted term cancels part of t1/t2 exactly; clip rounding residue
    return GradPair(np.maximum(half(Gp, Gn), 0.0), np.maximum(half(Gn, Gp), 0.0))


def multiplicative_step(W, g: GradPair, eps: float = DEFAULT_EPS) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.shape != g.pos.shape:
        raise ValueError(f"shape mismatch: W{W.shape} vs gradient {g.pos.shape}")
    return W * (g.neg + eps) / (g.pos + eps)


def backward(net: DeepNmfNetwork, trace: LayerTrace, S_target) -> dict[int, GradPair]:
    """Split gradients for every untied layer."""
    grads = {}
    if net.C == 0:
        return grads
    grads[net.K] = grad_w(net.K, None, trace, net, S_target=S_target)
    G = top_layer_gradient(trace, S_target, net)
    for k in range(net.K - 1, net.K - net.C, -1):
        grads[k] = grad_w(k, G, trace, net)
        if k - 1 > net.K - net.C:
            G = backprop_h(k, G, trace, net)
    return grads


@dataclass
class TrainResult:
    net: DeepNmfNetwork
    losses: list[float]


def _utterance_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def train(net: DeepNmfNetwork, dataset, epochs: int, seed: int | None = None) -> TrainResult:
    """Full-batch multiplicative training of the untied layers.

    ``dataset`` is a list of ``(M_stacked, M_last, S_speech)`` triples. Each
    utterance gets its own start activations from a seed derived from
    ``seed`` (default: the network seed) and its position in the list; the
    same start is reused in every epoch. The returned loss trace holds the
    loss before each epoch's update and, last, the loss of the final network.
    """
    if net.C == 0:
        raise ValueError("C=0: the network has no trainable layers")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    base = net.seed if seed is None else seed
    if not dataset:
        raise ValueError("empty dataset")

    M_stacked = np.hstack([np.asarray(d[0], dtype=np.float64) for d in dataset])
    M_last = np.hstack([np.asarray(d[1], dtype=np.float64) for d in dataset])
    S = np.hstack([np.asarray(d[2], dtype=np.float64) for d in dataset])
    H0 = np.hstack([
        snmf.init_activations(net.R, np.shape(d[1])[1], _utterance_seed(base, i))
        for i, d in enumerate(dataset)
    ])

    net = replace(net, untied={k: W.copy() for k, W in net.untied.items()})
    # tied layers never change, so the activations entering the first untied
    # layer are computed once
    prefix = net.K - net.C + 1
    H = H0
    for _ in range(prefix):
        H = snmf.h_update_step(net.Wbar.stacked, M_stacked, H, net.beta1, net.mu, net.eps)

    losses = []
    for epoch in range(epochs + 1):
        trace = _forward_from(net, prefix, H, M_stacked, M_last)
        losses.append(loss(net, trace, S))
        if epoch == epochs:
            break
        grads = backward(net, trace, S)
        for k, g in grads.items():
            net.untied[k] = multiplicative_step(net.untied[k], g, net.eps)
        log.debug("epoch %d loss %.6g", epoch, losses[-1])
    return TrainResult(net, losses)


def _forward_from(net, start, H_start, M_stacked, M_last) -> LayerTrace:
    """Forward pass starting at ``H[start]``; lower entries are left as None."""
    H = [None] * start + [H_start]
    Lam = [None] * start
    for k in range(start, net.K):
        W = net.basis(k)
        M = M_last if net.is_untied(k) else M_stacked
        Lam.append(np.maximum(W @ H[k], net.eps))
        H.append(snmf.h_update_step(W, M, H[k], net.beta1, net.mu, net.eps))
    W = net.basis(net.K)
    Lam.append(np.maximum(W @ H[net.K], net.eps))
    Shat = _reconstruct(net, W, H[net.K], M_last)
    return LayerTrace(H=H, Lambda=Lam, M_stacked=M_stacked, M_last=M_last, Shat=Shat)


def separate(net: DeepNmfNetwork, M_stacked, M_last, seed=None) -> list[np.ndarray]:
    return forward(net, M_stacked, M_last, seed=seed).Shat


def parameter_counts(T: int, F: int, R: int, C: int) -> tuple[int, int]:
    """Discriminatively trained and total parameter counts, ``(C F R, (T + C) F R)``."""
    for name, v in (("T", T), ("F", F), ("R", R), ("C", C)):
        if v < 0:
            raise ValueError(f"{name} must be >= 0")
    return C * F * R, (T + C) * F * R


def save_network(net: DeepNmfNetwork, directory, extra: dict | None = None):
    manifest = {
        "kind": "deep_nmf",
        "K": net.K,
        "C": net.C,
        "F": net.F,
        "rows": net.Wbar.rows,
        "ranks": net.Wbar.ranks,
        "sources": net.Wbar.names,
        "mu": net.mu,
        "beta1": net.beta1,
        "beta2": net.beta2,
        "gamma": list(net.gamma),
        "speech": net.speech,
        "seed": net.seed,
        "eps": net.eps,
    }
    manifest.update(extra or {})
    matrices = {name: W for name, W in zip(net.Wbar.names, net.Wbar.bases)}
    matrices.update({f"layer{k}": W for k, W in net.untied.items()})
    return save_archive(directory, manifest, matrices)


def load_network(directory) -> tuple[DeepNmfNetwork, dict]:
    manifest, matrices = load_archive(directory)
    names = manifest["sources"]
    Wbar = SourceBases([matrices[n] for n in names], list(names))
    K = int(manifest.get("K", 0))
    C = int(manifest.get("C", 0))
    untied = {k: matrices[f"layer{k}"] for k in range(K - C + 1, K + 1)} if C else {}
    net = DeepNmfNetwork(
        K=K, C=C, Wbar=Wbar, F=int(manifest["F"]), untied=untied,
        mu=float(manifest["mu"]), gamma=tuple(manifest.get("gamma", ())),
        speech=int(manifest.get("speech", 0)), seed=int(manifest.get("seed", 0)),
        eps=float(manifest.get("eps", DEFAULT_EPS)),
    )
    return net, manifest
