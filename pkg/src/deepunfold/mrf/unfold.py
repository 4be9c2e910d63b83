"""Unfolded, untied MRF inference networks.

Covers the binary MRF <-> sigmoid network conversions, the binary
generalized (MF/BP interpolating) activation in a, b, c form, the log-domain
softmax/max activation, and a trainable unfolded message-passing network.

In the unfolded network every layer has its own potentials, gates and
message style. Messages run feed-forward: the backward message ``m_{i->j}``
is taken as uniform, so it drops out after normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logit, logsumexp

from ..archive import load_archive, save_archive
from ..numerics import GEOMETRIC_THRESHOLD
from .autodiff import Tensor, as_tensor, parameter, stack
from .core import LAMBDA_LIMIT, MessageStyle, PairwiseMrf


@dataclass
class SigmoidNetParams:
    """``p(h|v) ∝ exp(h'Ah/2 + h'b + h'Cv)`` for binary h, v."""

    A: np.ndarray
    b: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64).ravel()
        n = self.b.size
        self.C = np.asarray(self.C, dtype=np.float64).reshape(n, -1) if n else np.zeros((0, 0))
        if self.A.shape != (n, n):
            raise ValueError(f"A must be {n}x{n}, got {self.A.shape}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.C))):
            raise ValueError("sigmoid parameters must be finite")

    @property
    def n_hidden(self) -> int:
        return self.b.size

    @property
    def n_visible(self) -> int:
        return self.C.shape[1]


def _require_binary(mrf: PairwiseMrf):
    if any(s != 2 for s in mrf.hidden_states + mrf.visible_states):
        raise ValueError("conversion needs every node to be binary")


def mrf_to_sigmoid(mrf: PairwiseMrf) -> SigmoidNetParams:
    """Sigmoid-network weights equivalent to a binary pairwise MRF."""
    _require_binary(mrf)
    n, nv = mrf.n_hidden, mrf.n_visible
    A, b, C = np.zeros((n, n)), np.zeros(n), np.zeros((n, nv))
    for (i, j), p in mrf.psi_hh.items():
        a = p[1, 1] - p[0, 1] - p[1, 0] + p[0, 0]
        A[i, j] = A[j, i] = a
        b[i] += p[1, 0] - p[0, 0]
        b[j] += p[0, 1] - p[0, 0]
    for (i, l), p in mrf.psi_hv.items():
        C[i, l] += p[1, 1] - p[0, 1] - p[1, 0] + p[0, 0]
        b[i] += p[1, 0] - p[0, 0]
    return SigmoidNetParams(A, b, C)


def sigmoid_to_mrf(params: SigmoidNetParams, graph: PairwiseMrf | None = None) -> PairwiseMrf:
    """Binary MRF tables reproducing a sigmoid network.

    Each bias is spread evenly over the node's hidden-hidden edges. The edge
    sets come from ``graph`` when given, otherwise from the nonzero pattern of
    ``A`` and ``C``.
    """
    A, b, C = params.A, params.b, params.C
    n, nv = params.n_hidden, params.n_visible
    if np.any(np.diag(A) != 0):
        raise ValueError("self-weights a_ii have no pairwise MRF equivalent")
    if np.any(A != A.T):
        raise ValueError("A must be symmetric")
    if graph is None:
        hh = [(i, j) for i in range(n) for j in range(i + 1, n) if A[i, j] != 0]
        hv = [(i, l) for i in range(n) for l in range(nv) if C[i, l] != 0]
    else:
        if graph.n_hidden != n or graph.n_visible != nv:
            raise ValueError("graph sizes do not match the sigmoid parameters")
        hh, hv = graph.hh_edges, graph.hv_edges
        hh_set = set(hh)
        for i in range(n):
            for j in range(i + 1, n):
                if A[i, j] != 0 and (i, j) not in hh_set:
                    raise ValueError(f"a[{i},{j}] is nonzero but ({i},{j}) is not an edge")
        hv_set = set(hv)
        for i, l in zip(*np.nonzero(C)):
            if (int(i), int(l)) not in hv_set:
                raise ValueError(f"c[{i},{l}] is nonzero but ({i},{l}) is not an edge")
    degree = np.zeros(n, dtype=int)
    for i, j in hh:
        degree[i] += 1
        degree[j] += 1
    for i in range(n):
        if degree[i] == 0 and b[i] != 0:
            raise ValueError(f"node {i} has bias {b[i]} but no hidden neighbors to carry it")
    psi_hh = {}
    for i, j in hh:
        bi, bj = b[i] / degree[i], b[j] / degree[j]
        psi_hh[(i, j)] = np.array([[0.0, bj], [bi, A[i, j] + bi + bj]])
    psi_hv = {(i, l): np.array([[0.0, 0.0], [0.0, C[i, l]]]) for i, l in hv}
    return PairwiseMrf([2] * n, [2] * nv, psi_hh, psi_hv)


def _visible(v, n_visible):
    if v is None:
        return np.zeros(n_visible)
    return np.asarray(v, dtype=np.float64)


def unfolded_mf_forward(params, v=None, K: int = 1, mu0=None) -> list[np.ndarray]:
    """``K`` synchronous logistic layers ``mu^k = logistic(A mu^{k-1} + b + C v)``.

    ``params`` is one ``SigmoidNetParams`` (tied) or a sequence of ``K``.
    ``v`` may be a batch of visible vectors (rows). Returns ``[mu^0, ..., mu^K]``.
    """
    layers = [params] * K if isinstance(params, SigmoidNetParams) else list(params)
    if len(layers) != K:
        raise ValueError(f"expected {K} layers of parameters, got {len(layers)}")
    if K < 0:
        raise ValueError("K must be >= 0")
    first = layers[0] if layers else params
    v = _visible(v, first.n_visible)
    shape = v.shape[:-1] + (first.n_hidden,)
    mu = np.full(shape, 0.5) if mu0 is None else np.broadcast_to(np.asarray(mu0, dtype=np.float64), shape).copy()
    out = [mu]
    for p in layers:
        mu = expit(mu @ p.A.T + p.b + v @ p.C.T)
        out.append(mu)
    return out


def _edge_terms(A, beta, mu, m_back, lam):
    """Per-edge log-ratio terms (numerator minus denominator, over 1/lam)."""
    Bi = beta[:, None]  # b_i / n_i on edge (i, j)
    Bj = beta[None, :]
    with np.errstate(divide="ignore"):
        lq1, lq0 = np.log(mu)[..., None, :], np.log1p(-mu)[..., None, :]
        lm1, lm0 = np.log(m_back), np.log1p(-m_back)
    num = np.logaddexp(lq1 + lam * (A + Bi + Bj - lm1), lq0 + lam * (Bi - lm0))
    den = np.logaddexp(lq1 + lam * (Bj - lm1), lq0 + lam * (-lm0))
    return (num - den) / lam


def binary_generalized_activation(params: SigmoidNetParams, lam, mu_prev, msg_back=None, v=None,
                                  graph: PairwiseMrf | None = None) -> np.ndarray:
    """Generalized binary activation from the previous beliefs ``mu_prev``.

    ``lam`` is a scalar or an ``N_h x N_h`` matrix of per-edge exponents.
    ``msg_back[i, j]`` is ``m_{i->j}(h_j = 1)`` (default 1/2, which cancels).
    For ``lam < 1e-3`` the output is bridged linearly between the exact
    sigmoid limit at 0 and the activation at 1e-3, so it stays continuous.
    Edges come from ``graph`` or from the nonzero off-diagonal of ``A``.
    Self-weights ``a_ii`` enter linearly as in the sigmoid network.
    """
    A, b, C = params.A, params.b, params.C
    n = params.n_hidden
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n, n))
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("lam must lie in [0, 1]")
    mu_prev = np.asarray(mu_prev, dtype=np.float64)
    if np.any(mu_prev < 0) or np.any(mu_prev > 1):
        raise ValueError("mu_prev must lie in [0, 1]")
    m_back = np.broadcast_to(np.asarray(0.5 if msg_back is None else msg_back, dtype=np.float64), (n, n))
    if np.any(m_back <= 0) or np.any(m_back >= 1):
        raise ValueError("backward messages must lie strictly inside (0, 1)")

    if graph is None:
        adj = (A != 0) & ~np.eye(n, dtype=bool)
    else:
        adj = np.zeros((n, n), dtype=bool)
        for i, j in graph.hh_edges:
            adj[i, j] = adj[j, i] = True
    degree = adj.sum(axis=1)
    beta = np.where(degree > 0, b / np.maximum(degree, 1), 0.0)
    offdiag = np.where(adj, A, 0.0)

    lam_eff = np.maximum(lam, LAMBDA_LIMIT)
    terms = _edge_terms(offdiag, beta, mu_prev, m_back, lam_eff)
    limit = offdiag * mu_prev[..., None, :] + beta[:, None]
    small = lam < LAMBDA_LIMIT
    if np.any(small):
        t = lam / LAMBDA_LIMIT
        terms = np.where(small, limit + t * (terms - limit), terms)
    terms = np.where(adj, terms, 0.0)

    v = _visible(v, params.n_visible)
    x = terms.sum(axis=-1) + np.where(degree > 0, 0.0, b) + np.diag(A) * mu_prev + v @ C.T
    return expit(x)


def log_domain_activation(u_prev: Sequence[np.ndarray], mrf: PairwiseMrf, kappa: float, v=None) -> list[np.ndarray]:
    """Log-domain softmax-out (finite ``kappa``) or max-out (``kappa = inf``) layer.

    ``u(h_i) = sum_j (1/kappa) log sum_{h_j} (1/N_j) exp(kappa (u_prev(h_j) + Psi(h_i, h_j)))
    + sum_l Psi(h_i, v_l)``, using the potentials of ``mrf``.
    """
    if not kappa >= 1:
        raise ValueError("kappa must be >= 1")
    if len(u_prev) != mrf.n_hidden:
        raise ValueError("one u vector per hidden node required")
    v = np.zeros(mrf.n_visible, dtype=int) if v is None else v
    out = []
    for i in range(mrf.n_hidden):
        u = mrf.evidence(i, v)
        for j in mrf.neighbors(i):
            z = np.asarray(u_prev[j], dtype=np.float64)[None, :] + mrf.table(i, j)
            if np.isinf(kappa):
                u = u + z.max(axis=1)
            else:
                u = u + (logsumexp(kappa * z, axis=1) - np.log(z.shape[1])) / kappa
        out.append(u)
    return out


# trainable unfolded network


@dataclass
class UnfoldedLayer:
    psi_hh: dict
    psi_hv: dict
    lam: np.ndarray  # scalar or one value per directed edge
    kappa: float = 1.0
    z: np.ndarray | None = None  # gate logits per directed edge; None means alpha = 1
    rho: float | None = None


@dataclass
class UnfoldedMrfNet:
    """``K`` untied message-passing layers on a fixed base graph.

    The output estimator is the final layer's beliefs.
    """

    base: PairwiseMrf
    layers: list[UnfoldedLayer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("K must be >= 1")
        n_dir = len(self.base.directed_edges)
        for k, layer in enumerate(self.layers):
            for e, t in layer.psi_hh.items():
                if e not in self.base.psi_hh or np.shape(t) != self.base.psi_hh[e].shape:
                    raise ValueError(f"layer {k}: table {e} does not match the base graph")
            for e, t in layer.psi_hv.items():
                if e not in self.base.psi_hv or np.shape(t) != self.base.psi_hv[e].shape:
                    raise ValueError(f"layer {k}: table {e} does not match the base graph")
            if set(layer.psi_hh) != set(self.base.psi_hh) or set(layer.psi_hv) != set(self.base.psi_hv):
                raise ValueError(f"layer {k}: edge set differs from the base graph")
            layer.lam = np.asarray(layer.lam, dtype=np.float64)
            if layer.lam.shape not in ((), (n_dir,)):
                raise ValueError(f"layer {k}: lam must be scalar or one per directed edge")
            MessageStyle(float(layer.lam.min()), layer.kappa)
            MessageStyle(float(layer.lam.max()), layer.kappa)
            if np.isinf(layer.kappa) and np.any(layer.lam < LAMBDA_LIMIT):
                raise ValueError("max-product layers need lam >= 1e-3")
            if layer.z is not None:
                layer.z = np.broadcast_to(np.asarray(layer.z, dtype=np.float64), (n_dir,)).copy()

    @property
    def K(self) -> int:
        return len(self.layers)

    @classmethod
    def from_mrf(cls, base: PairwiseMrf, K: int, style: MessageStyle = MessageStyle(0.0), z=None,
                 rho: float | None = None, per_edge_lambda: bool = False, noise: float = 0.0,
                 seed=0) -> "UnfoldedMrfNet":
        """Untie ``base`` into ``K`` layers, optionally jittering the tables."""
        rng = np.random.default_rng(seed)
        n_dir = len(base.directed_edges)
        layers = []
        for _ in range(K):
            jitter = (lambda t: t + noise * rng.standard_normal(t.shape)) if noise else (lambda t: t.copy())
            lam = np.full(n_dir, style.lam) if per_edge_lambda else np.asarray(style.lam)
            layers.append(UnfoldedLayer(
                {e: jitter(t) for e, t in base.psi_hh.items()},
                {e: jitter(t) for e, t in base.psi_hv.items()},
                lam, style.kappa, None if z is None else np.array(z, dtype=np.float64), rho,
            ))
        return cls(base, layers)

    def copy(self) -> "UnfoldedMrfNet":
        layers = [UnfoldedLayer({e: t.copy() for e, t in L.psi_hh.items()},
                                {e: t.copy() for e, t in L.psi_hv.items()},
                                L.lam.copy(), L.kappa, None if L.z is None else L.z.copy(), L.rho)
                  for L in self.layers]
        return UnfoldedMrfNet(self.base, layers)

    def predict(self, V) -> list[np.ndarray]:
        """Final-layer beliefs per hidden node, each of shape (batch, states)."""
        V = np.atleast_2d(np.asarray(V, dtype=int))
        params = _tensors(self, train_alpha=False, train_lambda=False, grad=False)
        return [np.exp(lq.value) for lq in _forward(self, params, V)[-1]]

    def layer_beliefs(self, V) -> list[list[np.ndarray]]:
        V = np.atleast_2d(np.asarray(V, dtype=int))
        params = _tensors(self, train_alpha=False, train_lambda=False, grad=False)
        return [[np.exp(lq.value) for lq in layer] for layer in _forward(self, params, V)]


def _lam_logit(lam):
    return logit(np.clip(lam, 1e-6, 1 - 1e-6))


def _tensors(net: UnfoldedMrfNet, train_alpha: bool, train_lambda: bool, grad: bool = True) -> dict:
    make = parameter if grad else as_tensor
    out = {}
    for k, L in enumerate(net.layers):
        for e, t in L.psi_hh.items():
            out[("hh", k, e)] = make(t)
        for e, t in L.psi_hv.items():
            out[("hv", k, e)] = make(t)
        if L.z is not None:
            out[("z", k)] = make(L.z) if train_alpha else as_tensor(L.z)
        if train_lambda:
            out[("y", k)] = make(_lam_logit(L.lam))
    return out


def _message(lq_j: Tensor, psi: Tensor, lam, kappa: float) -> Tensor:
    """Log message over h_i (unnormalized) for a batch of beliefs ``lq_j``."""
    lam_val = float(lam.value) if isinstance(lam, Tensor) else float(lam)
    if np.isinf(kappa):
        return (lq_j.reshape(lq_j.shape[0], 1, -1) / lam + psi.reshape(1, *psi.shape)).max(axis=-1)
    if kappa == 1.0:
        logw = lq_j
    else:
        logw = kappa * lq_j
        logw = logw - logw.logsumexp(axis=-1, keepdims=True)
    limit = logw.exp() @ psi.T

    def power(a):
        if abs(float(a.value) if isinstance(a, Tensor) else a) < GEOMETRIC_THRESHOLD:
            return limit
        inner = a * psi.reshape(1, *psi.shape) + logw.reshape(logw.shape[0], 1, -1)
        return inner.logsumexp(axis=-1) / a

    if lam_val >= LAMBDA_LIMIT:
        return power(lam * kappa)
    # linear bridge between the exact limit and lam = 1e-3
    return limit + (lam / LAMBDA_LIMIT) * (power(LAMBDA_LIMIT * kappa) - limit)


def _normalize_log(x: Tensor) -> Tensor:
    return x - x.logsumexp(axis=-1, keepdims=True)


def _forward(net: UnfoldedMrfNet, params: dict, V: np.ndarray) -> list[list[Tensor]]:
    base = net.base
    B = V.shape[0]
    edges = base.directed_edges
    lq = [as_tensor(np.full((B, s), -np.log(s))) for s in base.hidden_states]
    msgs = {(j, i): as_tensor(np.full((B, base.hidden_states[i]), -np.log(base.hidden_states[i])))
            for j, i in edges}
    trace = []
    for k, L in enumerate(net.layers):
        if ("y", k) in params:
            lam_all = params[("y", k)].logistic()
        else:
            lam_all = as_tensor(L.lam)
        new = {}
        for e, (j, i) in enumerate(edges):
            psi = params[("hh", k, (i, j))] if i < j else params[("hh", k, (j, i))].T
            lam = lam_all if lam_all.ndim == 0 else lam_all[e]
            if not lam.requires_grad:
                lam = float(lam.value)
            m = _normalize_log(_message(lq[j], psi, lam, L.kappa))
            if ("z", k) in params:
                z = params[("z", k)][e]
                lam_val = float(lam.value) if isinstance(lam, Tensor) else lam
                rho = L.rho if L.rho is not None else (0.0 if lam_val < LAMBDA_LIMIT else 1.0)
                old = msgs[(j, i)]
                if abs(rho) < GEOMETRIC_THRESHOLD:
                    alpha = z.logistic()
                    m = alpha * m + (1 - alpha) * old
                else:
                    pair = stack([z.log_logistic() + rho * m, (-z).log_logistic() + rho * old], axis=0)
                    m = pair.logsumexp(axis=0) / rho
                m = _normalize_log(m)
            new[(j, i)] = m
        msgs = new
        beliefs = []
        for i, s in enumerate(base.hidden_states):
            acc = as_tensor(np.zeros((B, s)))
            for j in base.neighbors(i):
                acc = acc + msgs[(j, i)]
            for (node, l) in base.psi_hv:
                if node == i:
                    acc = acc + params[("hv", k, (node, l))][:, V[:, l]].T
            beliefs.append(_normalize_log(acc))
        lq = beliefs
        trace.append(lq)
    return trace


def _loss(lq: list[Tensor], T: np.ndarray, kind: str) -> Tensor:
    B = T.shape[0]
    total = as_tensor(0.0)
    for i, lqi in enumerate(lq):
        mask = T[:, i] >= 0
        if not np.any(mask):
            continue
        rows = np.nonzero(mask)[0]
        if kind == "ce":
            total = total - lqi[rows, T[rows, i]].sum()
        elif kind == "l2":
            onehot = np.zeros((rows.size, lqi.shape[1]))
            onehot[np.arange(rows.size), T[rows, i]] = 1.0
            diff = lqi[rows].exp() - onehot
            total = total + (diff * diff).sum()
        else:
            raise ValueError(f"unknown loss {kind!r}")
    return total / B


def loss_and_grad(net: UnfoldedMrfNet, V, T, loss: str = "ce", train_alpha: bool = False,
                  train_lambda: bool = False) -> tuple[float, dict]:
    """Mean per-sample loss and its gradient for every trainable parameter.

    Targets ``T`` hold one state index per hidden node; negative entries are
    unobserved. Gradient keys are ``("hh", k, edge)``, ``("hv", k, edge)``,
    ``("z", k)`` and ``("y", k)`` (logit of lambda).
    """
    V = np.atleast_2d(np.asarray(V, dtype=int))
    T = np.atleast_2d(np.asarray(T, dtype=int))
    if V.shape[0] != T.shape[0]:
        raise ValueError("one target row per visible row required")
    params = _tensors(net, train_alpha, train_lambda)
    value = _loss(_forward(net, params, V)[-1], T, loss)
    value.backward()
    grads = {}
    for key, t in params.items():
        if t.requires_grad:
            grads[key] = np.zeros(t.shape) if t.grad is None else t.grad
    return float(value.value), grads


def apply_gradient(net: UnfoldedMrfNet, grads: dict, step: float) -> UnfoldedMrfNet:
    out = net.copy()
    for key, g in grads.items():
        kind, k = key[0], key[1]
        L = out.layers[k]
        if kind == "hh":
            L.psi_hh[key[2]] = L.psi_hh[key[2]] - step * g
        elif kind == "hv":
            L.psi_hv[key[2]] = L.psi_hv[key[2]] - step * g
        elif kind == "z":
            L.z = L.z - step * g
        elif kind == "y":
            L.lam = expit(_lam_logit(L.lam) - step * g)
    return out


@dataclass
class UnfoldedTrainResult:
    net: UnfoldedMrfNet
    losses: list[float]


def train_unfolded(net: UnfoldedMrfNet, data, loss: str = "ce", epochs: int = 100, step: float = 0.1,
                   train_alpha: bool = False, train_lambda: bool = False, tol: float | None = None) -> UnfoldedTrainResult:
    """Full-batch gradient descent on all per-layer tables.

    ``data`` is a pair ``(V, T)`` of visible assignments and targets. Gates
    and lambdas are trained through their logits when requested, which keeps
    alpha and lambda inside [0, 1]. Training stops early once the loss drops
    below ``tol``. ``losses`` holds the loss before every step.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if loss not in ("ce", "l2"):
        raise ValueError(f"unknown loss {loss!r}")
    V, T = data
    current = net.copy()
    losses = []
    for _ in range(epochs):
        value, grads = loss_and_grad(current, V, T, loss, train_alpha, train_lambda)
        losses.append(value)
        if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise FloatingPointError("non-finite loss or gradient")
        if tol is not None and value < tol:
            break
        current = apply_gradient(current, grads, step)
    return UnfoldedTrainResult(current, losses)


def evaluate_loss(net: UnfoldedMrfNet, V, T, loss: str = "ce") -> float:
    V = np.atleast_2d(np.asarray(V, dtype=int))
    T = np.atleast_2d(np.asarray(T, dtype=int))
    params = _tensors(net, False, False, grad=False)
    return float(_loss(_forward(net, params, V)[-1], T, loss).value)


# persistence


def save_unfolded(net: UnfoldedMrfNet, directory):
    matrices, layers = {}, []
    for k, L in enumerate(net.layers):
        for (i, j), t in L.psi_hh.items():
            matrices[f"L{k}_hh_{i}_{j}"] = t
        for (i, l), t in L.psi_hv.items():
            matrices[f"L{k}_hv_{i}_{l}"] = t
        matrices[f"L{k}_lam"] = L.lam.reshape(1, -1)
        if L.z is not None:
            matrices[f"L{k}_z"] = L.z.reshape(1, -1)
        layers.append({
            "kappa": None if np.isinf(L.kappa) else L.kappa,
            "rho": L.rho,
            "per_edge_lambda": L.lam.ndim == 1,
            "gated": L.z is not None,
        })
    manifest = {"kind": "unfolded_mrf", "K": net.K, "graph": net.base.to_json(), "layers": layers}
    return save_archive(directory, manifest, matrices)


def load_unfolded(directory) -> UnfoldedMrfNet:
    manifest, M = load_archive(directory)
    if manifest.get("kind") != "unfolded_mrf":
        raise ValueError("archive does not hold an unfolded MRF network")
    base = PairwiseMrf.from_json(manifest["graph"])
    layers = []
    for k, spec in enumerate(manifest["layers"]):
        lam = M[f"L{k}_lam"].ravel()
        layers.append(UnfoldedLayer(
            {(i, j): M[f"L{k}_hh_{i}_{j}"] for i, j in base.psi_hh},
            {(i, l): M[f"L{k}_hv_{i}_{l}"] for i, l in base.psi_hv},
            lam if spec["per_edge_lambda"] else np.asarray(lam[0]),
            np.inf if spec["kappa"] is None else float(spec["kappa"]),
            M[f"L{k}_z"].ravel() if spec["gated"] else None,
            spec["rho"],
        ))
    return UnfoldedMrfNet(base, layers)
