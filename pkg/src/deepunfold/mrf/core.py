"""Pairwise MRFs with tabulated log-potentials and message passing.

Mean field (MF), sum-product belief propagation (BP) and the weighted
power-mean family that interpolates between them (exponent ``lam``) and
between sum- and max-product (exponent ``kappa``). Messages are blended with
their previous value through a per-edge gate ``alpha`` under a power mean of
exponent ``rho`` and renormalized after every blend.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np
from scipy.special import expit, logsumexp

from ..numerics import GEOMETRIC_THRESHOLD, _log_power_mean

# below this lam the exact mean-field limit is used
LAMBDA_LIMIT = 1e-3
MAX_STATES = 10**6


@dataclass
class PairwiseMrf:
    """Hidden/visible nodes, edges and log-potential tables.

    ``psi_hh[(i, j)]`` (with ``i < j``) is indexed ``[h_i, h_j]``;
    ``psi_hv[(i, l)]`` is indexed ``[h_i, v_l]``.
    """

    hidden_states: list[int]
    visible_states: list[int] = field(default_factory=list)
    psi_hh: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    psi_hv: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.hidden_states = [int(s) for s in self.hidden_states]
        self.visible_states = [int(s) for s in self.visible_states]
        if any(s < 1 for s in self.hidden_states + self.visible_states):
            raise ValueError("every node needs at least one state")
        hh = {}
        for (i, j), table in self.psi_hh.items():
            if i == j:
                raise ValueError(f"self-edge on node {i}")
            table = np.asarray(table, dtype=np.float64)
            if i > j:
                i, j, table = j, i, table.T
            if (i, j) in hh:
                raise ValueError(f"duplicate edge {(i, j)}")
            self._check_table(table, self.hidden_states[i], self.hidden_states[j], (i, j))
            hh[(i, j)] = table
        self.psi_hh = dict(sorted(hh.items()))
        hv = {}
        for (i, l), table in self.psi_hv.items():
            table = np.asarray(table, dtype=np.float64)
            self._check_table(table, self.hidden_states[i], self.visible_states[l], (i, l))
            hv[(i, l)] = table
        self.psi_hv = dict(sorted(hv.items()))

    @staticmethod
    def _check_table(table, rows, cols, edge):
        if table.shape != (rows, cols):
            raise ValueError(f"table for edge {edge} has shape {table.shape}, expected {(rows, cols)}")
        if not np.all(np.isfinite(table)):
            raise ValueError(f"table for edge {edge} is not finite")

    @property
    def n_hidden(self) -> int:
        return len(self.hidden_states)

    @property
    def n_visible(self) -> int:
        return len(self.visible_states)

    @property
    def hh_edges(self) -> list[tuple[int, int]]:
        return list(self.psi_hh)

    @property
    def hv_edges(self) -> list[tuple[int, int]]:
        return list(self.psi_hv)

    def table(self, i: int, j: int) -> np.ndarray:
        """Hidden-hidden table oriented ``[h_i, h_j]``."""
        return self.psi_hh[(i, j)] if i < j else self.psi_hh[(j, i)].T

    def neighbors(self, i: int) -> list[int]:
        return sorted({b if a == i else a for a, b in self.psi_hh if i in (a, b)})

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))

    @property
    def directed_edges(self) -> list[tuple[int, int]]:
        """Message directions ``(j, i)`` meaning j -> i, sorted by node index."""
        return sorted([(i, j) for i, j in self.psi_hh] + [(j, i) for i, j in self.psi_hh])

    def evidence(self, i: int, v) -> np.ndarray:
        """Summed visible log-potentials ``sum_l Psi(h_i, v_l)`` for node ``i``."""
        out = np.zeros(self.hidden_states[i])
        for (node, l), table in self.psi_hv.items():
            if node == i:
                out = out + table[:, int(v[l])]
        return out

    def with_potentials(self, psi_hh=None, psi_hv=None) -> "PairwiseMrf":
        return PairwiseMrf(self.hidden_states, self.visible_states,
                           self.psi_hh if psi_hh is None else psi_hh,
                           self.psi_hv if psi_hv is None else psi_hv)

    def to_json(self) -> dict:
        return {
            "hidden_states": self.hidden_states,
            "visible_states": self.visible_states,
            "hh_edges": [list(e) for e in self.psi_hh],
            "psi_hh": [t.tolist() for t in self.psi_hh.values()],
            "hv_edges": [list(e) for e in self.psi_hv],
            "psi_hv": [t.tolist() for t in self.psi_hv.values()],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PairwiseMrf":
        hh_edges = doc.get("hh_edges", [])
        hv_edges = doc.get("hv_edges", [])
        psi_hh = doc.get("psi_hh", [])
        psi_hv = doc.get("psi_hv", [])
        if len(hh_edges) != len(psi_hh) or len(hv_edges) != len(psi_hv):
            raise ValueError("one potential table per edge required")
        return cls(
            hidden_states=doc["hidden_states"],
            visible_states=doc.get("visible_states", []),
            psi_hh={tuple(e): np.asarray(t, dtype=np.float64) for e, t in zip(hh_edges, psi_hh)},
            psi_hv={tuple(e): np.asarray(t, dtype=np.float64) for e, t in zip(hv_edges, psi_hv)},
        )


def load_mrf(path) -> tuple[PairwiseMrf, dict]:
    """Read an MRF description file; returns the model and the raw document."""
    doc = json.loads(Path(path).read_text())
    return PairwiseMrf.from_json(doc), doc


@dataclass(frozen=True)
class MessageStyle:
    """``lam`` in [0, 1] moves from MF (0) to BP (1); ``kappa`` >= 1 moves
    from sum-product (1) to max-product (inf)."""

    lam: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.kappa >= 1.0:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")

    @property
    def is_mean_field(self) -> bool:
        return self.lam < LAMBDA_LIMIT


MF = MessageStyle(lam=0.0)
BP = MessageStyle(lam=1.0)
MAX_PRODUCT = MessageStyle(lam=1.0, kappa=np.inf)

StyleSpec = Union[MessageStyle, Sequence[MessageStyle], Mapping[tuple[int, int], MessageStyle]]


@dataclass
class ScheduleParams:
    """Message gates ``alpha = logistic(z)``.

    ``z`` is a scalar or an array broadcastable to ``(iters, n_directed_edges)``.
    ``rho=None`` picks the geometric blend for mean-field messages and the
    arithmetic blend otherwise.
    """

    z: Union[float, np.ndarray] = np.inf
    rho: float | None = None

    def alpha(self, iteration: int, edge_index: int) -> float:
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim == 0:
            return float(expit(z))
        if z.ndim == 1:
            return float(expit(z[edge_index]))
        return float(expit(z[iteration, edge_index]))

    @classmethod
    def synchronous(cls, rho: float | None = None) -> "ScheduleParams":
        return cls(z=np.inf, rho=rho)


@dataclass
class MessageState:
    messages: dict[tuple[int, int], np.ndarray]
    beliefs: list[np.ndarray]
    iterations: int = 0


def _normalize(p):
    return p / np.sum(p)


def _check_belief(q):
    q = np.asarray(q, dtype=np.float64)
    if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("belief must be a normalized distribution")
    return q


def brute_force_marginals(mrf: PairwiseMrf, v) -> list[np.ndarray]:
    """Exact posterior marginals of the hidden nodes by full enumeration."""
    shape = tuple(mrf.hidden_states)
    if int(np.prod(shape, dtype=np.int64)) > MAX_STATES:
        raise ValueError(f"state space {shape} too large to enumerate")
    n = mrf.n_hidden
    logp = np.zeros(shape)
    for (i, j), table in mrf.psi_hh.items():
        view = [1] * n
        view[i], view[j] = shape[i], shape[j]
        logp = logp + table.reshape(view)
    for i in range(n):
        view = [1] * n
        view[i] = shape[i]
        logp = logp + mrf.evidence(i, v).reshape(view)
    logp = logp - logsumexp(logp)
    out = []
    for i in range(n):
        axes = tuple(a for a in range(n) if a != i)
        out.append(np.exp(logsumexp(logp, axis=axes)) if axes else np.exp(logp))
    return out


def mf_message(q_j, psi_ij) -> np.ndarray:
    """Mean-field message over ``h_i``: exp of the belief-averaged potential."""
    q_j = _check_belief(q_j)
    s = np.asarray(psi_ij, dtype=np.float64) @ q_j
    return _normalize(np.exp(s - s.max()))


def bp_message(q_j, m_incoming, psi_ij) -> np.ndarray:
    """Sum-product message over ``h_i``; ``m_incoming`` is the i -> j message
    that is divided out of ``q_j``."""
    q_j = np.asarray(q_j, dtype=np.float64)
    m_incoming = np.asarray(m_incoming, dtype=np.float64)
    if np.any(m_incoming <= 0):
        raise ValueError("incoming message must be strictly positive")
    m = np.exp(np.asarray(psi_ij, dtype=np.float64)) @ (q_j / m_incoming)
    return _normalize(m)


def log_generalized_message(q_j, m_incoming, psi_ij, style: MessageStyle) -> np.ndarray:
    """Unnormalized log of the power-mean message.

    With weights ``q_j**kappa`` (normalized) and values
    ``exp(psi) / m_incoming`` this is the log power mean of exponent
    ``lam * kappa``; ``kappa = inf`` gives the max-product form and
    ``lam < 1e-3`` the geometric (mean-field) limit.
    """
    q_j = np.asarray(q_j, dtype=np.float64)
    m_incoming = np.asarray(m_incoming, dtype=np.float64)
    if np.any(m_incoming <= 0):
        raise ValueError("incoming message must be strictly positive")
    z = np.asarray(psi_ij, dtype=np.float64) - np.log(m_incoming)
    lam, kappa = style.lam, style.kappa
    support = q_j > 0
    if np.isinf(kappa):
        if style.is_mean_field:
            w = (q_j == q_j.max()).astype(np.float64)
            return z @ (w / w.sum())
        with np.errstate(divide="ignore"):
            logq = np.log(q_j)
        return np.max(z[:, support] + logq[support] / lam, axis=1)
    w = np.zeros_like(q_j)
    w[support] = q_j[support] ** kappa
    w /= w.sum()
    if style.is_mean_field:
        return z @ w
    a = lam * kappa
    if abs(a) < GEOMETRIC_THRESHOLD:
        return z @ w
    return _log_power_mean(w, z, a)


def generalized_message(q_j, m_incoming, psi_ij, style: MessageStyle) -> np.ndarray:
    """Normalized power-mean message; exactly ``bp_message`` at lam=kappa=1."""
    if style.lam == 1.0 and style.kappa == 1.0:
        return bp_message(q_j, m_incoming, psi_ij)
    logm = log_generalized_message(q_j, m_incoming, psi_ij, style)
    return _normalize(np.exp(logm - logm.max()))


def schedule_blend(m_old, m_new, alpha: float, rho: float = 1.0):
    """Power mean of exponent ``rho`` between the previous and new message."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return np.asarray(m_new, dtype=np.float64)
    if alpha == 0.0:
        return np.asarray(m_old, dtype=np.float64)
    m_old = np.asarray(m_old, dtype=np.float64)
    m_new = np.asarray(m_new, dtype=np.float64)
    if abs(rho) < GEOMETRIC_THRESHOLD:
        return np.exp(alpha * np.log(m_new) + (1 - alpha) * np.log(m_old))
    return (alpha * m_new**rho + (1 - alpha) * m_old**rho) ** (1.0 / rho)


def compute_beliefs(messages: Mapping[tuple[int, int], np.ndarray], mrf: PairwiseMrf, v) -> list[np.ndarray]:
    beliefs = []
    for i in range(mrf.n_hidden):
        s = mrf.evidence(i, v)
        for j in mrf.neighbors(i):
            s = s + np.log(messages[(j, i)])
        beliefs.append(np.exp(s - logsumexp(s)))
    return beliefs


def _resolve_style(style: StyleSpec, iteration: int, edge) -> MessageStyle:
    if isinstance(style, MessageStyle):
        return style
    if isinstance(style, Mapping):
        return style[edge]
    return style[iteration]


def initial_state(mrf: PairwiseMrf) -> MessageState:
    messages = {
        (j, i): np.full(mrf.hidden_states[i], 1.0 / mrf.hidden_states[i])
        for j, i in mrf.directed_edges
    }
    beliefs = [np.full(s, 1.0 / s) for s in mrf.hidden_states]
    return MessageState(messages, beliefs, 0)


def run_inference(mrf: PairwiseMrf, v, style: StyleSpec = BP, schedule: ScheduleParams | None = None,
                  iters: int = 10, state: MessageState | None = None, history: list | None = None) -> MessageState:
    """Synchronous message passing for ``iters`` rounds.

    Each round computes every message from the previous round's beliefs and
    messages, blends it with its previous value and renormalizes, then
    recomputes all beliefs. ``style`` may be global, one per round, or one
    per directed edge. If ``history`` is a list, the beliefs after every round
    are appended to it.
    """
    schedule = ScheduleParams.synchronous() if schedule is None else schedule
    state = initial_state(mrf) if state is None else state
    edges = mrf.directed_edges
    messages, beliefs = dict(state.messages), list(state.beliefs)
    for it in range(iters):
        new_messages = {}
        for e, (j, i) in enumerate(edges):
            st = _resolve_style(style, it, (j, i))
            psi = mrf.table(i, j)
            if st.is_mean_field and st.kappa == 1.0:
                m = mf_message(beliefs[j], psi)
            else:
                m = generalized_message(beliefs[j], messages[(i, j)], psi, st)
            rho = schedule.rho
            if rho is None:
                rho = 0.0 if st.is_mean_field else 1.0
            blended = schedule_blend(messages[(j, i)], m, schedule.alpha(it, e), rho)
            new_messages[(j, i)] = _normalize(blended)
        messages = new_messages
        beliefs = compute_beliefs(messages, mrf, v)
        if history is not None:
            history.append(beliefs)
    return MessageState(messages, beliefs, state.iterations + iters)


def random_tree(rng: np.random.Generator, n_nodes: int, max_states: int = 3, n_visible: int = 0,
                scale: float = 1.0) -> PairwiseMrf:
    """Random tree MRF with N(0, scale^2) log-potentials (test fixture)."""
    states = [int(s) for s in rng.integers(2, max_states + 1, size=n_nodes)]
    psi_hh = {}
    for i in range(1, n_nodes):
        j = int(rng.integers(0, i))
        psi_hh[(j, i)] = scale * rng.standard_normal((states[j], states[i]))
    vstates = [2] * n_visible
    psi_hv = {}
    for l in range(n_visible):
        i = int(rng.integers(0, n_nodes))
        psi_hv[(i, l)] = scale * rng.standard_normal((states[i], 2))
    return PairwiseMrf(states, vstates, psi_hh, psi_hv)


def tree_diameter(mrf: PairwiseMrf) -> int:
    """Longest shortest path (in edges) between hidden nodes."""
    best = 0
    for s in range(mrf.n_hidden):
        dist = {s: 0}
        frontier = [s]
        while frontier:
            nxt = []
            for a in frontier:
                for b in mrf.neighbors(a):
                    if b not in dist:
                        dist[b] = dist[a] + 1
                        nxt.append(b)
            frontier = nxt
        best = max(best, max(dist.values()))
    return best


__all__ = [
    "PairwiseMrf", "MessageStyle", "ScheduleParams", "MessageState", "MF", "BP", "MAX_PRODUCT",
    "brute_force_marginals", "mf_message", "bp_message", "generalized_message",
    "log_generalized_message", "schedule_blend", "compute_beliefs", "run_inference",
    "initial_state", "load_mrf", "random_tree", "tree_diameter", "LAMBDA_LIMIT",
]
