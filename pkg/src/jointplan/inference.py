"""Pairwise MRFs over candidate indices, exact enumeration, and loopy belief propagation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from jointplan._backend import kernels
from jointplan.energy import EnergyTables, EnergyWeights, PlanningContext, energy_tables
from jointplan.errors import CapacityError, ConfigurationError, NumericError, ShapeError
from jointplan.trajectory import CandidateSet

MAX_ENUMERATION = 10 ** 7


@dataclass(frozen=True)
class LbpOptions:
    max_iterations: int = 50
    damping: float = 0.5
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if not 0 <= self.damping < 1:
            raise ConfigurationError("damping must lie in [0, 1)")
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be positive")


@dataclass(eq=False)
class PairwiseMRF:
    """Log-potentials over N discrete nodes with K states each.

    ``log_pairwise`` maps ``(i, j)`` with ``i < j`` to a K x K matrix indexed
    ``[x_i, x_j]``; a missing pair means no edge.
    """

    log_unary: np.ndarray
    log_pairwise: dict = field(default_factory=dict)

    def __post_init__(self):
        u = np.asarray(self.log_unary, dtype=float)
        if u.ndim != 2:
            raise ShapeError(f"log_unary must be (N, K), got {u.shape}")
        self.log_unary = u
        n, k = u.shape
        clean = {}
        for (i, j), m in self.log_pairwise.items():
            m = np.asarray(m, dtype=float)
            if i > j:
                i, j, m = j, i, m.T
            if not (0 <= i < j < n):
                raise ShapeError(f"edge ({i}, {j}) references missing nodes")
            if m.shape != (k, k):
                raise ShapeError(f"edge ({i}, {j}) potential has shape {m.shape}")
            clean[(i, j)] = m
        self.log_pairwise = dict(sorted(clean.items()))

    @property
    def n_nodes(self) -> int:
        return self.log_unary.shape[0]

    @property
    def n_states(self) -> int:
        return self.log_unary.shape[1]

    @property
    def edges(self) -> list:
        return list(self.log_pairwise)

    def is_tree(self) -> bool:
        parent = list(range(self.n_nodes))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j in self.edges:
            ri, rj = find(i), find(j)
            if ri == rj:
                return False
            parent[ri] = rj
        return True

    def log_score(self, assignment: Sequence[int]) -> float:
        x = list(assignment)
        s = sum(self.log_unary[i, x[i]] for i in range(self.n_nodes))
        return float(s + sum(m[x[i], x[j]] for (i, j), m in self.log_pairwise.items()))

    def log_partition(self) -> float:
        """Exact log normalizer (by enumeration)."""
        return enumerate_exact(self).log_partition

    def directed(self):
        """Directed edge arrays ``(src, dst, rev, psi)``; edge 2e is i->j, 2e+1 is j->i."""
        k = self.n_states
        src, dst, psi = [], [], []
        for (i, j), m in self.log_pairwise.items():
            src += [i, j]
            dst += [j, i]
            psi += [m, m.T]
        e = len(src)
        psi = np.ascontiguousarray(np.array(psi).reshape(e, k, k))
        return (np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64),
                np.arange(e, dtype=np.int64) ^ 1, psi)


class ConditionalMarginals:
    """Unary rows (N, K) and per-edge K x K tables.

    Pairwise tables from LBP are built on first access; the planner only reads
    them for the winning ego candidate.
    """

    def __init__(self, unary, pairwise=None, converged=True, iterations=0, log_partition=None,
                 messages=None, pairwise_fn=None):
        self.unary = unary
        self._pairwise = pairwise
        self._pairwise_fn = pairwise_fn
        self.converged = converged
        self.iterations = iterations
        self.log_partition = log_partition
        self.messages = messages

    @property
    def pairwise(self) -> dict:
        if self._pairwise is None:
            self._pairwise = self._pairwise_fn() if self._pairwise_fn else {}
        return self._pairwise

    @property
    def n_nodes(self) -> int:
        return self.unary.shape[0]

    def __repr__(self) -> str:
        return (f"ConditionalMarginals(nodes={self.unary.shape[0]}, states={self.unary.shape[1]}, "
                f"converged={self.converged}, iterations={self.iterations})")


def _softmax(a, axis=-1):
    a = a - a.max(axis=axis, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=axis, keepdims=True)


def _check_finite(mrf: PairwiseMRF):
    if not np.all(np.isfinite(mrf.log_unary)) or any(
            not np.all(np.isfinite(m)) for m in mrf.log_pairwise.values()):
        raise NumericError("MRF has non-finite log-potentials")


def joint_log_table(mrf: PairwiseMRF) -> np.ndarray:
    """Unnormalized log-probability of every assignment, shape (K,) * N."""
    n, k = mrf.log_unary.shape
    if k ** n > MAX_ENUMERATION:
        raise CapacityError(f"K^N = {k}^{n} exceeds the enumeration cap {MAX_ENUMERATION}")
    logp = np.zeros((k,) * n)
    for i in range(n):
        shape = [1] * n
        shape[i] = k
        logp = logp + mrf.log_unary[i].reshape(shape)
    for (i, j), m in mrf.log_pairwise.items():
        shape = [1] * n
        shape[i] = shape[j] = k
        logp = logp + m.reshape(shape)
    return logp


def enumerate_exact(mrf: PairwiseMRF) -> ConditionalMarginals:
    """Exact marginals and log-partition by summing over all K^N assignments."""
    _check_finite(mrf)
    n, k = mrf.log_unary.shape
    if n == 0:
        return ConditionalMarginals(np.zeros((0, k)), {}, True, 0, 0.0)
    if k ** n > MAX_ENUMERATION:
        raise CapacityError(f"K^N = {k}^{n} exceeds the enumeration cap {MAX_ENUMERATION}")
    logp = joint_log_table(mrf)
    mx = logp.max()
    p = np.exp(logp - mx)
    z = p.sum()
    log_z = float(mx + np.log(z))
    p /= z
    axes = tuple(range(n))
    unary = np.stack([p.sum(axis=tuple(a for a in axes if a != i)) for i in range(n)])
    pairwise = {(i, j): p.sum(axis=tuple(a for a in axes if a not in (i, j)))
                for (i, j) in mrf.log_pairwise}
    return ConditionalMarginals(unary, pairwise, True, 0, log_z)


def _incoming(dst, msg, shape):
    incoming = np.zeros(shape)
    np.add.at(incoming, dst, msg)
    return incoming


def unary_beliefs(mrf: PairwiseMRF, msg: np.ndarray, log_unary: np.ndarray | None = None) -> np.ndarray:
    u = mrf.log_unary if log_unary is None else log_unary
    src, dst, _, _ = mrf.directed()
    return _softmax(u + _incoming(dst, msg, u.shape))


def pairwise_beliefs(mrf: PairwiseMRF, msg: np.ndarray, log_unary: np.ndarray | None = None) -> dict:
    """Edge beliefs: cavity fields of both endpoints combined with the pairwise factor."""
    u = mrf.log_unary if log_unary is None else log_unary
    src, dst, _, psi = mrf.directed()
    incoming = _incoming(dst, msg, u.shape)
    out = {}
    for e2, (i, j) in enumerate(mrf.log_pairwise):
        hi = u[i] + incoming[i] - msg[2 * e2 + 1]
        hj = u[j] + incoming[j] - msg[2 * e2]
        logit = hi[:, None] + psi[2 * e2] + hj[None, :]
        out[(i, j)] = _softmax(logit.ravel()).reshape(logit.shape)
    return out


def lbp_batch(mrf: PairwiseMRF, log_unaries: np.ndarray, opts: LbpOptions | None = None) -> list:
    """Run LBP once per row of ``log_unaries`` (B, N, K), all sharing ``mrf``'s pairwise factors."""
    opts = opts or LbpOptions()
    _check_finite(mrf)
    log_unaries = np.asarray(log_unaries, dtype=float)
    if log_unaries.ndim != 3 or log_unaries.shape[1:] != mrf.log_unary.shape:
        raise ShapeError("batched unaries must be (B, N, K) matching the MRF")
    if not np.all(np.isfinite(log_unaries)):
        raise NumericError("non-finite unary potentials")
    src, dst, rev, psi = mrf.directed()
    msgs, iters, conv = kernels.lbp_batch(log_unaries, src, dst, rev, psi,
                                          opts.damping, opts.tolerance, opts.max_iterations)
    incoming = np.zeros(log_unaries.shape)
    np.add.at(incoming, (slice(None), dst), msgs)
    unary = _softmax(log_unaries + incoming)
    out = []
    for b in range(len(log_unaries)):
        fn = (lambda m=msgs[b], u=log_unaries[b]: pairwise_beliefs(mrf, m, u)) if mrf.log_pairwise else None
        out.append(ConditionalMarginals(unary[b], None if fn else {}, bool(conv[b]), int(iters[b]),
                                        None, msgs[b], fn))
    return out


def lbp_marginals(mrf: PairwiseMRF, opts: LbpOptions | None = None) -> ConditionalMarginals:
    """Sum-product loopy belief propagation in log space with a synchronous flooding schedule."""
    return lbp_batch(mrf, mrf.log_unary[None], opts)[0]


def _agent_pairs(tables: EnergyTables, offset: int) -> dict:
    return {(i - offset, j - offset): -m for (i, j), m in tables.pairs.items()}


def build_conditional_mrf(ctx: PlanningContext, sets: Sequence[CandidateSet], weights: EnergyWeights,
                          ego_candidate_index: int, tables: EnergyTables | None = None) -> PairwiseMRF:
    """Distribution over the other agents' candidates given the ego candidate.

    Node ``n`` is agent ``n + 1`` of the context.
    """
    tables = tables or energy_tables(ctx, sets, weights)
    if not 0 <= ego_candidate_index < tables.k:
        raise IndexError(f"ego candidate index {ego_candidate_index} out of range [0, {tables.k})")
    unary = -tables.agent[1:] - tables.ego_safety[:, ego_candidate_index, :]
    return PairwiseMRF(unary, _agent_pairs(tables, 1))


def conditional_unaries(tables: EnergyTables) -> np.ndarray:
    """Unaries of the conditional MRF for every ego candidate at once, (K, N, K)."""
    return -tables.agent[None, 1:] - np.transpose(tables.ego_safety, (1, 0, 2))


def build_unconditional_mrf(ctx: PlanningContext, sets: Sequence[CandidateSet], weights: EnergyWeights,
                            tables: EnergyTables | None = None) -> PairwiseMRF:
    """Same agents and pairwise factors with the ego coupling removed."""
    tables = tables or energy_tables(ctx, sets, weights)
    return PairwiseMRF(-tables.agent[1:].copy(), _agent_pairs(tables, 1))


def build_joint_mrf(ctx: PlanningContext, sets: Sequence[CandidateSet], weights: EnergyWeights,
                    tables: EnergyTables | None = None) -> PairwiseMRF:
    """Full joint over ego (node 0) and agents, used for training.

    Unaries carry the agent costs (plus route deviation for the ego); every
    non-zero safety term becomes an edge.
    """
    tables = tables or energy_tables(ctx, sets, weights)
    unary = -tables.agent.copy()
    unary[0] -= tables.goal
    pairs = {(0, i + 1): -tables.ego_safety[i] for i in range(tables.n_agents)
             if np.any(tables.ego_safety[i] != 0)}
    pairs.update(_agent_pairs(tables, 0))
    return PairwiseMRF(unary, pairs)
