"""Loss gradients with respect to the agent-cost weights, differentiating through the LBP fixed point.

Beliefs are smooth functions of the unary logits and the converged messages,
and the messages satisfy ``m = F(m, u)``. The adjoint solve
``(I - dF/dm)^T lam = dL/dm`` gives the total derivative
``dL/du = dL/du|direct + (dF/du)^T lam``; with no edges this reduces to
marginal minus target.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from jointplan.errors import NumericError, ShapeError
from jointplan.inference import ConditionalMarginals, LbpOptions, PairwiseMRF, lbp_batch
from jointplan.learning.losses import TrajectoryTargets

# Tight enough that finite differences see the fixed point, not the stopping rule.
TRAINING_LBP = LbpOptions(max_iterations=2000, damping=0.5, tolerance=1e-12)


def _softmax(a, axis=-1):
    a = a - a.max(axis=axis, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(eq=False)
class Fixture:
    """Everything about a scene that does not move with the weights.

    Unary logits are ``offset - features @ w``; ``skeleton`` holds the pairwise
    factors (its unaries are ignored).
    """

    features: np.ndarray  # (N, K, F)
    offset: np.ndarray    # (N, K)
    skeleton: PairwiseMRF
    targets: TrajectoryTargets | None = None
    name: str = ""

    def __post_init__(self):
        if self.features.shape[:2] != self.offset.shape or self.offset.shape != self.skeleton.log_unary.shape:
            raise ShapeError("features, offset and skeleton disagree on (N, K)")

    def unary(self, w) -> np.ndarray:
        return self.offset - self.features @ np.asarray(w, dtype=float)


def _cavities(mrf: PairwiseMRF, u: np.ndarray, msg: np.ndarray):
    src, dst, rev, psi = mrf.directed()
    incoming = np.zeros(u.shape)
    np.add.at(incoming, dst, msg)
    h = u[src] + incoming[src] - msg[rev]  # (E, K) over the source's states
    return src, dst, rev, psi, incoming, h


def _log_softmax(a):
    a = a - a.max()
    return a - np.log(np.exp(a).sum())


def log_beliefs(mrf: PairwiseMRF, u: np.ndarray, msg: np.ndarray):
    """Log unary (N, K) and log per-edge (K, K) beliefs from a set of messages."""
    _, _, _, psi, incoming, h = _cavities(mrf, u, msg)
    unary = np.stack([_log_softmax(r) for r in u + incoming]) if len(u) else np.zeros(u.shape)
    pairwise = {}
    for p, e in enumerate(mrf.log_pairwise):
        logit = h[2 * p][:, None] + psi[2 * p] + h[2 * p + 1][None, :]
        pairwise[e] = _log_softmax(logit)
    return unary, pairwise


class TrainingMarginals(ConditionalMarginals):
    """Marginals that also keep their logs, so cross entropies stay finite when probabilities underflow."""

    def __init__(self, log_unary, log_pairwise, **kw):
        super().__init__(np.exp(log_unary), {e: np.exp(v) for e, v in log_pairwise.items()}, **kw)
        self.log_unary = log_unary
        self.log_pairwise = log_pairwise


def run_lbp(mrf: PairwiseMRF, u: np.ndarray, opts: LbpOptions = TRAINING_LBP) -> TrainingMarginals:
    skel = PairwiseMRF(u, mrf.log_pairwise)
    out = lbp_batch(skel, u[None], opts)[0]
    lu, lp = log_beliefs(skel, u, out.messages)
    return TrainingMarginals(lu, lp, converged=out.converged, iterations=out.iterations, messages=out.messages)


def unary_vjp(mrf: PairwiseMRF, u: np.ndarray, msg: np.ndarray, g_unary: np.ndarray, g_pair: dict) -> np.ndarray:
    """Pull gradients on belief logits back to the unary potentials.

    ``g_unary`` (N, K) is dL/d(unary belief logits); ``g_pair`` maps each edge to
    dL/d(edge belief logits), a K x K matrix.
    """
    n, k = u.shape
    src, dst, rev, psi, incoming, h = _cavities(mrf, u, msg)
    e_count = len(src)
    node = np.array(g_unary, dtype=float, copy=True)
    to_dst = np.zeros((e_count, k))  # each pair gradient summed onto the directed edge's target axis
    for p, e in enumerate(mrf.log_pairwise):
        g = g_pair.get(e)
        if g is None:
            continue
        i, j = e
        row, col = g.sum(axis=1), g.sum(axis=0)
        node[i] += row
        node[j] += col
        to_dst[2 * p] = col       # i -> j lands on j
        to_dst[2 * p + 1] = row   # j -> i lands on i
    if e_count == 0:
        return node
    g_msg = node[dst] - to_dst

    # Per-edge Jacobian of the normalized update with respect to its cavity field.
    jac = np.empty((e_count, k, k))
    for e in range(e_count):
        logit = h[e][:, None] + psi[e]                 # [x_s, x_t]
        wmat = _softmax(logit, axis=0).T               # [x_t, x_s]
        raw = np.log(np.exp(logit - logit.max(axis=0)).sum(axis=0)) + logit.max(axis=0)
        sigma = _softmax(raw)
        jac[e] = wmat - np.outer(np.ones(k), sigma @ wmat)

    # dF_e/dm_f = jac[e] when src(e) == dst(f) and f != rev(e)
    big = np.zeros((e_count * k, e_count * k))
    for e in range(e_count):
        for f in np.flatnonzero(dst == src[e]):
            if f != rev[e]:
                big[e * k:(e + 1) * k, f * k:(f + 1) * k] = jac[e]
    lam = np.linalg.solve(np.eye(e_count * k) - big.T, g_msg.ravel()).reshape(e_count, k)
    through = np.einsum("etk,et->ek", jac, lam)
    out = node.copy()
    np.add.at(out, src, through)
    return out


def _lse(a):
    m = a.max()
    return m + np.log(np.exp(a - m).sum())


def planning_logit_grads(marg: TrainingMarginals, targets: TrajectoryTargets):
    """Loss value and dL/d(belief logits) for the masked cross entropy against hard targets."""
    n, k = marg.unary.shape
    loss = 0.0
    g_unary = np.zeros((n, k))
    for i in range(n):
        keep = targets.keep_mask(i)
        lp = marg.log_unary[i]
        t = targets.indices[i]
        loss += _lse(lp[keep]) - lp[t]
        g_unary[i] = np.where(keep, np.exp(lp - _lse(lp[keep])), 0.0)
        g_unary[i, t] -= 1.0
    g_pair = {}
    for (i, j), lp in marg.log_pairwise.items():
        keep = np.outer(targets.keep_mask(i), targets.keep_mask(j))
        ti, tj = targets.indices[i], targets.indices[j]
        kept = _lse(lp[keep])
        loss += kept - lp[ti, tj]
        g = np.where(keep, np.exp(lp - kept), 0.0)
        g[ti, tj] -= 1.0
        g_pair[(i, j)] = g
    return float(loss), g_unary, g_pair


def soft_logit_grads(marg: TrainingMarginals, teacher: ConditionalMarginals):
    """Loss value and logit gradients for cross entropy against soft (teacher) marginals."""
    loss = -float(np.sum(teacher.unary * marg.log_unary))
    g_pair = {}
    for e, q in teacher.pairwise.items():
        loss -= float(np.sum(q * marg.log_pairwise[e]))
        g_pair[e] = marg.pairwise[e] * q.sum() - q
    g_unary = marg.unary * teacher.unary.sum(axis=1, keepdims=True) - teacher.unary
    return loss, g_unary, g_pair


def loss_and_grad(fx: Fixture, w, grads_fn: Callable, opts: LbpOptions = TRAINING_LBP):
    """Evaluate a belief-level loss and its gradient with respect to ``w``.

    ``grads_fn(marginals) -> (loss, g_unary, g_pair)``.
    """
    u = fx.unary(w)
    try:
        marg = run_lbp(fx.skeleton, u, opts)
    except NumericError as e:
        raise NumericError(f"fixture {fx.name!r}: {e}") from None
    loss, g_unary, g_pair = grads_fn(marg)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss on fixture {fx.name!r}")
    du = unary_vjp(fx.skeleton, u, marg.messages, g_unary, g_pair)
    grad = -np.einsum("nk,nkf->f", du, fx.features)
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient on fixture {fx.name!r}")
    return loss, grad, marg


def planning_loss_and_grad(fx: Fixture, w, opts: LbpOptions = TRAINING_LBP):
    if fx.targets is None:
        raise ShapeError(f"fixture {fx.name!r} has no targets")
    loss, grad, _ = loss_and_grad(fx, w, lambda m: planning_logit_grads(m, fx.targets), opts)
    return loss, grad


def finite_difference(fn: Callable, w, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of ``w``."""
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    for i in range(len(w)):
        d = np.zeros_like(w)
        d[i] = h
        out[i] = (fn(w + d) - fn(w - d)) / (2 * h)
    return out


def relative_error(a, b) -> float:
    """``|a - b| / max(|a|, |b|)`` in the infinity norm; 0 when both vanish."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    return float(np.abs(a - b).max(initial=0.0) / scale) if scale > 0 else 0.0
