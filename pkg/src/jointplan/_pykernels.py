"""Pure-numpy implementations of the hot kernels.

Mirrors ``_ckernels.pyx`` function for function; used when the compiled module is
unavailable or ``JOINTPLAN_PURE_PYTHON`` is set.
"""
import numpy as np

UNDERFLOW = 1e-250


def _point_rect_dist(px, py, cx, cy, c, s, hl, hw):
    dx, dy = px - cx, py - cy
    lx = np.abs(c * dx + s * dy) - hl
    ly = np.abs(-s * dx + c * dy) - hw
    return np.hypot(np.maximum(lx, 0.0), np.maximum(ly, 0.0))


def rect_gaps(pa, pb, la, wa, lb, wb):
    """Boundary-to-boundary distance between oriented rectangles, (A, T, 3) x (B, T, 3) -> (A, B, T).

    Positive: Euclidean distance between disjoint boxes. Non-positive: largest
    separating-axis separation (minus the penetration depth), i.e. a collision.
    """
    pa = np.asarray(pa, dtype=float)
    pb = np.asarray(pb, dtype=float)
    xa, ya, ha = (pa[:, None, :, i] for i in range(3))
    xb, yb, hb = (pb[None, :, :, i] for i in range(3))
    ca, sa, cb, sb = np.cos(ha), np.sin(ha), np.cos(hb), np.sin(hb)
    hla, hwa, hlb, hwb = 0.5 * la, 0.5 * wa, 0.5 * lb, 0.5 * wb
    dx, dy = xb - xa, yb - ya

    sep = None
    for ux, uy in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        ext_a = hla * np.abs(ux * ca + uy * sa) + hwa * np.abs(-ux * sa + uy * ca)
        ext_b = hlb * np.abs(ux * cb + uy * sb) + hwb * np.abs(-ux * sb + uy * cb)
        s_ax = np.abs(ux * dx + uy * dy) - ext_a - ext_b
        sep = s_ax if sep is None else np.maximum(sep, s_ax)

    dist = np.full(sep.shape, np.inf)
    for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        vx = xa + ca * sx * hla - sa * sy * hwa
        vy = ya + sa * sx * hla + ca * sy * hwa
        dist = np.minimum(dist, _point_rect_dist(vx, vy, xb, yb, cb, sb, hlb, hwb))
        vx = xb + cb * sx * hlb - sb * sy * hwb
        vy = yb + sb * sx * hlb + cb * sy * hwb
        dist = np.minimum(dist, _point_rect_dist(vx, vy, xa, ya, ca, sa, hla, hwa))
    return np.where(sep > 0, dist, sep)


def safety_matrix(pa, scale, pb, la, wa, lb, wb, margin, collision_weight):
    """Safety energy for every candidate pair, (A, T, 3) x (B, T, 3) -> (A, B).

    ``scale`` is (A, T): the per-step speed weighting attached to the first argument.
    """
    gaps = rect_gaps(pa, pb, la, wa, lb, wb)
    viol = np.maximum(margin - np.maximum(gaps, 0.0), 0.0)  # overlap is left to the collision term
    pen = np.einsum("at,abt->ab", np.asarray(scale, dtype=float), viol * viol)
    hit = np.any(gaps <= 0.0, axis=2)
    return collision_weight * hit + pen


def lbp_batch(log_unary, src, dst, rev, psi, damping, tol, max_iter):
    """Synchronous damped sum-product LBP over a batch of MRFs sharing pairwise factors.

    Args:
        log_unary: (B, N, K) log unary potentials, one MRF per batch row.
        src, dst, rev: (E,) directed-edge endpoints and the index of the reverse edge.
        psi: (E, K, K) log pairwise potentials indexed [x_src, x_dst].

    The inner log-sum-exp over ``x_src`` is evaluated as a product with
    ``exp(psi - colmax)``; entries whose sum underflows are recomputed exactly.

    Returns:
        (messages (B, E, K) normalized log-messages, iterations (B,), converged (B,)).
    """
    log_unary = np.asarray(log_unary, dtype=float)
    B, N, K = log_unary.shape
    E = len(src)
    psi = np.asarray(psi, dtype=float).reshape(E, K, K)
    colmax = psi.max(axis=1) if E else np.zeros((0, K))
    shifted = np.exp(psi - colmax[:, None, :])
    msg = np.full((B, E, K), -np.log(K))
    iters = np.zeros(B, dtype=np.int64)
    conv = np.zeros(B, dtype=bool)
    active = np.ones(B, dtype=bool)
    inc = np.zeros((N, E))
    inc[dst, np.arange(E)] = 1.0
    for _ in range(max_iter):
        if not active.any():
            break
        ids = np.flatnonzero(active)
        m = msg[ids]
        incoming = np.einsum("ne,bek->bnk", inc, m)
        h = log_unary[ids][:, src] + incoming[:, src] - m[:, rev]
        hmax = h.max(axis=2, keepdims=True)
        acc = np.einsum("bei,eij->bej", np.exp(h - hmax), shifted)
        low = acc < UNDERFLOW
        with np.errstate(divide="ignore"):
            raw = hmax + colmax[None] + np.log(acc)
        if low.any():
            b_i, e_i, j_i = np.nonzero(low)
            t = h[b_i, e_i, :] + psi[e_i, :, j_i]
            tm = t.max(axis=1)
            raw[b_i, e_i, j_i] = tm + np.log(np.exp(t - tm[:, None]).sum(axis=1))
        new = damping * m + (1.0 - damping) * raw
        new = new - _lse(new)
        delta = np.abs(new - m).max(axis=(1, 2)) if E else np.zeros(len(ids))
        msg[ids] = new
        iters[ids] += 1
        done = delta < tol
        conv[ids[done]] = True
        active[ids[done]] = False
    return msg, iters, conv


def _lse(a):
    m = a.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True))
