# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: oriented-box gaps, pairwise safety energies, batched LBP.

Same signatures and semantics as ``_pykernels``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs, sqrt, exp, log, INFINITY

cnp.import_array()

cdef double UNDERFLOW = 1e-250


cdef inline double _point_rect(double px, double py, double cx, double cy, double c, double s,
                               double hl, double hw) noexcept nogil:
    cdef double dx = px - cx, dy = py - cy
    cdef double lx = fabs(c * dx + s * dy) - hl
    cdef double ly = fabs(-s * dx + c * dy) - hw
    if lx < 0:
        lx = 0
    if ly < 0:
        ly = 0
    return sqrt(lx * lx + ly * ly)


cdef inline double _gap(double xa, double ya, double ca, double sa, double hla, double hwa,
                        double xb, double yb, double cb, double sb, double hlb, double hwb) noexcept nogil:
    cdef double dx = xb - xa, dy = yb - ya
    cdef double sep = -INFINITY, s_ax, ux, uy, ext_a, ext_b, best, d, vx, vy
    cdef double axes[8]
    cdef int k, sx, sy
    axes[0] = ca; axes[1] = sa
    axes[2] = -sa; axes[3] = ca
    axes[4] = cb; axes[5] = sb
    axes[6] = -sb; axes[7] = cb
    for k in range(4):
        ux = axes[2 * k]
        uy = axes[2 * k + 1]
        ext_a = hla * fabs(ux * ca + uy * sa) + hwa * fabs(-ux * sa + uy * ca)
        ext_b = hlb * fabs(ux * cb + uy * sb) + hwb * fabs(-ux * sb + uy * cb)
        s_ax = fabs(ux * dx + uy * dy) - ext_a - ext_b
        if s_ax > sep:
            sep = s_ax
    if sep <= 0:
        return sep
    best = INFINITY
    for sx in range(-1, 2, 2):
        for sy in range(-1, 2, 2):
            vx = xa + ca * sx * hla - sa * sy * hwa
            vy = ya + sa * sx * hla + ca * sy * hwa
            d = _point_rect(vx, vy, xb, yb, cb, sb, hlb, hwb)
            if d < best:
                best = d
            vx = xb + cb * sx * hlb - sb * sy * hwb
            vy = yb + sb * sx * hlb + cb * sy * hwb
            d = _point_rect(vx, vy, xa, ya, ca, sa, hla, hwa)
            if d < best:
                best = d
    return best


def rect_gaps(pa, pb, double la, double wa, double lb, double wb):
    cdef double[:, :, ::1] A = np.ascontiguousarray(pa, dtype=np.float64)
    cdef double[:, :, ::1] Bv = np.ascontiguousarray(pb, dtype=np.float64)
    cdef Py_ssize_t na = A.shape[0], nb = Bv.shape[0], T = A.shape[1]
    out = np.empty((na, nb, T))
    cdef double[:, :, ::1] O = out
    cdef double[:, ::1] ca = np.cos(np.asarray(A)[:, :, 2]), sa = np.sin(np.asarray(A)[:, :, 2])
    cdef double[:, ::1] cb = np.cos(np.asarray(Bv)[:, :, 2]), sb = np.sin(np.asarray(Bv)[:, :, 2])
    cdef Py_ssize_t i, j, t
    with nogil:
        for i in range(na):
            for j in range(nb):
                for t in range(T):
                    O[i, j, t] = _gap(A[i, t, 0], A[i, t, 1], ca[i, t], sa[i, t], 0.5 * la, 0.5 * wa,
                                      Bv[j, t, 0], Bv[j, t, 1], cb[j, t], sb[j, t], 0.5 * lb, 0.5 * wb)
    return out


def safety_matrix(pa, scale, pb, double la, double wa, double lb, double wb,
                  double margin, double collision_weight):
    cdef double[:, :, ::1] A = np.ascontiguousarray(pa, dtype=np.float64)
    cdef double[:, :, ::1] Bv = np.ascontiguousarray(pb, dtype=np.float64)
    cdef double[:, ::1] S = np.ascontiguousarray(scale, dtype=np.float64)
    cdef Py_ssize_t na = A.shape[0], nb = Bv.shape[0], T = A.shape[1]
    out = np.empty((na, nb))
    cdef double[:, ::1] O = out
    cdef double[:, ::1] ca = np.cos(np.asarray(A)[:, :, 2]), sa = np.sin(np.asarray(A)[:, :, 2])
    cdef double[:, ::1] cb = np.cos(np.asarray(Bv)[:, :, 2]), sb = np.sin(np.asarray(Bv)[:, :, 2])
    cdef Py_ssize_t i, j, t
    cdef double g, v, pen
    cdef int hit
    with nogil:
        for i in range(na):
            for j in range(nb):
                pen = 0
                hit = 0
                for t in range(T):
                    g = _gap(A[i, t, 0], A[i, t, 1], ca[i, t], sa[i, t], 0.5 * la, 0.5 * wa,
                             Bv[j, t, 0], Bv[j, t, 1], cb[j, t], sb[j, t], 0.5 * lb, 0.5 * wb)
                    if g <= 0:
                        hit = 1
                        g = 0
                    v = margin - g
                    if v > 0:
                        pen += S[i, t] * v * v
                O[i, j] = collision_weight * hit + pen
    return out


def lbp_batch(log_unary, src, dst, rev, psi, double damping, double tol, long max_iter):
    cdef double[:, :, ::1] U = np.ascontiguousarray(log_unary, dtype=np.float64)
    cdef Py_ssize_t B = U.shape[0], N = U.shape[1], K = U.shape[2]
    cdef long[::1] Src = np.ascontiguousarray(src, dtype=np.int64)
    cdef long[::1] Dst = np.ascontiguousarray(dst, dtype=np.int64)
    cdef long[::1] Rev = np.ascontiguousarray(rev, dtype=np.int64)
    cdef Py_ssize_t E = Src.shape[0]
    psi_a = np.ascontiguousarray(psi, dtype=np.float64).reshape(E, K, K)
    colmax_a = psi_a.max(axis=1) if E else np.zeros((0, K))
    cdef double[:, :, ::1] P = psi_a
    cdef double[:, ::1] CM = np.ascontiguousarray(colmax_a)
    cdef double[:, :, ::1] SH = np.ascontiguousarray(np.exp(psi_a - colmax_a[:, None, :]))

    msg_a = np.full((B, E, K), -log(<double>K))
    iters_a = np.zeros(B, dtype=np.int64)
    conv_a = np.zeros(B, dtype=np.bool_)
    cdef double[:, :, ::1] M = msg_a
    cdef long[::1] IT = iters_a
    cdef cnp.npy_bool[::1] CV = conv_a

    cdef double[:, ::1] new = np.empty((max(E, 1), K))
    cdef double[:, ::1] incoming = np.empty((max(N, 1), K))
    cdef double[::1] h = np.empty(K)
    cdef double[::1] w = np.empty(K)
    cdef Py_ssize_t b, e, n, i, j
    cdef long it
    cdef double hmax, acc, lse, mx, delta, d, tm
    with nogil:
        for b in range(B):
            for it in range(max_iter):
                for n in range(N):
                    for i in range(K):
                        incoming[n, i] = 0
                for e in range(E):
                    for i in range(K):
                        incoming[Dst[e], i] += M[b, e, i]
                for e in range(E):
                    hmax = -INFINITY
                    for i in range(K):
                        h[i] = U[b, Src[e], i] + incoming[Src[e], i] - M[b, Rev[e], i]
                        if h[i] > hmax:
                            hmax = h[i]
                    for i in range(K):
                        w[i] = exp(h[i] - hmax)
                    for j in range(K):
                        acc = 0
                        for i in range(K):
                            acc += w[i] * SH[e, i, j]
                        if acc >= UNDERFLOW:
                            new[e, j] = hmax + CM[e, j] + log(acc)
                        else:
                            tm = -INFINITY
                            for i in range(K):
                                if h[i] + P[e, i, j] > tm:
                                    tm = h[i] + P[e, i, j]
                            acc = 0
                            for i in range(K):
                                acc += exp(h[i] + P[e, i, j] - tm)
                            new[e, j] = tm + log(acc)
                    # normalizing raw first would only add a constant that the final normalization removes
                    for j in range(K):
                        new[e, j] = damping * M[b, e, j] + (1.0 - damping) * new[e, j]
                    _normalize(new, e, K)
                delta = 0
                for e in range(E):
                    for j in range(K):
                        d = fabs(new[e, j] - M[b, e, j])
                        if d > delta:
                            delta = d
                        M[b, e, j] = new[e, j]
                IT[b] = it + 1
                if delta < tol:
                    CV[b] = 1
                    break
    return msg_a, iters_a, conv_a


cdef inline void _normalize(double[:, ::1] a, Py_ssize_t e, Py_ssize_t K) noexcept nogil:
    cdef double mx = -INFINITY, acc = 0, lse
    cdef Py_ssize_t j
    for j in range(K):
        if a[e, j] > mx:
            mx = a[e, j]
    for j in range(K):
        acc += exp(a[e, j] - mx)
    lse = mx + log(acc)
    for j in range(K):
        a[e, j] -= lse
