# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused tuning-step kernel; same contract as ``_fused_py.loss_and_grad``."""
import numpy as np

from libc.math cimport exp, log, sqrt
from libc.stdint cimport int64_t
from scipy.linalg.cython_blas cimport dgemm

cdef double LOG_KL_EPS = log(1e-12)
cdef double CONSTANT_RANGE = 1e-12
cdef double TIE_TOL = 1e-12


cdef void _gemm(bint ta, bint tb, int m, int n, int k, double alpha,
                const double* A, const double* B, double beta, double* C) noexcept nogil:
    # row-major C[m, n] = alpha * op(A)[m, k] @ op(B)[k, n] + beta * C
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    cdef int lda = m if ta else k
    cdef int ldb = k if tb else n
    cdef int ldc = n
    dgemm(&cb, &ca, &n, &m, &k, &alpha, <double*>B, &ldb, <double*>A, &lda, &beta, C, &ldc)


cdef void _log_softmax_rows(double* z, int rows, int cols, double scale) noexcept nogil:
    # z <- log_softmax(scale * z) row by row
    cdef int i, j
    cdef double mx, acc
    for i in range(rows):
        mx = scale * z[i * cols]
        for j in range(1, cols):
            if scale * z[i * cols + j] > mx:
                mx = scale * z[i * cols + j]
        acc = 0.0
        for j in range(cols):
            z[i * cols + j] = scale * z[i * cols + j] - mx
            acc += exp(z[i * cols + j])
        acc = log(acc)
        for j in range(cols):
            z[i * cols + j] -= acc


def loss_and_grad(const double[:, :, ::1] F, const double[::1] r_vid, const double[::1] r_fr,
                  const int64_t[::1] frames, const double[:, :, ::1] views, const double[:, ::1] W,
                  const int64_t[::1] labels, double beta, double tau,
                  double w_zs, double w_ta, double w_tx, bint psi_exp, double psi_scale,
                  int n_select, selected=None, extrema=None, bint want_grad=True):
    cdef int N = F.shape[0], T = F.shape[1], d = F.shape[2]
    cdef int V = views.shape[0], C = W.shape[0], k = frames.shape[0]
    cdef int n, t, j, v, c, i, s
    cdef double acc, rf, inv_k = 1.0 / k, inv_tau = 1.0 / tau

    h_arr = np.zeros((N, d))
    g_arr = np.empty((N, d))
    x_arr = np.zeros((V, d))
    zs_arr = np.empty((V, C))
    z_arr = np.empty((V, C))
    cdef double[:, ::1] h = h_arr, g = g_arr, x = x_arr, zs = zs_arr, z = z_arr

    with nogil:
        for n in range(N):
            for t in range(k):
                rf = r_fr[frames[t]] * inv_k
                for i in range(d):
                    h[n, i] += rf * F[n, frames[t], i]
            for i in range(d):
                g[n, i] = r_vid[n] * h[n, i]
        for v in range(V):
            for t in range(k):
                for i in range(d):
                    x[v, i] += views[v, frames[t], i]
            acc = 0.0
            for i in range(d):
                acc += x[v, i] * x[v, i]
            acc = 1.0 / sqrt(acc)
            for i in range(d):
                x[v, i] *= acc
        _gemm(False, True, V, C, d, 1.0, &x[0, 0], &W[0, 0], 0.0, &zs[0, 0])
        for v in range(V):
            for c in range(C):
                z[v, c] = w_zs * zs[v, c]

    A_arr = np.empty((V, N))
    cdef double[:, ::1] A = A_arr
    if w_ta != 0.0:
        with nogil:
            _gemm(False, True, V, N, d, 1.0, &x[0, 0], &g[0, 0], 0.0, &A[0, 0])
            for v in range(V):
                for j in range(N):
                    A[v, j] = exp(-beta * (1.0 - A[v, j]))
                    z[v, labels[j]] += w_ta * A[v, j]

    lp_arr = np.empty((V, C))
    p_arr = np.empty((V, C))
    lq_raw_arr = np.empty((N, C))
    lq_arr = np.empty((N, C))
    a_arr = np.empty((V, N))
    psi_arr = np.empty((V, N))
    span_arr = np.ones(V)
    cdef double[:, ::1] lp = lp_arr, p = p_arr, lq_raw = lq_raw_arr, lq = lq_arr, a = a_arr, psi = psi_arr
    cdef double[::1] span = span_arr
    cdef double lo, hi, tol, cnt_lo, cnt_hi
    cdef double[:, :, ::1] ext
    if extrema is None:
        extrema = np.zeros((2, V, N))
        compute_extrema = not psi_exp
    else:
        extrema = np.array(extrema, dtype=np.float64, copy=True)
        compute_extrema = False
    ext = extrema
    cdef bint find_ext = compute_extrema

    if w_tx != 0.0:
        with nogil:
            for v in range(V):
                for c in range(C):
                    lp[v, c] = zs[v, c]
            _log_softmax_rows(&lp[0, 0], V, C, inv_tau)
            for v in range(V):
                for c in range(C):
                    p[v, c] = exp(lp[v, c])
            _gemm(False, True, N, C, d, 1.0, &g[0, 0], &W[0, 0], 0.0, &lq_raw[0, 0])
            _log_softmax_rows(&lq_raw[0, 0], N, C, inv_tau)
            for n in range(N):
                for c in range(C):
                    lq[n, c] = lq_raw[n, c] if lq_raw[n, c] > LOG_KL_EPS else LOG_KL_EPS
            _gemm(False, True, V, N, C, 1.0, &p[0, 0], &lq[0, 0], 0.0, &a[0, 0])
            for v in range(V):
                acc = 0.0
                for c in range(C):
                    acc += p[v, c] * lp[v, c]
                for j in range(N):
                    a[v, j] -= acc
            for v in range(V):
                if psi_exp:
                    for j in range(N):
                        psi[v, j] = exp(psi_scale * a[v, j])
                else:
                    if find_ext:
                        lo = a[v, 0]
                        hi = a[v, 0]
                        for j in range(1, N):
                            if a[v, j] < lo:
                                lo = a[v, j]
                            if a[v, j] > hi:
                                hi = a[v, j]
                        if hi - lo > CONSTANT_RANGE:
                            tol = TIE_TOL * (1.0 + (hi if hi > -lo else -lo))
                            cnt_lo = 0.0
                            cnt_hi = 0.0
                            for j in range(N):
                                if a[v, j] <= lo + tol:
                                    ext[0, v, j] = 1.0
                                    cnt_lo += 1.0
                                if a[v, j] >= hi - tol:
                                    ext[1, v, j] = 1.0
                                    cnt_hi += 1.0
                            for j in range(N):
                                ext[0, v, j] /= cnt_lo
                                ext[1, v, j] /= cnt_hi
                    lo = 0.0
                    hi = 0.0
                    cnt_lo = 0.0
                    for j in range(N):
                        lo += ext[0, v, j] * a[v, j]
                        hi += ext[1, v, j] * a[v, j]
                        cnt_lo += ext[0, v, j]
                    if cnt_lo == 0.0:
                        span[v] = 0.0
                        for j in range(N):
                            psi[v, j] = 0.5
                    else:
                        span[v] = hi - lo
                        for j in range(N):
                            psi[v, j] = (a[v, j] - lo) / span[v]
                for j in range(N):
                    z[v, labels[j]] += w_tx * psi[v, j]

    logP_arr = np.array(z_arr, copy=True)
    P_arr = np.empty((V, C))
    ent_arr = np.empty(V)
    cdef double[:, ::1] logP = logP_arr, P = P_arr
    cdef double[::1] ent = ent_arr
    with nogil:
        _log_softmax_rows(&logP[0, 0], V, C, inv_tau)
        for v in range(V):
            acc = 0.0
            for c in range(C):
                P[v, c] = exp(logP[v, c])
                acc -= P[v, c] * logP[v, c]
            ent[v] = acc

    if selected is None:
        selected = np.sort(np.argsort(ent_arr, kind="stable")[:n_select]).astype(np.int64)
    else:
        selected = np.asarray(selected, dtype=np.int64)
    cdef int64_t[::1] sel = selected
    s = sel.shape[0]

    pbar_arr = np.zeros(C)
    dlog_arr = np.zeros(C)
    cdef double[::1] pbar = pbar_arr, dlog = dlog_arr
    cdef double loss = 0.0
    with nogil:
        for i in range(s):
            for c in range(C):
                pbar[c] += P[sel[i], c] / s
        for c in range(C):
            if pbar[c] > 0.0:
                loss -= pbar[c] * log(pbar[c])
                dlog[c] = -(log(pbar[c]) + 1.0) / s

    grad_vid_arr = np.zeros(N)
    grad_fr_arr = np.zeros(T)
    if not want_grad or (w_ta == 0.0 and w_tx == 0.0):
        return loss, grad_vid_arr, grad_fr_arr, selected, extrema, P_arr

    cdef double[::1] grad_vid = grad_vid_arr, grad_fr = grad_fr_arr
    dz_arr = np.zeros((V, C))
    dg_arr = np.zeros((N, d))
    ds_arr = np.zeros((V, N))
    da_arr = np.zeros((V, N))
    dlq_arr = np.empty((N, C))
    cdef double[:, ::1] dz = dz_arr, dg = dg_arr, ds = ds_arr, da = da_arr, dlq = dlq_arr
    cdef double corr_lo, corr_hi, tot

    with nogil:
        for i in range(s):
            v = sel[i]
            acc = 0.0
            for c in range(C):
                acc += P[v, c] * dlog[c]
            for c in range(C):
                dz[v, c] = P[v, c] * (dlog[c] - acc) * inv_tau

        if w_ta != 0.0:
            for v in range(V):
                for j in range(N):
                    ds[v, j] = w_ta * dz[v, labels[j]] * beta * A[v, j]
            _gemm(True, False, N, d, V, 1.0, &ds[0, 0], &x[0, 0], 1.0, &dg[0, 0])

        if w_tx != 0.0:
            for v in range(V):
                if psi_exp:
                    for j in range(N):
                        da[v, j] = w_tx * dz[v, labels[j]] * psi_scale * psi[v, j]
                elif span[v] != 0.0:
                    corr_lo = 0.0
                    corr_hi = 0.0
                    for j in range(N):
                        tot = w_tx * dz[v, labels[j]]
                        da[v, j] = tot / span[v]
                        corr_lo += tot * (psi[v, j] - 1.0)
                        corr_hi -= tot * psi[v, j]
                    for j in range(N):
                        da[v, j] += (ext[0, v, j] * corr_lo + ext[1, v, j] * corr_hi) / span[v]
            _gemm(True, False, N, C, V, 1.0, &da[0, 0], &p[0, 0], 0.0, &dlq[0, 0])
            for n in range(N):
                acc = 0.0
                for c in range(C):
                    if lq_raw[n, c] < LOG_KL_EPS:
                        dlq[n, c] = 0.0
                    acc += dlq[n, c]
                for c in range(C):
                    dlq[n, c] = dlq[n, c] - exp(lq_raw[n, c]) * acc
            _gemm(False, False, N, d, C, inv_tau, &dlq[0, 0], &W[0, 0], 1.0, &dg[0, 0])

        for n in range(N):
            acc = 0.0
            for i in range(d):
                acc += dg[n, i] * h[n, i]
            grad_vid[n] = acc
        for t in range(k):
            acc = 0.0
            for n in range(N):
                tot = 0.0
                for i in range(d):
                    tot += dg[n, i] * F[n, frames[t], i]
                acc += r_vid[n] * tot
            grad_fr[frames[t]] = acc * inv_k

    return loss, grad_vid_arr, grad_fr_arr, selected, extrema, P_arr
