"""NumPy implementation of the fused tuning-step kernel.

Forward: factorized reweighting -> frame pooling -> blended zero-shot /
cache / KL-affinity logits per view -> class softmax -> confident-view
selection -> entropy of the averaged distribution. Backward: exact gradient
of that loss w.r.t. the per-video and per-frame weights with the frame set,
the selected views and (affine mode) each view's affinity argmin/argmax held
fixed. Tied extremes share the min/max role equally.
"""
import numpy as np

LOG_KL_EPS = float(np.log(1e-12))
CONSTANT_RANGE = 1e-12
TIE_TOL = 1e-12


def extreme_weights(a):
    """Uniform weights over each row's (near-)tied minima and maxima, shape (2, V, N).

    Rows whose range is at most ``CONSTANT_RANGE`` get all-zero weights.
    """
    lo = a.min(axis=1, keepdims=True)
    hi = a.max(axis=1, keepdims=True)
    tol = TIE_TOL * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
    w_lo = (a <= lo + tol).astype(np.float64)
    w_hi = (a >= hi - tol).astype(np.float64)
    # NaN rows have no extreme; the caller reports the non-finite loss
    with np.errstate(invalid="ignore"):
        w_lo /= w_lo.sum(axis=1, keepdims=True)
        w_hi /= w_hi.sum(axis=1, keepdims=True)
    flat = (hi - lo)[:, 0] <= CONSTANT_RANGE
    w_lo[flat] = 0.0
    w_hi[flat] = 0.0
    return np.stack([w_lo, w_hi])


def _log_softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(F, r_vid, r_fr, frames, views, W, labels, beta, tau,
                  w_zs, w_ta, w_tx, psi_exp, psi_scale, n_select,
                  selected=None, extrema=None, want_grad=True):
    """Return ``(loss, grad_vid, grad_fr, selected, extrema, probs)``.

    ``selected`` (ascending view indices) and ``extrema`` (see
    :func:`extreme_weights`) are computed when not given.
    ``probs`` is the V x C matrix of per-view class distributions.
    """
    N, T, d = F.shape
    C = W.shape[0]
    frames = np.asarray(frames, dtype=np.intp)
    k = frames.shape[0]

    Fs = F[:, frames, :]
    h = np.einsum("t,ntd->nd", r_fr[frames], Fs) / k
    g = r_vid[:, None] * h

    x = views[:, frames, :].mean(axis=1)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    V = x.shape[0]
    onehot = np.zeros((N, C))
    onehot[np.arange(N), labels] = 1.0

    zs = x @ W.T
    z = w_zs * zs

    if w_ta != 0.0:
        A = np.exp(-beta * (1.0 - x @ g.T))
        z = z + w_ta * (A @ onehot)

    if w_tx != 0.0:
        lp = _log_softmax_rows(zs / tau)
        p = np.exp(lp)
        lq_raw = _log_softmax_rows(g @ W.T / tau)
        lq = np.maximum(lq_raw, LOG_KL_EPS)
        a = p @ lq.T - np.sum(p * lp, axis=1, keepdims=True)
        if psi_exp:
            psi = np.exp(psi_scale * a)
            if extrema is None:
                extrema = np.zeros((2, V, N))
        else:
            if extrema is None:
                extrema = extreme_weights(a)
            lo = np.sum(extrema[0] * a, axis=1)
            hi = np.sum(extrema[1] * a, axis=1)
            flat = extrema[0].sum(axis=1) == 0
            span = np.where(flat, 1.0, hi - lo)
            psi = np.where(flat[:, None], 0.5, (a - lo[:, None]) / span[:, None])
        z = z + w_tx * (psi @ onehot)
    elif extrema is None:
        extrema = np.zeros((2, V, N))

    logP = _log_softmax_rows(z / tau)
    P = np.exp(logP)
    ent = -np.sum(P * logP, axis=1)
    if selected is None:
        order = np.argsort(ent, kind="stable")
        selected = np.sort(order[:n_select])
    selected = np.asarray(selected, dtype=np.intp)
    s = selected.shape[0]
    pbar = P[selected].mean(axis=0)
    pos = pbar > 0
    log_pbar = np.where(pos, np.log(np.where(pos, pbar, 1.0)), 0.0)
    loss = float(-np.sum(pbar * log_pbar))

    grad_vid = np.zeros(N)
    grad_fr = np.zeros(T)
    if not want_grad or (w_ta == 0.0 and w_tx == 0.0):
        return loss, grad_vid, grad_fr, selected, extrema, P

    dP = np.zeros((V, C))
    dP[selected] = np.where(pos, -(log_pbar + 1.0), 0.0) / s
    dz = P * (dP - np.sum(P * dP, axis=1, keepdims=True)) / tau
    dz_lab = dz[:, labels]

    dg = np.zeros((N, d))
    if w_ta != 0.0:
        ds = w_ta * dz_lab * beta * A
        dg += ds.T @ x
    if w_tx != 0.0:
        dpsi = w_tx * dz_lab
        if psi_exp:
            da = dpsi * psi_scale * psi
        else:
            da = dpsi / span[:, None]
            corr_lo = np.sum(dpsi * (psi - 1.0), axis=1) / span
            corr_hi = -np.sum(dpsi * psi, axis=1) / span
            da += extrema[0] * corr_lo[:, None] + extrema[1] * corr_hi[:, None]
            da[flat] = 0.0
        dlq = (da.T @ p) * (lq_raw >= LOG_KL_EPS)
        q = np.exp(lq_raw)
        du = dlq - q * dlq.sum(axis=1, keepdims=True)
        dg += (du @ W) / tau

    grad_vid = np.sum(dg * h, axis=1)
    dh = r_vid[:, None] * dg
    grad_fr[frames] = np.einsum("nd,ntd->t", dh, Fs) / k
    return loss, grad_vid, grad_fr, selected, extrema, P
