"""Dense numeric kernels: normalization, softmax, KL, entropy, top-k.

Storage elsewhere in the package is float32; everything here accumulates
in float64 and returns float64 arrays.
"""
import numpy as np

from .errors import KOutOfRange, LengthMismatch, NonPositiveTemperature, ZeroVector

#: floor applied to the second argument of :func:`kl_divergence` before the log
KL_EPS = 1e-12
LOG_KL_EPS = float(np.log(KL_EPS))

_ZERO_NORM = 1e-12


def l2_normalize(v, axis=-1):
    """Scale ``v`` to unit Euclidean norm along ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ZeroVector("cannot normalize an empty vector")
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm <= _ZERO_NORM):
        raise ZeroVector("vector norm is zero")
    return v / norm


def softmax(logits, temperature=1.0, axis=-1):
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, temperature=1.0, axis=-1):
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def kl_divergence(p, q):
    """KL(p || q) in nats; zero-mass terms of ``p`` are skipped, ``q`` is floored."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"distribution lengths differ: {p.shape} vs {q.shape}")
    mask = p > 0
    pm = p[mask]
    qm = np.maximum(q[mask], KL_EPS)
    return float(np.sum(pm * (np.log(pm) - np.log(qm))))


def entropy(p):
    """Shannon entropy in nats with 0 ln 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    pm = p[p > 0]
    return float(-np.sum(pm * np.log(pm)))


def topk_indices(values, k):
    """Indices of the ``k`` largest values, ties to the smaller index, sorted ascending."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    # stable sort on the negated values keeps the smaller index first among ties
    order = np.argsort(-values, kind="stable")
    return np.sort(order[:k])
