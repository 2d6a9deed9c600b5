"""Zero-shot, cache (TIP-Adapter) and KL-affinity (TIP-X) inference paths.

Support features are pooled over frames and used as-is: a per-video scale
survives into every similarity, which is what lets a per-video weight act
as a sharpness control. Test features are renormalized after pooling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, EmptySelection, IndexOutOfRange, InvariantViolation
from .numerics import LOG_KL_EPS, l2_normalize, log_softmax, softmax

PSI_MODES = ("affine", "exponential")
# affinity vectors whose range is below this are treated as constant
CONSTANT_RANGE = 1e-12


@dataclass(frozen=True)
class PredictorConfig:
    beta: float = 5.5
    tau: float = 0.01
    blend: tuple = (1.0, 0.0, 1.0)
    psi_mode: str = "affine"
    psi_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "blend", tuple(float(w) for w in self.blend))
        if not self.beta > 0:
            raise InvariantViolation("beta must be > 0")
        if not self.tau > 0:
            raise InvariantViolation("tau must be > 0")
        if len(self.blend) != 3 or min(self.blend) < 0 or max(self.blend) <= 0:
            raise InvariantViolation("blend needs three nonnegative weights, at least one positive")
        if self.psi_mode not in PSI_MODES:
            raise InvariantViolation(f"psi_mode must be one of {PSI_MODES}")
        if not self.psi_scale > 0:
            raise InvariantViolation("psi_scale must be > 0")

    def to_dict(self):
        return {"beta": self.beta, "tau": self.tau, "blend": list(self.blend),
                "psi_mode": self.psi_mode, "psi_scale": self.psi_scale}


def _matrix(W):
    return np.asarray(getattr(W, "W", W), dtype=np.float64)


def pool_frames(features, indices):
    """Mean of the selected frame rows of a T x d block (or of a batch ... x T x d)."""
    features = np.asarray(features, dtype=np.float64)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise EmptySelection("no frames selected")
    T = features.shape[-2]
    if idx.min() < 0 or idx.max() >= T:
        raise IndexOutOfRange(f"frame index outside [0, {T})")
    return features[..., idx, :].mean(axis=-2)


def zero_shot_logits(f, W):
    W = _matrix(W)
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != W.shape[1]:
        raise DimMismatch(f"feature dim {f.shape[-1]} vs W dim {W.shape[1]}")
    return f @ W.T


def tip_adapter_logits(f, F_pooled, L, beta):
    f = np.asarray(f, dtype=np.float64)
    F_pooled = np.asarray(F_pooled, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if f.shape[-1] != F_pooled.shape[1] or F_pooled.shape[0] != L.shape[0]:
        raise DimMismatch(f"f {f.shape}, F {F_pooled.shape}, L {L.shape}")
    affinity = np.exp(-beta * (1.0 - f @ F_pooled.T))
    return affinity @ L


def kl_affinity_vector(f, F_pooled, W, temperature):
    """Negated KL between the text-bridged class distributions of ``f`` and each support row.

    Works on a single feature (d,) or a batch (V, d); returns (CK,) or (V, CK).
    """
    W = _matrix(W)
    f = np.asarray(f, dtype=np.float64)
    F_pooled = np.asarray(F_pooled, dtype=np.float64)
    if f.shape[-1] != W.shape[1] or F_pooled.shape[1] != W.shape[1]:
        raise DimMismatch(f"f {f.shape}, F {F_pooled.shape}, W {W.shape}")
    log_p = log_softmax(f @ W.T, temperature)
    p = np.exp(log_p)
    log_q = np.maximum(log_softmax(F_pooled @ W.T, temperature), LOG_KL_EPS)
    self_term = np.sum(p * log_p, axis=-1, keepdims=True)
    return p @ log_q.T - self_term


def affine_rescale(a):
    """Map each row of ``a`` linearly onto [0, 1]; constant rows become 0.5."""
    a = np.asarray(a, dtype=np.float64)
    lo = a.min(axis=-1, keepdims=True)
    hi = a.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span <= CONSTANT_RANGE
    out = (a - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


def psi(affinities, config):
    if config.psi_mode == "affine":
        return affine_rescale(affinities)
    return np.exp(config.psi_scale * np.asarray(affinities, dtype=np.float64))


def tip_x_logits(kl_affinities, L, config):
    return psi(kl_affinities, config) @ np.asarray(L, dtype=np.float64)


def blend_logits(z_zs, z_ta, z_tx, config):
    z_zs, z_ta, z_tx = (np.asarray(z, dtype=np.float64) for z in (z_zs, z_ta, z_tx))
    if not z_zs.shape == z_ta.shape == z_tx.shape:
        raise DimMismatch(f"logit shapes differ: {z_zs.shape}, {z_ta.shape}, {z_tx.shape}")
    w_zs, w_ta, w_tx = config.blend
    return w_zs * z_zs + w_ta * z_ta + w_tx * z_tx


def blended_logits(f, F_pooled, W, L, config):
    """All three paths for unit test feature(s) ``f`` against pooled support rows."""
    z_zs = zero_shot_logits(f, W)
    z_ta = tip_adapter_logits(f, F_pooled, L, config.beta)
    z_tx = tip_x_logits(kl_affinity_vector(f, F_pooled, W, config.tau), L, config)
    return blend_logits(z_zs, z_ta, z_tx, config)


def predict_views(F_weighted, views, frame_indices, W, L, config):
    """Class distributions (V x C) for every augmented view.

    The same ``frame_indices`` are applied to the support block and to each
    view before pooling.
    """
    F_weighted = np.asarray(F_weighted, dtype=np.float64)
    views = np.asarray(views, dtype=np.float64)
    if F_weighted.shape[1:] != views.shape[1:]:
        raise DimMismatch(f"support {F_weighted.shape} vs views {views.shape}")
    support = pool_frames(F_weighted, frame_indices)
    f = l2_normalize(pool_frames(views, frame_indices))
    return softmax(blended_logits(f, support, W, L, config), config.tau)
