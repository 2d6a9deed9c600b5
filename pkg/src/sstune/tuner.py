"""Test-time erosion of the support set.

Per-video and per-frame weights scale the support features; they are tuned
on a single test video by minimizing the entropy of the averaged prediction
over its most confident augmented views, sweeping several temporal scales.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import fused
from .errors import DimMismatch, KOutOfRange, InvariantViolation, NonFiniteLoss, ShapeMismatch
from .numerics import entropy, l2_normalize, softmax, topk_indices
from .predictors import (
    PredictorConfig,
    blended_logits,
    kl_affinity_vector,
    pool_frames,
    predict_views,
    tip_adapter_logits,
    zero_shot_logits,
)

DEFAULT_STAGES = ((8, 4), (6, 3), (4, 3))
STRATEGIES = ("top", "random")


@dataclass
class FactorizedWeights:
    r_vid: np.ndarray
    r_fr: np.ndarray

    @classmethod
    def ones(cls, n_videos, n_frames):
        return cls(np.ones(n_videos), np.ones(n_frames))

    def copy(self):
        return FactorizedWeights(self.r_vid.copy(), self.r_fr.copy())

    def flat(self):
        return np.concatenate([self.r_vid, self.r_fr])

    @classmethod
    def from_flat(cls, theta, n_videos):
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta[:n_videos].copy(), theta[n_videos:].copy())


@dataclass(frozen=True)
class TuningSchedule:
    stages: tuple = DEFAULT_STAGES
    strategy: str = "top"
    rng_seed: int = 0
    repeats: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(k), int(s)) for k, s in self.stages))
        if not self.stages:
            raise InvariantViolation("schedule needs at least one stage")
        if any(k < 1 or s < 1 for k, s in self.stages):
            raise InvariantViolation("every stage needs scale >= 1 and steps >= 1")
        if self.strategy not in STRATEGIES:
            raise InvariantViolation(f"strategy must be one of {STRATEGIES}")
        if self.repeats < 1:
            raise InvariantViolation("repeats must be >= 1")

    @property
    def total_steps(self):
        return self.repeats * sum(s for _, s in self.stages)

    def check(self, T):
        for k, _ in self.stages:
            if not 1 <= k <= T:
                raise KOutOfRange(f"scale {k} outside [1, {T}]")

    @classmethod
    def parse(cls, text, **kwargs):
        """Parse ``"8x4,6x3,4x3"`` (scale x steps) into a schedule."""
        stages = []
        for part in text.split(","):
            k, _, s = part.strip().partition("x")
            stages.append((int(k), int(s)))
        return cls(stages=tuple(stages), **kwargs)

    def to_dict(self):
        return {"stages": [list(s) for s in self.stages], "strategy": self.strategy,
                "rng_seed": self.rng_seed, "repeats": self.repeats}


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def to_dict(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay}


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, n_params, config=None):
        config = config or OptimizerConfig()
        return cls(np.zeros(n_params), np.zeros(n_params), 0, **config.to_dict())


@dataclass(frozen=True)
class ConfidenceFilter:
    rho: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise InvariantViolation("rho must lie in (0, 1]")

    def count(self, n_views):
        return max(1, int(math.floor(self.rho * n_views)))


@dataclass
class TuningTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def scales(self):
        return [r["scale"] for r in self.records]

    @property
    def losses(self):
        return [r["loss"] for r in self.records]

    def to_jsonl(self):
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def apply_weights(F, weights):
    F = np.asarray(F, dtype=np.float64)
    r_vid = np.asarray(weights.r_vid, dtype=np.float64)
    r_fr = np.asarray(weights.r_fr, dtype=np.float64)
    if F.ndim != 3 or r_vid.shape != (F.shape[0],) or r_fr.shape != (F.shape[1],):
        raise DimMismatch(f"F {F.shape}, r_vid {r_vid.shape}, r_fr {r_fr.shape}")
    return F * r_vid[:, None, None] * r_fr[None, :, None]


def select_frames(r_fr, k, strategy="top", rng=None):
    T = len(r_fr)
    if not 1 <= k <= T:
        raise KOutOfRange(f"k={k} outside [1, {T}]")
    if k == T:
        return np.arange(T)
    if strategy == "top":
        return topk_indices(r_fr, k)
    if strategy == "random":
        if rng is None:
            raise ValueError("random frame selection needs an rng")
        return np.sort(rng.choice(T, size=k, replace=False))
    raise ValueError(f"unknown strategy {strategy!r}")


def marginal_entropy_loss(view_distributions, conf_filter):
    """Entropy of the mean distribution over the lowest-entropy views.

    Returns ``(loss, selected)``; ``selected`` is ascending.
    """
    P = np.asarray(view_distributions, dtype=np.float64)
    ents = np.array([entropy(p) for p in P])
    order = np.argsort(ents, kind="stable")
    selected = np.sort(order[:conf_filter.count(P.shape[0])])
    return entropy(P[selected].mean(axis=0)), selected


def _labels(L):
    L = np.asarray(L)
    return np.argmax(L, axis=1).astype(np.int64)


def _kernel_args(F, weights, views, frame_indices, W, L, config, conf_filter):
    F = np.ascontiguousarray(F, dtype=np.float64)
    views = np.ascontiguousarray(views, dtype=np.float64)
    W = np.ascontiguousarray(getattr(W, "W", W), dtype=np.float64)
    if F.shape[1:] != views.shape[1:] or F.shape[2] != W.shape[1]:
        raise DimMismatch(f"F {F.shape}, views {views.shape}, W {W.shape}")
    w_zs, w_ta, w_tx = config.blend
    return (
        F,
        np.ascontiguousarray(weights.r_vid, dtype=np.float64),
        np.ascontiguousarray(weights.r_fr, dtype=np.float64),
        np.ascontiguousarray(frame_indices, dtype=np.int64),
        views, W, _labels(L),
        float(config.beta), float(config.tau), float(w_zs), float(w_ta), float(w_tx),
        config.psi_mode == "exponential", float(config.psi_scale),
        conf_filter.count(views.shape[0]),
    )


def loss_and_gradients(F, weights, views, frame_indices, W, L, config, conf_filter, kernel=None):
    """Loss plus analytic gradients; also returns the frozen selections."""
    kernel = kernel or fused.loss_and_grad
    loss, g_vid, g_fr, selected, extrema, _ = kernel(
        *_kernel_args(F, weights, views, frame_indices, W, L, config, conf_filter))
    return loss, np.asarray(g_vid), np.asarray(g_fr), np.asarray(selected), np.asarray(extrema)


def loss_gradients(F, weights, views, frame_indices, W, L, config, conf_filter):
    """Gradients of the confident-view marginal entropy w.r.t. (r_vid, r_fr)."""
    _, g_vid, g_fr, _, _ = loss_and_gradients(F, weights, views, frame_indices, W, L, config, conf_filter)
    return g_vid, g_fr


def central_differences(fn, theta, h=1e-3):
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (fn(up) - fn(dn)) / (2.0 * h)
    return grad


def frozen_loss(F, weights, views, frame_indices, W, L, config, selected, extrema):
    """Loss through the plain predictor path with view selection and affinity extrema fixed."""
    Wm = np.asarray(getattr(W, "W", W), dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    support = pool_frames(apply_weights(F, weights), frame_indices)
    f = l2_normalize(pool_frames(np.asarray(views, dtype=np.float64), frame_indices))
    w_zs, w_ta, w_tx = config.blend
    z = w_zs * zero_shot_logits(f, Wm) + w_ta * tip_adapter_logits(f, support, L, config.beta)
    a = kl_affinity_vector(f, support, Wm, config.tau)
    if config.psi_mode == "exponential":
        psi = np.exp(config.psi_scale * a)
    else:
        w_lo, w_hi = np.asarray(extrema, dtype=np.float64)
        psi = np.full_like(a, 0.5)
        for v in range(a.shape[0]):
            if w_lo[v].any():
                lo, hi = w_lo[v] @ a[v], w_hi[v] @ a[v]
                psi[v] = (a[v] - lo) / (hi - lo)
    z = z + w_tx * (psi @ L)
    P = softmax(z, config.tau)
    return entropy(P[np.asarray(selected)].mean(axis=0))


def finite_difference_gradients(F, weights, views, frame_indices, W, L, config, conf_filter, h=1e-3,
                                loss_fn=None):
    """Central-difference gradients with every selection frozen at the unperturbed point.

    ``loss_fn(theta)`` may be supplied to difference an arbitrary function of
    the flattened ``(r_vid, r_fr)`` vector instead.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    n_vid = len(weights.r_vid)
    if loss_fn is None:
        _, _, _, selected, extrema = loss_and_gradients(
            F, weights, views, frame_indices, W, L, config, conf_filter)

        def loss_fn(theta):
            return frozen_loss(F, FactorizedWeights.from_flat(theta, n_vid), views, frame_indices,
                               W, L, config, selected, extrema)

    grad = central_differences(loss_fn, weights.flat(), h)
    return grad[:n_vid], grad[n_vid:]


def adamw_step(state, params, grads):
    """One AdamW update with decoupled weight decay; returns ``(params, state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeMismatch(f"params {params.shape}, grads {grads.shape}, state {state.first_moment.shape}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps) - state.lr * state.weight_decay * params
    return new, replace(state, first_moment=m, second_moment=v, step_count=t)


def tune(support, test, W, schedule=None, predictor_config=None, conf_filter=None,
         optimizer_config=None, train_r_vid=True, train_r_fr=True):
    """Tune factorized weights on one test instance; returns ``(weights, trace)``."""
    schedule = schedule or TuningSchedule()
    config = predictor_config or PredictorConfig()
    conf_filter = conf_filter or ConfidenceFilter()
    F = np.ascontiguousarray(support.F, dtype=np.float64)
    views = np.ascontiguousarray(test.views, dtype=np.float64)
    N, T, _ = F.shape
    if views.shape[1:] != F.shape[1:]:
        raise DimMismatch(f"support {F.shape} vs test views {views.shape}")
    schedule.check(T)

    weights = FactorizedWeights.ones(N, T)
    state = OptimizerState.init(N + T, optimizer_config)
    frozen = np.zeros(N + T, dtype=bool)
    frozen[:N] = not train_r_vid
    frozen[N:] = not train_r_fr
    rng = np.random.default_rng(schedule.rng_seed)
    trace = TuningTrace()

    step = 0
    for _ in range(schedule.repeats):
        for stage, (k, n_steps) in enumerate(schedule.stages):
            for _ in range(n_steps):
                frames = select_frames(weights.r_fr, k, schedule.strategy, rng)
                loss, g_vid, g_fr, _, _ = loss_and_gradients(
                    F, weights, views, frames, W, support.L, config, conf_filter)
                grads = np.concatenate([g_vid, g_fr])
                grads[frozen] = 0.0
                record = {
                    "step": step, "stage": stage, "scale": int(k),
                    "frame_indices": [int(i) for i in frames], "loss": float(loss),
                    "grad_norm_vid": float(np.linalg.norm(grads[:N])),
                    "grad_norm_fr": float(np.linalg.norm(grads[N:])),
                }
                if not (np.isfinite(loss) and np.all(np.isfinite(grads))):
                    trace.records.append(record)
                    raise NonFiniteLoss(f"non-finite loss or gradient at step {step}", trace=trace)
                theta = weights.flat()
                new, state = adamw_step(state, theta, grads)
                new[frozen] = theta[frozen]
                weights = FactorizedWeights.from_flat(new, N)
                trace.records.append(record)
                step += 1
    return weights, trace


def evaluate_loss(support, test, weights, W, predictor_config=None, conf_filter=None, frame_indices=None):
    """Marginal-entropy loss of ``weights`` at the given frames (all frames by default)."""
    config = predictor_config or PredictorConfig()
    conf_filter = conf_filter or ConfidenceFilter()
    frames = np.arange(support.T) if frame_indices is None else frame_indices
    F_w = apply_weights(support.F, weights)
    P = predict_views(F_w, test.views, frames, W, support.L, config)
    return marginal_entropy_loss(P, conf_filter)[0]


def final_predict(support, test, weights, W, predictor_config=None):
    """Blended logits of the un-augmented test video and the predicted class."""
    config = predictor_config or PredictorConfig()
    frames = np.arange(support.T)
    pooled = pool_frames(apply_weights(support.F, weights), frames)
    f = l2_normalize(pool_frames(test.original, frames))
    logits = blended_logits(f, pooled, W, support.L, config)
    return logits, int(np.argmax(logits))
