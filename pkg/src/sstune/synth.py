"""Seeded synthetic embedding generator and support-set dispersion statistics.

Random stream
-------------
One ``numpy.random.default_rng(seed)`` (PCG64) stream is created per call and
advanced in this fixed order:

1. class centers, ``C x d`` standard normals, each row normalized;
2. prompt sub-centers, class-major then prompt;
3. support frames, class-major, then prompt, repeat, frame;
4. outliers: per class, the chosen videos and their target classes;
5. test instances, one after another: sub-center, T frames, then V x T views.

Normals come from ``Generator.standard_normal`` (NumPy's ziggurat sampler).
Every isotropic perturbation ``sigma * g`` uses ``g ~ N(0, I_d / d)``, so
``sigma`` is the expected norm of the perturbation independent of ``d``.
Streams are reproducible within one NumPy major version, not across languages.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .bundles import ClassCatalog, ClassTextFeatures, SupportSetBundle, TestInstanceBundle, support_row
from .errors import InvariantViolation


@dataclass(frozen=True)
class SyntheticConfig:
    C: int = 5
    m: int = 2
    n: int = 2
    T: int = 8
    d: int = 16
    V: int = 8
    intra_prompt_noise: float = 0.05
    inter_prompt_spread: float = 0.3
    view_noise: float = 0.1
    outlier_fraction: float = 0.0
    outlier_distance: float = 0.0
    seed: int = 0
    num_tests: int = 50

    def __post_init__(self):
        for name in ("C", "m", "n", "T", "d", "V"):
            if getattr(self, name) < 1:
                raise InvariantViolation(f"{name} must be >= 1")
        if self.num_tests < 0:
            raise InvariantViolation("num_tests must be >= 0")
        for name in ("intra_prompt_noise", "inter_prompt_spread", "view_noise", "outlier_distance"):
            if getattr(self, name) < 0:
                raise InvariantViolation(f"{name} must be nonnegative")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise InvariantViolation("outlier_fraction must lie in [0, 1]")

    @property
    def K(self):
        return self.m * self.n

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        known = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        return cls(**known)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _gauss(rng, shape, d):
    return rng.standard_normal(shape) / np.sqrt(d)


def _move_toward(x, target, distance):
    """Move each row of ``x`` a Euclidean ``distance`` toward ``target`` (no overshoot)."""
    delta = target - x
    gap = np.linalg.norm(delta, axis=-1, keepdims=True)
    step = np.minimum(distance, gap)
    safe = np.where(gap > 0, gap, 1.0)
    return x + delta / safe * step


def synth_generate(config):
    """Generate ``(catalog, class_text, support, tests)`` from ``config``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    C, m, n, T, d, V, K = cfg.C, cfg.m, cfg.n, cfg.T, cfg.d, cfg.V, cfg.K

    centers = _unit(rng.standard_normal((C, d)))
    sub = _unit(centers[:, None, :] + cfg.inter_prompt_spread * _gauss(rng, (C, m, d), d))

    F = np.empty((C * K, T, d))
    for c in range(C):
        for p in range(m):
            for r in range(n):
                noise = cfg.intra_prompt_noise * _gauss(rng, (T, d), d)
                F[support_row(c, p, r, m, n)] = _unit(sub[c, p] + noise)

    prov = np.zeros((C * K, 4), dtype=np.int64)
    for c in range(C):
        for p in range(m):
            for r in range(n):
                prov[support_row(c, p, r, m, n)] = (c, p, r, 0)

    n_out = int(np.floor(cfg.outlier_fraction * K + 0.5))
    if n_out and C > 1:
        for c in range(C):
            picks = rng.choice(K, size=n_out, replace=False)
            targets = rng.integers(0, C - 1, size=n_out)
            for pick, t in zip(picks, targets):
                other = t + (t >= c)
                row = c * K + int(pick)
                F[row] = _unit(_move_toward(F[row], centers[other], cfg.outlier_distance))
                prov[row, 3] = 1

    L = np.zeros((C * K, C), dtype=np.float32)
    L[np.arange(C * K), prov[:, 0]] = 1.0

    classes = tuple(f"class_{i:03d}" for i in range(C))
    catalog = ClassCatalog(classes)
    text = ClassTextFeatures(W=centers.astype(np.float32), classes=classes, normalized=True)
    support = SupportSetBundle(
        F=F.astype(np.float32), L=L, provenance=prov, classes=classes, M=m, m=m, n=n, normalized=True,
    )

    tests = []
    for i in range(cfg.num_tests):
        c = i % C
        s = _unit(centers[c] + cfg.inter_prompt_spread * _gauss(rng, (d,), d))
        original = _unit(s + cfg.intra_prompt_noise * _gauss(rng, (T, d), d))
        views = _unit(original[None] + cfg.view_noise * _gauss(rng, (V, T, d), d))
        tests.append(TestInstanceBundle(
            views=views.astype(np.float32), original=original.astype(np.float32),
            ground_truth=c, classes=classes,
        ))
    return catalog, text, support, tests


def _pooled_units(F):
    pooled = np.asarray(F, dtype=np.float64).mean(axis=1)
    return _unit(pooled)


def dispersion_stats(bundle):
    """Per-class mean pairwise cosine distance, overall and split by prompt.

    Videos are pooled by the mean over frames and renormalized. Returns one
    dict per class; statistics without any contributing pair are ``None``.
    """
    units = _pooled_units(bundle.F)
    labels = bundle.labels
    prompts = np.asarray(bundle.provenance)[:, 1]
    report = []
    for c, name in enumerate(bundle.classes):
        rows = np.flatnonzero(labels == c)
        x = units[rows]
        dist = np.clip(1.0 - x @ x.T, 0.0, 2.0)
        iu = np.triu_indices(len(rows), k=1)
        pair_d = dist[iu]
        same = prompts[rows][iu[0]] == prompts[rows][iu[1]]

        def _mean(vals):
            return float(vals.mean()) if vals.size else None

        report.append({
            "class": int(c),
            "name": name,
            "videos": int(len(rows)),
            "mean_pairwise": _mean(pair_d),
            "within_prompt": _mean(pair_d[same]),
            "across_prompt": _mean(pair_d[~same]),
        })
    return report


def mean_intra_class_distance(bundle):
    vals = [r["mean_pairwise"] for r in dispersion_stats(bundle) if r["mean_pairwise"] is not None]
    return float(np.mean(vals)) if vals else None
