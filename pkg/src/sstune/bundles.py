"""Embedding bundles, their on-disk directory format, and support-set composition.

A bundle directory holds ``manifest.json`` plus one ``<name>.bin`` per array:
raw little-endian float32, row-major, no header. The manifest records the
shape of every array and, for integrity checks, each blob's byte count and
sha256.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (
    CorruptBlob,
    DimMismatch,
    FactorabilityViolation,
    InvariantViolation,
    IoFailure,
    MissingVideo,
    SchemaMismatch,
    ShapeMismatch,
)

SCHEMA_VERSION = 1
DTYPE = "f32le"
_NORM_TOL = 1e-5


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if any(not isinstance(c, str) or not c for c in self.classes):
            raise InvariantViolation("class names must be non-empty strings")
        if len(set(self.classes)) != len(self.classes):
            raise InvariantViolation("class names must be unique")

    def __len__(self):
        return len(self.classes)

    def index(self, name):
        return self.classes.index(name)


@dataclass(frozen=True)
class PromptSet:
    """Per-class description lists (length M each) plus the sampling counts m, n."""

    descriptions: Mapping[str, Sequence[str]]
    m: int
    n: int

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise InvariantViolation("m and n must be >= 1")
        for name, descs in self.descriptions.items():
            if len(descs) < self.m:
                raise InvariantViolation(f"class {name!r} has {len(descs)} descriptions, needs m={self.m}")
            if any(not d for d in descs):
                raise InvariantViolation(f"class {name!r} has an empty description")

    @property
    def K(self):
        return self.m * self.n

    @property
    def M(self):
        return max((len(d) for d in self.descriptions.values()), default=0)

    def sample(self, seed=0):
        """Pick m of the M descriptions for every class (without replacement)."""
        rng = np.random.default_rng(seed)
        out = {}
        for name in sorted(self.descriptions):
            descs = list(self.descriptions[name])
            idx = np.sort(rng.choice(len(descs), size=self.m, replace=False))
            out[name] = [descs[i] for i in idx]
        return out

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(descriptions=raw["descriptions"], m=int(raw["m"]), n=int(raw["n"]))


@dataclass
class ClassTextFeatures:
    W: np.ndarray
    classes: tuple
    normalized: bool = True

    kind = "class_text"

    def validate(self):
        W = np.asarray(self.W)
        if W.ndim != 2:
            raise InvariantViolation(f"W must be 2-D, got shape {W.shape}")
        if W.shape[0] != len(self.classes):
            raise InvariantViolation(f"W has {W.shape[0]} rows for {len(self.classes)} classes")
        _check_finite(W, "W")
        if self.normalized:
            norms = np.linalg.norm(W.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > _NORM_TOL):
                raise InvariantViolation("W rows are not unit-norm")
        ClassCatalog(self.classes)

    @property
    def C(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]


@dataclass
class SupportSetBundle:
    """Support features F (CK x T x d), one-hot labels L (CK x C), provenance.

    ``provenance`` is an integer array with rows (class, prompt, repeat, outlier).
    Rows are ordered class-major, then prompt, then repeat.
    """

    F: np.ndarray
    L: np.ndarray
    provenance: np.ndarray
    classes: tuple
    M: int
    m: int
    n: int
    normalized: bool = True

    kind = "support_set"

    @property
    def C(self):
        return self.L.shape[1]

    @property
    def K(self):
        return self.m * self.n

    @property
    def T(self):
        return self.F.shape[1]

    @property
    def d(self):
        return self.F.shape[2]

    @property
    def labels(self):
        return np.asarray(self.provenance[:, 0], dtype=np.int64)

    @property
    def outlier_mask(self):
        return np.asarray(self.provenance[:, 3], dtype=bool)

    def validate(self):
        F, L, prov = self.F, self.L, np.asarray(self.provenance)
        if F.ndim != 3:
            raise InvariantViolation(f"F must be 3-D, got {F.shape}")
        if L.ndim != 2 or L.shape[0] != F.shape[0]:
            raise InvariantViolation(f"L shape {L.shape} does not match F {F.shape}")
        if L.shape[1] != len(self.classes):
            raise InvariantViolation("L columns do not match class count")
        _check_finite(F, "F")
        if not np.all((L == 0) | (L == 1)) or not np.all(L.sum(axis=1) == 1):
            raise InvariantViolation("L rows must be one-hot")
        if prov.shape != (F.shape[0], 4):
            raise InvariantViolation(f"provenance shape {prov.shape}, expected ({F.shape[0]}, 4)")
        if self.m > self.M:
            raise InvariantViolation(f"m={self.m} exceeds M={self.M}")
        K = self.m * self.n
        if F.shape[0] != K * len(self.classes):
            raise FactorabilityViolation(f"{F.shape[0]} videos for C={len(self.classes)}, K={K}")
        if not np.array_equal(np.argmax(L, axis=1), prov[:, 0]):
            raise InvariantViolation("provenance class disagrees with L")
        if np.any(np.bincount(prov[:, 0], minlength=len(self.classes)) != K):
            raise InvariantViolation("every class needs exactly K videos")
        if np.any(prov[:, 1] < 0) or np.any(prov[:, 1] >= self.m):
            raise InvariantViolation("prompt index outside [0, m)")
        if np.any(prov[:, 2] < 0) or np.any(prov[:, 2] >= self.n):
            raise InvariantViolation("repeat index outside [0, n)")
        if len({tuple(r) for r in prov[:, :3].tolist()}) != prov.shape[0]:
            raise InvariantViolation("duplicate (class, prompt, repeat) provenance")
        ClassCatalog(self.classes)


@dataclass
class TestInstanceBundle:
    views: np.ndarray
    original: np.ndarray
    ground_truth: Optional[int] = None
    classes: tuple = field(default_factory=tuple)

    kind = "test_instance"

    # keep pytest from collecting this class
    __test__ = False

    def validate(self):
        if self.views.ndim != 3 or self.views.shape[0] < 1:
            raise InvariantViolation(f"views must be V x T x d with V >= 1, got {self.views.shape}")
        if self.original.shape != self.views.shape[1:]:
            raise InvariantViolation(f"original {self.original.shape} vs views {self.views.shape}")
        _check_finite(self.views, "views")
        _check_finite(self.original, "original")


def _check_finite(a, name):
    if not np.all(np.isfinite(a)):
        raise InvariantViolation(f"{name} contains non-finite entries")


def _arrays(bundle):
    if isinstance(bundle, ClassTextFeatures):
        return {"W": bundle.W}
    if isinstance(bundle, SupportSetBundle):
        return {"F": bundle.F, "L": bundle.L}
    if isinstance(bundle, TestInstanceBundle):
        return {"views": bundle.views, "original": bundle.original}
    raise TypeError(f"not a bundle: {type(bundle).__name__}")


def _manifest_bytes(manifest):
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")


def save_bundle(bundle, path):
    """Write ``bundle`` under directory ``path`` and return the manifest's sha256."""
    bundle.validate()
    path = Path(path)
    blobs = {}
    shapes = {}
    payloads = {}
    for name, arr in _arrays(bundle).items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        payloads[name] = data
        shapes[name] = list(np.shape(arr))
        blobs[name] = {"nbytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": bundle.kind,
        "dtype": DTYPE,
        "shapes": shapes,
        "blobs": blobs,
        "normalized": bool(getattr(bundle, "normalized", False)),
        "classes": list(bundle.classes),
    }
    if isinstance(bundle, SupportSetBundle):
        manifest["prompt_counts"] = {"M": int(bundle.M), "m": int(bundle.m), "n": int(bundle.n)}
        manifest["provenance"] = np.asarray(bundle.provenance, dtype=np.int64).tolist()
    if isinstance(bundle, TestInstanceBundle):
        manifest["ground_truth"] = None if bundle.ground_truth is None else int(bundle.ground_truth)

    raw = _manifest_bytes(manifest)
    try:
        path.mkdir(parents=True, exist_ok=True)
        for name, data in payloads.items():
            (path / f"{name}.bin").write_bytes(data)
        (path / "manifest.json").write_bytes(raw)
    except OSError as exc:
        raise IoFailure(f"cannot write bundle to {path}: {exc}") from exc
    return hashlib.sha256(raw).hexdigest()


def _read_blob(path, name, shape, meta):
    blob_path = path / f"{name}.bin"
    try:
        data = blob_path.read_bytes()
    except OSError as exc:
        raise CorruptBlob(f"missing blob {blob_path}") from exc
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if meta is not None:
        # the blob is intact iff it matches the recorded size and digest; an
        # intact blob that disagrees with the declared shape is a manifest error
        if len(data) != meta.get("nbytes") or hashlib.sha256(data).hexdigest() != meta.get("sha256"):
            raise CorruptBlob(f"{blob_path}: contents do not match manifest digest")
        if len(data) != expected:
            raise ShapeMismatch(f"{name}: declared shape {shape} needs {expected} bytes, blob has {len(data)}")
    elif len(data) != expected:
        raise CorruptBlob(f"{blob_path}: {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def load_bundle(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise SchemaMismatch(f"no manifest.json in {path}") from exc
    except (OSError, ValueError) as exc:
        raise SchemaMismatch(f"unreadable manifest in {path}: {exc}") from exc

    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"unsupported schema_version {manifest.get('schema_version')!r}")
    if manifest.get("dtype") != DTYPE:
        raise SchemaMismatch(f"unsupported dtype {manifest.get('dtype')!r}")
    kind = manifest.get("kind")
    wanted = {
        "class_text": ("W",),
        "support_set": ("F", "L"),
        "test_instance": ("views", "original"),
    }
    if kind not in wanted:
        raise SchemaMismatch(f"unknown bundle kind {kind!r}")
    shapes = manifest.get("shapes", {})
    if set(shapes) != set(wanted[kind]):
        raise SchemaMismatch(f"{kind} bundle needs arrays {wanted[kind]}, manifest lists {sorted(shapes)}")
    blobs = manifest.get("blobs", {})
    arrays = {name: _read_blob(path, name, tuple(shapes[name]), blobs.get(name)) for name in wanted[kind]}
    classes = tuple(manifest.get("classes", ()))

    if kind == "class_text":
        W = arrays["W"]
        if W.ndim != 2 or W.shape[0] != len(classes):
            raise ShapeMismatch(f"W shape {W.shape} vs {len(classes)} classes")
        bundle = ClassTextFeatures(W=W, classes=classes, normalized=manifest.get("normalized", False))
    elif kind == "support_set":
        F, L = arrays["F"], arrays["L"]
        prov = np.asarray(manifest.get("provenance", []), dtype=np.int64)
        if F.ndim != 3 or L.ndim != 2 or F.shape[0] != L.shape[0] or L.shape[1] != len(classes):
            raise ShapeMismatch(f"F {F.shape}, L {L.shape}, {len(classes)} classes are inconsistent")
        if prov.shape != (F.shape[0], 4):
            raise ShapeMismatch(f"provenance shape {prov.shape} vs {F.shape[0]} videos")
        pc = manifest.get("prompt_counts") or {}
        bundle = SupportSetBundle(
            F=F, L=L, provenance=prov, classes=classes,
            M=int(pc.get("M", 0)), m=int(pc.get("m", 0)), n=int(pc.get("n", 0)),
            normalized=manifest.get("normalized", False),
        )
    else:
        views, original = arrays["views"], arrays["original"]
        if views.ndim != 3 or original.shape != views.shape[1:]:
            raise ShapeMismatch(f"views {views.shape} vs original {original.shape}")
        bundle = TestInstanceBundle(
            views=views, original=original, ground_truth=manifest.get("ground_truth"), classes=classes,
        )
    bundle.validate()
    return bundle


def manifest_digest(path):
    return hashlib.sha256(Path(path, "manifest.json").read_bytes()).hexdigest()


def support_row(class_idx, prompt_idx, repeat_idx, m, n):
    """Row of video (class, prompt, repeat) in F under class-major ordering."""
    return class_idx * m * n + prompt_idx * n + repeat_idx


def compose_support_set(catalog, prompts, per_video_features, outliers=None):
    """Stack per-video T x d features into a :class:`SupportSetBundle`.

    ``per_video_features`` maps ``(class_idx, prompt_idx, repeat_idx)`` to a
    T x d array. Optional ``outliers`` is a set of keys to flag in provenance.
    """
    C, m, n = len(catalog), prompts.m, prompts.n
    K = m * n
    outliers = set(outliers or ())
    for c in range(C):
        provided = sum(1 for key in per_video_features if key[0] == c)
        if provided != K:
            raise FactorabilityViolation(f"class {c} has {provided} videos, expected m*n = {K}")
    stray = [key for key in per_video_features if not 0 <= key[0] < C]
    if stray:
        raise FactorabilityViolation(f"videos for unknown classes: {stray[:3]}")

    shape = None
    F = None
    L = np.zeros((C * K, C), dtype=np.float32)
    prov = np.zeros((C * K, 4), dtype=np.int64)
    for c in range(C):
        for p in range(m):
            for r in range(n):
                key = (c, p, r)
                if key not in per_video_features:
                    raise MissingVideo(f"no features for (class={c}, prompt={p}, repeat={r})")
                x = np.asarray(per_video_features[key], dtype=np.float32)
                if x.ndim != 2:
                    raise DimMismatch(f"video {key} features must be T x d, got {x.shape}")
                if shape is None:
                    shape = x.shape
                    F = np.empty((C * K,) + shape, dtype=np.float32)
                elif x.shape != shape:
                    raise DimMismatch(f"video {key} has shape {x.shape}, expected {shape}")
                row = support_row(c, p, r, m, n)
                F[row] = x
                L[row, c] = 1.0
                prov[row] = (c, p, r, int(key in outliers))

    norms = np.linalg.norm(F.astype(np.float64), axis=-1)
    bundle = SupportSetBundle(
        F=F, L=L, provenance=prov, classes=tuple(catalog.classes),
        M=max(prompts.M, m), m=m, n=n,
        normalized=bool(np.all(np.abs(norms - 1.0) <= _NORM_TOL)),
    )
    bundle.validate()
    return bundle


def load_video_features(directory):
    """Read ``c{class}_p{prompt}_r{repeat}.npy`` files into the composition map."""
    out = {}
    for entry in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(entry)
        if ext != ".npy":
            continue
        try:
            c, p, r = (int(part[1:]) for part in stem.split("_"))
        except ValueError as exc:
            raise SchemaMismatch(f"unexpected feature file name {entry!r}") from exc
        out[(c, p, r)] = np.load(os.path.join(directory, entry))
    return out
