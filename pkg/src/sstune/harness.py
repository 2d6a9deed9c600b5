"""Dataset-level evaluation, the gradient gate, and report files."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .bundles import SupportSetBundle, load_bundle
from .errors import BundleInconsistency, SSTuneError
from .predictors import PredictorConfig
from .synth import SyntheticConfig, synth_generate
from .tuner import (
    ConfidenceFilter,
    FactorizedWeights,
    OptimizerConfig,
    TuningSchedule,
    evaluate_loss,
    final_predict,
    finite_difference_gradients,
    loss_and_gradients,
    select_frames,
    tune,
)

log = logging.getLogger(__name__)

# synthetic embeddings sit uniformly on the sphere, so unit temperature keeps
# the class softmax away from saturation (the 0.01 default targets CLIP-like cosines)
SYNTH_PREDICTOR = PredictorConfig(tau=1.0)


def instance_seed(global_seed, instance_id):
    """Per-instance seed derived from the instance id, independent of scheduling order."""
    digest = hashlib.blake2b(f"{global_seed}:{instance_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass
class ExperimentConfig:
    classtext: Optional[str] = None
    support: Optional[str] = None
    tests: Optional[str] = None
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    schedule: TuningSchedule = field(default_factory=TuningSchedule)
    conf_filter: ConfidenceFilter = field(default_factory=ConfidenceFilter)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    enable_msd_multiprompt: bool = True
    enable_tse: bool = True
    enable_r_vid: bool = True
    enable_r_fr: bool = True
    parallel: int = 1
    seed: int = 0
    out: Optional[str] = None
    write_traces: bool = False

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        base = Path(base_dir)

        def _path(key):
            value = raw.get(key)
            return None if value is None else str(base / value)

        pred = raw.get("predictor", {})
        if "blend" in pred:
            pred = dict(pred, blend=tuple(pred["blend"]))
        sched = dict(raw.get("schedule", {}))
        if isinstance(sched.get("stages"), str):
            sched["stages"] = TuningSchedule.parse(sched["stages"]).stages
        return cls(
            classtext=_path("classtext"), support=_path("support"), tests=_path("tests"),
            predictor=PredictorConfig(**pred),
            schedule=TuningSchedule(**sched),
            conf_filter=ConfidenceFilter(**raw.get("confidence", {})),
            optimizer=OptimizerConfig(**raw.get("optimizer", {})),
            enable_msd_multiprompt=raw.get("enable_msd_multiprompt", True),
            enable_tse=raw.get("enable_tse", True),
            enable_r_vid=raw.get("enable_r_vid", True),
            enable_r_fr=raw.get("enable_r_fr", True),
            parallel=int(raw.get("parallel", 1)),
            seed=int(raw.get("seed", 0)),
            out=_path("out"),
            write_traces=bool(raw.get("write_traces", False)),
        )

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), base_dir=path.parent)


@dataclass
class EvalReport:
    records: list
    classes: tuple
    wall_clock: float = 0.0

    def summary(self):
        ok = [r for r in self.records if r["status"] == "ok"]
        scored = [r for r in ok if r["ground_truth"] is not None]
        correct = sum(1 for r in scored if r["correct"])
        per_class = {}
        for c, name in enumerate(self.classes):
            mine = [r for r in scored if r["ground_truth"] == c]
            per_class[name] = (sum(1 for r in mine if r["correct"]) / len(mine)) if mine else None
        drops = [r["initial_loss"] - r["final_loss"] for r in ok]
        return {
            "count": len(self.records),
            "evaluated": len(scored),
            "failed": len(self.records) - len(ok),
            "top1_accuracy": (correct / len(scored)) if scored else None,
            "per_class_accuracy": per_class,
            "mean_loss_drop": float(np.mean(drops)) if drops else None,
        }

    @property
    def accuracy(self):
        return self.summary()["top1_accuracy"]

    @property
    def any_failed(self):
        return any(r["status"] != "ok" for r in self.records)


def single_prompt_subset(support):
    """Keep only prompt 0 of every class (the ablation with dilation switched off)."""
    prov = np.asarray(support.provenance)
    rows = np.flatnonzero(prov[:, 1] == 0)
    return SupportSetBundle(
        F=support.F[rows], L=support.L[rows], provenance=prov[rows], classes=support.classes,
        M=support.M, m=1, n=support.n, normalized=support.normalized,
    )


def load_tests(path):
    """A test bundle directory, or a directory of them; returns ``[(id, bundle)]``."""
    path = Path(path)
    if (path / "manifest.json").exists():
        return [(path.name, load_bundle(path))]
    subdirs = sorted(p for p in path.iterdir() if (p / "manifest.json").exists())
    return [(p.name, load_bundle(p)) for p in subdirs]


def check_consistency(text, support, tests):
    if tuple(text.classes) != tuple(support.classes):
        raise BundleInconsistency("class-text and support bundles list different classes")
    if text.d != support.d:
        raise BundleInconsistency(f"text dim {text.d} vs support dim {support.d}")
    for name, t in tests:
        if t.views.shape[1:] != (support.T, support.d):
            raise BundleInconsistency(f"test {name} has T x d {t.views.shape[1:]}, support {support.T} x {support.d}")


def evaluate_instance(instance_id, test, support, text, config):
    record = {"instance": instance_id, "predicted": None, "ground_truth": test.ground_truth,
              "correct": None, "initial_loss": None, "final_loss": None, "status": "ok", "error": None}
    trace = None
    try:
        ones = FactorizedWeights.ones(support.F.shape[0], support.T)
        initial = evaluate_loss(support, test, ones, text.W, config.predictor, config.conf_filter)
        weights = ones
        if config.enable_tse:
            schedule = replace(config.schedule, rng_seed=instance_seed(config.seed, instance_id))
            weights, trace = tune(
                support, test, text.W, schedule, config.predictor, config.conf_filter, config.optimizer,
                train_r_vid=config.enable_r_vid, train_r_fr=config.enable_r_fr,
            )
        final = evaluate_loss(support, test, weights, text.W, config.predictor, config.conf_filter)
        _, pred = final_predict(support, test, weights, text.W, config.predictor)
        record.update(predicted=pred, initial_loss=float(initial), final_loss=float(final))
        if test.ground_truth is not None:
            record["correct"] = bool(pred == test.ground_truth)
    except (SSTuneError, FloatingPointError) as exc:
        log.warning("instance %s failed: %s", instance_id, exc)
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        trace = getattr(exc, "trace", trace)
    return record, trace


def eval_dataset(config, text=None, support=None, tests=None):
    """Tune (optionally) and predict every test instance; bundles may be passed in directly."""
    start = time.perf_counter()
    text = text if text is not None else load_bundle(config.classtext)
    support = support if support is not None else load_bundle(config.support)
    if tests is None:
        tests = load_tests(config.tests)
    tests = list(tests)
    check_consistency(text, support, tests)
    if not config.enable_msd_multiprompt:
        support = single_prompt_subset(support)

    def _run(item):
        name, test = item
        return evaluate_instance(name, test, support, text, config)

    if config.parallel > 1:
        with ThreadPoolExecutor(max_workers=config.parallel) as pool:
            results = list(pool.map(_run, tests))
    else:
        results = [_run(item) for item in tests]

    report = EvalReport(records=[r for r, _ in results], classes=tuple(text.classes),
                        wall_clock=time.perf_counter() - start)
    if config.out and config.write_traces:
        trace_dir = Path(config.out, "traces")
        trace_dir.mkdir(parents=True, exist_ok=True)
        for (record, trace) in results:
            if trace is not None:
                trace.write(trace_dir / f"{record['instance']}.jsonl")
    return report


def _dumps(obj):
    return json.dumps(obj, indent=2) + "\n"


def emit_report(report, directory):
    """Write summary.json, per_instance.jsonl and summary.csv; timing goes to timing.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    (directory / "summary.json").write_text(_dumps(summary), encoding="utf-8")
    (directory / "per_instance.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in report.records), encoding="utf-8")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value"])
    for key in ("count", "evaluated", "failed", "top1_accuracy", "mean_loss_drop"):
        writer.writerow([key, "" if summary[key] is None else summary[key]])
    for name, acc in summary["per_class_accuracy"].items():
        writer.writerow([f"accuracy/{name}", "" if acc is None else acc])
    (directory / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    (directory / "timing.json").write_text(_dumps({"wall_clock_seconds": report.wall_clock}), encoding="utf-8")
    return [directory / n for n in ("summary.json", "per_instance.jsonl", "summary.csv", "timing.json")]


@dataclass
class GradcheckReport:
    passed: bool
    trials: int
    worst_rel_error: float
    worst_abs_error: float
    tolerance: float
    abs_floor: float
    per_trial: list

    def to_dict(self):
        return {"passed": self.passed, "trials": self.trials, "worst_rel_error": self.worst_rel_error,
                "worst_abs_error": self.worst_abs_error, "tolerance": self.tolerance,
                "abs_floor": self.abs_floor, "per_trial": self.per_trial}


def relative_errors(analytic, numeric, tol=1e-3, abs_floor=1e-6):
    """Per-entry error; ``<= tol`` iff ``|a - b| <= max(tol * max(|a|, |b|), abs_floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), abs_floor / tol)
    return np.abs(a - b) / scale


def run_gradcheck(trials=50, h=1e-3, synth=None, predictor_config=None, conf_filter=None,
                  scales=(8, 6, 4), seed=0, tol=1e-3, abs_floor=1e-6, analytic_hook=None):
    """Compare analytic and central-difference gradients on random synthetic instances.

    Each trial draws a fresh support/test pair, perturbs the weights around 1
    and picks the frames by top-k at one of ``scales``. ``analytic_hook`` may
    alter the analytic gradient (gate self-test).
    """
    synth = synth or SyntheticConfig(C=5, m=2, n=2, T=8, d=16, V=8, view_noise=0.3,
                                     outlier_fraction=0.25, outlier_distance=0.8, num_tests=1)
    config = predictor_config or SYNTH_PREDICTOR
    conf_filter = conf_filter or ConfidenceFilter()
    worst_rel = 0.0
    worst_abs = 0.0
    per_trial = []
    for i in range(trials):
        _, text, support, tests = synth_generate(replace(synth, seed=seed + i, num_tests=1))
        rng = np.random.default_rng(seed + i)
        N, T = support.F.shape[0], support.T
        weights = FactorizedWeights(1.0 + 0.1 * rng.standard_normal(N), 1.0 + 0.1 * rng.standard_normal(T))
        frames = select_frames(weights.r_fr, min(scales[i % len(scales)], T), "top")
        args = (support.F, weights, tests[0].views, frames, text.W, support.L, config, conf_filter)
        _, g_vid, g_fr, _, _ = loss_and_gradients(*args)
        analytic = np.concatenate([g_vid, g_fr])
        if analytic_hook is not None:
            analytic = analytic_hook(analytic)
        n_vid, n_fr = finite_difference_gradients(*args, h=h)
        numeric = np.concatenate([n_vid, n_fr])
        rel = float(relative_errors(analytic, numeric, tol, abs_floor).max())
        ab = float(np.abs(analytic - numeric).max())
        worst_rel = max(worst_rel, rel)
        worst_abs = max(worst_abs, ab)
        per_trial.append({"trial": i, "rel_error": rel, "abs_error": ab,
                          "grad_scale": float(np.abs(numeric).max())})
    return GradcheckReport(worst_rel <= tol, trials, worst_rel, worst_abs, tol, abs_floor, per_trial)
