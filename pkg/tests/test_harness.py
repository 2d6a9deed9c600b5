import json
from dataclasses import replace

import numpy as np
import pytest

from sstune.bundles import save_bundle
from sstune.errors import BundleInconsistency
from sstune.harness import (
    SYNTH_PREDICTOR,
    EvalReport,
    ExperimentConfig,
    emit_report,
    eval_dataset,
    instance_seed,
    run_gradcheck,
    single_prompt_subset,
)
from sstune.numerics import l2_normalize
from sstune.predictors import PredictorConfig
from sstune.synth import SyntheticConfig, synth_generate
from sstune.tuner import TuningSchedule


@pytest.fixture(scope="module")
def dataset():
    cfg = SyntheticConfig(C=4, m=2, n=2, view_noise=0.3, outlier_fraction=0.25, outlier_distance=0.8,
                          seed=21, num_tests=12)
    _, text, support, tests = synth_generate(cfg)
    return text, support, [(f"{i:04d}", t) for i, t in enumerate(tests)]


def _config(**kw):
    base = dict(predictor=SYNTH_PREDICTOR, schedule=TuningSchedule(strategy="random"), seed=5)
    base.update(kw)
    return ExperimentConfig(**base)


def _run(dataset, **kw):
    text, support, tests = dataset
    return eval_dataset(_config(**kw), text=text, support=support, tests=tests)


def _files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file() and p.name != "timing.json"}


def test_instance_seed_depends_only_on_ids():
    assert instance_seed(1, "a") == instance_seed(1, "a")
    assert instance_seed(1, "a") != instance_seed(1, "b")
    assert instance_seed(1, "a") != instance_seed(2, "a")


def test_serial_and_parallel_reports_are_identical(dataset, tmp_path):
    text, support, tests = dataset
    outputs = []
    for parallel in (1, 4):
        out = tmp_path / f"p{parallel}"
        cfg = _config(parallel=parallel, out=str(out), write_traces=True)
        emit_report(eval_dataset(cfg, text=text, support=support, tests=tests), out)
        outputs.append(_files(out))
    assert outputs[0] == outputs[1]
    assert any(name.endswith(".jsonl") and name != "per_instance.jsonl" for name in outputs[0])


def test_re_emit_is_byte_identical(dataset, tmp_path):
    report = _run(dataset)
    emit_report(report, tmp_path / "a")
    emit_report(report, tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b and set(a) == {"summary.json", "per_instance.jsonl", "summary.csv"}
    assert (tmp_path / "a" / "timing.json").exists()


def test_summary_contents(dataset, tmp_path):
    report = _run(dataset)
    s = report.summary()
    assert s["count"] == s["evaluated"] == 12 and s["failed"] == 0
    assert 0.0 <= s["top1_accuracy"] <= 1.0
    assert set(s["per_class_accuracy"]) == set(dataset[0].classes)
    emit_report(report, tmp_path)
    lines = (tmp_path / "per_instance.jsonl").read_text().splitlines()
    assert len(lines) == 12 and json.loads(lines[0])["instance"] == "0000"
    assert (tmp_path / "summary.csv").read_text().startswith("metric,value\ncount,12\n")


def test_empty_instance_list():
    text, support, _ = synth_generate(SyntheticConfig(num_tests=0))[1:]
    report = eval_dataset(_config(), text=text, support=support, tests=[])
    s = report.summary()
    assert s["count"] == 0 and s["top1_accuracy"] is None and not report.any_failed


def test_fifty_instances_fifty_lines(tmp_path):
    _, text, support, tests = synth_generate(SyntheticConfig(C=5, num_tests=50, seed=2))
    cfg = _config(schedule=TuningSchedule(stages=((8, 1),)), parallel=3)
    report = eval_dataset(cfg, text=text, support=support, tests=[(str(i), t) for i, t in enumerate(tests)])
    emit_report(report, tmp_path)
    assert len((tmp_path / "per_instance.jsonl").read_text().splitlines()) == 50


def test_separable_limit_is_perfect():
    cfg = SyntheticConfig(C=6, intra_prompt_noise=0.0, inter_prompt_spread=0.0, view_noise=0.0, num_tests=12)
    _, text, support, tests = synth_generate(cfg)
    report = eval_dataset(_config(), text=text, support=support, tests=[(str(i), t) for i, t in enumerate(tests)])
    assert report.accuracy == 1.0


def test_no_tuning_zero_shot_blend_is_plain_zero_shot(dataset):
    text, support, tests = dataset
    report = _run(dataset, enable_tse=False, predictor=PredictorConfig(blend=(1, 0, 0)))
    W = text.W.astype(np.float64)
    for record, (_, t) in zip(report.records, tests):
        f = l2_normalize(t.original.astype(np.float64).mean(axis=0))
        assert record["predicted"] == int(np.argmax(W @ f))


def test_no_tuning_ignores_schedule(dataset, tmp_path):
    a = _run(dataset, enable_tse=False)
    b = _run(dataset, enable_tse=False, schedule=TuningSchedule(stages=((4, 7), (2, 2)), strategy="random"))
    emit_report(a, tmp_path / "a")
    emit_report(b, tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_single_prompt_subset(dataset):
    _, support, _ = dataset
    sub = single_prompt_subset(support)
    assert sub.F.shape[0] == support.C * support.n and sub.m == 1
    assert np.all(sub.provenance[:, 1] == 0)
    sub.validate()
    report = _run(dataset, enable_msd_multiprompt=False)
    assert report.summary()["failed"] == 0


def test_inconsistent_bundles_rejected(dataset):
    text, support, tests = dataset
    other = replace(text, classes=tuple(reversed(text.classes)))
    with pytest.raises(BundleInconsistency):
        eval_dataset(_config(), text=other, support=support, tests=tests)


def test_failed_instance_is_reported_not_raised(dataset):
    text, support, tests = dataset
    name, t = tests[0]
    views = t.views.copy()
    views[:, :, 0] = np.nan
    bad = replace(t, views=views)
    report = eval_dataset(_config(), text=text, support=support, tests=[(name, bad)] + tests[1:3])
    s = report.summary()
    assert report.any_failed and s["failed"] == 1 and s["evaluated"] == 2
    assert report.records[0]["error"].startswith("NonFiniteLoss")


def test_config_from_json(tmp_path, dataset):
    text, support, tests = dataset
    save_bundle(text, tmp_path / "text")
    save_bundle(support, tmp_path / "support")
    for name, t in tests[:3]:
        save_bundle(t, tmp_path / "tests" / name)
    raw = {
        "classtext": "text", "support": "support", "tests": "tests", "seed": 3, "parallel": 2,
        "predictor": {"tau": 1.0, "blend": [1, 1, 1]},
        "schedule": {"stages": "8x2,4x1", "strategy": "random"},
        "confidence": {"rho": 0.25}, "optimizer": {"lr": 0.01},
        "enable_r_fr": False,
    }
    (tmp_path / "exp.json").write_text(json.dumps(raw))
    cfg = ExperimentConfig.from_json(tmp_path / "exp.json")
    assert cfg.schedule.stages == ((8, 2), (4, 1)) and cfg.predictor.blend == (1.0, 1.0, 1.0)
    assert cfg.conf_filter.rho == 0.25 and cfg.optimizer.lr == 0.01 and not cfg.enable_r_fr
    report = eval_dataset(cfg)
    assert [r["instance"] for r in report.records] == ["0000", "0001", "0002"]


def test_gradcheck_passes_and_is_sensitive():
    report = run_gradcheck(trials=6)
    assert report.passed and report.worst_rel_error <= 1e-3
    zero = run_gradcheck(trials=1, predictor_config=replace(SYNTH_PREDICTOR, blend=(1, 0, 0)))
    assert zero.passed and zero.worst_abs_error <= 1e-8
    broken = run_gradcheck(trials=3, analytic_hook=lambda g: g * 1.01 + 1e-4)
    assert not broken.passed


def test_report_empty_records_csv(tmp_path):
    emit_report(EvalReport(records=[], classes=("a",)), tmp_path)
    text = (tmp_path / "summary.csv").read_text()
    assert "top1_accuracy,\n" in text and "accuracy/a,\n" in text
