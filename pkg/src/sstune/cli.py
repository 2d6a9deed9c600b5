"""Command-line entry points: ``sstune <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import fused
from .bundles import ClassCatalog, PromptSet, compose_support_set, load_bundle, load_video_features, save_bundle
from .harness import ExperimentConfig, SYNTH_PREDICTOR, emit_report, eval_dataset, run_gradcheck
from .predictors import PredictorConfig
from .synth import SyntheticConfig, dispersion_stats, synth_generate
from .tuner import ConfidenceFilter, FactorizedWeights, OptimizerConfig, TuningSchedule, final_predict, tune


def _blend(text):
    parts = tuple(float(x) for x in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--blend takes three comma-separated weights")
    return parts


def _add_predictor_flags(p, tau_default=None):
    p.add_argument("--blend", type=_blend, default=None, help="w_zs,w_ta,w_tx")
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--tau", type=float, default=tau_default)
    p.add_argument("--psi-mode", choices=("affine", "exponential"), default=None)
    p.add_argument("--psi-scale", type=float, default=None)


def _predictor(args, base=None):
    base = base or PredictorConfig()
    overrides = {k: v for k, v in (("blend", args.blend), ("beta", args.beta), ("tau", args.tau),
                                   ("psi_mode", args.psi_mode), ("psi_scale", args.psi_scale)) if v is not None}
    return replace(base, **overrides)


def _add_tuning_flags(p):
    p.add_argument("--schedule", default="8x4,6x3,4x3", help="scale x steps, comma-separated")
    p.add_argument("--strategy", choices=("top", "random"), default="top")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-r-vid", action="store_true")
    p.add_argument("--no-r-fr", action="store_true")


def _tuning(args):
    schedule = TuningSchedule.parse(args.schedule, strategy=args.strategy, rng_seed=args.seed, repeats=args.repeats)
    return schedule, ConfidenceFilter(args.rho), OptimizerConfig(lr=args.lr, weight_decay=args.weight_decay)


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_synth(args):
    raw = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SyntheticConfig.from_dict(raw)
    catalog, text, support, tests = synth_generate(cfg)
    out = Path(args.out)
    save_bundle(text, out / "classtext")
    save_bundle(support, out / "support")
    for i, t in enumerate(tests):
        save_bundle(t, out / "tests" / f"{i:04d}")
    _dump(list(catalog.classes), out / "catalog.json")
    _dump(cfg.to_dict(), out / "synth_config.json")
    return 0


def cmd_compose(args):
    raw = json.loads(Path(args.catalog).read_text(encoding="utf-8"))
    catalog = ClassCatalog(raw["classes"] if isinstance(raw, dict) else raw)
    prompts = PromptSet.from_json(args.prompts)
    bundle = compose_support_set(catalog, prompts, load_video_features(args.features))
    print(save_bundle(bundle, args.out))
    return 0


def cmd_stats(args):
    _dump(dispersion_stats(load_bundle(args.support)), args.out)
    return 0


def _load_triplet(args):
    support = load_bundle(args.support)
    text = load_bundle(args.classtext)
    test = load_bundle(args.test)
    return support, text, test


def cmd_predict(args):
    support, text, test = _load_triplet(args)
    config = _predictor(args)
    schedule, conf, opt = _tuning(args)
    if args.no_tse:
        weights = FactorizedWeights.ones(support.F.shape[0], support.T)
    else:
        weights, _ = tune(support, test, text.W, schedule, config, conf, opt,
                          train_r_vid=not args.no_r_vid, train_r_fr=not args.no_r_fr)
    logits, pred = final_predict(support, test, weights, text.W, config)
    _dump({"predicted": pred, "class": text.classes[pred], "logits": [float(x) for x in logits],
           "ground_truth": test.ground_truth})
    return 0


def cmd_tune(args):
    support, text, test = _load_triplet(args)
    config = _predictor(args)
    schedule, conf, opt = _tuning(args)
    weights, trace = tune(support, test, text.W, schedule, config, conf, opt,
                          train_r_vid=not args.no_r_vid, train_r_fr=not args.no_r_fr)
    if args.trace:
        trace.write(args.trace)
    _dump({"r_vid": weights.r_vid.tolist(), "r_fr": weights.r_fr.tolist(),
           "initial_loss": trace.losses[0], "last_step_loss": trace.losses[-1]}, args.weights)
    return 0


def cmd_eval(args):
    config = ExperimentConfig.from_json(args.config)
    config.out = args.out or config.out
    if args.parallel is not None:
        config.parallel = args.parallel
    report = eval_dataset(config)
    emit_report(report, config.out)
    summary = report.summary()
    print(f"top-1 {summary['top1_accuracy']} over {summary['evaluated']} instances, {summary['failed']} failed")
    return 1 if report.any_failed else 0


def cmd_gradcheck(args):
    config = _predictor(args, base=SYNTH_PREDICTOR)
    synth = SyntheticConfig(C=args.classes, m=args.m, n=args.n, T=args.frames, d=args.dim, V=args.views,
                            view_noise=0.3, outlier_fraction=0.25, outlier_distance=0.8, num_tests=1)
    report = run_gradcheck(args.trials, args.h, synth, config, ConfidenceFilter(args.rho), seed=args.seed)
    print(f"gradcheck {'PASS' if report.passed else 'FAIL'}: {report.trials} trials, "
          f"worst relative error {report.worst_rel_error:.3e} (tolerance {report.tolerance:g}, "
          f"abs floor {report.abs_floor:g}), backend {fused.BACKEND}")
    if args.report:
        _dump(report.to_dict(), args.report)
    return 0 if report.passed else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="sstune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embedding set")
    p.add_argument("--config", help="JSON with SyntheticConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compose", help="stack per-video features into a support bundle")
    p.add_argument("--catalog", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--features", required=True, help="directory of c{class}_p{prompt}_r{repeat}.npy files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("stats", help="per-class dispersion report")
    p.add_argument("--support", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_stats)

    for name, func, helptext in (("predict", cmd_predict, "classify one test instance"),
                                 ("tune", cmd_tune, "tune weights on one test instance")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--support", required=True)
        p.add_argument("--classtext", required=True)
        p.add_argument("--test", required=True)
        _add_predictor_flags(p)
        _add_tuning_flags(p)
        if name == "predict":
            p.add_argument("--no-tse", action="store_true")
        else:
            p.add_argument("--trace", default=None, help="write the JSON-lines trace here")
            p.add_argument("--weights", default=None, help="write tuned weights here (default stdout)")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--parallel", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradient gate")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--report", default=None)
    _add_predictor_flags(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
