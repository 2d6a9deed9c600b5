"""Time the compiled and NumPy fused kernels on synthetic instances.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--json out.json]

Both backends get identical arguments; the script also reports the largest
disagreement between their outputs.
"""
import argparse
import json
import platform
import timeit

import numpy as np

from sstune import _fused_py, fused
from sstune.harness import SYNTH_PREDICTOR
from sstune.synth import SyntheticConfig, synth_generate
from sstune.tuner import ConfidenceFilter, FactorizedWeights, _kernel_args

SIZES = [
    ("desk C=5 K=4 d=16 V=8", dict(C=5, m=2, n=2, T=8, d=16, V=8)),
    ("views C=5 K=4 d=16 V=32", dict(C=5, m=2, n=2, T=8, d=16, V=32)),
    ("wide C=20 K=8 d=64 V=32", dict(C=20, m=4, n=2, T=8, d=64, V=32)),
    ("large C=51 K=16 d=512 V=32", dict(C=51, m=8, n=2, T=8, d=512, V=32)),
]


def _args(spec):
    _, text, support, tests = synth_generate(SyntheticConfig(num_tests=1, view_noise=0.3, **spec))
    w = FactorizedWeights.ones(support.F.shape[0], support.T)
    return _kernel_args(support.F, w, tests[0].views, np.arange(support.T), text.W, support.L,
                        SYNTH_PREDICTOR, ConfidenceFilter())


def _time(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--json", default=None)
    args = parser.parse_args(argv)

    backends = fused.available_backends()
    rows = []
    for label, spec in SIZES:
        kargs = _args(spec)
        row = {"case": label}
        for name, mod in backends.items():
            row[name] = _time(mod.loss_and_grad, kargs, args.repeat)
        if "cython" in backends:
            a = backends["cython"].loss_and_grad(*kargs)
            b = _fused_py.loss_and_grad(*kargs)
            row["max_abs_diff"] = float(max(abs(a[0] - b[0]), np.abs(a[1] - b[1]).max(), np.abs(a[2] - b[2]).max()))
        rows.append(row)

    print(f"python {platform.python_version()}, numpy {np.__version__}, best of {args.repeat}")
    print(f"{'case':<28}{'python':>12}{'cython':>12}{'speedup':>9}{'max diff':>11}")
    for r in rows:
        cy = r.get("cython")
        print(f"{r['case']:<28}{r['python'] * 1e6:>10.1f}us"
              + (f"{cy * 1e6:>10.1f}us{r['python'] / cy:>8.1f}x{r['max_abs_diff']:>11.1e}" if cy else "   (no compiled backend)"))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
