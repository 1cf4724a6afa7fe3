#!/usr/bin/env python3
"""Time every hot kernel on the numpy and numba backends and check parity.

The numba column only exists when the jitted backend is active, which is
the default whenever numba imports; run with CRETTA_BACKEND=numpy to see
why the fallback exists. Timings are best-of-N single calls, so the first
jitted call (compilation) never pollutes the numbers.
"""

import argparse
import sys
import time

import numpy as np

from cretta import kernels


def build_cases(batch, features, classes, seed):
    """name -> zero-arg factory returning a fresh argument tuple.

    Factories hand out copies so mutating kernels (adam) never feed one
    backend the other's output.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, features))
    logits = rng.normal(size=(batch, classes))
    vector = rng.normal(size=batch)
    mean, var = x.mean(axis=0), x.var(axis=0)
    gamma = rng.uniform(0.5, 1.5, size=features)
    beta = rng.normal(size=features)
    inv_std = 1.0 / np.sqrt(var + 1e-5)
    xhat = (x - mean) * inv_std
    grad_out = rng.normal(size=(batch, features))
    conf = rng.uniform(size=batch)
    correct = (rng.uniform(size=batch) < conf).astype(np.float64)
    param = rng.normal(size=batch)
    grad = rng.normal(size=batch)

    return {
        "logsumexp_rows": lambda: (logits.copy(), 1.0),
        "softmax_rows": lambda: (logits.copy(),),
        "sigmoid": lambda: (vector.copy(),),
        "log_sigmoid": lambda: (vector.copy(),),
        "batch_moments": lambda: (x.copy(),),
        "batchnorm_forward": lambda: (x.copy(), mean.copy(), var.copy(),
                                      gamma.copy(), beta.copy(), 1e-5),
        "batchnorm_backward_batch": lambda: (grad_out.copy(), xhat.copy(),
                                             gamma.copy(), inv_std.copy()),
        "batchnorm_backward_frozen": lambda: (grad_out.copy(), xhat.copy(),
                                              gamma.copy(), inv_std.copy()),
        "adam_update": lambda: (param.copy(), grad.copy(), np.zeros(batch),
                                np.zeros(batch), 3, 1e-3, 0.9, 0.999, 1e-8),
        "calibration_bin_stats": lambda: (conf.copy(), correct.copy(), 10),
    }


def _result_arrays(result, args):
    # in-place kernels return None; their signal lives in args 0, 2, 3
    if result is None:
        return [args[0], args[2], args[3]]
    if isinstance(result, tuple):
        return [np.asarray(part) for part in result]
    return [np.asarray(result)]


def time_call(fn, make_args, repeats):
    args = make_args()
    fn(*args)  # first call compiles on the jitted path
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def max_disagreement(table, make_args):
    outputs = {}
    for backend, fn in table.items():
        args = make_args()
        outputs[backend] = _result_arrays(fn(*args), args)
    if len(outputs) < 2:
        return None
    a, b = outputs["numpy"], outputs["numba"]
    return max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=4096)
    parser.add_argument("--features", type=int, default=64)
    parser.add_argument("--classes", type=int, default=8)
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    backends = sorted({b for table in kernels.IMPLEMENTATIONS.values()
                       for b in table})
    print(f"backend flag: {kernels.BACKEND_ENV_VAR}={kernels.BACKEND}")
    print(f"batch={args.batch} features={args.features} "
          f"classes={args.classes} repeats={args.repeats}")
    if "numba" not in backends:
        print("numba backend inactive; timing the numpy path only")

    cases = build_cases(args.batch, args.features, args.classes, args.seed)
    header = f"{'kernel':28s}" + "".join(f"{b + ' (us)':>14s}"
                                         for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>9s}{'max |diff|':>12s}"
    print(header)
    print("-" * len(header))

    worst = 0.0
    for name, make_args in cases.items():
        table = kernels.IMPLEMENTATIONS[name]
        micros = {b: 1e6 * time_call(table[b], make_args, args.repeats)
                  for b in backends if b in table}
        line = f"{name:28s}" + "".join(f"{micros[b]:14.1f}" for b in micros)
        if len(micros) > 1:
            diff = max_disagreement(table, make_args)
            worst = max(worst, diff)
            line += f"{micros['numpy'] / micros['numba']:9.2f}{diff:12.2e}"
        print(line)

    if len(backends) > 1:
        print(f"worst backend disagreement: {worst:.2e}")
        if worst > 1e-9:
            print("backends disagree beyond 1e-9", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
