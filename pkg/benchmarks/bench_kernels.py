"""Time the compiled and numpy kernel backends on workloads the network sees.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on identical inputs under every available backend; the
outputs are checked against each other before timings are reported.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from vesselforge import kernels


def _conv_case(rng, n, c, side, k, rate, stride):
    pad = rate * (k - 1) // 2
    xp = rng.standard_normal((n, c, side + 2 * pad, side + 2 * pad)).astype(np.float32)
    out = (side + 2 * pad - rate * (k - 1) - 1) // stride + 1
    return xp, out


def cases(rng):
    """(name, callable taking a backend) pairs."""
    out = []
    for label, (n, c, side, rate, stride) in {
        "stage1 3x3": (8, 32, 64, 1, 1),
        "atrous r=8": (8, 128, 16, 8, 1),
        "stride 2": (8, 64, 32, 1, 2),
    }.items():
        xp, o = _conv_case(rng, n, c, side, 3, rate, stride)
        cols = rng.standard_normal((n, o * o, 9 * c)).astype(np.float32)
        hp, wp = xp.shape[2:]
        out.append((f"im2col {label}", lambda b, xp=xp, rate=rate, stride=stride, o=o:
                    b.im2col(xp, 3, 3, stride, rate, o, o)))
        out.append((f"col2im {label}", lambda b, cols=cols, c=c, hp=hp, wp=wp, rate=rate, stride=stride, o=o:
                    b.col2im(cols, c, hp, wp, 3, 3, stride, rate, o, o)))

    xp = np.pad(rng.standard_normal((8, 64, 32, 32)).astype(np.float32), ((0, 0), (0, 0), (1, 1), (1, 1)),
                constant_values=-np.inf)
    pooled, arg = kernels.get_backend("python").maxpool_forward(xp, 3, 3, 1, 32, 32)
    grad = rng.standard_normal(pooled.shape).astype(np.float32)
    out.append(("maxpool fwd 3x3", lambda b: b.maxpool_forward(xp, 3, 3, 1, 32, 32)))
    out.append(("maxpool bwd 3x3", lambda b: b.maxpool_backward(grad, arg, 34, 34)))

    zp = np.nan_to_num(xp, neginf=0.0)
    valid = np.pad(np.ones((32, 32), np.float32), 1)
    _, count = kernels.get_backend("python").avgpool_forward(zp, valid, 3, 3, 1, 32, 32)
    out.append(("avgpool fwd 3x3", lambda b: b.avgpool_forward(zp, valid, 3, 3, 1, 32, 32)))
    out.append(("avgpool bwd 3x3", lambda b: b.avgpool_backward(grad, count, 34, 34, 3, 3, 1)))

    channel = rng.random((48, 48))
    out.append(("ace pairwise 48x48", lambda b: b.ace_pairwise(channel, 5.0)))
    return out


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, rtol=1e-5, atol=1e-5) for x, y in zip(a, b))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="also write results here")
    args = parser.parse_args(argv)

    backends = {name: kernels.get_backend(name) for name in kernels.available_backends()}
    if "cython" not in backends:
        print("compiled kernels not built; timing the numpy backend only", file=sys.stderr)
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<22}" + "".join(f"{name + ' ms':>12}" for name in backends) + f"{'speedup':>10}")
    for name, fn in cases(rng):
        results = {b: fn(mod) for b, mod in backends.items()}
        ref = results["python"]
        if not all(_same(r, ref) for r in results.values()):
            raise SystemExit(f"{name}: backends disagree")
        times = {b: min(timeit.repeat(lambda mod=mod: fn(mod), number=1, repeat=args.repeat)) * 1e3
                 for b, mod in backends.items()}
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        rows.append({"kernel": name, "ms": times, "speedup": speedup})
        print(f"{name:<22}" + "".join(f"{times[b]:>12.2f}" for b in backends) + f"{speedup:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
