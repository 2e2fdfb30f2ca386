"""Time both kernel backends on the hot forward and backward paths.

The compiled backend and the pure fallback share one contract, so this is
a straight per-call timing of identical inputs. Run from a checkout:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import statistics
import time

from allmargin import kernels
from allmargin._util import rng_for
from allmargin.network import PerturbationSet, init_network

SHAPES = ([2, 16, 2], [2, 64, 64, 2], [10, 128, 128, 10], [50, 256, 10])


def _case(widths, seed):
    net = init_network(widths, "tanh", seed=seed)
    x = rng_for(seed, 101).standard_normal(widths[0])
    pset = PerturbationSet.zeros(net, "all-layers")
    rng = rng_for(seed, 102)
    for i, d in enumerate(pset.deltas):
        pset.deltas[i] = 0.1 * rng.standard_normal(d.size)
    return net, x, pset.kernel_slots()


def _time(fn, repeats, inner=50):
    times = []
    fn()  # warm up
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        times.append((time.perf_counter() - t0) / inner)
    return statistics.median(times) * 1e6


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()

    impls = kernels.backends()
    print(f"backends: {', '.join(sorted(impls))} (active: {kernels.BACKEND})")
    header = f"{'widths':>20} {'pass':>9}" + "".join(
        f" {name + ' us':>10}" for name in sorted(impls))
    if len(impls) == 2:
        header += f" {'speedup':>8}"
    print(header)

    mode = kernels.MODE_IDS["pre-scale"]
    act = kernels.ACT_IDS["tanh"]
    for widths in SHAPES:
        net, x, slots = _case(widths, seed=1)
        y = 1
        for label, call in (
            ("forward", lambda impl: impl.forward_pass(
                net.weights, x, slots, mode, act)),
            ("backward", lambda impl: impl.backward_pass(
                net.weights, x, y, slots, mode, act, 0, True, True, True)),
        ):
            row = {}
            for name in sorted(impls):
                impl = impls[name]
                row[name] = _time(lambda: call(impl), args.repeats)
            line = f"{str(widths):>20} {label:>9}" + "".join(
                f" {row[name]:>10.1f}" for name in sorted(impls))
            if len(row) == 2:
                line += f" {row['py'] / row['c']:>7.1f}x"
            print(line)


if __name__ == "__main__":
    main()
