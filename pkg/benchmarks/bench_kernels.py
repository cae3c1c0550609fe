"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--res 64 128] [--repeat 5]

Prints one line per (kernel, resolution, backend) with the best wall time
and the speedup of the compiled backend. Both backends are also checked to
agree before timing.
"""
import argparse
import time

import numpy as np

from opreslab import kernels
from opreslab.generators import darcy_coefficient


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--res", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = {"python": kernels.python}
    if kernels.compiled is not None:
        backends["cython"] = kernels.compiled
    else:
        print("compiled extension not built; timing the numpy fallback only")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'res':>6}{'backend':>10}{'seconds':>12}{'speedup':>10}")
    for n in args.res:
        a = darcy_coefficient(rng, n)
        v = rng.standard_normal((n, n))
        b = np.ones((n, n))
        inv_h2 = float(n * n)
        ref = kernels.python.darcy_pcg(a, b, inv_h2, 1e-8, 20 * n)[0]
        cases = {
            "darcy_stencil": lambda k: k.darcy_stencil(a, v, inv_h2),
            "darcy_pcg": lambda k: k.darcy_pcg(a, b, inv_h2, 1e-8, 20 * n),
        }
        for name, call in cases.items():
            base = None
            for label, mod in backends.items():
                if name == "darcy_pcg":
                    u = mod.darcy_pcg(a, b, inv_h2, 1e-8, 20 * n)[0]
                    assert np.linalg.norm(u - ref) / np.linalg.norm(ref) < 1e-7
                t = best_of(lambda: call(mod), args.repeat)
                base = base or t
                print(f"{name:<16}{n:>6}{label:>10}{t:>12.5f}{base / t:>10.2f}")

    # spectral-layer contraction: batched BLAS matmul, shared by both backends
    for modes in (8 * 15, 16 * 31):
        x = rng.standard_normal((modes, 32, 16)) + 1j * rng.standard_normal((modes, 32, 16))
        r = rng.standard_normal((modes, 16, 16)) + 1j * rng.standard_normal((modes, 16, 16))
        xb = x.transpose(1, 0, 2)
        t = best_of(lambda: kernels.mode_contract(xb, r), args.repeat)
        print(f"{'mode_contract':<16}{modes:>6}{'numpy':>10}{t:>12.5f}{1.0:>10.2f}")


if __name__ == "__main__":
    main()
