"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the best time per call for each kernel, and for one full
loss-and-gradient evaluation on a five-proton event, under both backends.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np


def kernel_times(mod, repeat):
    rng = np.random.default_rng(0)
    n = 11
    q = rng.uniform(-0.5, n - 0.5, size=(4000, 3))
    w = rng.uniform(0.0, 1.0, size=4000)
    img = rng.uniform(0.0, 1.0, size=(n, n, n))
    cases = {
        "scatter_trilinear": lambda: mod.scatter_trilinear(q, w, n),
        "scatter_nearest": lambda: mod.scatter_nearest(q, w, n),
        "gather_trilinear": lambda: mod.gather_trilinear(img, q),
        "crosstalk": lambda: mod.crosstalk(img, 0.03),
    }
    out = {}
    for name, fn in cases.items():
        t = timeit.Timer(fn)
        loops, _ = t.autorange()
        out[name] = min(t.repeat(repeat, loops)) / loops
    return out


_END_TO_END = """
import timeit, numpy as np
from vadecomp import kernels
from vadecomp.eventgen import make_event
from vadecomp.forward import loss_and_gradient
ev = make_event(7, 3)
t = timeit.Timer(lambda: loss_and_gradient(ev.truth, ev.muon, ev.target, "neg2ll"))
loops, _ = t.autorange()
print(kernels.BACKEND, min(t.repeat({repeat}, loops)) / loops)
"""


def end_to_end(pure, repeat):
    env = dict(os.environ)
    if pure:
        env["VADECOMP_PURE_PYTHON"] = "1"
    else:
        env.pop("VADECOMP_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", _END_TO_END.format(repeat=repeat)],
                         env=env, capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    from vadecomp import _pykernels
    try:
        from vadecomp import _ckernels
    except ImportError:
        _ckernels = None
        print("compiled extension not built; only the numpy backend is timed")

    py = kernel_times(_pykernels, args.repeat)
    cy = kernel_times(_ckernels, args.repeat) if _ckernels else {}
    print(f"{'kernel':<22}{'numpy us':>12}{'cython us':>12}{'speedup':>10}")
    for name, t in py.items():
        c = cy.get(name)
        cs = f"{c * 1e6:12.1f}{t / c:10.1f}" if c else f"{'-':>12}{'-':>10}"
        print(f"{name:<22}{t * 1e6:12.1f}{cs}")

    print()
    for pure in (True, False):
        if not pure and _ckernels is None:
            break
        backend, t = end_to_end(pure, args.repeat)
        print(f"loss_and_gradient [{backend}]: {t * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
