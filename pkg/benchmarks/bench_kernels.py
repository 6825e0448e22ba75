"""Time the compiled kernels against their numpy counterparts.

    python benchmarks/bench_kernels.py [--repeat 200]

Both paths get identical inputs; the table reports the median wall time per
call and the speed-up.  Compilation happens in a warm-up call and is not
counted.
"""
from __future__ import annotations

import argparse
import sys
import timeit
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from mfdlm import _kernels as K  # noqa: E402
from mfdlm._compat import HAS_NUMBA  # noqa: E402
from mfdlm._logchi2_mixture import MEANS, VARIANCES, WEIGHTS  # noqa: E402
from oracles import random_state_space  # noqa: E402


def cases(rng):
    # factor-path draw: T=300 times, C*K=6 states, a few pseudo-rows per time
    ss = random_state_space(rng, 300, 6, max_rows=6)
    z = rng.standard_normal((300, 6))
    yield "ffbs T=300 p=6", lambda nb: K.ffbs_kernel(*ss, z, use_numba=nb)

    T = 2000
    log_init = rng.normal(size=2)
    log_pair = rng.normal(size=(T, 2, 2))
    u = rng.uniform(size=T)
    yield "hmm T=2000", lambda nb: K.hmm_pair_ffbs(log_init, log_pair, u, use_numba=nb)

    r = rng.normal(-1.27, 2.2, T)
    lw = np.log(np.asarray(WEIGHTS))
    m, v = np.asarray(MEANS), np.asarray(VARIANCES)
    yield "mixture T=2000", lambda nb: K.mixture_draw(r, lw, m, v, u, use_numba=nb)


def median_time(fn, repeat):
    fn()
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    if not HAS_NUMBA:
        print("numba is disabled or missing; only the numpy path is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numba (us)':>12}{'numpy (us)':>12}{'speed-up':>10}")
    for name, fn in cases(rng):
        t_np = median_time(lambda: fn(False), args.repeat)
        if HAS_NUMBA:
            t_nb = median_time(lambda: fn(True), args.repeat)
            print(f"{name:<18}{t_nb * 1e6:>12.1f}{t_np * 1e6:>12.1f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<18}{'-':>12}{t_np * 1e6:>12.1f}{'-':>10}")


if __name__ == "__main__":
    main()
