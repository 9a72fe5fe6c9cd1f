"""Dense-kernel benchmark: numba loop kernels vs the vectorized numpy path.

Times one forward and one backward pass through the bottom chain of the
experiment network (2 -> 8 -> 8 tanh -> 2) and through a wider chain,
after checking that both backends agree.

    python3 benchmarks/bench_kernels.py [--repeat 20000]
"""

import argparse
import time

import numpy as np

from neuralfmu import _kernels

CHAINS = {
    "bottom 2-8-8-2": [(2, 8, 0), (8, 8, 1), (8, 2, 0)],
    "wide 16-64-64-16": [(16, 64, 1), (64, 64, 1), (64, 16, 0)],
}


def make_spec(layers):
    rows, off = [], 0
    for n_in, n_out, act in layers:
        rows.append((off, n_in, n_out, act))
        off += n_out * n_in + n_out
    return np.array(rows, dtype=np.int64), off


def time_backend(fwd, bwd, spec, p, x, gy, repeat):
    hist = np.empty(_kernels.hist_size(spec))
    gp = np.zeros_like(p)
    fwd(p, spec, x, hist)
    bwd(p, spec, hist, gy, gp)  # warm-up (and JIT compile)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fwd(p, spec, x, hist)
    t_fwd = (time.perf_counter() - t0) / repeat
    t0 = time.perf_counter()
    for _ in range(repeat):
        bwd(p, spec, hist, gy, gp)
    t_bwd = (time.perf_counter() - t0) / repeat
    return t_fwd, t_bwd


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return
    rng = np.random.default_rng(args.seed)
    print(f"{'chain':<18}{'backend':<8}{'forward [us]':>14}{'backward [us]':>15}")
    for name, layers in CHAINS.items():
        spec, n_p = make_spec(layers)
        p = rng.standard_normal(n_p)
        x = rng.standard_normal(layers[0][0])
        gy = rng.standard_normal(layers[-1][1])
        h1, h2 = np.empty(_kernels.hist_size(spec)), np.empty(_kernels.hist_size(spec))
        y1 = _kernels.forward_numba(p, spec, x, h1)
        y2 = _kernels.forward_numpy(p, spec, x, h2)
        g1, g2 = np.zeros(n_p), np.zeros(n_p)
        gx1 = _kernels.backward_numba(p, spec, h1, gy, g1)
        gx2 = _kernels.backward_numpy(p, spec, h2, gy, g2)
        err = max(np.max(np.abs(y1 - y2)), np.max(np.abs(g1 - g2)), np.max(np.abs(gx1 - gx2)))
        assert err < 1e-12, f"backends disagree by {err}"
        for backend in ("numba", "numpy"):
            fwd, bwd, _ = _kernels.select(backend)
            tf, tb = time_backend(fwd, bwd, spec, p, x, gy, args.repeat)
            print(f"{name:<18}{backend:<8}{tf * 1e6:>14.2f}{tb * 1e6:>15.2f}")


if __name__ == "__main__":
    main()
