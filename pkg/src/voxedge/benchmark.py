"""Side-by-side timing of the numba and numpy kernel variants.

Run with ``python -m voxedge.benchmark``. Workload sizes mirror desk-scale
training. Each pair is checked for agreement before timing; col2im3 sums the
same terms in a different order, so it is compared to rounding rather than
bitwise. Without numba only the numpy column is reported.
"""

from __future__ import annotations

import time

import numpy as np

from . import backend, kernels


def _workloads(rng):
    pts = rng.random((512, 3))
    queries = rng.random((512, 3))
    skip = np.arange(512, dtype=np.int64)
    vol = rng.random((8, 18, 18, 18))
    cols = rng.random((8 * 27, 16 * 16 * 16))
    feats = rng.random((24, 512))
    ids = rng.integers(0, 4096, size=512)
    return {
        "pairwise_nn": (pts, queries),
        "fps": (pts, 256, 0),
        "knn": (pts, queries, 100, skip),
        "im2col3": (vol, 3, 1, 1, 16, 16, 16),
        "col2im3": (cols, 8, 18, 18, 18, 3, 1, 1, 16, 16, 16),
        "scatter_sum": (feats, ids, 4096),
    }


def _agree(name, a, b) -> bool:
    if isinstance(a, tuple):
        return all(_agree(name, x, y) for x, y in zip(a, b))
    if name == "col2im3":
        return bool(np.allclose(a, b, rtol=1e-10, atol=1e-12))
    return bool(np.array_equal(a, b))


def _best_ms(fn, args, repeats: int = 5) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def run(repeats: int = 5) -> list:
    """Time every kernel pair; returns rows of
    (name, numba_ms or None, numpy_ms, agree)."""
    rng = np.random.default_rng(0)
    loads = _workloads(rng)
    rows = []
    for name, (fn_nb, fn_np) in kernels.PAIRS.items():
        args = loads[name]
        t_np = _best_ms(fn_np, args, repeats)
        if fn_nb is None:
            rows.append((name, None, t_np, True))
            continue
        fn_nb(*args)  # compile before timing
        agree = _agree(name, fn_nb(*args), fn_np(*args))
        t_nb = _best_ms(fn_nb, args, repeats)
        rows.append((name, t_nb, t_np, agree))
    return rows


def main() -> int:
    print(f"backend: {backend.ACTIVE} (numba available: {backend.HAVE_NUMBA})")
    rows = run()
    header = f"{'kernel':<14} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}  agree"
    print(header)
    print("-" * len(header))
    ok = True
    for name, t_nb, t_np, agree in rows:
        ok = ok and agree
        if t_nb is None:
            print(f"{name:<14} {'-':>10} {t_np:>10.3f} {'-':>8}  -")
        else:
            print(f"{name:<14} {t_nb:>10.3f} {t_np:>10.3f} {t_np / t_nb:>7.1f}x  {'yes' if agree else 'NO'}")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
