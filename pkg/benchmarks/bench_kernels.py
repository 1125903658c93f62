"""Numba vs numpy kernels, plus an end-to-end run under each backend.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv] [--no-e2e]

The end-to-end part reruns this file in a subprocess with
PIRLAB_DISABLE_NUMBA=1, since the backend is fixed at import time.
"""

import argparse
import csv
import json
import os
import subprocess
import sys
import time

import numpy as np

from pirlab import _kernels
from pirlab.audit import correctness_audit, lemma2_audit
from pirlab.core import SchemeParams, SeededRandomness


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def term_arrays(rng, k_msg, length, sums):
    msgs = np.full((sums, k_msg), -1, dtype=np.int64)
    idx = np.full((sums, k_msg), -1, dtype=np.int64)
    for s in range(sums):
        w = rng.integers(1, k_msg + 1)
        msgs[s, :w] = rng.choice(k_msg, size=w, replace=False)
        idx[s, :w] = rng.integers(0, length, size=w)
    return msgs, idx


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    rows = []

    store = rng.integers(0, 256, size=(3, 4096), dtype=np.uint8)
    msgs, idx = term_arrays(rng, 3, 4096, 20000)
    cases = [("xor_gather", (store, msgs, idx), _kernels.xor_gather_numpy,
              getattr(_kernels, "xor_gather_numba", None))]

    stores = rng.integers(0, 2, size=(65536, 2, 4), dtype=np.uint8)
    msgs, idx = term_arrays(rng, 2, 4, 6)
    cases.append(("xor_gather_batch", (stores, msgs, idx), _kernels.xor_gather_batch_numpy,
                  getattr(_kernels, "xor_gather_batch_numba", None)))

    keys = rng.integers(0, 5000, size=2_000_000).astype(np.int64)
    weights = np.ones(keys.size)
    cases.append(("grouped_mlogm", (keys, weights), _kernels.grouped_mlogm_numpy,
                  getattr(_kernels, "grouped_mlogm_numba", None)))

    for name, args, np_fn, nb_fn in cases:
        t_np = best_of(lambda: np_fn(*args), repeat)
        row = {"benchmark": name, "numpy_s": t_np, "numba_s": None, "speedup": None, "agree": None}
        if nb_fn is not None:
            t_nb = best_of(lambda: nb_fn(*args), repeat)
            a, b = np_fn(*args), nb_fn(*args)
            row.update(numba_s=t_nb, speedup=t_np / t_nb,
                       agree=bool(np.allclose(a, b, rtol=1e-12)) if np.ndim(a) == 0 else bool(np.array_equal(a, b)))
        rows.append(row)
    return rows


def e2e_seconds():
    """Wall time of a converse audit and a correctness batch on the active backend."""
    t0 = time.perf_counter()
    lemma2_audit(SchemeParams(2, 2, 1, 2), 2)
    t1 = time.perf_counter()
    correctness_audit(SchemeParams(3, 3), 100, SeededRandomness(0))
    t2 = time.perf_counter()
    return {"backend": _kernels.BACKEND, "lemma2_s": t1 - t0, "correctness_s": t2 - t1}


def e2e_rows():
    rows = []
    for disable in ("0", "1"):
        env = dict(os.environ, PIRLAB_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, __file__, "--e2e-child"], env=env,
                             capture_output=True, text=True, check=True)
        rows.append(json.loads(out.stdout.strip().splitlines()[-1]))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv")
    ap.add_argument("--no-e2e", action="store_true")
    ap.add_argument("--e2e-child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)

    if args.e2e_child:
        e2e_seconds()  # warm caches and JIT
        print(json.dumps(e2e_seconds()))
        return 0

    rows = kernel_rows(args.repeat)
    print(f"backend at import: {_kernels.BACKEND}")
    print(f"{'kernel':<18}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}  agree")
    for r in rows:
        nb = f"{r['numba_s']:.5f}" if r["numba_s"] is not None else "-"
        sp = f"{r['speedup']:.1f}x" if r["speedup"] is not None else "-"
        print(f"{r['benchmark']:<18}{r['numpy_s']:>12.5f}{nb:>12}{sp:>10}  {r['agree']}")

    if not args.no_e2e:
        print()
        for r in e2e_rows():
            print(f"end-to-end [{r['backend']}]: lemma2 audit {r['lemma2_s']:.3f}s, "
                  f"300 retrievals {r['correctness_s']:.3f}s")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
