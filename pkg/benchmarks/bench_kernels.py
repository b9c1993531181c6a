"""Time the numba and pure-numpy expression kernels on the same programs.

    python benchmarks/bench_kernels.py [--rows 5000] [--repeat 20]
"""
import argparse
import time

import numpy as np

from symdistill import kernels
from symdistill.exprtree import parse
from symdistill.fixtures import ALL_RULES

EXPRESSIONS = {
    "sgd": "-0.01*g[0]",
    "momentum": " + ".join(f"{0.4 * 0.6 ** i:.5f}*g[{i}]" for i in range(20)),
    "composite": "sq(g[0]) + g[1] + 2*g[2] + exp(g[4])",
}


def _time(fn, repeat):
    fn()  # warm-up, includes numba compilation
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.USE_NUMBA:
        raise SystemExit("numba backend disabled (SYMDISTILL_BACKEND=numpy); nothing to compare")
    exprs = {name: parse(src) for name, src in EXPRESSIONS.items()}
    exprs.update({name: parse(src) for name, src in ALL_RULES.items()})
    print(f"{'expression':<28}{'kind':<6}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, expr in exprs.items():
        streams = expr.streams or ("g",)
        prog = expr.compile(streams)
        X = np.random.default_rng(0).normal(size=(args.rows, prog.n_cols))
        a = (prog.codes, prog.args, prog.left, prog.right, prog.consts, X)
        for kind, fast, slow in (("eval", lambda: kernels.eval_program(*a), lambda: kernels.numpy_eval_program(*a)),
                                 ("grad", lambda: kernels.grad_program(*a, prog.n_cols),
                                  lambda: kernels.numpy_grad_program(*a, prog.n_cols))):
            t_nb, t_np = _time(fast, args.repeat), _time(slow, args.repeat)
            print(f"{name[:27]:<28}{kind:<6}{t_nb * 1e3:>10.3f}{t_np * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
