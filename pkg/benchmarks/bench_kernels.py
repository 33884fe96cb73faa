"""Time the compiled likelihood kernels against the numpy fallback.

Run from the repository root after installing the package:

    python benchmarks/bench_kernels.py --n-cells 2000 --n-genes 200

The same comparison respects ``CROSSVI_PURE_PYTHON=1``, which is how the
library itself falls back when the extension is unavailable.
"""

import argparse
import timeit

import numpy as np

from crossvi.kernels import available_backends


def make_inputs(n_cells, n_genes, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.poisson(4.0, size=(n_cells, n_genes)).astype(float)
    rho = rng.dirichlet(np.full(n_genes, 0.7), size=n_cells)
    lib = np.exp(rng.normal(np.log(2000.0), 0.3, size=(n_cells, 1)))
    mean = np.ascontiguousarray(lib * rho)
    theta = np.exp(rng.normal(np.log(5.0), 0.25, size=n_genes))
    logit = rng.normal(-1.5, 0.5, size=(n_cells, n_genes))
    return x, mean, theta, logit


def calls(mod, x, mean, theta, logit):
    return {
        "poisson value": lambda: mod.poisson_logpmf(x, mean),
        "poisson value+grad": lambda: mod.poisson_logpmf_grad(x, mean),
        "nb value": lambda: mod.nb_logpmf(x, mean, theta),
        "nb value+grad": lambda: mod.nb_logpmf_grad(x, mean, theta),
        "zinb value": lambda: mod.zinb_logpmf(x, mean, theta, logit),
        "zinb value+grad": lambda: mod.zinb_logpmf_grad(x, mean, theta,
                                                        logit),
    }


def max_disagreement(a, b):
    if isinstance(a, tuple):
        return max(max_disagreement(u, v) for u, v in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-cells", type=int, default=2000)
    ap.add_argument("--n-genes", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backends = available_backends()
    x, mean, theta, logit = make_inputs(args.n_cells, args.n_genes,
                                        args.seed)
    per_backend = {name: calls(mod, x, mean, theta, logit)
                   for name, mod in backends.items()}

    print(f"matrix {args.n_cells} x {args.n_genes}, best of "
          f"{args.repeats}, backends: {', '.join(sorted(backends))}")
    header = f"{'kernel':<22}" + "".join(f"{b + ' (ms)':>14}"
                                         for b in sorted(backends))
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)

    for op in calls(backends["numpy"], x, mean, theta, logit):
        best = {}
        for name in sorted(backends):
            timer = timeit.Timer(per_backend[name][op])
            loops = max(1, timer.autorange()[0] // 4)
            best[name] = min(timer.repeat(args.repeats, loops)) / loops
        row = f"{op:<22}" + "".join(f"{best[b] * 1e3:>14.3f}"
                                    for b in sorted(backends))
        if len(best) == 2:
            row += f"{best['numpy'] / best['native']:>9.1f}x"
        print(row)

    if len(backends) == 2:
        worst = max(
            max_disagreement(per_backend["native"][op](),
                             per_backend["numpy"][op]())
            for op in per_backend["numpy"])
        print(f"max |native - numpy| across all outputs: {worst:.3e}")


if __name__ == "__main__":
    main()
