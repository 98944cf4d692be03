"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--n 96] [--repeat 5]

Systems come from the actual assemblers: a stiffness + mass matrix for CG and
the same plus convection for BiCGStab, on an n x n rectangle mesh.
"""
import argparse
import timeit

import numpy as np

from porous_city import fem, kernels, mesh as M


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=96, help="cells per side")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    pure = kernels.load_backend(pure=True)
    fast = kernels.load_backend(pure=False)
    m = M.rectangle_mesh(1, 1, args.n)
    S = fem.assemble_stiffness(m, 1.0) + fem.assemble_mass(m, 10.0)
    N = S + fem.assemble_convection(m, np.array([20.0, -5.0]))
    b = np.random.default_rng(0).normal(size=m.n_nodes)
    x = np.random.default_rng(1).normal(size=m.n_nodes)
    out = np.empty(m.n_nodes)
    slots = m.pattern.tri_slots.ravel().astype(np.int64)
    vals = np.random.default_rng(2).normal(size=slots.size)
    tol = 1e-10 * np.linalg.norm(b)

    def solver(be, name, A):
        dinv = 1.0 / A.diagonal()

        def run():
            getattr(be, name)(A.indptr, A.indices, A.data, b, np.zeros(A.n), dinv, tol, 10_000)
        return run

    cases = {
        "csr_matvec": lambda be: (lambda: be.csr_matvec(S.indptr, S.indices, S.data, x, out)),
        "scatter_add": lambda be: (lambda: be.scatter_add(slots, vals, S.indices.size)),
        "pcg": lambda be: solver(be, "pcg", S),
        "bicgstab": lambda be: solver(be, "bicgstab", N),
    }
    print(f"mesh {m.n_nodes} nodes, {m.n_triangles} triangles, nnz {S.data.size}")
    print(f"compiled backend: {fast.BACKEND}")
    print(f"{'kernel':<12} {'python [ms]':>12} {fast.BACKEND + ' [ms]':>12} {'speedup':>8}")
    for name, make in cases.items():
        tp = best(make(pure), args.repeat) * 1e3
        tf = best(make(fast), args.repeat) * 1e3
        print(f"{name:<12} {tp:12.3f} {tf:12.3f} {tp / tf:8.1f}")


if __name__ == "__main__":
    main()
