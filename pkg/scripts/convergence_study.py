#!/usr/bin/env python3
"""Mesh-refinement study on the manufactured Poisson solution.

Prints L2 errors and observed orders for Q1 and Q2 elements.
"""

import numpy as np

from parfem.assembly import apply_dirichlet, assemble_cdr, l2_error
from parfem.bench_cli import mms_exact, poisson_mms_problem
from parfem.comm import spmd_run
from parfem.dlinalg import fgmres
from parfem.multigrid import MgPreconditioner, build_hierarchy


def solve(elem, levels):
    coarse, coeffs, _ = poisson_mms_problem()

    def discretize(ctx):
        A, b = assemble_cdr(ctx, coeffs)
        apply_dirichlet(A, b, ctx, coeffs.dirichlet)
        return A, b

    def body(rank, transport):
        hier = build_hierarchy(coarse, levels, elem, discretize, transport, rank)
        res = fgmres(
            hier.finest.matrix,
            hier.finest.rhs,
            precond=MgPreconditioner(hier),
            tol=1e-11,
            maxit=200,
        )
        assert res.converged
        ctx = hier.finest.ctx
        return ctx.n_local, l2_error(ctx, res.x, mms_exact, quad_order=5)

    return spmd_run(1, body)[0]


def main():
    for elem in ("q1", "q2"):
        print(f"\n{elem.upper()} elements")
        print(f"{'levels':>7}{'dofs':>9}{'L2 error':>14}{'order':>8}")
        prev = None
        for levels in (3, 4, 5):
            n, err = solve(elem, levels)
            order = "" if prev is None else f"{np.log2(prev / err):8.3f}"
            print(f"{levels:>7}{n:>9}{err:>14.4e}{order}")
            prev = err


if __name__ == "__main__":
    main()
