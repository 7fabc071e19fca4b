"""Shared fixtures and independent oracles for the test suite."""

import numpy as np
import pytest

from parfem.comm import Transport, build_rank_context
from parfem.mapped_fe import get_element, make_reference_map


def seq_context(mesh, elem="q1"):
    """Single-rank context: the sequential reference configuration."""
    transport = Transport(1)
    ownership = np.zeros(mesh.n_cells, dtype=np.int64)
    return build_rank_context(mesh, ownership, elem, transport, 0)


def geometric_dof_classes(mesh, cells, elem_kind, tol=1e-10):
    """Brute-force oracle: local d.o.f.s identified iff coordinates coincide."""
    elem = get_element(elem_kind)
    groups = {}
    for gid in sorted(cells):
        rmap = make_reference_map(mesh.cell(gid), mesh)
        pts = rmap.map(elem.nodes)
        for li in range(elem.n_dofs):
            key = (round(pts[li, 0] / tol), round(pts[li, 1] / tol))
            groups.setdefault(key, set()).add((gid, li))
    return {frozenset(g) for g in groups.values()}


def dense_ssor_sweep(A, x, b, omega=1.0):
    """Textbook componentwise SSOR iteration (forward then backward)."""
    A = np.asarray(A)
    x = np.array(x, dtype=float)
    n = len(b)
    for i in range(n):
        x[i] += omega * (b[i] - A[i] @ x) / A[i, i]
    for i in range(n - 1, -1, -1):
        x[i] += omega * (b[i] - A[i] @ x) / A[i, i]
    return x


def dense_gmres(A, b, x0=None, tol=1e-12, maxit=200):
    """Plain dense GMRES (no restart) returning the residual history."""
    A = np.asarray(A)
    n = len(b)
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, float)
    r = b - A @ x0
    beta = np.linalg.norm(r)
    hist = [beta]
    if beta < tol:
        return x0, hist
    V = [r / beta]
    H = np.zeros((maxit + 1, maxit))
    for j in range(maxit):
        w = A @ V[j]
        for i in range(j + 1):
            H[i, j] = V[i] @ w
            w = w - H[i, j] * V[i]
        H[j + 1, j] = np.linalg.norm(w)
        y, res, *_ = np.linalg.lstsq(H[: j + 2, : j + 1], beta * np.eye(j + 2)[:, 0],
                                     rcond=None)
        est = np.linalg.norm(H[: j + 2, : j + 1] @ y - beta * np.eye(j + 2)[:, 0])
        hist.append(est)
        if est < tol or H[j + 1, j] < 1e-14:
            break
        V.append(w / H[j + 1, j])
    x = x0 + np.column_stack(V[: len(y)]) @ y
    return x, hist


def invert_reference_map(rmap, x, tol=1e-13):
    """Newton iteration for the reference coordinates of a physical point."""
    xi = np.zeros(2)
    for _ in range(50):
        f = rmap.map([xi])[0] - np.asarray(x, float)
        if np.linalg.norm(f) < tol:
            break
        J = rmap.jacobians([xi])[0]
        xi = xi - np.linalg.solve(J, f)
    return xi


def eval_fe_function(ctx, values, points, tol=1e-9):
    """Evaluate a finite element function at physical points (own cells)."""
    elem = get_element(ctx.elem_kind)
    out = np.full(len(points), np.nan)
    for gid in sorted(ctx.rank_cells.own):
        rmap = make_reference_map(ctx.mesh.cell(gid), ctx.mesh)
        dofs = ctx.dof_map.cell_dofs[gid]
        for k, p in enumerate(points):
            if not np.isnan(out[k]):
                continue
            xi = invert_reference_map(rmap, p)
            if np.all(np.abs(xi) <= 1.0 + tol):
                vals, _ = elem.eval([xi])
                out[k] = vals[0] @ values[dofs]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
