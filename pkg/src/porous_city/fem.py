"""P1 finite-element kernels on a :class:`~porous_city.mesh.Mesh`.

Every operator is assembled into the mesh's pre-symbolized CSR pattern by an
ordered scatter-add (element by element, ascending), so two assemblies of the
same inputs are bit-identical.  Nodal fields are plain float64 arrays, shape
(n,) for scalars and (n, 2) for vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .mesh import Mesh, TAG_CODE, UnknownTag


class FemError(ArithmeticError):
    pass


class NonPositiveLumpedEntry(FemError):
    pass


class SolverFailure(FemError):
    """Iterative solve did not reach the requested tolerance."""

    def __init__(self, msg: str, residual: float = math.nan, iterations: int = 0):
        super().__init__(f"{msg} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class Breakdown(SolverFailure):
    pass


class MaxIterExceeded(SolverFailure):
    pass


@dataclass(eq=False)
class SparseMatrix:
    """Square CSR matrix.  Matrices built on one mesh share ``indptr``/``indices``."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def n(self) -> int:
        return int(self.indptr.shape[0] - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(self.n)
        kernels.csr_matvec(self.indptr, self.indices, self.data, np.ascontiguousarray(x, dtype=np.float64), out)
        return out

    def __matmul__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            return np.column_stack([self.matvec(x[:, k]) for k in range(x.shape[1])])
        return self.matvec(x)

    def _same(self, other: "SparseMatrix"):
        if not (other.indptr is self.indptr or np.array_equal(other.indptr, self.indptr)) or not (
                other.indices is self.indices or np.array_equal(other.indices, self.indices)):
            raise ValueError("matrices have different sparsity patterns")

    def __add__(self, other: "SparseMatrix") -> "SparseMatrix":
        self._same(other)
        return SparseMatrix(self.indptr, self.indices, self.data + other.data)

    def __sub__(self, other: "SparseMatrix") -> "SparseMatrix":
        self._same(other)
        return SparseMatrix(self.indptr, self.indices, self.data - other.data)

    def __mul__(self, s: float) -> "SparseMatrix":
        return SparseMatrix(self.indptr, self.indices, self.data * float(s))

    __rmul__ = __mul__

    def __neg__(self) -> "SparseMatrix":
        return SparseMatrix(self.indptr, self.indices, -self.data)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))

    def diagonal(self) -> np.ndarray:
        rows = self.row_ids()
        d = np.zeros(self.n)
        on = rows == self.indices
        d[rows[on]] = self.data[on]
        return d

    def to_scipy(self):
        import scipy.sparse as sp
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        a = np.zeros(self.shape)
        a[self.row_ids(), self.indices] = self.data
        return a

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(np.arange(n + 1, dtype=np.int64), np.arange(n, dtype=np.int64), np.ones(n))

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        a = np.asarray(a, dtype=np.float64)
        rows, cols = np.nonzero(a != 0.0)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=a.shape[0]))]).astype(np.int64)
        return cls(indptr, cols.astype(np.int64), a[rows, cols].copy())


def _matrix(mesh: Mesh, tri_vals: np.ndarray | None = None, edge_idx=None, edge_vals=None) -> SparseMatrix:
    pat = mesh.pattern
    slots, vals = [], []
    if tri_vals is not None:
        slots.append(pat.tri_slots.ravel())
        vals.append(tri_vals.reshape(-1))
    if edge_idx is not None and len(edge_idx):
        slots.append(pat.edge_slots[edge_idx].ravel())
        vals.append(edge_vals.reshape(-1))
    if slots:
        data = kernels.scatter_add(np.concatenate(slots), np.ascontiguousarray(np.concatenate(vals)), pat.nnz)
    else:
        data = np.zeros(pat.nnz)
    return SparseMatrix(pat.indptr, pat.indices, data)


def zero_matrix(mesh: Mesh) -> SparseMatrix:
    return _matrix(mesh)


def scalar_coeff(mesh: Mesh, coeff) -> np.ndarray:
    c = np.asarray(coeff, dtype=np.float64)
    if c.ndim == 0:
        return np.full(mesh.n_nodes, float(c))
    return c


_M_DIAG = np.eye(3)


def assemble_mass(mesh: Mesh, coeff=1.0) -> SparseMatrix:
    """M_ij = ∫ c λ_i λ_j with c piecewise linear, integrated exactly."""
    c = scalar_coeff(mesh, coeff)[mesh.triangles]  # (nt, 3)
    A = mesh.areas[:, None, None]
    csum = c.sum(axis=1)[:, None, None]
    ci = c[:, :, None]
    cj = c[:, None, :]
    # ∫λ_i³ = A/10, ∫λ_i²λ_j = A/30, ∫λ_iλ_jλ_k = A/60
    off = ((ci + cj) / 30.0 + (csum - ci - cj) / 60.0)
    diag = (ci / 10.0 + (csum - ci) / 30.0)
    vals = A * np.where(_M_DIAG[None] == 1.0, diag, off)
    return _matrix(mesh, vals)


def assemble_stiffness(mesh: Mesh, coeff=1.0) -> SparseMatrix:
    """K_ij = ∫ c ∇λ_i·∇λ_j, c taken as the element vertex mean."""
    cbar = scalar_coeff(mesh, coeff)[mesh.triangles].mean(axis=1)
    g = mesh.grads
    vals = (cbar * mesh.areas)[:, None, None] * np.einsum("tad,tbd->tab", g, g)
    return _matrix(mesh, vals)


def assemble_convection(mesh: Mesh, velocity) -> SparseMatrix:
    """C_ij = ∫ (v·∇λ_j) λ_i with v piecewise linear."""
    v = np.asarray(velocity, dtype=np.float64)
    if v.ndim == 1:
        v = np.broadcast_to(v, (mesh.n_nodes, 2))
    vt = v[mesh.triangles]  # (nt, 3, 2)
    # ∫ v λ_i = A/12 (Σ_k v_k + v_i)
    w = (mesh.areas[:, None, None] / 12.0) * (vt.sum(axis=1)[:, None, :] + vt)
    vals = np.einsum("tid,tjd->tij", w, mesh.grads)
    return _matrix(mesh, vals)


def assemble_boundary_flux(mesh: Mesh, velocity, tag: str, coeff=None) -> SparseMatrix:
    """B_ij = ∫_{Γ_tag} c (v·n) λ_i λ_j, exact for piecewise-linear c·(v·n).

    ``coeff`` (nodal, default 1) multiplies the normal velocity.
    """
    if tag not in TAG_CODE:
        raise UnknownTag(f"unknown boundary tag {tag!r}")
    idx = mesh.tag_edges(tag)
    if len(idx) == 0:
        return zero_matrix(mesh)
    v = np.asarray(velocity, dtype=np.float64)
    if v.ndim == 1:
        v = np.broadcast_to(v, (mesh.n_nodes, 2))
    e = mesh.boundary_edges[idx]
    n = mesh.edge_normals[idx]
    wa = np.einsum("ed,ed->e", v[e[:, 0]], n)
    wb = np.einsum("ed,ed->e", v[e[:, 1]], n)
    if coeff is not None:
        c = scalar_coeff(mesh, coeff)
        wa, wb = wa * c[e[:, 0]], wb * c[e[:, 1]]
    L = mesh.edge_lengths[idx]
    aa = L * (wa / 4.0 + wb / 12.0)
    ab = L * (wa + wb) / 12.0
    bb = L * (wa / 12.0 + wb / 4.0)
    vals = np.column_stack([aa, ab, ab, bb])
    return _matrix(mesh, None, idx, vals)


def lump(m: SparseMatrix, check: bool = True) -> np.ndarray:
    """Row sums of ``m``."""
    d = kernels.scatter_add(m.row_ids(), m.data, m.n)
    if check and np.any(d <= 0.0):
        i = int(np.flatnonzero(d <= 0.0)[0])
        raise NonPositiveLumpedEntry(f"lumped entry {i} is {d[i]:.3e}")
    return d


def lumped_mass(mesh: Mesh, coeff=1.0) -> np.ndarray:
    return lump(assemble_mass(mesh, coeff))


# ---------------------------------------------------------------- nodal/element helpers


def scatter_elements(mesh: Mesh, local: np.ndarray) -> np.ndarray:
    """Sum per-element local vectors (n_t, 3[, k]) into nodal vectors."""
    local = np.asarray(local, dtype=np.float64)
    slots = mesh.triangles.ravel()
    if local.ndim == 2:
        return kernels.scatter_add(slots, np.ascontiguousarray(local.ravel()), mesh.n_nodes)
    return np.column_stack([
        kernels.scatter_add(slots, np.ascontiguousarray(local[..., k].ravel()), mesh.n_nodes)
        for k in range(local.shape[-1])])


def load_vector(mesh: Mesh, f, coeff=None) -> np.ndarray:
    """b_i = ∫ f λ_i for nodal P1 ``f`` (optionally times nodal ``coeff``, vertex mean)."""
    f = scalar_coeff(mesh, f)
    ft = f[mesh.triangles]
    local = (mesh.areas[:, None] / 12.0) * (ft.sum(axis=1)[:, None] + ft)
    if coeff is not None:
        local = local * scalar_coeff(mesh, coeff)[mesh.triangles].mean(axis=1)[:, None]
    return scatter_elements(mesh, local)


def integrate(mesh: Mesh, f, triangles=None) -> float:
    """Exact integral of a P1 field (over a triangle subset if given)."""
    ft = scalar_coeff(mesh, f)[mesh.triangles].mean(axis=1) * mesh.areas
    if triangles is not None:
        ft = ft[triangles]
    return float(math.fsum(ft))


def element_gradient(mesh: Mesh, f: np.ndarray) -> np.ndarray:
    """Constant gradient per triangle: (n_t, 2) for scalars, (n_t, 2, 2) for vectors.

    For vectors, entry [t, c, d] is ∂f_c/∂x_d.
    """
    f = np.asarray(f, dtype=np.float64)
    ft = f[mesh.triangles]
    if f.ndim == 1:
        return np.einsum("ta,tad->td", ft, mesh.grads)
    return np.einsum("tac,tad->tcd", ft, mesh.grads)


def element_divergence(mesh: Mesh, v: np.ndarray) -> np.ndarray:
    g = element_gradient(mesh, v)
    return g[:, 0, 0] + g[:, 1, 1]


def node_area(mesh: Mesh) -> np.ndarray:
    return scatter_elements(mesh, np.repeat(mesh.areas[:, None], 3, axis=1))


def recovered_gradient(mesh: Mesh, f: np.ndarray) -> np.ndarray:
    """Nodal gradient: area-weighted average of incident element gradients."""
    g = element_gradient(mesh, f)
    wg = g * mesh.areas.reshape((-1,) + (1,) * (g.ndim - 1))
    local = np.repeat(wg[:, None], 3, axis=1)
    flat = local.reshape(mesh.n_triangles, 3, -1)
    out = scatter_elements(mesh, flat) / node_area(mesh)[:, None]
    return out.reshape((mesh.n_nodes,) + g.shape[1:])


def divergence_l2(mesh: Mesh, v: np.ndarray) -> float:
    """L² norm of the elementwise divergence of a P1 vector field."""
    d = element_divergence(mesh, v)
    return float(math.sqrt(math.fsum(d * d * mesh.areas)))


# ---------------------------------------------------------------- linear algebra


@dataclass
class SolveInfo:
    iterations: int
    residual: float  # ‖Ax − b‖ / ‖b‖
    restarts: int = 0


def solve(m: SparseMatrix, rhs: np.ndarray, symmetric: bool = True, rel_tol: float = 1e-8,
          max_iter: int | None = None, x0: np.ndarray | None = None,
          return_info: bool = False):
    """Jacobi-preconditioned CG (symmetric) or BiCGStab (general).

    The achieved true residual satisfies ‖Ax − b‖ ≤ rel_tol·‖b‖, otherwise
    :class:`Breakdown` or :class:`MaxIterExceeded` is raised.
    """
    b = np.ascontiguousarray(rhs, dtype=np.float64)
    n = m.n
    if b.shape != (n,):
        raise ValueError(f"rhs has shape {b.shape}, expected ({n},)")
    if not np.all(np.isfinite(b)):
        raise ValueError("rhs contains non-finite values")
    max_iter = 10 * n if max_iter is None else int(max_iter)
    bnorm = math.sqrt(float(b @ b))
    if bnorm == 0.0:
        x = np.zeros(n)
        return (x, SolveInfo(0, 0.0)) if return_info else x
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    d = m.diagonal()
    if np.any(d == 0.0):
        raise Breakdown("zero diagonal entry, Jacobi preconditioner undefined")
    dinv = 1.0 / d
    tol = rel_tol * bnorm
    run = kernels.pcg if symmetric else kernels.bicgstab
    total, restarts = 0, 0
    while True:
        it, _, status = run(m.indptr, m.indices, m.data, b, x, dinv, tol, max_iter - total)
        total += it
        r = b - m.matvec(x)
        res = math.sqrt(float(r @ r)) / bnorm
        if res <= rel_tol:
            info = SolveInfo(total, res, restarts)
            return (x, info) if return_info else x
        if not np.all(np.isfinite(x)):
            raise Breakdown("iterate became non-finite", res, total)
        if total >= max_iter or status == 1:
            raise MaxIterExceeded("iteration cap reached", res, total)
        if restarts >= 20:
            raise Breakdown("Krylov breakdown" if status == 2 else "no progress after restarts",
                            res, total)
        # recursive residual drifted or the recurrence broke down: restart from x
        restarts += 1


class Factorized:
    """Sparse LU of a fixed matrix, reused across many right-hand sides.

    One step of iterative refinement against the original matrix keeps the
    residual at round-off level.
    """

    def __init__(self, m: SparseMatrix):
        from scipy.sparse.linalg import splu

        self.m = m
        self._lu = splu(m.to_scipy().tocsc())

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        b = np.ascontiguousarray(rhs, dtype=np.float64)
        x = self._lu.solve(b)
        x += self._lu.solve(b - self.m.matvec(x))
        if not np.all(np.isfinite(x)):
            raise Breakdown("factorized solve produced non-finite values")
        return x


def apply_dirichlet(m: SparseMatrix, rhs: np.ndarray, nodes: np.ndarray, values) -> tuple[SparseMatrix, np.ndarray]:
    """Symmetric elimination of Dirichlet rows/columns; returns new (matrix, rhs)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    g = np.zeros(m.n)
    g[nodes] = values
    rhs = rhs - m.matvec(g)
    fixed = np.zeros(m.n, dtype=bool)
    fixed[nodes] = True
    rows = m.row_ids()
    data = m.data.copy()
    data[fixed[rows] | fixed[m.indices]] = 0.0
    data[fixed[rows] & (rows == m.indices)] = 1.0
    rhs[nodes] = g[nodes]
    return SparseMatrix(m.indptr, m.indices, data), rhs
