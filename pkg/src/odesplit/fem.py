"""P1 finite elements on structured triangulations of rectangles.

Each grid square is split along its lower-left to upper-right diagonal
(fixed, for determinism).  Mass and stiffness matrices are assembled into
CSR; the stiffness accepts a constant or per-cell SPD conductivity tensor.
The linear solver is a Jacobi-preconditioned conjugate gradient with a
relative residual stopping rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "StructuredTriMesh",
    "SparseOperator",
    "assemble_mass",
    "assemble_stiffness",
    "lumped_mass_vector",
    "cg_solve",
    "CgNonconvergenceError",
]


class CgNonconvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class StructuredTriMesh:
    """Uniform triangulation of [x0, x1] x [y0, y1] with nx*ny squares,
    each split into two triangles (2*nx*ny total)."""

    x0: float
    x1: float
    y0: float
    y1: float
    nx: int
    ny: int
    vertices: np.ndarray = None
    triangles: np.ndarray = None

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("mesh needs at least one cell per side")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError("empty rectangle")
        xs = np.linspace(self.x0, self.x1, self.nx + 1)
        ys = np.linspace(self.y0, self.y1, self.ny + 1)
        gx, gy = np.meshgrid(xs, ys)  # row-major over y then x
        verts = np.column_stack([gx.ravel(), gy.ravel()])
        tris = []
        for j in range(self.ny):
            for i in range(self.nx):
                v00 = j * (self.nx + 1) + i
                v10 = v00 + 1
                v01 = v00 + (self.nx + 1)
                v11 = v01 + 1
                tris.append((v00, v10, v11))  # diagonal v00 -> v11
                tris.append((v00, v11, v01))
        tris = np.array(tris, dtype=np.int64)
        verts.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def triangle_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


@dataclass(frozen=True)
class SparseOperator:
    mat: sp.csr_matrix
    symmetric: bool = True

    @property
    def shape(self):
        return self.mat.shape

    def __matmul__(self, x):
        return self.mat @ x


def _check_mesh(mesh):
    areas = mesh.triangle_areas()
    if np.any(areas <= 0):
        raise ValueError("degenerate triangle in mesh")
    return areas


def assemble_mass(mesh: StructuredTriMesh, lumped=False) -> SparseOperator:
    """Consistent (area/6 diagonal, area/12 off-diagonal per element) or
    row-sum lumped P1 mass matrix."""
    areas = _check_mesh(mesh)
    tri = mesh.triangles
    n = mesh.n_vertices
    if lumped:
        diag = np.zeros(n)
        np.add.at(diag, tri.ravel(), np.repeat(areas / 3.0, 3))
        return SparseOperator(sp.diags(diag).tocsr(), symmetric=True)
    local = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]], dtype=float) / 12.0
    vals = areas[:, None, None] * local[None]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    mat = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return SparseOperator(mat, symmetric=True)


def lumped_mass_vector(mesh: StructuredTriMesh) -> np.ndarray:
    areas = _check_mesh(mesh)
    diag = np.zeros(mesh.n_vertices)
    np.add.at(diag, mesh.triangles.ravel(), np.repeat(areas / 3.0, 3))
    return diag


def _p1_gradients(mesh):
    """Constant P1 basis gradients per triangle: (T, 3, 2)."""
    p = mesh.vertices[mesh.triangles]
    areas = mesh.triangle_areas()
    grads = np.empty((mesh.n_triangles, 3, 2))
    for k in range(3):
        a = p[:, (k + 1) % 3]
        b = p[:, (k + 2) % 3]
        grads[:, k, 0] = a[:, 1] - b[:, 1]
        grads[:, k, 1] = b[:, 0] - a[:, 0]
    grads /= (2.0 * areas)[:, None, None]
    return grads, areas


def assemble_stiffness(mesh: StructuredTriMesh, tensor=None, definite=True) -> SparseOperator:
    """Stiffness for the conductivity tensor: K_ij = sum_T |T| grad(phi_i) .
    M grad(phi_j).  ``tensor`` is a (2, 2) SPD matrix or a per-cell
    (n_triangles, 2, 2) field; identity by default.  ``definite=False``
    admits semidefinite tensors (used internally for the per-direction
    stiffness split that conductivity gradients rely on)."""
    grads, areas = _p1_gradients(mesh)
    if tensor is None:
        tensor = np.eye(2)
    tensor = np.asarray(tensor, dtype=float)
    if tensor.shape == (2, 2):
        tensor = np.broadcast_to(tensor, (mesh.n_triangles, 2, 2))
    elif tensor.shape != (mesh.n_triangles, 2, 2):
        raise ValueError("conductivity must be (2,2) or per-cell (T,2,2)")
    sym = np.abs(tensor - np.swapaxes(tensor, 1, 2)).max() <= 1e-14
    if not sym:
        raise ValueError("conductivity tensor must be symmetric")
    tr = tensor[:, 0, 0] + tensor[:, 1, 1]
    det = tensor[:, 0, 0] * tensor[:, 1, 1] - tensor[:, 0, 1] * tensor[:, 1, 0]
    if definite and (np.any(tr <= 0) or np.any(det <= 0)):
        raise ValueError("conductivity tensor must be positive definite")
    if not definite and (np.any(tr < 0) or np.any(det < -1e-300)):
        raise ValueError("conductivity tensor must be positive semidefinite")
    mg = np.einsum("tab,tkb->tka", tensor, grads)
    local = np.einsum("tia,tja->tij", grads, mg) * areas[:, None, None]
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_vertices
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return SparseOperator(mat, symmetric=True)


def cg_solve(a, b, rtol=1e-10, maxiter=20000, x0=None):
    """Jacobi-preconditioned conjugate gradients; stops when ||b - A x||_2
    <= rtol * ||b||_2.  Returns (x, iterations)."""
    mat = a.mat if isinstance(a, SparseOperator) else a
    b = np.asarray(b, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - mat @ x
    if np.linalg.norm(r) <= rtol * bnorm:
        return x, 0
    dinv = 1.0 / mat.diagonal()
    z = dinv * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxiter + 1):
        ap = mat @ p
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= rtol * bnorm:
            return x, it
        z = dinv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise CgNonconvergenceError(
        f"CG did not reach rtol {rtol:g} in {maxiter} iterations"
    )
