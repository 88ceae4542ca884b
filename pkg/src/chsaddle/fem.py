"""P1 finite elements on a uniform triangulation of the unit square.

Every grid square is split along the same lower-left to upper-right
diagonal, which fixes the operator stencils and keeps assembly
reproducible.  Nodes are numbered row-major: node p = iy * n_side + ix
sits at (ix * h, iy * h) with h = 1 / (n_side - 1).

The discrete operators are the mass matrix M, the Neumann stiffness
matrix K (row sums zero), the hat-function integral vector m with
m = M 1, and the rank-one corrected stiffness Kbar = K + m m^T which is
SPD because the integral vector lifts the constant kernel of K.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import AssemblyError
from .linalg import RankOneUpdated, SparseMatrix, spmv


@dataclass(frozen=True)
class Mesh:
    """Uniform triangulation of [0,1]^2 with n_side nodes per side."""

    n_side: int
    coords: np.ndarray    # (n_nodes, 2)
    elements: np.ndarray  # (n_triangles, 3) node indices, CCW

    @property
    def n_nodes(self):
        return self.n_side ** 2

    @property
    def h(self):
        return 1.0 / (self.n_side - 1)


def build_uniform_mesh(n_side):
    """Uniform mesh with (n_side-1)^2 squares, two triangles each."""
    if n_side < 2:
        raise ValueError(f"n_side must be >= 2, got {n_side}")
    n_side = int(n_side)
    h = 1.0 / (n_side - 1)
    ix, iy = np.meshgrid(np.arange(n_side), np.arange(n_side))
    coords = np.column_stack([(ix * h).ravel(), (iy * h).ravel()])
    sx, sy = np.meshgrid(np.arange(n_side - 1), np.arange(n_side - 1))
    a = (sy * n_side + sx).ravel()          # lower-left corner of each square
    b = a + 1
    c = a + n_side + 1
    d = a + n_side
    lower = np.column_stack([a, b, c])      # diagonal a-c
    upper = np.column_stack([a, c, d])
    elements = np.vstack([lower, upper]).astype(np.int64)
    return Mesh(n_side, coords, elements)


def triangle_areas(mesh):
    """Signed areas of all triangles (positive for CCW orientation)."""
    p = mesh.coords[mesh.elements]
    v1 = p[:, 1] - p[:, 0]
    v2 = p[:, 2] - p[:, 0]
    return 0.5 * (v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0])


def _scatter(mesh, local):
    """COO triplets from per-element 3x3 contributions, accumulated in a
    canonical order so assembly is independent of element ordering."""
    ne = mesh.elements.shape[0]
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    vals = local.reshape(ne, 9).ravel()
    n = mesh.n_nodes
    return SparseMatrix.from_coo(n, n, rows, cols, vals, symmetric=True)


def assemble_mass(mesh):
    """Consistent P1 mass matrix: element block (area/12) [[2,1,1],[1,2,1],[1,1,2]]."""
    areas = triangle_areas(mesh)
    if np.any(areas <= 0.0):
        raise AssemblyError("mesh contains non-positive triangle areas")
    base = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    local = areas[:, None, None] * base[None, :, :]
    return _scatter(mesh, local)


def assemble_stiffness(mesh):
    """P1 stiffness matrix with natural boundary conditions.

    Element block (b_i b_j + c_i c_j) * area with the constant gradients
    b_i = (y_j - y_k) / (2 area), c_i = (x_k - x_j) / (2 area).
    """
    areas = triangle_areas(mesh)
    if np.any(areas <= 1e-300):
        raise AssemblyError("degenerate (zero-area) triangle in stiffness assembly")
    p = mesh.coords[mesh.elements]       # (ne, 3, 2)
    x, y = p[:, :, 0], p[:, :, 1]
    nxt = [1, 2, 0]
    prv = [2, 0, 1]
    bg = (y[:, nxt] - y[:, prv]) / (2.0 * areas[:, None])
    cg = (x[:, prv] - x[:, nxt]) / (2.0 * areas[:, None])
    local = (bg[:, :, None] * bg[:, None, :] + cg[:, :, None] * cg[:, None, :])
    local *= areas[:, None, None]
    return _scatter(mesh, local)


def assemble_m_vector(mesh):
    """Exact hat-function integrals m_p = sum of area/3 over the triangle
    fan of node p.  Accumulated in canonical (node, value) order."""
    areas = triangle_areas(mesh)
    nodes = mesh.elements.ravel()
    vals = np.repeat(areas / 3.0, 3)
    order = np.lexsort((vals, nodes))
    nodes, vals = nodes[order], vals[order]
    m = np.zeros(mesh.n_nodes)
    starts = np.flatnonzero(np.r_[True, nodes[1:] != nodes[:-1]])
    m[nodes[starts]] = np.add.reduceat(vals, starts)
    return m


@dataclass
class FemOperators:
    """Assembled discrete operators with the model parameters eps, tau.

    Kbar is exposed as a sparse-plus-rank-one view; the dense m m^T is
    never formed.
    """

    mesh: Mesh
    M: SparseMatrix
    K: SparseMatrix
    m: np.ndarray
    eps: float
    tau: float
    Kbar: RankOneUpdated = field(init=False)

    def __post_init__(self):
        if self.eps <= 0.0 or self.tau <= 0.0:
            raise ValueError("eps and tau must be positive")
        self.Kbar = RankOneUpdated(self.K, self.m, self.m)

    @property
    def eta(self):
        return self.eps * self.tau

    @property
    def n(self):
        return self.mesh.n_nodes


def build_operators(mesh, eps, tau):
    M = assemble_mass(mesh)
    K = assemble_stiffness(mesh)
    m = assemble_m_vector(mesh)
    return FemOperators(mesh, M, K, m, eps, tau)


def apply_kbar(ops, x):
    """Kbar x = K x + m (m^T x) without forming the rank-one densely."""
    x = np.asarray(x, dtype=np.float64)
    return spmv(ops.K, x) + ops.m * (ops.m @ x)
