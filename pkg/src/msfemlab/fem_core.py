"""P1 finite element kernels: assembly, Dirichlet solves, norms, transfer.

The coefficient fields are scalar-times-identity, so every local stiffness
matrix factors as (element quadrature mean of the scalar) x (geometric local
matrix).  Assembly exploits that split, and the same split powers the affine
reassembly trick in the multiscale module.

Quadrature uses midpoints in 1D and the three edge-midpoint nodes in 2D
(exact for quadratics), optionally on an nsub-times refined sub-grid of each
element for coefficients that oscillate below the mesh scale.
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import sample
from .mesh import build_fine_mesh, locate_points

__all__ = [
    "NormKind",
    "SparseSystem",
    "FineSolution",
    "AssemblyError",
    "SolveError",
    "IndefiniteSystemError",
    "assemble_p1",
    "solve_dirichlet",
    "solve_reference",
    "norm",
    "transfer",
    "to_element_field",
    "element_gradients",
    "quadrature_rule",
    "element_quadrature_mean",
]

# solver size threshold: direct factorization below, preconditioned CG above
_DIRECT_LIMIT = 60_000


class AssemblyError(RuntimeError):
    pass


class SolveError(RuntimeError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class IndefiniteSystemError(SolveError):
    pass


class NormKind(Enum):
    L2 = "L2"
    H1 = "H1"
    H1_SEMI = "H1_semi"
    BROKEN_H1 = "broken_H1"
    ENERGY = "energy"


@dataclass
class SparseSystem:
    """Assembled P1 system: full symmetric matrix plus Dirichlet bookkeeping.

    K is the unconstrained n x n stiffness (CSR); F the load vector;
    elem_coeff the per-element quadrature means of the scalar coefficient.
    """

    mesh: object
    K: sp.csr_matrix
    F: np.ndarray
    boundary: np.ndarray
    elem_coeff: np.ndarray
    _factor: object = field(default=None, repr=False, compare=False)

    @property
    def n(self):
        return self.K.shape[0]


@dataclass
class FineSolution:
    """Nodal P1 field attached to its mesh."""

    mesh: object
    values: np.ndarray
    label: str = ""


@lru_cache(maxsize=None)
def _quad_bary_1d(nsub):
    t = (np.arange(nsub) + 0.5) / nsub
    lam = np.column_stack([1 - t, t])
    w = np.full(nsub, 1.0 / nsub)
    return lam, w


@lru_cache(maxsize=None)
def _quad_bary_2d(nsub):
    """Edge-midpoint rule on each cell of the nsub-refined reference triangle."""
    mids = []
    ref_mid = np.array([[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])
    for i in range(nsub):
        for j in range(nsub - i):
            v0 = np.array([i, j], dtype=float)
            up = v0[None, :] + ref_mid
            mids.append(up)
            if i + j <= nsub - 2:
                # downward sub-triangle with vertices (i+1,j),(i+1,j+1),(i,j+1)
                v = np.array([[i + 1, j], [i + 1, j + 1], [i, j + 1]], dtype=float)
                dm = 0.5 * (v + np.roll(v, -1, axis=0))
                mids.append(dm)
    pts = np.concatenate(mids) / nsub
    lam = np.column_stack([1 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])
    w = np.full(len(lam), 1.0 / len(lam))
    return lam, w


def quadrature_rule(d, nsub=1):
    """(barycentric coords (nq, d+1), weights (nq,)) of the element rule."""
    return _quad_bary_1d(nsub) if d == 1 else _quad_bary_2d(nsub)


def element_gradients(mesh):
    """Constant P1 shape gradients per element: (ne, d+1, d); plus measures."""
    v = mesh.nodes[mesh.elements]
    meas = mesh.element_measures()
    if mesh.d == 1:
        h = v[:, 1, 0] - v[:, 0, 0]
        grads = np.stack([-1.0 / h, 1.0 / h], axis=1)[:, :, None]
        return grads, meas
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(np.abs(det) < 1e-15 * np.max(np.abs(v))):
        raise AssemblyError("degenerate element in mesh")
    inv = np.empty((len(v), 2, 2))
    inv[:, 0, 0] = e2[:, 1] / det
    inv[:, 0, 1] = -e2[:, 0] / det
    inv[:, 1, 0] = -e1[:, 1] / det
    inv[:, 1, 1] = e1[:, 0] / det
    g1 = inv[:, 0]
    g2 = inv[:, 1]
    grads = np.stack([-g1 - g2, g1, g2], axis=1)
    return grads, meas


def _eval_scalar(fun, pts, d):
    x = pts if d == 2 else pts[..., 0]
    return np.asarray(fun(x), dtype=float).reshape(pts.shape[:-1])


def element_quadrature_mean(mesh, fun, nsub=1):
    """Per-element quadrature mean of a scalar field (exact for quadratics)."""
    if np.isscalar(fun):
        return np.full(mesh.n_elements, float(fun))
    if isinstance(fun, np.ndarray):
        if fun.shape != (mesh.n_elements,):
            raise AssemblyError("per-element coefficient array has wrong length")
        return fun.astype(float)
    lam, w = quadrature_rule(mesh.d, nsub)
    verts = mesh.nodes[mesh.elements]
    pts = np.einsum("qk,ekd->eqd", lam, verts)
    vals = _eval_scalar(fun, pts, mesh.d)
    return vals @ w


def assemble_p1(mesh, coeff, rhs=None, nsub=1):
    """Assemble the P1 stiffness and load for -div(a grad u) = f.

    coeff: scalar, per-element array, or callable sampling a(x); rhs likewise
    (None means zero load).  Quadrature resolves sub-element structure via
    nsub refinements of the base rule.
    """
    grads, meas = element_gradients(mesh)
    cbar = element_quadrature_mean(mesh, coeff, nsub)
    # geometric local matrices |K| grad_i . grad_j
    G = np.einsum("eid,ejd,e->eij", grads, grads, meas)
    nd = mesh.d + 1
    conn = mesh.elements
    rows = np.repeat(conn, nd, axis=1).ravel()
    cols = np.tile(conn, (1, nd)).ravel()
    data = (cbar[:, None, None] * G).ravel()
    n = mesh.n_nodes
    K = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    F = np.zeros(n)
    if rhs is not None:
        lam, w = quadrature_rule(mesh.d, nsub)
        verts = mesh.nodes[conn]
        pts = np.einsum("qk,ekd->eqd", lam, verts)
        fvals = (
            np.full(pts.shape[:2], float(rhs))
            if np.isscalar(rhs)
            else _eval_scalar(rhs, pts, mesh.d)
        )
        local = np.einsum("eq,q,qk,e->ek", fvals, w, lam, meas)
        np.add.at(F, conn, local)
    _check_symmetry(K)
    return SparseSystem(mesh=mesh, K=K, F=F, boundary=mesh.boundary.copy(), elem_coeff=cbar)


def _check_symmetry(K, tol=1e-12):
    gap = abs(K - K.T).max()
    scale = max(abs(K).max(), 1e-300)
    if gap > tol * scale:
        raise AssemblyError(f"assembled matrix asymmetric: {gap / scale:.2e} relative")


def _interior_factor(system):
    free = ~system.boundary
    Kii = system.K[free][:, free].tocsc()
    lu = spla.splu(
        Kii,
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options=dict(SymmetricMode=True),
    )
    if np.min(lu.U.diagonal()) <= 0:
        raise IndefiniteSystemError(
            "system not positive definite after constraint elimination"
        )
    return lu


def solve_dirichlet(system, g=None, rtol=1e-10, method="auto"):
    """Solve the constrained system with Dirichlet data g (default zero).

    g: scalar, full-length nodal array, or callable on boundary coordinates.
    Eliminates constrained rows/columns, solves the SPD interior block
    (direct factorization for small systems, AMG-preconditioned CG for large),
    and verifies the final residual.
    """
    mesh, K, F = system.mesh, system.K, system.F
    free = ~system.boundary
    n = system.n
    u = np.zeros(n)
    if g is not None:
        if np.isscalar(g):
            u[system.boundary] = g
        elif callable(g):
            bx = mesh.nodes[system.boundary]
            u[system.boundary] = g(bx if mesh.d == 2 else bx[:, 0])
        else:
            u[system.boundary] = np.asarray(g, dtype=float)[system.boundary]
    rhs = F[free] - K[free][:, ~free] @ u[~free]
    nfree = int(free.sum())
    if nfree == 0:
        return FineSolution(mesh=mesh, values=u)
    Kii = K[free][:, free]
    if method == "direct" or (method == "auto" and nfree <= _DIRECT_LIMIT):
        if system._factor is None:
            system._factor = _interior_factor(system)
        x = system._factor.solve(rhs)
    else:
        x = _solve_cg_amg(Kii.tocsr(), rhs, rtol)
    res = np.linalg.norm(Kii @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if res > max(rtol * 10, 1e-10):
        raise SolveError(f"linear solve stalled at residual {res:.3e}", residual=res)
    u[free] = x
    return FineSolution(mesh=mesh, values=u)


def _solve_cg_amg(Kii, rhs, rtol):
    try:
        import pyamg

        ml = pyamg.smoothed_aggregation_solver(Kii.tocsr(), max_coarse=500)
        M = ml.aspreconditioner(cycle="V")
    except Exception:
        M = None
    x, info = spla.cg(Kii, rhs, rtol=rtol * 1e-2, atol=0.0, maxiter=2000, M=M)
    if info > 0:
        res = np.linalg.norm(Kii @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
        raise SolveError(
            f"conjugate gradient hit the iteration cap at residual {res:.3e}",
            residual=res,
        )
    return x


def solve_reference(spec, realization, rhs=1.0, h_fine=None, nsub=1):
    """Fine-scale P1 reference solution of the full random problem.

    The fine step must resolve the oscillation: h_fine <= eps.
    """
    if h_fine is None or h_fine > spec.eps * (1 + 1e-12):
        raise ValueError(f"h_fine={h_fine} must satisfy h_fine <= eps={spec.eps}")
    domain = "interval" if spec.d == 1 else "square"
    mesh = build_fine_mesh(domain, h_fine)
    system = assemble_p1(mesh, lambda x: sample(spec, x, realization), rhs, nsub)
    out = solve_dirichlet(system)
    out.label = "reference"
    return out


def to_element_field(mesh, nodal_values):
    """Element-corner representation (ne, d+1) of a conforming nodal field."""
    return np.asarray(nodal_values)[mesh.elements]


def _element_norms_sq(mesh, corner, coeff_elem=None):
    """Per-element squared L2 and H1-semi contributions of a corner field."""
    grads, meas = element_gradients(mesh)
    gu = np.einsum("ek,ekd->ed", corner, grads)
    semi = np.sum(gu * gu, axis=1) * meas
    if mesh.d == 1:
        a, b = corner[:, 0], corner[:, 1]
        l2 = meas / 3.0 * (a * a + a * b + b * b)
    else:
        s2 = np.sum(corner**2, axis=1)
        sp_ = (
            corner[:, 0] * corner[:, 1]
            + corner[:, 1] * corner[:, 2]
            + corner[:, 0] * corner[:, 2]
        )
        l2 = meas / 6.0 * (s2 + sp_)
    if coeff_elem is not None:
        semi = semi * coeff_elem
    return l2, semi


def norm(mesh, values, kind, coeff=None, nsub=1):
    """Norm of a P1 field: nodal (n_nodes,) or element-corner (ne, d+1) layout.

    The element-corner layout admits inter-element jumps, which is what the
    broken H1 norm is for; all quadrature is exact for P1 integrands.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        if values.shape[0] != mesh.n_nodes:
            raise ValueError("nodal field length does not match mesh")
        corner = to_element_field(mesh, values)
    else:
        if values.shape != (mesh.n_elements, mesh.d + 1):
            raise ValueError("element field shape does not match mesh")
        corner = values
    coeff_elem = None
    if kind is NormKind.ENERGY:
        if coeff is None:
            raise ValueError("energy norm requires the coefficient")
        coeff_elem = element_quadrature_mean(mesh, coeff, nsub)
    l2, semi = _element_norms_sq(mesh, corner, coeff_elem)
    if kind is NormKind.L2:
        return float(np.sqrt(l2.sum()))
    if kind is NormKind.H1_SEMI:
        return float(np.sqrt(semi.sum()))
    if kind in (NormKind.H1, NormKind.BROKEN_H1):
        return float(np.sqrt(l2.sum() + semi.sum()))
    if kind is NormKind.ENERGY:
        return float(np.sqrt(semi.sum()))
    raise ValueError(f"unknown norm kind {kind!r}")


def transfer(from_mesh, values, to_mesh):
    """P1 point-evaluation of a nodal field at the nodes of another mesh."""
    eids, bary = locate_points(from_mesh, to_mesh.nodes)
    corner = np.asarray(values)[from_mesh.elements[eids]]
    return np.einsum("pk,pk->p", bary, corner)
