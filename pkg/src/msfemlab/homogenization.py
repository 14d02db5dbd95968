"""Periodic unit-cell solvers, homogenized tensors, and expansion machinery.

The cell problems are solved with P1 elements on a structured lattice of the
unit cell whose opposite faces are identified (wrapped node numbering on an
unwrapped geometry).  The wrapped stiffness has the constants as nullspace;
one node is pinned for the factorization and the result is shifted to zero
cell mean afterwards.

The one-dimensional objects (corrector derivative, psi, the compactly
supported chi, and the homogenized coefficients) also exist in closed
quadrature form; those power the two-scale expansion and cross-check the P1
periodic solver.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import X_MEAN
from .fem_core import (
    IndefiniteSystemError,
    element_gradients,
    element_quadrature_mean,
    solve_dirichlet,
    SparseSystem,
)
from .mesh import build_coarse_mesh

__all__ = [
    "PeriodicCell",
    "CellCorrectors",
    "CellData1D",
    "LambdaStat",
    "solve_corrector",
    "homogenized_tensor",
    "first_order_tensor",
    "solve_psi",
    "build_cell_correctors",
    "assemble_tensor_p1",
    "solve_homogenized",
    "solve_u1bar",
    "HomogenizedField1D",
    "two_scale_expansion_1d",
    "expansion_error_1d",
    "lambda_stat",
    "lambda_as_bound",
    "tensor_report",
]


class PeriodicCell:
    """P1 discretization of the periodic unit cell at lattice resolution 1/n.

    Assembles the wrapped stiffness for a scalar periodic coefficient and
    factorizes the pinned system once; corrector and psi solves reuse it.
    """

    def __init__(self, a_per, d, n=200, nsub=1):
        self.d, self.n = d, n
        domain = "interval" if d == 1 else "square"
        self.mesh = build_coarse_mesh(domain, 1.0 / n)
        self.a_elem = element_quadrature_mean(self.mesh, a_per, nsub)
        if np.min(self.a_elem) <= 0:
            raise ValueError("cell coefficient must be positive")
        self.grads, self.meas = element_gradients(self.mesh)
        ij = self.mesh.node_ij
        if d == 1:
            wrap = ij[:, 0] % n
        else:
            wrap = (ij[:, 1] % n) * n + (ij[:, 0] % n)
        self.wrap = wrap
        self.n_dof = n**d
        self.conn = wrap[self.mesh.elements]
        G = np.einsum("eid,ejd,e->eij", self.grads, self.grads, self.meas)
        data = (self.a_elem[:, None, None] * G).ravel()
        nd = d + 1
        rows = np.repeat(self.conn, nd, axis=1).ravel()
        cols = np.tile(self.conn, (1, nd)).ravel()
        self.K = sp.coo_matrix(
            (data, (rows, cols)), shape=(self.n_dof, self.n_dof)
        ).tocsr()
        self._lu = None

    def _factor(self):
        if self._lu is None:
            Krr = self.K[1:, :][:, 1:].tocsc()
            self._lu = spla.splu(
                Krr,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        return self._lu

    def solve_periodic(self, F, rtol=1e-9):
        """Solve K x = F on the wrapped cell (F compatible), zero-mean result."""
        lu = self._factor()
        x = np.zeros(self.n_dof)
        x[1:] = lu.solve(F[1:])
        res = np.linalg.norm(self.K @ x - F)
        scale = np.linalg.norm(F)
        # below this, F is assembly roundoff of an exactly balanced load and
        # the relative residual is meaningless
        floor = np.finfo(float).eps * np.sqrt(self.n_dof) * float(np.max(self.a_elem))
        if scale > floor and res > rtol * scale:
            raise RuntimeError(
                f"periodic cell solve residual {res / scale:.2e} exceeds {rtol:.0e}"
            )
        # uniform lattice: lumped node masses are equal, the plain mean is the
        # cell average
        return x - x.mean()

    def accumulate(self, local):
        """Sum per-element local vectors (ne, d+1) into wrapped dofs."""
        F = np.zeros(self.n_dof)
        np.add.at(F, self.conn, local)
        return F

    def gradient(self, nodal):
        """Element-wise gradient (ne, d) of a wrapped nodal field."""
        return np.einsum("ek,ekd->ed", nodal[self.conn], self.grads)


def solve_corrector(cell, p):
    """Periodic corrector for direction p: -div[a (p + grad w)] = 0, zero mean."""
    p = np.asarray(p, dtype=float)
    local = -np.einsum("e,e,ekd,d->ek", cell.a_elem, cell.meas, cell.grads, p)
    return cell.solve_periodic(cell.accumulate(local))


def homogenized_tensor(cell, correctors):
    """A*: cell quadrature of (e_i + grad w_i) . a (e_j + grad w_j)."""
    d = cell.d
    flux = np.empty((d, cell.mesh.n_elements, d))
    for i in range(d):
        flux[i] = cell.gradient(correctors[i])
        flux[i][:, i] += 1.0
    A = np.einsum("ied,e,e,jed->ij", flux, cell.a_elem, cell.meas, flux)
    return 0.5 * (A + A.T)


def first_order_tensor(cell, correctors, b_per, x_mean=X_MEAN, nsub=1):
    """(B-bar, A1*): the perturbation tensor seen through the A-correctors.

    B-bar integrates b against the same corrected directions as A*; the
    first-order homogenized correction is its mean-weighted copy E(X0) B-bar.
    """
    b_elem = element_quadrature_mean(cell.mesh, b_per, nsub)
    d = cell.d
    flux = np.empty((d, cell.mesh.n_elements, d))
    for i in range(d):
        flux[i] = cell.gradient(correctors[i])
        flux[i][:, i] += 1.0
    B = np.einsum("ied,e,e,jed->ij", flux, b_elem, cell.meas, flux)
    B = 0.5 * (B + B.T)
    return B, x_mean * B


def solve_psi(cell, corrector_p, b_per, p, nsub=1, rtol=1e-9):
    """Second corrector: -div[a grad psi] = div[b (p + grad w_p)], zero mean."""
    p = np.asarray(p, dtype=float)
    b_elem = element_quadrature_mean(cell.mesh, b_per, nsub)
    flux = cell.gradient(corrector_p)
    flux[:, :] += p[None, :]
    local = -np.einsum("e,e,ed,ekd->ek", b_elem, cell.meas, flux, cell.grads)
    return cell.solve_periodic(cell.accumulate(local), rtol=rtol)


@dataclass
class CellCorrectors:
    """All periodic-cell output for one coefficient family.

    w0/psi are wrapped nodal fields per direction; tensors are d x d.
    """

    cell: PeriodicCell
    w0: list
    psi: list
    A_star: np.ndarray
    B_bar: np.ndarray
    A1_star: np.ndarray
    x_mean: float = X_MEAN

    def __post_init__(self):
        for w in self.w0 + [p for p in self.psi if p is not None]:
            mean = abs(np.mean(w))
            if mean > 1e-10:
                raise ValueError(f"corrector mean {mean:.2e} not normalized away")
        if not np.allclose(self.A_star, self.A_star.T, atol=1e-12):
            raise ValueError("A* not symmetric")
        if np.any(np.linalg.eigvalsh(self.A_star) <= 0):
            raise ValueError("A* not positive definite")
        if not np.allclose(self.A1_star, self.x_mean * self.B_bar, atol=1e-14):
            raise ValueError("A1* must equal E(X0) B-bar")


def build_cell_correctors(a_per, b_per, d, n=200, x_mean=X_MEAN, nsub=1):
    """Solve every cell problem for one family and bundle the results."""
    cell = PeriodicCell(a_per, d, n=n, nsub=nsub)
    eye = np.eye(d)
    w0 = [solve_corrector(cell, eye[i]) for i in range(d)]
    A_star = homogenized_tensor(cell, w0)
    if b_per is None:
        B_bar = np.zeros((d, d))
        psi = [np.zeros(cell.n_dof) for _ in range(d)]
    else:
        B_bar, _ = first_order_tensor(cell, w0, b_per, x_mean=x_mean, nsub=nsub)
        psi = [solve_psi(cell, w0[i], b_per, eye[i], nsub=nsub) for i in range(d)]
    return CellCorrectors(
        cell=cell, w0=w0, psi=psi, A_star=A_star, B_bar=B_bar,
        A1_star=x_mean * B_bar, x_mean=x_mean,
    )


def assemble_tensor_p1(mesh, tensor, rhs=None, rhs_flux=None, nsub=1):
    """P1 system for a constant matrix coefficient; optional weak flux load.

    rhs_flux: per-element flux vectors G (ne, d) contributing -int G . grad v
    to the load (divergence-form right-hand sides).
    """
    tensor = np.atleast_2d(np.asarray(tensor, dtype=float))
    try:
        np.linalg.cholesky(tensor)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteSystemError(f"tensor not SPD: {tensor}") from exc
    grads, meas = element_gradients(mesh)
    G = np.einsum("eid,dc,ejc,e->eij", grads, tensor, grads, meas)
    nd = mesh.d + 1
    conn = mesh.elements
    rows = np.repeat(conn, nd, axis=1).ravel()
    cols = np.tile(conn, (1, nd)).ravel()
    n = mesh.n_nodes
    K = sp.coo_matrix((G.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    F = np.zeros(n)
    if rhs is not None:
        from .fem_core import quadrature_rule

        lam, w = quadrature_rule(mesh.d, nsub)
        verts = mesh.nodes[conn]
        pts = np.einsum("qk,ekd->eqd", lam, verts)
        if np.isscalar(rhs):
            fvals = np.full(pts.shape[:2], float(rhs))
        else:
            x = pts if mesh.d == 2 else pts[..., 0]
            fvals = np.asarray(rhs(x), dtype=float).reshape(pts.shape[:2])
        local = np.einsum("eq,q,qk,e->ek", fvals, w, lam, meas)
        np.add.at(F, conn, local)
    if rhs_flux is not None:
        local = -np.einsum("ed,ekd,e->ek", np.asarray(rhs_flux), grads, meas)
        np.add.at(F, conn, local)
    return SparseSystem(mesh=mesh, K=K, F=F, boundary=mesh.boundary.copy(),
                        elem_coeff=np.full(mesh.n_elements, np.nan))


def solve_homogenized(tensor, rhs, mesh):
    """Constant-tensor Dirichlet solve -div(A* grad u) = f, u = 0 on the boundary."""
    system = assemble_tensor_p1(mesh, tensor, rhs=rhs)
    out = solve_dirichlet(system)
    out.label = "homogenized"
    return out


def solve_u1bar(tensor, B_bar, u0, mesh=None):
    """First-order homogenized correction: -div(A* grad u1) = div(B-bar grad u0)."""
    mesh = u0.mesh if mesh is None else mesh
    grads, _ = element_gradients(mesh)
    du0 = np.einsum("ek,ekd->ed", u0.values[mesh.elements], grads)
    flux = du0 @ np.atleast_2d(B_bar).T
    system = assemble_tensor_p1(mesh, tensor, rhs_flux=flux)
    out = solve_dirichlet(system)
    out.label = "u1bar"
    return out


class CellData1D:
    """Closed-quadrature cell objects of the 1D theory on a dense grid.

    Derivative identities used (flux constancy on the cell):
      (w0)'(y) = a*/a(y) - 1,            a* = harmonic mean of a
      psi'(y)  = (c1 - a* b(y)/a(y)) / a(y),   c1 = B-bar
      chi'(y)  = -1_(0,1)(y) a* b(y)/a(y)^2,   chi(y<=0)=0, chi(y>=1)=-B-bar/a*
    B-bar = a*^2 int b/a^2; all integrals by composite midpoint quadrature.
    """

    def __init__(self, a_per, b_per=None, n=100_000):
        self.n = n
        edges = np.arange(n + 1) / n
        mids = (edges[:-1] + edges[1:]) / 2
        w = 1.0 / n
        a = np.asarray(a_per(mids), dtype=float).reshape(-1)
        if np.min(a) <= 0:
            raise ValueError("cell coefficient must be positive")
        inv = 1.0 / a
        self.edges, self.mids = edges, mids
        self.a_star = 1.0 / (w * inv.sum())
        self.dw0_mids = self.a_star * inv - 1.0
        w0_edges = np.concatenate([[0.0], np.cumsum(w * self.dw0_mids)])
        self.w0_edges = w0_edges - np.mean((w0_edges[:-1] + w0_edges[1:]) / 2)
        if b_per is None:
            b = np.zeros_like(a)
        else:
            b = np.asarray(b_per(mids), dtype=float).reshape(-1)
        self.b_mids = b
        self.B_bar = self.a_star**2 * w * np.sum(b * inv * inv)
        c1 = self.B_bar
        self.dpsi_mids = (c1 - self.a_star * b * inv) * inv
        psi_edges = np.concatenate([[0.0], np.cumsum(w * self.dpsi_mids)])
        self.psi_edges = psi_edges - np.mean((psi_edges[:-1] + psi_edges[1:]) / 2)
        self.dchi_mids = -self.a_star * b * inv * inv
        self.chi_edges = np.concatenate([[0.0], np.cumsum(w * self.dchi_mids)])
        self.chi_end = self.chi_edges[-1]  # equals -B_bar/a_star

    def _periodic_eval(self, nodal_edges, y):
        y = np.asarray(y, dtype=float)
        return np.interp(np.mod(y, 1.0), self.edges, nodal_edges)

    def w0(self, y):
        return self._periodic_eval(self.w0_edges, y)

    def dw0(self, y):
        y = np.mod(np.asarray(y, dtype=float), 1.0)
        i = np.clip((y * self.n).astype(np.int64), 0, self.n - 1)
        return self.dw0_mids[i]

    def psi(self, y):
        return self._periodic_eval(self.psi_edges, y)

    def dpsi(self, y):
        y = np.mod(np.asarray(y, dtype=float), 1.0)
        i = np.clip((y * self.n).astype(np.int64), 0, self.n - 1)
        return self.dpsi_mids[i]

    def chi(self, y):
        """Compactly varying chi: 0 left of the cell, constant right of it."""
        y = np.asarray(y, dtype=float)
        return np.interp(np.clip(y, 0.0, 1.0), self.edges, self.chi_edges)

    def dchi(self, y):
        y = np.asarray(y, dtype=float)
        inside = (y > 0) & (y < 1)
        i = np.clip((y * self.n).astype(np.int64), 0, self.n - 1)
        return np.where(inside, self.dchi_mids[i], 0.0)


class HomogenizedField1D:
    """Closed-form homogenized fields for f = 1 on (0,1).

    u0 = x(1-x)/(2 a*); u1bar = -(B-bar/a*) u0 (the flux constant of the
    u1bar equation vanishes because u0 has zero boundary values).
    """

    def __init__(self, a_star, B_bar=0.0):
        self.a_star = float(a_star)
        self.B_bar = float(B_bar)

    def u0(self, x):
        return x * (1 - x) / (2 * self.a_star)

    def du0(self, x):
        return (1 - 2 * x) / (2 * self.a_star)

    def d2u0(self, x):
        return np.full_like(np.asarray(x, dtype=float), -1.0 / self.a_star)

    def u1(self, x):
        return -(self.B_bar / self.a_star) * self.u0(x)

    def du1(self, x):
        return -(self.B_bar / self.a_star) * self.du0(x)

    def d2u1(self, x):
        return -(self.B_bar / self.a_star) * self.d2u0(x)


class TwoScaleExpansion1D:
    """The corrected expansion v and its derivative for one realization."""

    def __init__(self, spec, realization, homog, cell_data, x_mean=X_MEAN):
        if spec.d != 1:
            raise ValueError("the two-scale expansion is implemented in 1D only")
        self.spec = spec
        self.realization = realization
        self.homog = homog
        self.cd = cell_data
        self.x_mean = x_mean

    def _chi_sum(self, y, cell_idx, deriv=False):
        """Sum_k (X_k - E) chi(y - k) and its derivative contribution.

        chi vanishes left of its cell and is constant right of it, so the sum
        telescopes into a prefix sum over cells below plus the active cell.
        """
        X = self.realization.X if self.realization is not None else None
        if X is None:
            return np.zeros_like(y)
        centered = X - self.x_mean
        prefix = np.concatenate([[0.0], np.cumsum(centered)])
        k = cell_idx
        local = y - k
        if deriv:
            return centered[k] * self.cd.dchi(local)
        full_below = prefix[k] * self.cd.chi_end
        return full_below + centered[k] * self.cd.chi(local)

    def v(self, x):
        x = np.asarray(x, dtype=float)
        y = x / self.spec.eps
        k = self.spec.cell_of(x)
        h, cd, eta, E = self.homog, self.cd, self.spec.eta, self.x_mean
        du_eff = h.du0(x) + eta * E * h.du1(x)
        out = h.u0(x) + eta * E * h.u1(x)
        out = out + self.spec.eps * (
            cd.w0(y) * du_eff
            + eta * E * cd.psi(y) * h.du0(x)
            + eta * self._chi_sum(y, k) * h.du0(x)
        )
        return out

    def dv(self, x):
        x = np.asarray(x, dtype=float)
        y = x / self.spec.eps
        k = self.spec.cell_of(x)
        h, cd, eta, E = self.homog, self.cd, self.spec.eta, self.x_mean
        du_eff = h.du0(x) + eta * E * h.du1(x)
        d2_eff = h.d2u0(x) + eta * E * h.d2u1(x)
        fast = (
            cd.dw0(y) * du_eff
            + eta * E * cd.dpsi(y) * h.du0(x)
            + eta * self._chi_sum(y, k, deriv=True) * h.du0(x)
        )
        slow = (
            cd.w0(y) * d2_eff
            + eta * E * cd.psi(y) * h.d2u0(x)
            + eta * self._chi_sum(y, k) * h.d2u0(x)
        )
        return du_eff + fast + self.spec.eps * slow


def two_scale_expansion_1d(spec, realization, homog, cell_data, x_mean=X_MEAN):
    return TwoScaleExpansion1D(spec, realization, homog, cell_data, x_mean=x_mean)


def expansion_error_1d(spec, realization, cell_data=None, rhs=1.0):
    """Relative H1 distance between the exact solution and the expansion."""
    from .analytic_1d import exact_solution, oned_problem_from_spec

    if cell_data is None:
        cell_data = CellData1D(spec.a0_periodic, spec.b_periodic)
    homog = HomogenizedField1D(cell_data.a_star, cell_data.B_bar)
    expansion = two_scale_expansion_1d(spec, realization, homog, cell_data)
    problem = oned_problem_from_spec(spec, realization, rhs=rhs)
    sol = exact_solution(problem)
    g = problem.grid
    du_gap = sol.du_mids - expansion.dv(g.mids)
    u_gap = sol.u(g.mids) - expansion.v(g.mids)
    num = np.sqrt(g.integrate(du_gap**2 + u_gap**2))
    den = np.sqrt(g.integrate(sol.du_mids**2 + sol.u(g.mids) ** 2))
    return num / den


@dataclass
class LambdaStat:
    """Resonance statistic of one realization on one coarse mesh.

    S[K, m, p] = B-bar_mp x (centered cell-mean over the cells inside K);
    lam is the double max of |S|.
    """

    S: np.ndarray
    lam: float
    n_cells_used: np.ndarray

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda is a max of absolute values")


def lambda_stat(B_bar, realization, cells, x_mean=X_MEAN):
    """Per-element centered cell averages against B-bar, and their max.

    The cell integrals of the corrected periodic integrand factor out of the
    sum (every full cell contributes the same tensor B-bar), leaving the
    normalized centered sum of the cell draws.
    """
    B_bar = np.atleast_2d(np.asarray(B_bar, dtype=float))
    empty = [K for K, ids in enumerate(cells.cells_in_element) if not ids]
    if empty:
        raise ValueError(f"elements without a fully contained cell: {empty}")
    means = np.empty(len(cells.cells_in_element))
    counts = np.empty(len(means), dtype=np.int64)
    for K, ids in enumerate(cells.cells_in_element):
        ranks = np.array([cells.rank(k) for k in ids])
        means[K] = realization.X[ranks].mean() - x_mean
        counts[K] = len(ids)
    S = means[:, None, None] * B_bar[None, :, :]
    return LambdaStat(S=S, lam=float(np.max(np.abs(S))), n_cells_used=counts)


def lambda_as_bound(correctors, b_per, n_grid=4096):
    """Deterministic bound 2 ||b||_inf max_m ||e_m + grad w0_m|| max_p ||...||.

    Every realization's lambda sits below this: the centered cell means live
    in [-1/2, 1/2] and each |B-bar_mp| is Cauchy-Schwarz-bounded by
    ||b||_inf ||e_m + grad w0_m|| ||e_p + grad w0_p|| over the cell.
    """
    cell = correctors.cell
    d = cell.d
    if d == 1:
        pts = (np.arange(n_grid) + 0.5) / n_grid
    else:
        m = min(n_grid, 512)
        t = (np.arange(m) + 0.5) / m
        gx, gy = np.meshgrid(t, t, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
    b_inf = float(np.max(np.abs(np.asarray(b_per(pts), dtype=float))))
    norms = []
    for i in range(d):
        g = cell.gradient(correctors.w0[i])
        g[:, i] += 1.0
        norms.append(np.sqrt(np.sum(cell.meas[:, None] * g * g)))
    return 2.0 * b_inf * max(norms) ** 2


def tensor_report(tensors, meta):
    """Plain-text dump of named tensors with a provenance header."""
    lines = [f"# {k} = {v}" for k, v in meta.items()]
    for name, T in tensors.items():
        T = np.atleast_2d(np.asarray(T, dtype=float))
        lines.append(f"{name} ({T.shape[0]}x{T.shape[1]}):")
        for row in T:
            lines.append("  " + "  ".join(f"{v: .10e}" for v in row))
    return "\n".join(lines) + "\n"
