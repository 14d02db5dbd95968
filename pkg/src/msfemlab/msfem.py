"""Multiscale basis construction and coarse solves.

The basis is built once from the unperturbed coefficient a0: per coarse
element, local problems on an oversampled patch (homothety ratio rho about
the element centroid, clipped to the domain) with affine boundary data
attached to the unclipped homothety vertices.  The element basis is the
nodal recombination of those patch harmonics.

The coarse stiffness of a perturbed coefficient a0 + eta X_k b is affine in
the cell draws, so it splits into a deterministic piece K0 and one piece K1
per coefficient cell intersecting the element; assembling a realization is
then a weighted sum with no new quadrature.  The per-realization variant
("direct" multiscale solve) rebuilds the patch harmonics with the perturbed
coefficient itself and quadratures its own stiffness.

A second, quadrature-exact engine covers d=1, where the basis functions are
coefficient-harmonic in closed form and every integral reduces to dense
composite quadrature; the general lattice engine stays available in 1D for
cross-checks.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem_core import (
    AssemblyError,
    IndefiniteSystemError,
    element_gradients,
    element_quadrature_mean,
    quadrature_rule,
)
from .mesh import (
    build_patch,
    build_patch_fine_mesh,
    element_submesh,
    locate_points,
)

__all__ = [
    "PatchHarmonics",
    "ElementBasis",
    "MsBasis",
    "CoarseSolution",
    "build_basis",
    "precompute_pieces",
    "assemble_realization",
    "solve_coarse",
    "ReconstructionPlan",
    "build_reconstruction_plan",
    "reconstruct",
    "evaluate_element_field",
    "solve_direct_msfem",
    "save_basis",
    "load_basis",
    "basis_cache_params",
    "OneDMsfemEngine",
]


def _map_indexed(fn, n_items, threads):
    """Apply fn(i) for i in range(n_items), optionally on a thread pool.

    Results are collected by index, so the output is independent of the
    thread count or completion order.
    """
    if threads is None or threads <= 1:
        return [fn(i) for i in range(n_items)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_items)))


def _affine_nodal_data(vertices, pts):
    """Values at pts of the affine functions L_j with L_j(vertex_i) = delta_ij."""
    d = vertices.shape[1]
    M = np.column_stack([np.ones(d + 1), vertices])
    C = np.linalg.solve(M, np.eye(d + 1))
    return np.column_stack([np.ones(len(pts)), pts]) @ C


def _node_lookup(mesh):
    return {tuple(ij): i for i, ij in enumerate(mesh.node_ij)}


def _spd_factor(K_csc):
    lu = spla.splu(
        K_csc,
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options=dict(SymmetricMode=True),
    )
    # a patch this coarse may have no interior nodes at all
    if K_csc.shape[0] and np.min(lu.U.diagonal()) <= 0:
        raise IndefiniteSystemError("local patch matrix is not positive definite")
    return lu


@dataclass
class PatchHarmonics:
    """Oscillatory harmonic functions of one oversampling patch.

    values[:, j] solves -div[a grad chi_j] = 0 on the patch with chi_j equal
    on the patch boundary to the affine function that is delta_ij at the
    (unclipped) homothety vertices.
    """

    element_id: int
    patch: object
    mesh: object
    values: np.ndarray
    boundary_data: np.ndarray


class PatchWorkspace:
    """Per-element geometry and quadrature data reused across realizations."""

    def __init__(self, spec, coarse_mesh, element_id, h_basis, rho):
        self.element_id = element_id
        self.patch = build_patch(coarse_mesh, element_id, rho)
        pmesh = build_patch_fine_mesh(self.patch, h_basis)
        self.mesh = pmesh
        self.grads, self.meas = element_gradients(pmesh)
        self.G = np.einsum("eid,ejd,e->eij", self.grads, self.grads, self.meas)
        self.a0_mean = element_quadrature_mean(pmesh, spec.a0, 1)
        self.b_mean = element_quadrature_mean(pmesh, spec.b, 1)
        centroids = pmesh.nodes[pmesh.elements].mean(axis=1)
        self.cell_rank = spec.cell_of(centroids)
        self.interior = ~pmesh.boundary
        self.bnd_affine = _affine_nodal_data(
            self.patch.vertices, pmesh.nodes[pmesh.boundary]
        )
        nd = pmesh.d + 1
        conn = pmesh.elements
        self._rows = np.repeat(conn, nd, axis=1).ravel()
        self._cols = np.tile(conn, (1, nd)).ravel()
        lookup = _node_lookup(pmesh)
        n = pmesh.lattice_n
        verts = coarse_mesh.nodes[coarse_mesh.elements[element_id]]
        vert_ij = np.rint(verts * n).astype(np.int64)
        try:
            self.vert_ids = np.array([lookup[tuple(ij)] for ij in vert_ij])
        except KeyError as exc:
            raise AssemblyError(
                f"element {element_id}: coarse vertex missing from patch lattice"
            ) from exc
        sub = element_submesh(coarse_mesh, element_id, h_basis)
        self.submesh = sub
        self.sub_ids = np.array([lookup[tuple(ij)] for ij in sub.node_ij])
        self.sub_grads, self.sub_meas = element_gradients(sub)
        self.sub_a0 = element_quadrature_mean(sub, spec.a0, 1)
        self.sub_b = element_quadrature_mean(sub, spec.b, 1)
        sub_centroids = sub.nodes[sub.elements].mean(axis=1)
        self.sub_cell_rank = spec.cell_of(sub_centroids)

    def stiffness(self, coeff_mean):
        data = (coeff_mean[:, None, None] * self.G).ravel()
        n = self.mesh.n_nodes
        return sp.coo_matrix((data, (self._rows, self._cols)), shape=(n, n)).tocsr()

    def harmonics(self, coeff_mean):
        """Solve the d+1 patch problems for the given per-element coefficient."""
        K = self.stiffness(coeff_mean)
        interior, mesh = self.interior, self.mesh
        bnd = ~interior
        Kii = K[interior][:, interior].tocsc()
        Kib = K[interior][:, bnd]
        lu = _spd_factor(Kii)
        values = np.empty((mesh.n_nodes, mesh.d + 1))
        values[bnd] = self.bnd_affine
        rhs = -Kib @ self.bnd_affine
        for j in range(mesh.d + 1):
            values[interior, j] = lu.solve(rhs[:, j])
        return values

    def base_state(self):
        """Cached factorization and harmonics of the unperturbed coefficient.

        The factorization doubles as a preconditioner for perturbed-coefficient
        solves: a0 + eta X b is a bounded multiple of a0, so the preconditioned
        operator has condition number at most max(1 + eta X b / a0).
        """
        if not hasattr(self, "_base"):
            K = self.stiffness(self.a0_mean)
            Kii = K[self.interior][:, self.interior].tocsc()
            lu = _spd_factor(Kii)
            values = np.empty((self.mesh.n_nodes, self.mesh.d + 1))
            values[~self.interior] = self.bnd_affine
            rhs = -(K[self.interior][:, ~self.interior] @ self.bnd_affine)
            for j in range(self.mesh.d + 1):
                values[self.interior, j] = lu.solve(rhs[:, j])
            self._base = (lu, values)
        return self._base

    def harmonics_cg(self, coeff_mean, rtol=1e-10, maxiter=80):
        """Patch harmonics for a perturbed coefficient, reusing the base factor.

        Solves d of the d+1 Dirichlet problems by preconditioned conjugate
        gradients started from the unperturbed harmonics; the last one follows
        from the partition identity sum_j chi_j = 1 (the boundary data are the
        affine barycentric weights, and harmonic extension is linear in the
        data).  Falls back to a fresh factorization if the iteration stalls.
        """
        if np.min(coeff_mean) <= 0.0:
            raise IndefiniteSystemError(
                f"element {self.element_id}: patch coefficient is not positive; "
                "not proceeding"
            )
        lu0, base_values = self.base_state()
        K = self.stiffness(coeff_mean)
        interior = self.interior
        Kii = K[interior][:, interior].tocsr()
        rhs = -(K[interior][:, ~interior] @ self.bnd_affine)
        nd = self.mesh.d + 1
        values = np.empty((self.mesh.n_nodes, nd))
        values[~interior] = self.bnd_affine
        if Kii.shape[0] == 0:
            return values
        prec = spla.LinearOperator(Kii.shape, matvec=lu0.solve)
        lu_fresh = None
        for j in range(nd - 1):
            x, info = spla.cg(
                Kii,
                rhs[:, j],
                rtol=rtol,
                atol=0.0,
                maxiter=maxiter,
                M=prec,
                x0=base_values[interior, j],
            )
            if info != 0:
                if lu_fresh is None:
                    lu_fresh = _spd_factor(Kii.tocsc())
                x = lu_fresh.solve(rhs[:, j])
            values[interior, j] = x
        values[interior, nd - 1] = 1.0 - values[interior, :-1].sum(axis=1)
        return values

    def recombine(self, values):
        """Nodal coefficients alpha and the element-restricted basis phi."""
        C = values[self.vert_ids]  # C[m, j] = chi_j(vertex_m)
        if abs(np.linalg.det(C)) < 1e-10:
            raise AssemblyError(
                f"element {self.element_id}: patch harmonics are degenerate "
                "at the element vertices"
            )
        alpha = np.linalg.solve(C, np.eye(self.mesh.d + 1)).T
        phi = values[self.sub_ids] @ alpha.T
        return alpha, phi

    def local_pieces(self, phi, split_cells=True):
        """K0-style local stiffness of a0 and per-cell pieces of b for phi."""
        corner = phi[self.submesh.elements]
        gphi = np.einsum("eki,ekd->eid", corner, self.sub_grads)
        K0 = np.einsum("eid,e,e,ejd->ij", gphi, self.sub_a0, self.sub_meas, gphi)
        if not split_cells:
            return K0, None, None
        ranks = np.unique(self.sub_cell_rank)
        K1 = np.empty((len(ranks), phi.shape[1], phi.shape[1]))
        for c, r in enumerate(ranks):
            m = self.sub_cell_rank == r
            K1[c] = np.einsum(
                "eid,e,e,ejd->ij", gphi[m], self.sub_b[m], self.sub_meas[m], gphi[m]
            )
        return K0, ranks, K1

    def local_stiffness(self, phi, coeff_mean):
        corner = phi[self.submesh.elements]
        gphi = np.einsum("eki,ekd->eid", corner, self.sub_grads)
        return np.einsum("eid,e,e,ejd->ij", gphi, coeff_mean, self.sub_meas, gphi)

    def local_load(self, phi, rhs):
        """Element load for the basis columns: int f phi_i by submesh quadrature."""
        sub = self.submesh
        corner = phi[sub.elements]
        if np.isscalar(rhs):
            mean_phi = corner.mean(axis=1)
            return np.einsum("e,ei->i", self.sub_meas * float(rhs), mean_phi)
        lam, w = quadrature_rule(sub.d, 1)
        verts = sub.nodes[sub.elements]
        pts = np.einsum("qk,ekd->eqd", lam, verts)
        x = pts if sub.d == 2 else pts[..., 0]
        fvals = np.asarray(rhs(x), dtype=float).reshape(pts.shape[:2])
        phi_q = np.einsum("qk,eki->eqi", lam, corner)
        return np.einsum("eq,eqi,q,e->i", fvals, phi_q, w, self.sub_meas)


@dataclass
class ElementBasis:
    """Element-restricted multiscale basis and its stiffness pieces."""

    element_id: int
    submesh: object
    phi: np.ndarray               # (n_submesh_nodes, d+1), column i = phi_i
    K0: np.ndarray = None         # (d+1, d+1) a0-stiffness
    K1_ranks: np.ndarray = None   # coefficient cells meeting the element
    K1: np.ndarray = None         # (n_cells, d+1, d+1) b-stiffness per cell
    load: np.ndarray = None       # (d+1,) for the stored right-hand side


@dataclass
class MsBasis:
    """Multiscale basis of one (spec, coarse mesh, h_basis, rho) combination."""

    spec: object
    coarse_mesh: object
    h_basis: float
    rho: float
    alpha: np.ndarray             # (ne, d+1, d+1) recombination coefficients
    elements: list
    rhs: object = 1.0
    harmonics: list = None
    workspaces: list = field(default=None, repr=False)


@dataclass
class CoarseSolution:
    """Coefficients of a multiscale solve in the basis, tagged by method."""

    mesh: object
    coefficients: np.ndarray
    tag: str

    def __post_init__(self):
        if np.any(self.coefficients[self.mesh.boundary] != 0.0):
            raise ValueError("coarse boundary coefficients must vanish")


def build_basis(spec, coarse_mesh, h_basis, rho=None, keep_patches=False,
                keep_harmonics=False, threads=1):
    """Patch harmonics and nodal recombination for every coarse element."""
    if rho is None:
        rho = 1.0 if spec.d == 1 else 3.0
    if spec.d == 1 and rho != 1.0:
        raise ValueError("1D oversampling uses rho=1 (patch = element)")

    def one(e):
        ws = PatchWorkspace(spec, coarse_mesh, e, h_basis, rho)
        values = ws.harmonics(ws.a0_mean)
        alpha, phi = ws.recombine(values)
        return ws, values, alpha, phi

    results = _map_indexed(one, coarse_mesh.n_elements, threads)
    alpha = np.stack([r[2] for r in results])
    elements = [
        ElementBasis(element_id=e, submesh=r[0].submesh, phi=r[3])
        for e, r in enumerate(results)
    ]
    harmonics = None
    if keep_harmonics:
        harmonics = [
            PatchHarmonics(
                element_id=e, patch=r[0].patch, mesh=r[0].mesh,
                values=r[1], boundary_data=r[0].bnd_affine,
            )
            for e, r in enumerate(results)
        ]
    workspaces = [r[0] for r in results] if keep_patches else None
    return MsBasis(
        spec=spec, coarse_mesh=coarse_mesh, h_basis=h_basis, rho=rho,
        alpha=alpha, elements=elements, harmonics=harmonics,
        workspaces=workspaces,
    )


def precompute_pieces(basis, rhs=1.0, threads=1):
    """Fill K0, per-cell K1 pieces, and loads for every element of the basis.

    Uses the workspaces when the basis kept them, otherwise rebuilds the
    element quadrature data.
    """
    spec = basis.spec

    def ws_of(e):
        if basis.workspaces is not None:
            return basis.workspaces[e]
        return PatchWorkspace(spec, basis.coarse_mesh, e, basis.h_basis, basis.rho)

    def one(e):
        ws = ws_of(e)
        eb = basis.elements[e]
        K0, ranks, K1 = ws.local_pieces(eb.phi)
        load = ws.local_load(eb.phi, rhs)
        return K0, ranks, K1, load

    results = _map_indexed(one, basis.coarse_mesh.n_elements, threads)
    for e, (K0, ranks, K1, load) in enumerate(results):
        eb = basis.elements[e]
        eb.K0, eb.K1_ranks, eb.K1, eb.load = K0, ranks, K1, load
    basis.rhs = rhs
    return basis


def assemble_realization(basis, realization):
    """Coarse system for one realization from the affine pieces.

    K = K0 + eta * sum_cells X_cell K1_cell, element by element; no new
    quadrature happens here.
    """
    spec = basis.spec
    mesh = basis.coarse_mesh
    nd = mesh.d + 1
    n = mesh.n_nodes
    if basis.elements[0].K0 is None:
        raise AssemblyError("stiffness pieces not precomputed for this basis")
    X = None if realization is None else realization.X
    locals_ = np.empty((mesh.n_elements, nd, nd))
    F = np.zeros(n)
    for e, eb in enumerate(basis.elements):
        L = eb.K0.copy()
        if spec.eta != 0.0 and X is not None and len(eb.K1_ranks):
            L += spec.eta * np.einsum("c,cij->ij", X[eb.K1_ranks], eb.K1)
        locals_[e] = L
        np.add.at(F, mesh.elements[e], eb.load)
    conn = mesh.elements
    rows = np.repeat(conn, nd, axis=1).ravel()
    cols = np.tile(conn, (1, nd)).ravel()
    K = sp.coo_matrix((locals_.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return K, F


def solve_coarse(K, F, mesh, tag):
    """Dirichlet solve of the coarse system; boundary coefficients are zero."""
    interior = ~mesh.boundary
    Kii = K[interior][:, interior].toarray()
    try:
        c, low = scipy.linalg.cho_factor(Kii, lower=True)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteSystemError(
            f"coarse stiffness for {tag!r} is not positive definite; not proceeding"
        ) from exc
    x = scipy.linalg.cho_solve((c, low), F[interior])
    out = np.zeros(mesh.n_nodes)
    out[interior] = x
    return CoarseSolution(mesh=mesh, coefficients=out, tag=tag)


@dataclass
class ReconstructionPlan:
    """Precomputed evaluation of basis fields at fine-mesh element corners.

    Each fine element is owned by the coarse element containing its centroid;
    its corner values are interpolated from that element's submesh, which
    keeps the two-sided values of a nonconforming basis separate.
    """

    fine_mesh: object
    owner: np.ndarray
    tri_ids: list      # per coarse element, owned fine elements
    conn: list         # per coarse element, (3m, d+1) submesh node ids
    weights: list      # per coarse element, (3m, d+1) interpolation weights


def build_reconstruction_plan(basis, fine_mesh):
    coarse = basis.coarse_mesh
    centroids = fine_mesh.nodes[fine_mesh.elements].mean(axis=1)
    owner, _ = locate_points(coarse, centroids)
    nd = fine_mesh.d + 1
    tri_ids, conn, weights = [], [], []
    for e, eb in enumerate(basis.elements):
        ids = np.nonzero(owner == e)[0]
        tri_ids.append(ids)
        pts = fine_mesh.nodes[fine_mesh.elements[ids]].reshape(-1, fine_mesh.d)
        if len(pts) == 0:
            conn.append(np.zeros((0, nd), dtype=np.int64))
            weights.append(np.zeros((0, nd)))
            continue
        eids, bary = locate_points(eb.submesh, pts)
        conn.append(eb.submesh.elements[eids])
        weights.append(bary)
    return ReconstructionPlan(
        fine_mesh=fine_mesh, owner=owner, tri_ids=tri_ids, conn=conn, weights=weights
    )


def reconstruct(solution, basis, plan, phi_override=None):
    """Corner-valued fine field of a coarse solution: (ne_fine, d+1).

    phi_override supplies per-element basis values (e.g. from a direct
    per-realization solve); otherwise the deterministic basis is used.
    """
    mesh = basis.coarse_mesh
    fine = plan.fine_mesh
    out = np.zeros((fine.n_elements, fine.d + 1))
    for e, eb in enumerate(basis.elements):
        ids = plan.tri_ids[e]
        if len(ids) == 0:
            continue
        phi = eb.phi if phi_override is None else phi_override[e]
        c_loc = solution.coefficients[mesh.elements[e]]
        nodal = phi @ c_loc
        vals = np.einsum("pk,pk->p", nodal[plan.conn[e]], plan.weights[e])
        out[ids] = vals.reshape(len(ids), fine.d + 1)
    return out


def evaluate_element_field(basis, element_id, pts, coefficients=None,
                           phi_override=None):
    """Point values of one element's basis combination (two-sided evaluation).

    With coefficients=None returns the (m, d+1) matrix of basis values.
    Points must lie inside the element.
    """
    eb = basis.elements[element_id]
    phi = eb.phi if phi_override is None else phi_override
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    eids, bary = locate_points(eb.submesh, pts)
    corner = phi[eb.submesh.elements[eids]]
    vals = np.einsum("pk,pki->pi", bary, corner)
    if coefficients is None:
        return vals
    c_loc = coefficients[basis.coarse_mesh.elements[element_id]]
    return vals @ c_loc


def solve_direct_msfem(spec, realization, basis, rhs=None, threads=1):
    """Per-realization multiscale solve: basis rebuilt with the realized a_eta.

    Returns (CoarseSolution tagged uM, per-element phi values or None).
    eta = 0 delegates to the deterministic-basis path, which it equals
    exactly; otherwise the basis must have been built with keep_patches.
    """
    if rhs is None:
        rhs = basis.rhs
    if spec.eta == 0.0:
        K, F = assemble_realization(basis, realization)
        sol = solve_coarse(K, F, basis.coarse_mesh, tag="uM")
        return sol, None
    if basis.workspaces is None:
        raise AssemblyError(
            "direct multiscale solves need a basis built with keep_patches=True"
        )
    mesh = basis.coarse_mesh
    eta, X = spec.eta, realization.X
    nd = mesh.d + 1

    def one(e):
        ws = basis.workspaces[e]
        a_eta = ws.a0_mean + eta * X[ws.cell_rank] * ws.b_mean
        values = ws.harmonics_cg(a_eta)
        _, phi = ws.recombine(values)
        sub_a = ws.sub_a0 + eta * X[ws.sub_cell_rank] * ws.sub_b
        L = ws.local_stiffness(phi, sub_a)
        load = ws.local_load(phi, rhs)
        return phi, L, load

    results = _map_indexed(one, mesh.n_elements, threads)
    n = mesh.n_nodes
    F = np.zeros(n)
    locals_ = np.empty((mesh.n_elements, nd, nd))
    for e, (phi, L, load) in enumerate(results):
        locals_[e] = L
        np.add.at(F, mesh.elements[e], load)
    conn = mesh.elements
    rows = np.repeat(conn, nd, axis=1).ravel()
    cols = np.tile(conn, (1, nd)).ravel()
    K = sp.coo_matrix((locals_.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    sol = solve_coarse(K, F, mesh, tag="uM")
    return sol, [r[0] for r in results]


# ------------------------------------------------------------------ caching

_CACHE_MAGIC = "msfem basis cache v1"


def basis_cache_params(spec, h, h_basis, rho):
    """The parameters a cached basis is keyed on (eta excluded: the pieces
    are affine in it)."""

    def num(v):
        return None if v is None else float(v)

    return {
        "preset": spec.name,
        "d": int(spec.d),
        "eps": num(spec.eps),
        "kappa": num(spec.kappa),
        "zeta": num(spec.zeta),
        "P": num(spec.P),
        "h": num(h),
        "h_basis": num(h_basis),
        "rho": num(rho),
    }


def save_basis(basis, directory):
    """Write the basis to directory as a flat little-endian f64 blob plus a
    text manifest naming every array's offset and shape."""
    os.makedirs(directory, exist_ok=True)
    params = basis_cache_params(
        basis.spec, 1.0 / basis.coarse_mesh.lattice_n, basis.h_basis, basis.rho
    )
    arrays = [("alpha", basis.alpha)]
    for e, eb in enumerate(basis.elements):
        if eb.K0 is None:
            raise AssemblyError("refusing to cache a basis without pieces")
        arrays.append((f"phi[{e}]", eb.phi))
        arrays.append((f"K0[{e}]", eb.K0))
        arrays.append((f"K1_ranks[{e}]", eb.K1_ranks.astype(float)))
        arrays.append((f"K1[{e}]", eb.K1))
        arrays.append((f"load[{e}]", eb.load))
    lines = [_CACHE_MAGIC]
    for k, v in params.items():
        lines.append(f"{k} = {v!r}")
    lines.append("arrays:")
    offset = 0
    blobs = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name} {offset} {shape}")
        blobs.append(arr)
        offset += arr.size
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(directory, "data.bin"), "wb") as fh:
        for arr in blobs:
            fh.write(arr.tobytes())


def _parse_manifest(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _CACHE_MAGIC:
        raise ValueError(f"not a basis cache manifest: {path}")
    params, arrays = {}, {}
    in_arrays = False
    for ln in lines[1:]:
        if not ln.strip():
            continue
        if ln == "arrays:":
            in_arrays = True
            continue
        if in_arrays:
            name, offset, shape = ln.split()
            dims = tuple(int(s) for s in shape.split(",") if s)
            arrays[name] = (int(offset), dims)
        else:
            k, v = ln.split(" = ", 1)
            params[k] = v
    return params, arrays


def load_basis(directory, spec, h, h_basis, rho):
    """Load a cached basis if its manifest matches the requested parameters.

    Returns (basis, stored_params).  basis is None on any mismatch; the
    stored parameters let the caller show both sides.
    """
    manifest = os.path.join(directory, "manifest.txt")
    data_path = os.path.join(directory, "data.bin")
    if not (os.path.exists(manifest) and os.path.exists(data_path)):
        return None, None
    stored, arrays = _parse_manifest(manifest)
    wanted = {
        k: repr(v) for k, v in basis_cache_params(spec, h, h_basis, rho).items()
    }
    if stored != wanted:
        return None, stored
    from .mesh import build_coarse_mesh

    coarse = build_coarse_mesh("interval" if spec.d == 1 else "square", h)
    data = np.fromfile(data_path, dtype="<f8")

    def take(name):
        offset, dims = arrays[name]
        size = int(np.prod(dims)) if dims else 1
        return data[offset:offset + size].reshape(dims)

    alpha = take("alpha")
    elements = []
    for e in range(coarse.n_elements):
        sub = element_submesh(coarse, e, h_basis)
        eb = ElementBasis(
            element_id=e,
            submesh=sub,
            phi=take(f"phi[{e}]"),
            K0=take(f"K0[{e}]"),
            K1_ranks=take(f"K1_ranks[{e}]").astype(np.int64),
            K1=take(f"K1[{e}]"),
            load=take(f"load[{e}]"),
        )
        elements.append(eb)
    return (
        MsBasis(
            spec=spec, coarse_mesh=coarse, h_basis=h_basis, rho=rho,
            alpha=alpha, elements=elements,
        ),
        stored,
    )


# ------------------------------------------------------------ 1D fast path


class OneDMsfemEngine:
    """Quadrature-exact 1D pipeline sharing one dense grid across methods.

    The multiscale basis in 1D is coefficient-harmonic between coarse nodes,
    so local stiffnesses are 1 / int_K (1/a) exactly and the perturbed
    stiffness splits into affine pieces int_K (1/a0) and int_{K cap cell}
    b/a0^2.  The reference solution is the two-point boundary value problem
    integrated on the same grid.  All error integrals (broken H1 with its L2
    part, plain L2) are evaluated on the grid, element by element.
    """

    def __init__(self, spec, h, rhs=1.0, pts_per_period=2000):
        if spec.d != 1:
            raise ValueError("OneDMsfemEngine is for d = 1")
        self.spec = spec
        self.h = h
        n_el = int(round(1.0 / h))
        if abs(n_el * h - 1.0) > 1e-9:
            raise ValueError(f"1/h must be an integer, got h={h}")
        self.n_el = n_el
        self.nodes = np.linspace(0.0, 1.0, n_el + 1)
        cell_edges = spec.eps * np.arange(1, spec.n_cells)
        knots = np.unique(np.concatenate([self.nodes, cell_edges]))
        from .analytic_1d import QuadGrid

        self.grid = QuadGrid(knots, eps=spec.eps, pts_per_period=pts_per_period)
        g = self.grid
        self.a0 = np.asarray(spec.a0(g.mids), dtype=float)
        self.b = np.asarray(spec.b(g.mids), dtype=float)
        self.cell = spec.cell_of(g.mids)
        self.elem = np.clip(
            np.searchsorted(self.nodes, g.mids, side="left") - 1, 0, n_el - 1
        )
        self.w = g.w
        if np.isscalar(rhs):
            self.f = np.full_like(self.a0, float(rhs))
        else:
            self.f = np.asarray(rhs(g.mids), dtype=float)
        # deterministic pieces
        self.I0 = np.bincount(self.elem, self.w / self.a0, minlength=n_el)
        pair = self.elem * spec.n_cells + self.cell
        vals = np.bincount(pair, self.w * self.b / self.a0**2,
                           minlength=n_el * spec.n_cells)
        self.J_ranks, self.J = [], []
        for e in range(n_el):
            row = vals[e * spec.n_cells:(e + 1) * spec.n_cells]
            nz = np.nonzero(row)[0]
            self.J_ranks.append(nz)
            self.J.append(row[nz])
        # loads of the deterministic basis: int f phi via the cumulative
        # harmonic coordinate on each element
        self._edge_idx = np.searchsorted(g.edges, self.nodes)
        self._cum0 = self._cumulative(1.0 / self.a0)
        frac0 = self._fraction(self._cum0, self.I0)
        self.F_right0 = np.bincount(self.elem, self.w * self.f * frac0,
                                    minlength=n_el)
        self.F_all = np.bincount(self.elem, self.w * self.f, minlength=n_el)

    def _cumulative(self, dens):
        """Edge values of int_0^x dens, returned at grid mid-to-edge layout."""
        return np.concatenate([[0.0], np.cumsum(self.w * dens)])

    def _fraction(self, cum, I_el):
        """Per-mid harmonic coordinate in [0,1] within its element."""
        left = cum[self._edge_idx[self.elem]]
        mid_cum = (cum[:-1] + cum[1:]) / 2
        return (mid_cum - left) / I_el[self.elem]

    def _tridiag_solve(self, k_el, F_nodes):
        n = self.n_el
        Kii = np.zeros((n - 1, n - 1))
        diag = k_el[:-1] + k_el[1:]
        Kii[np.arange(n - 1), np.arange(n - 1)] = diag
        off = -k_el[1:-1]
        Kii[np.arange(n - 2), np.arange(1, n - 1)] = off
        Kii[np.arange(1, n - 1), np.arange(n - 2)] = off
        try:
            c, low = scipy.linalg.cho_factor(Kii, lower=True)
        except np.linalg.LinAlgError as exc:
            raise IndefiniteSystemError("1D coarse stiffness not SPD") from exc
        out = np.zeros(n + 1)
        out[1:n] = scipy.linalg.cho_solve((c, low), F_nodes[1:n])
        return out

    def _coarse_rhs(self, F_right):
        F = np.zeros(self.n_el + 1)
        F[:-1] += self.F_all - F_right
        F[1:] += F_right
        return F

    def a_eta(self, realization):
        if realization is None or self.spec.eta == 0.0:
            return self.a0
        a = self.a0 + self.spec.eta * realization.X[self.cell] * self.b
        if np.min(a) <= 0.0:
            raise IndefiniteSystemError(
                "perturbed coefficient is not positive; not proceeding"
            )
        return a

    def solve_uS(self, realization):
        """Deterministic-basis solution: nodal values on the coarse mesh."""
        k = self.I0.copy()
        if self.spec.eta != 0.0 and realization is not None:
            for e in range(self.n_el):
                if len(self.J_ranks[e]):
                    k[e] += self.spec.eta * np.dot(
                        realization.X[self.J_ranks[e]], self.J[e]
                    )
        k /= self.I0**2
        if np.min(k) <= 0.0:
            raise IndefiniteSystemError(
                "perturbed coarse stiffness lost positivity; not proceeding"
            )
        return self._tridiag_solve(k, self._coarse_rhs(self.F_right0))

    def solve_uM(self, realization):
        """Per-realization basis: harmonic in a_eta itself."""
        if self.spec.eta == 0.0:
            return self.solve_uS(realization)
        a = self.a_eta(realization)
        I_eta = np.bincount(self.elem, self.w / a, minlength=self.n_el)
        cum = self._cumulative(1.0 / a)
        frac = self._fraction(cum, I_eta)
        F_right = np.bincount(self.elem, self.w * self.f * frac,
                              minlength=self.n_el)
        return self._tridiag_solve(1.0 / I_eta, self._coarse_rhs(F_right)), (
            a, I_eta, frac
        )

    def fields_uS(self, nodal, realization):
        """(u, du) of the deterministic-basis solution on the grid mids."""
        jump = np.diff(nodal)[self.elem]
        frac = self._fraction(self._cum0, self.I0)
        u = nodal[self.elem] + jump * frac
        du = jump / (self.I0[self.elem] * self.a0)
        return u, du

    def fields_uM(self, nodal, aux):
        a, I_eta, frac = aux
        jump = np.diff(nodal)[self.elem]
        u = nodal[self.elem] + jump * frac
        du = jump / (I_eta[self.elem] * a)
        return u, du

    def fields_ref(self, realization):
        """Exact solution of the realized two-point problem on the grid."""
        a = self.a_eta(realization)
        Fc = self._cumulative(self.f)
        F_mids = (Fc[:-1] + Fc[1:]) / 2
        c = np.sum(self.w * F_mids / a) / np.sum(self.w / a)
        du = (c - F_mids) / a
        cum = self._cumulative(du)
        u = (cum[:-1] + cum[1:]) / 2
        return u, du

    def error(self, fields1, fields2, kind="H1"):
        """Relative error ||f1 - f2|| / ||f2|| on the grid (exact integrals)."""
        u1, du1 = fields1
        u2, du2 = fields2
        w = self.w
        if kind == "L2":
            num = np.sum(w * (u1 - u2) ** 2)
            den = np.sum(w * u2**2)
        else:
            num = np.sum(w * ((du1 - du2) ** 2 + (u1 - u2) ** 2))
            den = np.sum(w * (du2**2 + u2**2))
        return float(np.sqrt(num / den))

    def realization_errors(self, realization, pairs, norms):
        """All requested relative errors of one realization.

        pairs: iterable of (name1, name2) with names in {uS, uM, uref};
        the second entry normalizes.  Returns {(name1, name2, norm): err}.
        """
        names = {n for p in pairs for n in p}
        fields = {}
        if "uref" in names:
            fields["uref"] = self.fields_ref(realization)
        if "uS" in names:
            nodal = self.solve_uS(realization)
            fields["uS"] = self.fields_uS(nodal, realization)
        if "uM" in names:
            if self.spec.eta == 0.0:
                fields["uM"] = fields.get("uS")
                if fields["uM"] is None:
                    nodal = self.solve_uS(realization)
                    fields["uM"] = self.fields_uS(nodal, realization)
            else:
                nodal, aux = self.solve_uM(realization)
                fields["uM"] = self.fields_uM(nodal, aux)
        out = {}
        for p in pairs:
            for nk in norms:
                out[(p[0], p[1], nk)] = self.error(fields[p[0]], fields[p[1]], nk)
        return out
