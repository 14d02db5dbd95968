"""Structured simplicial meshes, oversampling patches, and cell-lattice bookkeeping.

All meshes are structured lattices on the unit interval (d=1) or unit square (d=2):
nodes sit at multiples of the mesh step, and in 2D each lattice square is split
into two triangles along its (+1)-diagonal.  Patch and element sub-meshes are
carved out of a finer lattice, so a coarse element is always an exact union of
fine elements whenever the step ratio is integral.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

__all__ = [
    "Mesh",
    "OversamplingPatch",
    "CellIndexSet",
    "build_coarse_mesh",
    "build_fine_mesh",
    "build_patch",
    "build_patch_fine_mesh",
    "element_submesh",
    "build_cell_index_set",
    "dump_mesh",
    "locate_points",
]

_FRAC_DEN = 10**9


def _frac(x):
    """Recover the intended rational value of a grid quantity from its float."""
    return Fraction(x).limit_denominator(_FRAC_DEN)


@dataclass(frozen=True)
class Mesh:
    """Simplicial lattice mesh (segments in 1D, triangles in 2D).

    nodes:     (n_nodes, d) coordinates
    elements:  (n_elements, d+1) node indices; 2D triangles are counterclockwise
    boundary:  (n_nodes,) True where the node lies on the mesh's own boundary
    h:         mesh size (max element diameter)
    lattice_n: lattice resolution (node coordinates are multiples of 1/lattice_n)
    node_ij:   (n_nodes, d) integer lattice coordinates of each node
    elem_key:  (n_elements,) integer lattice key of each element
               (1D: segment index i; 2D: 2*(j*lattice_n+i) + t for triangle t of
               square (i,j), t=0 lower / t=1 upper)
    """

    d: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary: np.ndarray
    h: float
    lattice_n: int
    node_ij: np.ndarray
    elem_key: np.ndarray
    _elem_lookup: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    def element_measures(self):
        """Lengths (1D) or areas (2D) of all elements."""
        v = self.nodes[self.elements]
        if self.d == 1:
            return np.abs(v[:, 1, 0] - v[:, 0, 0])
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def elem_index(self, key):
        """Local element id for a lattice key, or -1 if absent."""
        if not self._elem_lookup:
            self._elem_lookup.update(
                (int(k), i) for i, k in enumerate(self.elem_key)
            )
        return self._elem_lookup.get(int(key), -1)


@dataclass(frozen=True)
class OversamplingPatch:
    """Oversampling region S of a coarse element K.

    S is the homothety of K about its centroid with ratio rho, intersected with
    the closure of the domain.  `vertices` are the (unclipped) homothety images
    of K's vertices -- they carry the affine nodal boundary data even when the
    polygon was clipped.  `polygon` is the clipped region (interval endpoints in
    1D, counterclockwise vertex list in 2D).
    """

    element_id: int
    rho: float
    vertices: np.ndarray     # (d+1, d) homothety images of K's vertices
    polygon: np.ndarray      # (m, d) clipped region
    clipped: bool

    def measure(self):
        """Length (1D) / area (2D) of the clipped polygon."""
        p = self.polygon
        if p.shape[1] == 1:
            return float(p[1, 0] - p[0, 0])
        x, y = p[:, 0], p[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(frozen=True)
class CellIndexSet:
    """The eps-cell lattice over the domain and its per-element interior cells.

    indices:          all k with eps*(Q+k) meeting the domain, lex-sorted tuples
    cells_in_element: per coarse element, the lex-sorted list of cells whose
                      closed cell square/interval is contained in the element
    """

    eps: float
    d: int
    indices: tuple
    cells_in_element: tuple
    n_per_dim: int

    @property
    def n_in_element(self):
        return np.array([len(c) for c in self.cells_in_element])

    def rank(self, k):
        """Canonical linear index of cell k (C-order over the lattice box)."""
        if self.d == 1:
            return int(k[0]) if not np.isscalar(k) else int(k)
        return int(k[0]) * self.n_per_dim + int(k[1])


def _interval_mesh(n):
    nodes = (np.arange(n + 1) / n).reshape(-1, 1)
    elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    boundary = np.zeros(n + 1, dtype=bool)
    boundary[[0, -1]] = True
    return Mesh(
        d=1, nodes=nodes, elements=elements, boundary=boundary, h=1.0 / n,
        lattice_n=n, node_ij=np.arange(n + 1).reshape(-1, 1),
        elem_key=np.arange(n),
    )


def _square_mesh(n):
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    # node id = j*(n+1) + i
    ij = np.column_stack([ii.T.ravel(), jj.T.ravel()])
    nodes = ij / n
    sq_i, sq_j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    sq_i, sq_j = sq_i.T.ravel(), sq_j.T.ravel()
    n00 = sq_j * (n + 1) + sq_i
    n10 = n00 + 1
    n01 = n00 + (n + 1)
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper
    keys = np.empty(2 * n * n, dtype=np.int64)
    sq_lin = sq_j * n + sq_i
    keys[0::2] = 2 * sq_lin
    keys[1::2] = 2 * sq_lin + 1
    boundary = (
        (ij[:, 0] == 0) | (ij[:, 0] == n) | (ij[:, 1] == 0) | (ij[:, 1] == n)
    )
    return Mesh(
        d=2, nodes=nodes, elements=elements, boundary=boundary,
        h=np.sqrt(2.0) / n, lattice_n=n, node_ij=ij, elem_key=keys,
    )


def build_coarse_mesh(domain, h):
    """Structured mesh of the unit interval ('interval') or unit square ('square').

    1/h must be an integer; the mesh step is exactly 1/round(1/h).
    """
    if not 0 < h <= 1:
        raise ValueError(f"mesh size h={h} must lie in (0, 1]")
    n = _lattice_count(h, "h")
    if domain == "interval":
        return _interval_mesh(n)
    if domain == "square":
        return _square_mesh(n)
    raise ValueError(f"unknown domain {domain!r} (expected 'interval' or 'square')")


def build_fine_mesh(domain, h_fine):
    """Fine lattice mesh of the whole domain (same construction, finer step)."""
    return build_coarse_mesh(domain, h_fine)


def _lattice_count(h, name):
    n = _frac(h)
    if n.numerator != 1:
        raise ValueError(
            f"1/{name} must be an integer for structured lattices, got {name}={h}"
        )
    return n.denominator


def _centroid(verts):
    return verts.mean(axis=0)


def build_patch(mesh, element_id, rho, domain="auto"):
    """Oversampling patch of a coarse element: homothety about the centroid.

    rho > 1 enlarges the element (rho=1 returns the element itself, which is the
    conforming limit); rho < 1 is rejected.  The homothety image is intersected
    with the closure of the unit domain and `clipped` is set when that changed it.
    """
    if rho < 1:
        raise ValueError(f"oversampling ratio rho={rho} must be >= 1")
    verts = mesh.nodes[mesh.elements[element_id]]
    c = _centroid(verts)
    images = c + rho * (verts - c)
    if mesh.d == 1:
        lo, hi = float(images.min()), float(images.max())
        clo, chi = max(lo, 0.0), min(hi, 1.0)
        clipped = (clo > lo + 1e-15) or (chi < hi - 1e-15)
        poly = np.array([[clo], [chi]])
        return OversamplingPatch(element_id, rho, images, poly, clipped)
    poly, clipped = _clip_to_unit_square(images)
    return OversamplingPatch(element_id, rho, images, poly, clipped)


def _clip_to_unit_square(poly):
    """Sutherland-Hodgman clip of a ccw polygon against [0,1]^2."""
    half_planes = [  # inside test: a*x + b*y <= c
        (-1.0, 0.0, 0.0),  # x >= 0
        (1.0, 0.0, 1.0),   # x <= 1
        (0.0, -1.0, 0.0),  # y >= 0
        (0.0, 1.0, 1.0),   # y <= 1
    ]
    pts = [tuple(p) for p in np.asarray(poly, dtype=float)]
    clipped = False
    for a, b, cc in half_planes:
        if not pts:
            break
        out = []
        m = len(pts)
        for i in range(m):
            p, q = pts[i], pts[(i + 1) % m]
            dp = a * p[0] + b * p[1] - cc
            dq = a * q[0] + b * q[1] - cc
            if dp <= 1e-14:
                out.append(p)
                if dq > 1e-14:
                    t = dp / (dp - dq)
                    out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
            elif dq <= 1e-14:
                clipped = True
                t = dp / (dp - dq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
            else:
                clipped = True
        pts = out
    return np.array(pts), clipped


def _points_in_convex_polygon(pts, poly, tol=1e-12):
    """Vectorized containment of `pts` in a closed convex ccw polygon."""
    inside = np.ones(len(pts), dtype=bool)
    m = len(poly)
    for i in range(m):
        a, b = poly[i], poly[(i + 1) % m]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross >= -tol
    return inside


def _submesh_from_lattice_2d(n, region_poly, tol=1e-12):
    """All triangles of the step-1/n unit-square lattice inside a convex polygon."""
    xs = region_poly[:, 0]
    ys = region_poly[:, 1]
    i0 = max(int(np.floor(xs.min() * n - 1e-9)), 0)
    i1 = min(int(np.ceil(xs.max() * n + 1e-9)), n)
    j0 = max(int(np.floor(ys.min() * n - 1e-9)), 0)
    j1 = min(int(np.ceil(ys.max() * n + 1e-9)), n)
    ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
    sq = np.column_stack([ii.ravel(), jj.ravel()])
    if len(sq) == 0:
        raise ValueError("patch region too small for the fine lattice step")
    # Corner containment for the 4 corners of each candidate square.
    corners = {}
    for di in (0, 1):
        for dj in (0, 1):
            p = (sq + [di, dj]) / n
            corners[(di, dj)] = _points_in_convex_polygon(p, region_poly, tol * max(1, n))
    lower_ok = corners[(0, 0)] & corners[(1, 0)] & corners[(1, 1)]
    upper_ok = corners[(0, 0)] & corners[(1, 1)] & corners[(0, 1)]
    tris = []   # (i, j, t) per kept triangle
    for t, ok in ((0, lower_ok), (1, upper_ok)):
        keep = sq[ok]
        if len(keep):
            tris.append(np.column_stack([keep, np.full(len(keep), t)]))
    if not tris:
        raise ValueError("no fine elements inside patch region")
    tris = np.concatenate(tris)
    # canonical element order: by lattice key
    keys = 2 * (tris[:, 1] * n + tris[:, 0]) + tris[:, 2]
    order = np.argsort(keys)
    tris, keys = tris[order], keys[order]
    # node lattice coordinates per triangle corner
    corner_off = np.array([
        [[0, 0], [1, 0], [1, 1]],   # lower
        [[0, 0], [1, 1], [0, 1]],   # upper
    ])
    tri_nodes = tris[:, None, :2] + corner_off[tris[:, 2]]
    flat = tri_nodes.reshape(-1, 2)
    node_key = flat[:, 1] * (n + 1) + flat[:, 0]
    uniq, inv = np.unique(node_key, return_inverse=True)
    node_ij = np.column_stack([uniq % (n + 1), uniq // (n + 1)])
    nodes = node_ij / n
    elements = inv.reshape(-1, 3)
    boundary = _boundary_nodes_from_edges(elements, len(uniq))
    return Mesh(
        d=2, nodes=nodes, elements=elements, boundary=boundary,
        h=np.sqrt(2.0) / n, lattice_n=n, node_ij=node_ij, elem_key=keys,
    )


def _boundary_nodes_from_edges(elements, n_nodes):
    """Flag nodes lying on edges that belong to exactly one element."""
    e = elements
    edges = np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    key = edges[:, 0].astype(np.int64) * n_nodes + edges[:, 1]
    uniq, counts = np.unique(key, return_counts=True)
    bkey = uniq[counts == 1]
    boundary = np.zeros(n_nodes, dtype=bool)
    boundary[bkey // n_nodes] = True
    boundary[bkey % n_nodes] = True
    return boundary


def _submesh_from_lattice_1d(n, lo, hi):
    i0 = int(np.round(lo * n)) if abs(lo * n - np.round(lo * n)) < 1e-9 else int(np.ceil(lo * n))
    i1 = int(np.round(hi * n)) if abs(hi * n - np.round(hi * n)) < 1e-9 else int(np.floor(hi * n))
    i0, i1 = max(i0, 0), min(i1, n)
    if i1 <= i0:
        raise ValueError("patch interval too small for the fine lattice step")
    idx = np.arange(i0, i1 + 1)
    nodes = (idx / n).reshape(-1, 1)
    elements = np.column_stack([np.arange(i1 - i0), np.arange(1, i1 - i0 + 1)])
    boundary = np.zeros(len(idx), dtype=bool)
    boundary[[0, -1]] = True
    return Mesh(
        d=1, nodes=nodes, elements=elements, boundary=boundary, h=1.0 / n,
        lattice_n=n, node_ij=idx.reshape(-1, 1), elem_key=np.arange(i0, i1),
    )


def build_patch_fine_mesh(patch, h_fine):
    """Fine lattice sub-mesh of the (clipped) patch region.

    Keeps every fine lattice element whose vertices lie in the patch polygon, so
    the mesh approximates the region from inside; oblique patch edges acquire a
    one-layer staircase, which oversampling is insensitive to.  1/h_fine must be
    an integer.
    """
    n = _lattice_count(h_fine, "h_fine")
    if patch.polygon.shape[1] == 1:
        return _submesh_from_lattice_1d(n, patch.polygon[0, 0], patch.polygon[1, 0])
    return _submesh_from_lattice_2d(n, patch.polygon)


def element_submesh(mesh, element_id, h_fine):
    """Fine lattice sub-mesh exactly covering coarse element `element_id`.

    Requires h/h_fine integral so the coarse element is a union of fine elements.
    """
    n = _lattice_count(h_fine, "h_fine")
    ratio = n * _frac(1.0) / _frac(mesh.lattice_n)  # fine steps per coarse step
    if ratio.denominator != 1:
        raise ValueError(
            f"coarse step 1/{mesh.lattice_n} is not a multiple of fine step 1/{n}"
        )
    verts = mesh.nodes[mesh.elements[element_id]]
    if mesh.d == 1:
        return _submesh_from_lattice_1d(n, float(verts.min()), float(verts.max()))
    return _submesh_from_lattice_2d(n, verts)


def build_cell_index_set(domain, eps, mesh):
    """Cell lattice bookkeeping for cells eps*(Q+k), Q = (0,1]^d.

    `indices` lists every k whose cell meets the open unit domain;
    `cells_in_element[K]` lists the cells contained in coarse element K.
    Containment tests run in exact rational arithmetic.
    """
    if eps <= 0:
        raise ValueError(f"eps={eps} must be positive")
    d = mesh.d
    feps = _frac(eps)
    n_cells = int(-((-1) // feps))  # exact ceil(1/eps)
    ks = range(n_cells)
    if d == 1:
        indices = tuple((k,) for k in ks)
    else:
        indices = tuple((kx, ky) for kx in ks for ky in ks)
    fh = Fraction(1, mesh.lattice_n)
    cells_in = []
    for e in range(mesh.n_elements):
        vids = mesh.elements[e]
        vij = mesh.node_ij[vids]
        if d == 1:
            lo = fh * int(vij.min())
            hi = fh * int(vij.max())
            klo = lo / feps        # first candidate at ceil(lo/eps)
            kmin = int(np.ceil(float(klo) - 1e-12))
            kept = []
            for k in range(max(kmin, 0), n_cells):
                if feps * k >= lo and feps * (k + 1) <= hi:
                    kept.append((k,))
                elif feps * k >= hi:
                    break
            cells_in.append(tuple(kept))
        else:
            tri = [(fh * int(i), fh * int(j)) for i, j in vij]
            kept = []
            xs = [v[0] for v in tri]
            ys = [v[1] for v in tri]
            kx0 = int(np.floor(float(min(xs) / feps) - 1e-12))
            kx1 = int(np.ceil(float(max(xs) / feps) + 1e-12))
            ky0 = int(np.floor(float(min(ys) / feps) - 1e-12))
            ky1 = int(np.ceil(float(max(ys) / feps) + 1e-12))
            for kx in range(max(kx0, 0), min(kx1, n_cells)):
                for ky in range(max(ky0, 0), min(ky1, n_cells)):
                    corners = [
                        (feps * kx, feps * ky),
                        (feps * (kx + 1), feps * ky),
                        (feps * (kx + 1), feps * (ky + 1)),
                        (feps * kx, feps * (ky + 1)),
                    ]
                    if all(_point_in_tri_exact(p, tri) for p in corners):
                        kept.append((kx, ky))
            cells_in.append(tuple(sorted(kept)))
    return CellIndexSet(
        eps=eps, d=d, indices=indices, cells_in_element=tuple(cells_in),
        n_per_dim=n_cells,
    )


def _point_in_tri_exact(p, tri):
    """Exact containment of a rational point in a ccw rational triangle."""
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        if cross < 0:
            return False
    return True


def locate_points(mesh, pts, tol=1e-9):
    """Locate points in a lattice mesh: (element ids, barycentric coordinates).

    Points on shared edges or nodes are assigned to the lowest-indexed element
    containing them.  Raises ValueError if a point falls outside the mesh.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = mesh.lattice_n
    r = pts * n
    if np.any(r < -tol) or np.any(r > n + tol):
        raise ValueError("point outside the unit domain")
    # assign to the lattice square whose *open* lower-left corner precedes the
    # point: a point on a lattice line lands in the square left/below it, which
    # has the smaller element key
    base = np.ceil(r - tol).astype(np.int64) - 1
    np.clip(base, 0, n - 1, out=base)
    f = r - base
    f[np.abs(f) < tol] = 0.0
    f[np.abs(f - 1.0) < tol] = 1.0
    if mesh.d == 1:
        i = base[:, 0]
        fx = f[:, 0]
        eids = np.fromiter(
            (mesh.elem_index(k) for k in i), dtype=np.int64, count=len(i)
        )
        for idx in np.nonzero(eids < 0)[0]:
            # sub-mesh edge: the point may open the next segment instead
            if fx[idx] == 1.0 and mesh.elem_index(i[idx] + 1) >= 0:
                eids[idx] = mesh.elem_index(i[idx] + 1)
                fx[idx] = 0.0
            else:
                raise ValueError(f"point {pts[idx]} outside mesh region")
        return eids, np.column_stack([1 - fx, fx])
    fx, fy = f[:, 0].copy(), f[:, 1].copy()
    lower = fx >= fy  # diagonal tie goes to the lower-keyed triangle
    keys = 2 * (base[:, 1] * n + base[:, 0]) + (~lower).astype(np.int64)
    eids = np.fromiter(
        (mesh.elem_index(k) for k in keys), dtype=np.int64, count=len(keys)
    )
    bary = np.empty((len(pts), 3))
    bary[lower, 0] = 1 - fx[lower]
    bary[lower, 1] = fx[lower] - fy[lower]
    bary[lower, 2] = fy[lower]
    up = ~lower
    bary[up, 0] = 1 - fy[up]
    bary[up, 1] = fx[up]
    bary[up, 2] = fy[up] - fx[up]
    for idx in np.nonzero(eids < 0)[0]:
        e, b = _locate_fallback_2d(
            mesh, int(base[idx, 0]), int(base[idx, 1]),
            float(fx[idx]), float(fy[idx]), tol,
        )
        if e < 0:
            raise ValueError(f"point {pts[idx]} outside mesh region")
        eids[idx] = e
        bary[idx] = b
    np.clip(bary, 0.0, 1.0, out=bary)
    return eids, bary


def _locate_fallback_2d(mesh, i, j, fx, fy, tol):
    """Scan neighbor squares (in element-key order) for a triangle holding the point.

    Needed on sub-mesh staircase boundaries, where the canonical square of a
    point is absent from the mesh but a sibling or neighbor triangle contains it.
    """
    n = mesh.lattice_n
    dxs = [0] + ([1] if fx == 1.0 else [])
    dys = [0] + ([1] if fy == 1.0 else [])
    for dy in sorted(dys):
        for dx in sorted(dxs):
            si, sj = i + dx, j + dy
            if not (0 <= si < n and 0 <= sj < n):
                continue
            gx, gy = fx - dx, fy - dy
            for t in (0, 1):
                if t == 0:
                    b = (1 - gx, gx - gy, gy)
                else:
                    b = (1 - gy, gx, gy - gx)
                if min(b) < -tol:
                    continue
                e = mesh.elem_index(2 * (sj * n + si) + t)
                if e >= 0:
                    return e, np.array(b)
    return -1, None


def dump_mesh(mesh, values=None):
    """Plain-text mesh listing: one record per line (optionally with nodal values)."""
    out = [f"# d={mesh.d} nodes={mesh.n_nodes} elements={mesh.n_elements} h={mesh.h:.12g}"]
    for i, x in enumerate(mesh.nodes):
        coords = " ".join(f"{c:.12g}" for c in x)
        line = f"node {i} {coords} boundary={int(mesh.boundary[i])}"
        if values is not None:
            line += f" value={values[i]:.12g}"
        out.append(line)
    for e, conn in enumerate(mesh.elements):
        out.append("element " + str(e) + " " + " ".join(str(int(v)) for v in conn))
    return "\n".join(out) + "\n"
