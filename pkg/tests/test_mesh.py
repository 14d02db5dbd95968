import numpy as np
import pytest

from msfemlab.mesh import (
    build_cell_index_set,
    build_coarse_mesh,
    build_patch,
    build_patch_fine_mesh,
    dump_mesh,
    element_submesh,
    locate_points,
)


def test_interval_mesh_counts():
    mesh = build_coarse_mesh("interval", 1.0 / 30)
    assert mesh.n_nodes == 31
    assert mesh.n_elements == 30
    assert mesh.boundary.sum() == 2
    assert np.isclose(mesh.h, 1.0 / 30)


def test_square_mesh_coarsest():
    mesh = build_coarse_mesh("square", 1.0)
    assert mesh.n_nodes == 4
    assert mesh.n_elements == 2
    assert mesh.boundary.all()


def test_square_mesh_quarter():
    mesh = build_coarse_mesh("square", 0.25)
    assert mesh.n_nodes == 25
    assert mesh.n_elements == 32
    assert mesh.boundary.sum() == 16


def test_mesh_rejects_non_integral_step():
    with pytest.raises(ValueError):
        build_coarse_mesh("interval", 0.3)
    with pytest.raises(ValueError):
        build_coarse_mesh("square", 2.0)
    with pytest.raises(ValueError):
        build_coarse_mesh("disk", 0.25)


@pytest.mark.parametrize("domain,h", [("interval", 1.0 / 7), ("square", 1.0 / 6)])
def test_measures_partition_domain(domain, h):
    mesh = build_coarse_mesh(domain, h)
    assert abs(mesh.element_measures().sum() - 1.0) < 1e-12


def test_triangles_counterclockwise():
    mesh = build_coarse_mesh("square", 0.25)
    v = mesh.nodes[mesh.elements]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    assert np.all(cross > 0)


def test_patch_rejects_shrinking():
    mesh = build_coarse_mesh("square", 0.25)
    with pytest.raises(ValueError):
        build_patch(mesh, 0, 0.5)


def test_interior_patch_area_scales():
    mesh = build_coarse_mesh("square", 1.0 / 8)
    # pick an element well inside the domain
    interior = None
    for e in range(mesh.n_elements):
        c = mesh.nodes[mesh.elements[e]].mean(axis=0)
        if np.all(np.abs(c - 0.5) < 0.15):
            interior = e
            break
    patch = build_patch(mesh, interior, 3.0)
    area_k = mesh.element_measures()[interior]
    assert not patch.clipped
    assert np.isclose(patch.measure(), 9.0 * area_k, rtol=1e-12)


def test_patch_ratio_one_is_element():
    mesh = build_coarse_mesh("square", 0.25)
    patch = build_patch(mesh, 5, 1.0 + 1e-12)
    area_k = mesh.element_measures()[5]
    assert np.isclose(patch.measure(), area_k, rtol=1e-9)


def test_corner_patch_is_clipped():
    mesh = build_coarse_mesh("square", 0.25)
    patch = build_patch(mesh, 0, 3.0)  # square (0,0), touches the corner
    assert patch.clipped
    poly = patch.polygon
    assert np.all(poly >= -1e-14)
    assert np.all(poly <= 1 + 1e-14)
    # clipped area is strictly smaller than the unclipped homothety
    assert patch.measure() < 9.0 * mesh.element_measures()[0] - 1e-6


def test_patch_1d_clipping():
    mesh = build_coarse_mesh("interval", 0.25)
    patch = build_patch(mesh, 0, 3.0)
    assert patch.clipped
    assert patch.polygon[0, 0] == 0.0
    interior = build_patch(mesh, 1, 2.0)
    assert not interior.clipped
    assert np.isclose(interior.measure(), 0.5)


def test_patch_idempotent():
    mesh = build_coarse_mesh("square", 0.25)
    p1 = build_patch(mesh, 3, 3.0)
    p2 = build_patch(mesh, 3, 3.0)
    assert np.array_equal(p1.polygon, p2.polygon)
    assert np.array_equal(p1.vertices, p2.vertices)


def test_patch_fine_mesh_covers_element():
    mesh = build_coarse_mesh("square", 0.25)
    patch = build_patch(mesh, 10, 3.0)
    fine = build_patch_fine_mesh(patch, 1.0 / 40)
    # the fine mesh fills the clipped polygon up to a one-layer staircase
    assert fine.element_measures().sum() <= patch.measure() + 1e-12
    assert fine.element_measures().sum() > 0.8 * patch.measure()
    # every coarse-element vertex appears as a fine node
    for v in mesh.nodes[mesh.elements[10]]:
        d = np.min(np.linalg.norm(fine.nodes - v, axis=1))
        assert d < 1e-12


def test_element_submesh_partitions_element():
    mesh = build_coarse_mesh("square", 0.25)
    for e in (0, 7, 31):
        sub = element_submesh(mesh, e, 1.0 / 20)
        assert np.isclose(sub.element_measures().sum(), mesh.element_measures()[e], rtol=1e-12)
    with pytest.raises(ValueError):
        element_submesh(mesh, 0, 1.0 / 30)  # 30 not a multiple of 4


def test_element_submesh_1d():
    mesh = build_coarse_mesh("interval", 1.0 / 30)
    sub = element_submesh(mesh, 3, 1.0 / 120)
    assert sub.n_elements == 4
    assert np.isclose(sub.nodes.min(), 3.0 / 30)
    assert np.isclose(sub.nodes.max(), 4.0 / 30)


def test_cell_index_set_1d():
    mesh = build_coarse_mesh("interval", 1.0 / 30)
    cells = build_cell_index_set("interval", 0.025, mesh)
    assert cells.indices == tuple((k,) for k in range(40))
    # element (0, 1/30): cells (0, 0.025] fits, (0.025, 0.05] does not
    assert cells.cells_in_element[0] == ((0,),)
    assert cells.n_in_element[0] == 1


def test_cell_index_set_1d_aligned():
    mesh = build_coarse_mesh("interval", 0.25)
    cells = build_cell_index_set("interval", 1.0 / 8, mesh)
    # every coarse element contains exactly two cells
    assert all(len(c) == 2 for c in cells.cells_in_element)
    got = sorted(k for c in cells.cells_in_element for k in c)
    assert got == [(k,) for k in range(8)]


def test_cell_index_set_2d():
    mesh = build_coarse_mesh("square", 0.5)
    cells = build_cell_index_set("square", 0.5, mesh)
    assert len(cells.indices) == 4
    # cells are half the area of the triangles they straddle: none contained
    assert all(len(c) == 0 for c in cells.cells_in_element)


def test_cell_index_set_2d_contained():
    mesh = build_coarse_mesh("square", 0.5)
    cells = build_cell_index_set("square", 0.125, mesh)
    # lower triangle of square (0,0): vertices (0,0),(.5,0),(.5,.5)
    # cells (k1,k2) with cell square inside: below the diagonal y=x
    low = cells.cells_in_element[0]
    assert all(ky < kx for kx, ky in low)
    counts = cells.n_in_element
    assert counts.sum() == 2 * mesh.n_elements * 3  # 6 cells per triangle out of 16 per square
    total_cell_area = counts.sum() * 0.125**2
    assert total_cell_area < 1.0
    # cell count scales with element area bound: N_K * eps^d <= |K|
    areas = mesh.element_measures()
    assert np.all(counts * 0.125**2 <= areas + 1e-12)


def test_cell_counts_lower_bound_2d():
    # with h/eps >= 2 each triangle contains at least (1/4) (h/eps)^2 cells
    mesh = build_coarse_mesh("square", 0.5)
    for eps in (0.25, 0.125, 0.0625):
        cells = build_cell_index_set("square", eps, mesh)
        ratio = 0.5 / eps
        assert np.all(cells.n_in_element >= 0.25 * ratio**2 - 1e-12)


def test_locate_points_interval():
    mesh = build_coarse_mesh("interval", 0.25)
    eids, bary = locate_points(mesh, [[0.1], [0.25], [1.0]])
    assert eids[0] == 0
    assert np.isclose(bary[0, 1], 0.4)
    # node 0.25 goes to the lower-indexed element
    assert eids[1] == 0
    assert np.isclose(bary[1, 1], 1.0)
    assert eids[2] == 3


def test_locate_points_square():
    mesh = build_coarse_mesh("square", 0.5)
    pts = np.array([[0.3, 0.1], [0.1, 0.3], [0.25, 0.25], [1.0, 1.0]])
    eids, bary = locate_points(mesh, pts)
    assert eids[0] == 0   # below diagonal: lower triangle
    assert eids[1] == 1   # above diagonal: upper triangle
    assert eids[2] == 0   # on diagonal: tie broken to lower key
    x = np.einsum("pk,pkd->pd", bary, mesh.nodes[mesh.elements[eids]])
    assert np.allclose(x, pts, atol=1e-12)


def test_locate_points_outside_raises():
    mesh = build_coarse_mesh("square", 0.5)
    with pytest.raises(ValueError):
        locate_points(mesh, [[1.5, 0.5]])


def test_locate_points_on_patch_submesh():
    mesh = build_coarse_mesh("square", 0.25)
    patch = build_patch(mesh, 12, 2.0)
    fine = build_patch_fine_mesh(patch, 1.0 / 32)
    # all fine nodes locate inside the sub-mesh and reproduce themselves
    eids, bary = locate_points(fine, fine.nodes)
    x = np.einsum("pk,pkd->pd", bary, fine.nodes[fine.elements[eids]])
    assert np.allclose(x, fine.nodes, atol=1e-12)


def test_dump_mesh_roundtrip_counts():
    mesh = build_coarse_mesh("square", 0.5)
    text = dump_mesh(mesh, values=np.arange(mesh.n_nodes, dtype=float))
    lines = text.strip().split("\n")
    assert lines[0].startswith("# d=2")
    assert sum(1 for ln in lines if ln.startswith("node ")) == mesh.n_nodes
    assert sum(1 for ln in lines if ln.startswith("element ")) == mesh.n_elements
