import numpy as np
import pytest

from volbake.cameras import Camera
from volbake.density import DensityParams
from volbake.fields import SphereSdf
from volbake.mesh import TriangleMesh, edge_manifold, euler_characteristic, morton_sort
from volbake.meshing import (
    BakeGrid,
    CellFlags,
    build_bounding_hull,
    clamp_with_hull,
    marching_cubes,
    region_grow,
    splat_visibility,
    to_world,
)
from volbake.synth import RingSpec, camera_ring


class _Const:
    def __init__(self, v):
        self.v = v

    def value(self, q):
        return np.full(q.shape[0], self.v)


@pytest.fixture(scope="module")
def sphere_grid():
    return BakeGrid(SphereSdf([0, 0, 0], 1.0), res=128, materialize=False)


@pytest.fixture(scope="module")
def sphere_mesh(sphere_grid):
    return marching_cubes(sphere_grid, iso=0.0, only_candidates=False)


def test_sphere_vertex_radii_within_two_cells(sphere_grid, sphere_mesh):
    r = np.linalg.norm(sphere_mesh.vertices, axis=1)
    h = sphere_grid.h
    assert r.min() > 1 - 2 * h
    assert r.max() < 1 + 2 * h


def test_iso_offset_dilates_surface(sphere_grid, sphere_mesh):
    dilated = marching_cubes(sphere_grid, iso=0.001, only_candidates=False)
    r0 = np.linalg.norm(sphere_mesh.vertices, axis=1)
    r1 = np.linalg.norm(dilated.vertices, axis=1)
    assert r1.mean() > r0.mean()
    assert r1.min() >= r0.min()


def test_constant_positive_grid_gives_empty_mesh():
    grid = BakeGrid(_Const(0.5), res=16, materialize=False)
    mesh = marching_cubes(grid, iso=0.0, only_candidates=False)
    assert mesh.n_triangles == 0


def test_mesh_is_edge_manifold_and_closed(sphere_mesh):
    assert edge_manifold(sphere_mesh)
    assert euler_characteristic(sphere_mesh) == 2  # genus-0 closed surface
    f = sphere_mesh.faces
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)  # no boundary edges


def test_normals_point_outward(sphere_mesh):
    v, f = sphere_mesh.vertices, sphere_mesh.faces
    nrm = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    ctr = (v[f[:, 0]] + v[f[:, 1]] + v[f[:, 2]]) / 3
    assert np.all((nrm * ctr).sum(axis=1) > 0)


def test_extraction_deterministic_and_weld_shared(sphere_grid, sphere_mesh):
    again = marching_cubes(sphere_grid, iso=0.0, only_candidates=False)
    assert np.array_equal(again.vertices, sphere_mesh.vertices)
    assert np.array_equal(again.faces, sphere_mesh.faces)
    # welding: vertex count far below 3 * triangle count
    assert sphere_mesh.n_vertices < sphere_mesh.n_triangles


def test_candidate_restricted_extraction_matches_full(sphere_grid, sphere_mesh):
    grid = BakeGrid(SphereSdf([0, 0, 0], 1.0), res=128, materialize=False)
    # flag every cell -> restricted extraction equals the unrestricted one
    n = grid.res - 1
    i, j, k = np.mgrid[0:n, 0:n, 0:n]
    grid.candidates.set_cells(np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1))
    mesh = marching_cubes(grid, iso=0.0, only_candidates=True)
    assert np.array_equal(mesh.vertices, sphere_mesh.vertices)
    assert np.array_equal(mesh.faces, sphere_mesh.faces)


def _orbit_cameras(n=8, radius=3.0, res=64):
    # full-coverage orbit: shallow rings plus steep rings near both poles
    spec = RingSpec(width=res, height_px=res, radius=radius, height=0.0, target=(0, 0, 0), vfov_deg=45)
    ring = camera_ring(spec, n, radius, 1.2, 0.0)
    ring += camera_ring(spec, n, radius, -1.2, np.pi / n)
    ring += camera_ring(spec, n, 1.4, 2.7, np.pi / (2 * n))
    ring += camera_ring(spec, n, 1.4, -2.7, 3 * np.pi / (2 * n))
    return ring


def test_splat_visibility_empty_scene():
    grid = BakeGrid(_Const(3.0), res=48, materialize=False)
    n = splat_visibility(grid, _Const(3.0), _orbit_cameras(2), 0.5, 6.0, DensityParams(0.01), 32)
    assert n == 0


def test_splat_visibility_marks_surface_shell_not_interior():
    field = SphereSdf([0, 0, 0], 1.0)
    grid = BakeGrid(field, res=64, materialize=False)
    params = DensityParams(0.005)
    splat_visibility(grid, field, _orbit_cameras(), 0.5, 6.0, params, n_samples=192)
    assert grid.candidates.count > 0

    # every cell that carries surface triangles must be a candidate
    full = marching_cubes(grid, iso=0.0, only_candidates=False)
    surf_cells = grid.cells_of_points(full.vertices)
    hit = grid.candidates.test_cells(surf_cells)
    assert hit.all()

    # deep interior cells are occluded (weight ~ 0 behind the first crossing)
    center = grid.cells_of_points(np.zeros((1, 3)))
    assert not grid.candidates.test_cells(center)[0]
    restricted = marching_cubes(grid, iso=0.0, only_candidates=True)
    assert restricted.n_triangles == full.n_triangles


def test_bounding_hull_contains_cube_corners_and_candidates():
    n = 16
    ax = (np.arange(n) + 0.5) / n - 0.5
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * ax[-1]
    for seed in range(3):
        hull = build_bounding_hull(pts, seed=seed)
        assert hull.contains(corners).all()
        assert hull.contains(pts).mean() >= 0.9975
        lean = build_bounding_hull(pts, seed=seed, inflate=1.0)
        assert lean.contains(pts).mean() >= 0.9975  # joint coverage before inflation
        assert np.all(hull.offsets >= lean.offsets - 1e-12)  # inflation only enlarges


def test_bounding_hull_is_convex_and_respects_must_contain():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(5000, 3)) * 0.2
    cams = np.array([[1.5, 0, 0.8], [-1.4, 0.2, 0.9]])
    hull = build_bounding_hull(pts, seed=1, must_contain=cams)
    assert hull.contains(cams).all()
    # convexity: midpoints of inside points stay inside
    inside = pts[hull.contains(pts)][:500]
    mids = 0.5 * (inside[:-1] + inside[1:])
    assert hull.contains(mids).all()


def test_clamp_with_hull_closes_domain():
    field = SphereSdf([0, 0, 0], 0.4)
    grid = BakeGrid(field, res=48, materialize=False)
    pts = np.random.default_rng(2).normal(size=(3000, 3)) * 0.15
    hull = build_bounding_hull(pts, seed=2)
    clamp_with_hull(grid, hull)
    plane_mid = grid.plane(grid.res // 2)
    coords = grid.plane_points(grid.res // 2)
    outside = ~hull.contains(coords)
    inside_deep = hull.margin(coords) > 0.3
    # far outside the hull the value is forced negative (solid)
    assert np.all(plane_mid.ravel()[outside & (hull.margin(coords) < -0.05)] < 0)
    # well inside, values match the raw field
    raw = field.value(coords).reshape(plane_mid.shape)
    sel = inside_deep.reshape(plane_mid.shape) & (raw < 0.25)
    assert np.allclose(plane_mid[sel], raw[sel])


def _shell_flag_grid(res=64):
    field = SphereSdf([0, 0, 0], 1.0)
    grid = BakeGrid(field, res=res, materialize=False)
    # flag the true surface shell (cells within one diagonal of the zero set)
    n = res - 1
    i, j, k = np.mgrid[0:n, 0:n, 0:n]
    centers = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1) * grid.h - 2.0 + grid.h / 2
    near = np.abs(field.value(centers)) < grid.h * np.sqrt(3)
    grid.candidates.set_cells(np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)[near])
    return grid


def test_region_grow_fills_injected_hole():
    grid = _shell_flag_grid()
    # punch a 4^3 hole in the candidate flags near the +x pole
    hole_center = grid.cells_of_points(np.array([[1.0, 0.0, 0.0]]))[0]
    flags = grid.candidates
    for dx in range(-2, 2):
        for dy in range(-2, 2):
            for dz in range(-2, 2):
                c = hole_center + [dx, dy, dz]
                flags._grid[c[0], c[1], c[2]] = False
    holey = marching_cubes(grid, iso=0.0, only_candidates=True)
    assert euler_characteristic(holey) != 2  # boundary loop present
    grown = region_grow(grid, holey, iso=0.0, iterations=2)
    assert euler_characteristic(grown) == 2
    assert edge_manifold(grown)
    # grown geometry stays on the iso surface band
    f = SphereSdf([0, 0, 0], 1.0).value(grown.vertices)
    assert np.max(np.abs(f)) < grid.h


def test_region_grow_idempotent_on_full_flags():
    grid = _shell_flag_grid(48)
    mesh = marching_cubes(grid, iso=0.0, only_candidates=True)
    grown = region_grow(grid, mesh, iso=0.0, iterations=3)
    # the shell already covers the whole surface: nothing new appears
    assert grown.n_triangles == mesh.n_triangles


def test_to_world_identity_and_inverse_points():
    mesh = TriangleMesh(
        np.array([[0.5, 0, 0], [1.5, 0, 0], [0.5, 0.1, 0]]), np.array([[0, 1, 2]])
    )
    world = to_world(mesh)
    assert np.allclose(world.vertices[0], [0.5, 0, 0])
    assert np.allclose(world.vertices[1], [2.0, 0, 0])
    assert world.contracted is not None
    bad = TriangleMesh(np.array([[2.0, 0, 0], [0, 0, 0], [0, 0.1, 0]]), np.array([[0, 1, 2]]))
    with pytest.raises(ValueError):
        to_world(bad)


def test_world_triangle_area_grows_with_contracted_norm():
    # identical small triangles placed at increasing contracted radius
    areas = []
    for rad in (0.5, 1.0, 1.5, 1.9):
        base = np.array([rad, 0.0, 0.0])
        tri = np.array([base, base + [1e-3, 1e-3, 0], base + [0, 1e-3, 1e-3]])
        world = to_world(TriangleMesh(tri, np.array([[0, 1, 2]])))
        areas.append(world.triangle_areas()[0])
    assert all(a2 > a1 for a1, a2 in zip(areas, areas[1:]))
    assert areas[-1] / areas[0] > 100  # orders of magnitude at the periphery


def test_bmsh_roundtrip_and_obj_export(tmp_path, sphere_mesh):
    world = to_world(sphere_mesh)
    p = tmp_path / "m.bmsh"
    world.save_bmsh(p)
    back = TriangleMesh.load_bmsh(p)
    assert np.array_equal(back.faces, world.faces)
    assert np.allclose(back.vertices, world.vertices, atol=1e-6)
    assert np.allclose(back.contracted, world.contracted, atol=1e-7)
    world.save_obj(tmp_path / "m.obj")
    head = (tmp_path / "m.obj").read_text().splitlines()[0]
    assert head.startswith("v ")
    with pytest.raises(ValueError):
        TriangleMesh.load_bmsh(tmp_path / "m.obj")


def test_morton_sort_preserves_topology(sphere_mesh):
    sorted_mesh = morton_sort(sphere_mesh)
    assert sorted_mesh.n_vertices == sphere_mesh.n_vertices
    assert edge_manifold(sorted_mesh)
    a = sphere_mesh.vertices[sphere_mesh.faces].sum(axis=1)
    b = sorted_mesh.vertices[sorted_mesh.faces].sum(axis=1)
    assert np.allclose(np.sort(a, axis=0), np.sort(b, axis=0))


def test_cell_flags_sparse_matches_dense():
    rng = np.random.default_rng(3)
    cells = rng.integers(0, 31, size=(500, 3))
    dense = CellFlags(32)
    sparse = CellFlags(32)
    sparse.dense = False
    sparse._ids = np.empty(0, dtype=np.int64)
    dense.set_cells(cells)
    sparse.set_cells(cells)
    assert dense.count == sparse.count
    probe = rng.integers(0, 31, size=(200, 3))
    assert np.array_equal(dense.test_cells(probe), sparse.test_cells(probe))
    for k in (0, 7, 31 - 1):
        assert np.array_equal(dense.plane_mask(k), sparse.plane_mask(k))
    assert np.array_equal(
        np.sort(dense.cell_indices().view([("", np.int64)] * 3), axis=0),
        np.sort(sparse.cell_indices().view([("", np.int64)] * 3), axis=0),
    )
