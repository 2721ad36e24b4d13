import numpy as np
import pytest

from volbake.cameras import Camera
from volbake.fields import SphereSdf
from volbake.mesh import TriangleMesh
from volbake.meshing import BakeGrid, marching_cubes, to_world
from volbake.raster import cache_hit_table, rasterize_view


def _cam(res=64, focal=None, pos=(0, 0, 0)):
    f = focal if focal is not None else res / 2
    pose = np.concatenate([np.eye(3), np.asarray(pos, dtype=float)[:, None]], axis=1)
    return Camera(res, res, f, res / 2, res / 2, pose)


def test_screen_filling_triangle_hits_everywhere():
    mesh = TriangleMesh(np.array([[-9, -9, 3], [9, -9, 3], [0, 14, 3]]), np.array([[0, 1, 2]]))
    vc = rasterize_view(mesh, _cam(48))
    assert vc.hit_mask.all()
    s = vc.bary.sum(axis=2)
    assert np.allclose(s, 1.0, atol=1e-5)


def test_depth_test_nearer_triangle_wins():
    verts = np.array(
        [[-9, -9, 4], [9, -9, 4], [0, 14, 4], [-9, -9, 2], [9, -9, 2], [0, 14, 2]], dtype=float
    )
    mesh = TriangleMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
    vc = rasterize_view(mesh, _cam(32))
    assert np.all(vc.tri_id[vc.hit_mask] == 1)


def test_equal_depth_lower_triangle_id_wins():
    verts = np.array(
        [[-9, -9, 3], [9, -9, 3], [0, 14, 3], [-9, -9, 3], [9, -9, 3], [0, 14, 3]], dtype=float
    )
    mesh = TriangleMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
    vc = rasterize_view(mesh, _cam(16))
    assert np.all(vc.tri_id[vc.hit_mask] == 0)


def test_perspective_correct_barycentrics_reproject():
    # slanted triangle with depth range; interpolated points must lie on pixel rays
    mesh = TriangleMesh(np.array([[-4, -4, 2], [6, -2, 9], [0, 7, 4]]), np.array([[0, 1, 2]]))
    cam = _cam(64)
    vc = rasterize_view(mesh, cam)
    ii, jj = np.nonzero(vc.hit_mask)
    b = vc.bary[ii, jj].astype(np.float64)
    pts = np.einsum("nk,nkd->nd", b, mesh.vertices[mesh.faces[vc.tri_id[ii, jj]]])
    u = cam.focal * pts[:, 0] / pts[:, 2] + cam.cx
    v = cam.focal * pts[:, 1] / pts[:, 2] + cam.cy
    assert np.abs(u - (jj + 0.5)).max() < 1e-4
    assert np.abs(v - (ii + 0.5)).max() < 1e-4


def test_near_plane_straddling_triangle_is_clipped():
    # ground-plane-like triangle extending behind the camera
    mesh = TriangleMesh(
        np.array([[0, 1.0, -5.0], [-8, 1.0, 10.0], [8, 1.0, 10.0]]), np.array([[0, 1, 2]])
    )
    vc = rasterize_view(mesh, _cam(48))
    assert vc.hit_mask.any()
    b = vc.bary[vc.hit_mask]
    assert np.all(b > -1e-5)
    assert np.allclose(b.sum(axis=1), 1.0, atol=1e-4)
    table = cache_hit_table([vc], mesh)
    # every reconstructed surface point sits in front of the camera
    assert np.all(
        np.einsum("nk,nkd->nd", table["bary"], mesh.vertices[mesh.faces[vc.tri_id[vc.hit_mask]]])[:, 2]
        > 0
    )


def closed_form_sphere_hit_mask(cam, center, radius):
    o, d = cam.rays()
    oc = o - center
    b = (oc * d).sum(axis=1)
    disc = b**2 - ((oc**2).sum(axis=1) - radius**2)
    hit = (disc >= 0) & (-b - np.sqrt(np.maximum(disc, 0)) > 0)
    return hit.reshape(cam.height, cam.width)


def test_sphere_mesh_hit_mask_matches_ray_cast():
    grid = BakeGrid(SphereSdf([0, 0, 0], 1.0), res=96, materialize=False)
    mesh = to_world(marching_cubes(grid, iso=0.0, only_candidates=False))
    pose = Camera.look_at(np.array([0.0, -3.5, 0.0]), np.array([0.0, 0.0, 0.0]))
    cam = Camera(256, 256, 300.0, 128, 128, pose)
    vc = rasterize_view(mesh, cam)
    exact = closed_form_sphere_hit_mask(cam, np.zeros(3), 1.0)
    agreement = (vc.hit_mask == exact).mean()
    assert agreement > 0.99


def test_rasterize_rejects_empty_mesh():
    with pytest.raises(ValueError):
        rasterize_view(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64)), _cam(8))


def test_rasterization_deterministic():
    grid = BakeGrid(SphereSdf([0, 0, 0], 1.0), res=48, materialize=False)
    mesh = to_world(marching_cubes(grid, iso=0.0, only_candidates=False))
    cam = Camera(64, 64, 80.0, 32, 32, Camera.look_at([0, -3, 0.5], [0, 0, 0]))
    a = rasterize_view(mesh, cam)
    b = rasterize_view(mesh, cam)
    assert np.array_equal(a.tri_id, b.tri_id)
    assert np.array_equal(a.bary, b.bary)
