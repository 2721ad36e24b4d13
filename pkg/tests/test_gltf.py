import gzip

import numpy as np
import pytest

from volbake.appearance import VertexAppearance, quantize_levels, render_baked
from volbake.gltf import FORMAT_VERSION, export_gltf, load_gltf
from volbake.cameras import Camera
from volbake.mesh import TriangleMesh


def _cube_mesh(scale=0.4, offset=(0, 0, 0)):
    v = np.array(
        [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64
    ) * scale + np.asarray(offset)
    f = np.array(
        [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    )
    return TriangleMesh(v, f, contracted=v.copy())


def _random_app(mesh, rng, center_mask=None, lam=40.0):
    n = mesh.n_vertices
    is_center = (
        np.linalg.norm(mesh.contracted, axis=1) <= 1.0 if center_mask is None else center_mask
    )
    lobe_count = np.where(is_center, 3, 1)
    mu = rng.normal(size=(n, 3, 3))
    mu /= np.linalg.norm(mu, axis=2, keepdims=True)
    return VertexAppearance(
        diffuse=rng.random((n, 3)),
        mu=mu,
        color=rng.random((n, 3, 3)) * 0.5,
        width=rng.uniform(0, lam, (n, 3)),
        lobe_mask=np.arange(3)[None, :] < lobe_count[:, None],
        is_center=is_center,
        lambda_max=lam,
    )


def test_cube_accessor_lengths(tmp_path):
    mesh = _cube_mesh()
    rng = np.random.default_rng(0)
    app = _random_app(mesh, rng)
    path = export_gltf(mesh, app, [0.1, 0.2, 0.3], tmp_path / "cube.glb")
    asset = load_gltf(path)
    assert len(asset.regions) == 1  # fully central cube -> one primitive
    assert asset.regions[0]["lobes"] == 3
    for key in ("position", "diffuse_levels", "mu_levels", "color_levels", "width_levels"):
        assert len(asset.regions[0][key]) == 8
    assert asset.mesh.n_vertices == 8
    assert asset.mesh.n_triangles == 12


def test_decoded_attributes_equal_training_levels(tmp_path):
    mesh = _cube_mesh()
    rng = np.random.default_rng(1)
    app = _random_app(mesh, rng)
    path = export_gltf(mesh, app, [0, 0, 0], tmp_path / "a.glb.gz")
    asset = load_gltf(path)
    q = app.quantized()
    assert np.array_equal(asset.appearance.diffuse, q.diffuse)
    assert np.array_equal(asset.appearance.mu, q.mu)
    assert np.array_equal(asset.appearance.color, q.color)
    assert np.array_equal(asset.appearance.width, q.width)
    # and the raw stored bytes are exactly the quantizer's levels
    assert np.array_equal(asset.regions[0]["diffuse_levels"], quantize_levels(app.diffuse, 0, 1))


def test_reexport_is_byte_identical(tmp_path):
    mesh = _cube_mesh()
    rng = np.random.default_rng(2)
    app = _random_app(mesh, rng)
    p1 = export_gltf(mesh, app, [0.5, 0.25, 0.125], tmp_path / "a.glb")
    asset = load_gltf(p1)
    p2 = export_gltf(asset.mesh, asset.appearance, asset.clear_color, tmp_path / "b.glb")
    assert p1.read_bytes() == p2.read_bytes()


def test_gzip_container_roundtrip(tmp_path):
    mesh = _cube_mesh()
    app = _random_app(mesh, np.random.default_rng(3))
    pz = export_gltf(mesh, app, [0, 0, 0], tmp_path / "a.glb.gz")
    p = export_gltf(mesh, app, [0, 0, 0], tmp_path / "a.glb")
    assert gzip.decompress(pz.read_bytes()) == p.read_bytes()
    asset = load_gltf(pz)
    assert asset.lobes_center == 3


def test_region_split_exports_two_primitives(tmp_path):
    # cube straddling the unit sphere: some vertices central, some peripheral
    mesh = _cube_mesh(scale=0.5, offset=(0.8, 0, 0))
    app = _random_app(mesh, np.random.default_rng(4))
    assert app.is_center.any() and (~app.is_center).any()
    path = export_gltf(mesh, app, [0, 0, 0], tmp_path / "split.glb")
    asset = load_gltf(path)
    names = {r["region"] for r in asset.regions}
    assert names == {"center", "periphery"}
    meta = {r["region"]: r for r in asset.regions}
    assert meta["center"]["lobes"] == 3
    assert meta["periphery"]["lobes"] == 1
    # per-vertex payload: periphery vertices are strictly smaller
    c, p = meta["center"], meta["periphery"]
    bytes_center = 12 + 4 + c["lobes"] * 8 + 4
    bytes_periph = 12 + 4 + p["lobes"] * 8 + 4
    assert bytes_periph < bytes_center
    # triangle count is conserved across the split
    assert sum(len(r["faces"]) for r in asset.regions) == mesh.n_triangles


def test_loaded_asset_renders_identically(tmp_path):
    # coordinates exactly representable in float32, as pipeline meshes are
    # (the bake stage persists f32 positions before appearance fitting)
    mesh = _cube_mesh(scale=0.5, offset=(0.75, 0, 0))
    app = _random_app(mesh, np.random.default_rng(5))
    clear = np.array([0.02, 0.04, 0.08])
    path = export_gltf(mesh, app, clear, tmp_path / "r.glb")
    asset = load_gltf(path)
    cam = Camera(96, 96, 110.0, 48, 48, Camera.look_at([3.2, -2.0, 1.5], [0.75, 0, 0]))
    a = render_baked(mesh, app, clear, cam)
    b = render_baked(asset.mesh, asset.appearance, asset.clear_color, cam)
    assert np.array_equal(a, b)


def test_malformed_files_rejected(tmp_path):
    bad = tmp_path / "bad.glb"
    bad.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_gltf(bad)
    mesh = _cube_mesh()
    app = _random_app(mesh, np.random.default_rng(6))
    p = export_gltf(mesh, app, [0, 0, 0], tmp_path / "ok.glb")
    data = p.read_bytes()
    trunc = tmp_path / "trunc.glb"
    trunc.write_bytes(data[: len(data) // 2])
    with pytest.raises(ValueError):
        load_gltf(trunc)
