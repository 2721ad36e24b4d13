"""Analytic test scenes: declaration file, shading model, and exact renderer.

A scene is a CSG tree of exact-distance primitives plus per-primitive
materials and one directional light.  The renderer sphere-traces the scene
SDF, which is conservative in world space because evaluation happens in
contracted coordinates and the contraction never expands distances.  These
renders are the ground truth that the volumetric trainer and the baked mesh
are measured against.

Scene files are plain JSON, e.g.::

    {
      "name": "ball",
      "background": [0, 0, 0],
      "light": {"direction": [-0.5, 0.3, 0.8], "ambient": 0.3, "diffuse": 0.7},
      "materials": [{"name": "red", "albedo": [0.7, 0.2, 0.15]}],
      "root": {"shape": "sphere", "center": [0, 0, 0.5], "radius": 0.5,
               "material": "red"}
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .cameras import Camera
from .contraction import contract
from .fields import CsgIntersection, CsgUnion, PlaneSdf, SphereSdf

__all__ = ["Material", "Light", "AnalyticScene", "load_scene", "sphere_trace", "render_scene"]


@dataclass
class Material:
    name: str
    albedo: np.ndarray
    specular: np.ndarray | None = None  # RGB strength of the Phong lobe
    shininess: float = 32.0


@dataclass
class Light:
    """One directional light; ``direction`` points from the surface toward it."""

    direction: np.ndarray
    ambient: float = 0.3
    diffuse: float = 0.7


@dataclass
class AnalyticScene:
    name: str
    root: object  # SDF tree with material_ids()
    materials: list[Material]
    light: Light
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))


def _parse_node(node: dict, mat_index: dict[str, int]):
    if "op" in node:
        children = [_parse_node(c, mat_index) for c in node["children"]]
        if node["op"] == "union":
            return CsgUnion(children)
        if node["op"] == "intersection":
            return CsgIntersection(children)
        raise ValueError(f"unknown CSG op {node['op']!r}")
    mat = mat_index[node["material"]]
    if node["shape"] == "sphere":
        return SphereSdf(node["center"], node["radius"], material=mat)
    if node["shape"] == "plane":
        return PlaneSdf(node["normal"], node["offset"], material=mat)
    raise ValueError(f"unknown shape {node['shape']!r}")


def load_scene(path) -> AnalyticScene:
    doc = json.loads(Path(path).read_text())
    materials = []
    mat_index = {}
    for m in doc["materials"]:
        spec = m.get("specular")
        materials.append(
            Material(
                name=m["name"],
                albedo=np.asarray(m["albedo"], dtype=np.float64),
                specular=None if spec is None else np.asarray(spec, dtype=np.float64),
                shininess=float(m.get("shininess", 32.0)),
            )
        )
        mat_index[m["name"]] = len(materials) - 1
    light = doc.get("light", {})
    ld = np.asarray(light.get("direction", [0.0, 0.0, 1.0]), dtype=np.float64)
    return AnalyticScene(
        name=doc.get("name", "scene"),
        root=_parse_node(doc["root"], mat_index),
        materials=materials,
        light=Light(ld / np.linalg.norm(ld), light.get("ambient", 0.3), light.get("diffuse", 0.7)),
        background=np.asarray(doc.get("background", [0, 0, 0]), dtype=np.float64),
    )


def sphere_trace(scene_root, origins, dirs, t_max, eps=1e-8, max_steps=512):
    """March rays against the contracted-space SDF.

    Steps by the contracted distance, which never overshoots in world space.
    Returns (hit mask, hit distance).  Rays that leave ``t_max`` or fail to
    converge are misses.
    """
    n = origins.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        p = origins[idx] + t[idx, None] * dirs[idx]
        d = scene_root.value(contract(p))
        converged = d < eps
        hit[idx[converged]] = True
        active[idx[converged]] = False
        t[idx] += np.maximum(d, 0.0)
        escaped = t[idx] > t_max
        active[idx[escaped]] = False
    return hit, t


def _shade(scene: AnalyticScene, points, normals, view_dirs, mats, shadowed):
    """Lambert + Phong with hard shadows on the direct term."""
    L = scene.light.direction
    ndl = np.maximum(normals @ L, 0.0)
    ndl = np.where(shadowed, 0.0, ndl)
    albedo = np.stack([scene.materials[m].albedo for m in mats])
    color = albedo * (scene.light.ambient + scene.light.diffuse * ndl[:, None])
    refl = 2.0 * ndl[:, None] * normals - L  # mirror of the light about the normal
    spec_any = False
    spec = np.zeros_like(color)
    for i, mat in enumerate(scene.materials):
        if mat.specular is None:
            continue
        spec_any = True
        sel = mats == i
        rv = np.maximum((refl[sel] * view_dirs[sel]).sum(axis=1), 0.0)
        spec[sel] = mat.specular[None, :] * (rv ** mat.shininess)[:, None]
    if spec_any:
        color = color + np.where(shadowed[:, None], 0.0, spec)
    return np.clip(color, 0.0, 1.0)


def render_scene(scene: AnalyticScene, camera: Camera, t_max: float = 200.0, supersample: int = 2):
    """Exact render of an analytic scene; returns (pixels, hit_t image).

    ``supersample`` jitter-free subpixel grid, box-filtered down.
    """
    H, W, s = camera.height, camera.width, supersample
    sub = Camera(
        width=W * s,
        height=H * s,
        focal=camera.focal * s,
        cx=camera.cx * s,
        cy=camera.cy * s,
        cam_to_world=camera.cam_to_world,
    )
    o, d = sub.rays()
    hit, t = sphere_trace(scene.root, o, d, t_max)
    img = np.tile(scene.background, (o.shape[0], 1))
    if np.any(hit):
        p = o[hit] + t[hit, None] * d[hit]
        q = contract(p)
        g = scene.root.gradient(q)
        normals = g / np.linalg.norm(g, axis=1, keepdims=True)
        mats = scene.root.material_ids(q)
        # shadow ray toward the light, offset off the surface
        shadow_o = p + 1e-4 * normals
        shadow_hit, _ = sphere_trace(
            scene.root, shadow_o, np.broadcast_to(scene.light.direction, p.shape), t_max
        )
        img[hit] = _shade(scene, p, normals, -d[hit], mats, shadow_hit)
    img = img.reshape(H, s, W, s, 3).mean(axis=(1, 3))
    t_img = np.where(hit, t, np.inf).reshape(H, s, W, s).min(axis=(1, 3))
    return img, t_img
