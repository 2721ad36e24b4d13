"""Software rasterization of triangle meshes into per-pixel vertex lookups.

The appearance stage never textures the mesh; instead each training pixel is
resolved once to (triangle id, three vertex indices, perspective-correct
barycentric weights) and optimization replays that table.  Rasterization is a
plain z-buffer scan over triangle bounding boxes, with triangles straddling
the near plane clipped in homogeneous camera space first.  Triangles are
processed in index order and the depth test is a strict less-than, so equal
depths resolve to the lowest triangle id deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .cameras import Camera
from .mesh import TriangleMesh

__all__ = ["ViewCache", "rasterize_view", "rasterize_views", "cache_hit_table"]

_NEAR_CLIP = 1e-3


@dataclass
class ViewCache:
    """Per-pixel rasterization result for one camera."""

    tri_id: np.ndarray  # (H, W) int32, -1 on miss
    bary: np.ndarray  # (H, W, 3) float32, parent-triangle barycentrics
    camera: Camera

    @property
    def hit_mask(self) -> np.ndarray:
        return self.tri_id >= 0


@numba.njit(cache=True)
def _raster_kernel(pts, tris, parent, pbary, W, H, focal, cx, cy, depth, tid_img, bary_img):
    for t in range(tris.shape[0]):
        ia, ib, ic = tris[t, 0], tris[t, 1], tris[t, 2]
        ax, ay, az = pts[ia, 0], pts[ia, 1], pts[ia, 2]
        bx, by, bz = pts[ib, 0], pts[ib, 1], pts[ib, 2]
        cx3, cy3, cz = pts[ic, 0], pts[ic, 1], pts[ic, 2]
        # screen positions
        sax = focal * ax / az + cx
        say = focal * ay / az + cy
        sbx = focal * bx / bz + cx
        sby = focal * by / bz + cy
        scx = focal * cx3 / cz + cx
        scy = focal * cy3 / cz + cy
        area = (sbx - sax) * (scy - say) - (sby - say) * (scx - sax)
        if area == 0.0:
            continue
        x0 = max(int(np.floor(min(sax, sbx, scx) - 0.5)), 0)
        x1 = min(int(np.ceil(max(sax, sbx, scx) + 0.5)), W - 1)
        y0 = max(int(np.floor(min(say, sby, scy) - 0.5)), 0)
        y1 = min(int(np.ceil(max(say, sby, scy) + 0.5)), H - 1)
        if x1 < x0 or y1 < y0:
            continue
        inv_area = 1.0 / area
        iza, izb, izc = 1.0 / az, 1.0 / bz, 1.0 / cz
        for py in range(y0, y1 + 1):
            sy = py + 0.5
            for px in range(x0, x1 + 1):
                sx = px + 0.5
                w0 = ((sbx - sx) * (scy - sy) - (sby - sy) * (scx - sx)) * inv_area
                w1 = ((scx - sx) * (say - sy) - (scy - sy) * (sax - sx)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                # perspective-correct interpolation
                denom = w0 * iza + w1 * izb + w2 * izc
                z = 1.0 / denom
                if z < depth[py, px]:
                    depth[py, px] = z
                    tid_img[py, px] = parent[t]
                    c0 = w0 * iza * z
                    c1 = w1 * izb * z
                    c2 = w2 * izc * z
                    for k in range(3):
                        bary_img[py, px, k] = (
                            c0 * pbary[t, 0, k] + c1 * pbary[t, 1, k] + c2 * pbary[t, 2, k]
                        )


def _clip_near(cam_pts: np.ndarray, faces: np.ndarray):
    """Split triangles against the z=near plane in camera space.

    Returns (points (k,3), triangles (m,3) into points, parent face ids (m,),
    parent barycentrics (m,3,3)).  Sub-triangle vertices carry barycentric
    coordinates of their parent so the cache stores original-vertex weights.
    """
    z = cam_pts[:, 2]
    tri_z = z[faces]
    front = (tri_z > _NEAR_CLIP).all(axis=1)
    behind = (tri_z <= _NEAR_CLIP).all(axis=1)
    straddle = np.nonzero(~front & ~behind)[0]

    pts_out = [cam_pts]
    tris_out = [faces[front]]
    parent_out = [np.nonzero(front)[0]]
    eye = np.eye(3)
    pbary_out = [np.broadcast_to(eye, (int(front.sum()), 3, 3)).copy()]

    extra_pts, extra_tris, extra_parent, extra_bary = [], [], [], []
    base = len(cam_pts)
    for f in straddle:
        vid = faces[f]
        poly_p, poly_b = [], []
        for i in range(3):
            a, b = vid[i], vid[(i + 1) % 3]
            pa, pb = cam_pts[a], cam_pts[b]
            ba, bb = eye[i], eye[(i + 1) % 3]
            if pa[2] > _NEAR_CLIP:
                poly_p.append(pa)
                poly_b.append(ba)
            if (pa[2] > _NEAR_CLIP) != (pb[2] > _NEAR_CLIP):
                t = (_NEAR_CLIP - pa[2]) / (pb[2] - pa[2])
                poly_p.append(pa + t * (pb - pa))
                poly_b.append(ba + t * (bb - ba))
        for k in range(1, len(poly_p) - 1):
            extra_pts.extend([poly_p[0], poly_p[k], poly_p[k + 1]])
            extra_bary.append(np.stack([poly_b[0], poly_b[k], poly_b[k + 1]]))
            extra_tris.append([base, base + 1, base + 2])
            extra_parent.append(f)
            base += 3
    if extra_pts:
        pts_out.append(np.asarray(extra_pts))
        tris_out.append(np.asarray(extra_tris, dtype=np.int64))
        parent_out.append(np.asarray(extra_parent, dtype=np.int64))
        pbary_out.append(np.asarray(extra_bary))
    return (
        np.concatenate(pts_out),
        np.concatenate(tris_out),
        np.concatenate(parent_out),
        np.concatenate(pbary_out),
    )


def rasterize_view(mesh: TriangleMesh, camera: Camera) -> ViewCache:
    if mesh.n_triangles == 0:
        raise ValueError("cannot rasterize an empty mesh")
    R, t = camera.rotation, camera.position
    cam_pts = (mesh.vertices - t) @ R
    pts, tris, parent, pbary = _clip_near(cam_pts, mesh.faces)
    H, W = camera.height, camera.width
    depth = np.full((H, W), np.inf)
    tid = np.full((H, W), -1, dtype=np.int32)
    bary = np.zeros((H, W, 3), dtype=np.float32)
    # order sub-triangles by parent id so ties still favor lower original ids
    order = np.argsort(parent, kind="stable")
    _raster_kernel(
        np.ascontiguousarray(pts),
        np.ascontiguousarray(tris[order]),
        np.ascontiguousarray(parent[order].astype(np.int32)),
        np.ascontiguousarray(pbary[order]),
        W, H, camera.focal, camera.cx, camera.cy, depth, tid, bary,
    )
    return ViewCache(tid, bary, camera)


def rasterize_views(mesh: TriangleMesh, cameras: list[Camera]) -> list[ViewCache]:
    return [rasterize_view(mesh, cam) for cam in cameras]


def cache_hit_table(caches: list[ViewCache], mesh: TriangleMesh, images=None):
    """Flatten caches into per-hit-pixel arrays for fitting.

    Returns dict with vertex ids (n,3), barycentrics (n,3), view directions
    (n,3, surface point toward camera), ground-truth colors (n,3) when images
    are given, plus miss-pixel colors.
    """
    vids, barys, dirs, gts, miss_gts = [], [], [], [], []
    for vi, vc in enumerate(caches):
        hits = vc.hit_mask
        tid = vc.tri_id[hits]
        b = vc.bary[hits].astype(np.float64)
        vid = mesh.faces[tid]
        pts = np.einsum("nk,nkd->nd", b, mesh.vertices[vid])
        d = vc.camera.position[None, :] - pts
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        vids.append(vid)
        barys.append(b)
        dirs.append(d)
        if images is not None:
            px = images[vi].pixels.reshape(-1, 3)
            flat = hits.reshape(-1)
            gts.append(px[flat])
            miss_gts.append(px[~flat])
    out = {
        "vertex_ids": np.concatenate(vids),
        "bary": np.concatenate(barys),
        "view_dirs": np.concatenate(dirs),
    }
    if images is not None:
        out["gt"] = np.concatenate(gts)
        out["miss_gt"] = (
            np.concatenate(miss_gts) if any(len(m) for m in miss_gts) else np.zeros((0, 3))
        )
    return out
