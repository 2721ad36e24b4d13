"""Baking a field into a triangle mesh.

The pipeline samples the field on a regular lattice over the contracted cube
[-2, 2]^3, keeps only cells that received rendering weight from training rays
(visibility culling), closes the domain with bounding geometry, triangulates
iso-crossings with marching cubes, grows the surface outward to fill holes
left by culling, and finally maps vertices to world space.

Grid planes are produced on demand so large resolutions never materialize the
full value volume; cell flags switch to a sorted sparse set at resolutions
where a dense boolean grid would not fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contraction import contract, uncontract
from .density import DensityParams, density_from_sdf
from .mc_tables import (
    CORNER_OFFSETS,
    EDGE_AXIS,
    EDGE_CORNERS,
    EDGE_TABLE,
    TRI_COUNT,
    TRI_TABLE,
)
from .mesh import TriangleMesh
from .rendering import deltas_from_ts, stratified_ts

__all__ = [
    "CellFlags",
    "BakeGrid",
    "splat_visibility",
    "BoundingHull",
    "build_bounding_hull",
    "clamp_with_hull",
    "marching_cubes",
    "region_grow",
    "to_world",
]

GRID_EXTENT = 2.0  # contracted cube is [-extent, extent]^3
_DENSE_FLAG_LIMIT = 1025  # above this, cell flags go sparse

# grid values exactly at the iso level get nudged outward by this much
ISO_TIEBREAK = 1e-12


class CellFlags:
    """Boolean flags over the (res-1)^3 cell lattice, dense or sparse.

    Linear ids are z-major (``(k * n + i) * n + j``) so one z-plane of flags
    is a contiguous id range.
    """

    def __init__(self, res: int):
        self.n = res - 1
        self.dense = res <= _DENSE_FLAG_LIMIT
        if self.dense:
            self._grid = np.zeros((self.n,) * 3, dtype=bool)  # indexed [i, j, k]
        else:
            self._ids = np.empty(0, dtype=np.int64)

    def _linear(self, cells: np.ndarray) -> np.ndarray:
        i, j, k = cells[:, 0], cells[:, 1], cells[:, 2]
        return (k.astype(np.int64) * self.n + i) * self.n + j

    def set_cells(self, cells: np.ndarray) -> None:
        if cells.size == 0:
            return
        if self.dense:
            self._grid[cells[:, 0], cells[:, 1], cells[:, 2]] = True
        else:
            self._ids = np.union1d(self._ids, self._linear(cells))

    def test_cells(self, cells: np.ndarray) -> np.ndarray:
        if self.dense:
            return self._grid[cells[:, 0], cells[:, 1], cells[:, 2]]
        ids = self._linear(cells)
        pos = np.searchsorted(self._ids, ids)
        pos = np.minimum(pos, max(self._ids.size - 1, 0))
        return (self._ids.size > 0) & (self._ids[pos] == ids) if self._ids.size else np.zeros(len(cells), bool)

    def plane_mask(self, k: int) -> np.ndarray:
        if self.dense:
            return self._grid[:, :, k]
        lo = np.searchsorted(self._ids, k * self.n * self.n)
        hi = np.searchsorted(self._ids, (k + 1) * self.n * self.n)
        mask = np.zeros((self.n, self.n), dtype=bool)
        local = self._ids[lo:hi] - k * self.n * self.n
        mask[local // self.n, local % self.n] = True
        return mask

    def cell_indices(self) -> np.ndarray:
        """(n, 3) integer coordinates of all set cells."""
        if self.dense:
            i, j, k = np.nonzero(self._grid)
            return np.stack([i, j, k], axis=1)
        ids = self._ids
        k = ids // (self.n * self.n)
        r = ids % (self.n * self.n)
        return np.stack([r // self.n, r % self.n, k], axis=1)

    @property
    def count(self) -> int:
        return int(self._grid.sum()) if self.dense else self._ids.size

    def copy(self) -> "CellFlags":
        out = CellFlags.__new__(CellFlags)
        out.n = self.n
        out.dense = self.dense
        if self.dense:
            out._grid = self._grid.copy()
        else:
            out._ids = self._ids.copy()
        return out


@dataclass
class BoundingHull:
    """Convex intersection of half-spaces plus an outer sphere, in contracted space."""

    normals: np.ndarray  # (n_planes, 3) unit
    offsets: np.ndarray  # (n_planes,)
    sphere_radius_world: float = 500.0

    @property
    def sphere_radius_contracted(self) -> float:
        return 2.0 - 1.0 / self.sphere_radius_world

    def margin(self, q: np.ndarray) -> np.ndarray:
        """Positive inside the hull-and-sphere intersection, negative outside."""
        plane_m = (self.offsets[None, :] - q @ self.normals.T).min(axis=1)
        sphere_m = self.sphere_radius_contracted - np.linalg.norm(q, axis=-1)
        return np.minimum(plane_m, sphere_m)

    def contains(self, q: np.ndarray) -> np.ndarray:
        return self.margin(q) >= 0.0


class BakeGrid:
    """Field values on the corner lattice of [-2, 2]^3 plus per-cell flags.

    ``plane(k)`` yields corner values of the z=k plane with all registered
    clamps applied; for network fields the raw values are materialized once
    (float32) because they are reused heavily during region growing.
    """

    def __init__(self, field, res: int = 256, materialize: bool | None = None):
        if res < 2:
            raise ValueError("grid needs at least 2 corners per axis")
        self.field = field
        self.res = res
        self.h = 2 * GRID_EXTENT / (res - 1)
        self.candidates = CellFlags(res)
        self.extracted = CellFlags(res)
        self._clamps: list = []
        if materialize is None:
            materialize = hasattr(field, "net")
        self._values = None
        if materialize:
            self._materialize()

    def axis_coords(self) -> np.ndarray:
        return -GRID_EXTENT + self.h * np.arange(self.res)

    def plane_points(self, k: int) -> np.ndarray:
        ax = self.axis_coords()
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        Z = np.full_like(X, ax[k])
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def _materialize(self) -> None:
        R = self.res
        vals = np.empty((R, R, R), dtype=np.float32)
        for k in range(R):
            vals[:, :, k] = np.asarray(
                self.field.value(self.plane_points(k)), dtype=np.float32
            ).reshape(R, R)
        self._values = vals

    def add_clamp(self, margin_fn) -> None:
        self._clamps.append(margin_fn)

    def plane(self, k: int, iso: float | None = None) -> np.ndarray:
        if self._values is not None:
            v = self._values[:, :, k].astype(np.float64)
        else:
            v = np.asarray(self.field.value(self.plane_points(k)), dtype=np.float64).reshape(
                self.res, self.res
            )
        for margin in self._clamps:
            v = np.minimum(v, margin(self.plane_points(k)).reshape(self.res, self.res))
        if iso is not None:
            v = np.where(v == iso, iso + ISO_TIEBREAK, v)
        return v

    def cells_of_points(self, q: np.ndarray) -> np.ndarray:
        """Containing cell of each contracted point (nearest-cell assignment)."""
        cells = np.floor((q + GRID_EXTENT) / self.h).astype(np.int64)
        return np.clip(cells, 0, self.res - 2)


def splat_visibility(
    grid: BakeGrid,
    field,
    cameras,
    near: float,
    far: float,
    params: DensityParams,
    n_samples: int = 128,
    weight_threshold: float = 0.005,
    chunk: int = 8192,
) -> int:
    """Flag cells hit by training-ray samples with rendering weight above threshold.

    Returns the number of candidate cells after splatting.
    """
    for cam in cameras:
        o_all, d_all = cam.rays()
        for s in range(0, o_all.shape[0], chunk):
            o, d = o_all[s : s + chunk], d_all[s : s + chunk]
            ts = stratified_ts(near, far, n_samples, o.shape[0])
            pts = o[:, None, :] + ts[..., None] * d[:, None, :]
            q = contract(pts.reshape(-1, 3))
            f = np.asarray(field.value(q), dtype=np.float64).reshape(ts.shape)
            od = density_from_sdf(f, params) * deltas_from_ts(ts, near)
            acc = np.cumsum(od, axis=-1)
            weights = np.exp(-(acc - od)) * -np.expm1(-od)
            sel = (weights > weight_threshold).reshape(-1)
            if np.any(sel):
                grid.candidates.set_cells(grid.cells_of_points(q[sel]))
    return grid.candidates.count


def build_bounding_hull(
    candidate_centers: np.ndarray,
    n_planes: int = 32,
    coverage: float = 0.9975,
    inflate: float = 1.025,
    seed: int = 0,
    sphere_radius_world: float = 500.0,
    must_contain: np.ndarray | None = None,
) -> BoundingHull:
    """Fit randomly oriented planes around the candidate cloud.

    Each plane offset is a quantile of the candidate projections along its
    normal; the per-plane level is calibrated as ``1 - (1-coverage)/n_planes``
    so the finished hull jointly bounds at least the ``coverage`` fraction of
    candidates.  The hull is then inflated about the candidate centroid and
    finally pushed out to contain ``must_contain`` points (the training
    cameras ride along so the baked shell never occludes them).
    """
    if candidate_centers.shape[0] == 0:
        raise ValueError("cannot fit a bounding hull to zero candidate cells")
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n_planes, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    proj = candidate_centers @ normals.T
    offsets = np.quantile(proj, 1.0 - (1.0 - coverage) / n_planes, axis=0)
    centroid = candidate_centers.mean(axis=0)
    center_proj = normals @ centroid
    offsets = center_proj + (offsets - center_proj) * inflate
    if must_contain is not None and len(must_contain):
        extra = (must_contain @ normals.T).max(axis=0)
        offsets = np.maximum(offsets, extra + 0.02)
    return BoundingHull(normals, offsets, sphere_radius_world)


def clamp_with_hull(grid: BakeGrid, hull: BoundingHull) -> BakeGrid:
    """Close the field off at the hull: values become min(field, hull margin)."""
    grid.add_clamp(hull.margin)
    return grid


def _slab_triangles(vk, vk1, k, iso, cell_mask, R, h):
    """Triangulate one slab of cells between corner planes k and k+1.

    Returns (edge keys (t, 3), positions (t, 3, 3)) of welded-by-key triangle
    corners, in contracted space.
    """
    c = (
        vk[:-1, :-1], vk[1:, :-1], vk[1:, 1:], vk[:-1, 1:],
        vk1[:-1, :-1], vk1[1:, :-1], vk1[1:, 1:], vk1[:-1, 1:],
    )
    cube = np.zeros(c[0].shape, dtype=np.uint16)
    for bit in range(8):
        cube |= (c[bit] < iso).astype(np.uint16) << bit
    live = EDGE_TABLE[cube] != 0
    if cell_mask is not None:
        live &= cell_mask
    ci, cj = np.nonzero(live)
    if ci.size == 0:
        return (np.empty((0, 3), np.int64), np.empty((0, 3, 3)))
    cube = cube[ci, cj]
    corner_vals = np.stack([c[v][ci, cj] for v in range(8)], axis=1)

    ntri = TRI_COUNT[cube]
    rep = np.repeat(np.arange(ci.size), ntri)
    slot = np.arange(rep.size) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    rows = TRI_TABLE[cube[rep]]
    edges = rows[np.arange(rep.size)[:, None], slot[:, None] * 3 + np.array([0, 1, 2])]

    a = EDGE_CORNERS[edges, 0]
    b = EDGE_CORNERS[edges, 1]
    va = corner_vals[rep[:, None], a]
    vb = corner_vals[rep[:, None], b]
    frac = (iso - va) / (vb - va)

    corner = CORNER_OFFSETS[a]  # (t, 3, 3) lattice offset of the low corner
    gx = ci[rep][:, None] + corner[..., 0]
    gy = cj[rep][:, None] + corner[..., 1]
    gz = k + corner[..., 2]
    axis = EDGE_AXIS[edges]
    keys = ((gx.astype(np.int64) * R + gy) * R + gz) * 3 + axis

    pos = np.stack([gx, gy, gz], axis=-1).astype(np.float64) * h - GRID_EXTENT
    bump = frac * h
    for ax in range(3):
        sel = axis == ax
        pos[..., ax][sel] += bump[sel]
    return keys, pos


def _weld(keys: np.ndarray, pos: np.ndarray) -> TriangleMesh:
    """Index-weld a triangle soup keyed by canonical lattice edges."""
    if keys.size == 0:
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), np.int64))
    flat_keys = keys.reshape(-1)
    flat_pos = pos.reshape(-1, 3)
    uniq, first, inverse = np.unique(flat_keys, return_index=True, return_inverse=True)
    faces = inverse.reshape(-1, 3)[:, [0, 2, 1]]  # wind normals toward positive values
    mesh = TriangleMesh(flat_pos[first], faces)
    return mesh.drop_degenerate()


def marching_cubes(
    grid: BakeGrid,
    iso: float = 0.001,
    only_candidates: bool = True,
    cells: CellFlags | None = None,
    _raw: bool = False,
):
    """Triangulate iso-crossings of the grid in contracted space.

    ``only_candidates`` restricts extraction to flagged cells; ``cells``
    overrides the cell set entirely (used by region growing).  Shared edge
    vertices weld to a single index regardless of cell visitation order.
    Triangles are wound so normals point toward positive field values.
    """
    R = grid.res
    all_keys, all_pos = [], []
    flags = cells if cells is not None else (grid.candidates if only_candidates else None)
    cached_k, cached_plane = -1, None
    for k in range(R - 1):
        mask = None
        if flags is not None:
            mask = flags.plane_mask(k)
            if not mask.any():
                continue
        plane_prev = cached_plane if cached_k == k else grid.plane(k, iso)
        plane_next = grid.plane(k + 1, iso)
        cached_k, cached_plane = k + 1, plane_next
        keys, pos = _slab_triangles(plane_prev, plane_next, k, iso, mask, R, grid.h)
        if keys.size:
            all_keys.append(keys)
            all_pos.append(pos)
    if not all_keys:
        empty = (np.empty((0, 3), np.int64), np.empty((0, 3, 3)))
        return empty if _raw else TriangleMesh(np.empty((0, 3)), np.empty((0, 3), np.int64))
    keys = np.concatenate(all_keys)
    pos = np.concatenate(all_pos)
    if _raw:
        return keys, pos
    return _weld(keys, pos)


def region_grow(
    grid: BakeGrid,
    mesh: TriangleMesh,
    iso: float = 0.001,
    iterations: int = 32,
    neighborhood: int = 8,
) -> TriangleMesh:
    """Fill culling holes by re-extracting around the current mesh.

    Each pass flags the ``neighborhood``^3 cells around every mesh vertex,
    runs marching cubes on the newly flagged cells only, and welds the new
    triangles in.  Stops early when no new cells activate.  ``mesh`` must be
    the candidate-restricted extraction of this same grid; its triangle soup
    is rebuilt from the flags so new geometry welds index-identically.
    """
    known = grid.candidates.copy()
    keys, pos = marching_cubes(grid, iso, cells=grid.candidates, _raw=True)
    offs = np.arange(neighborhood) - (neighborhood // 2 - 1)
    current = _weld(keys, pos) if keys.size else mesh
    for _ in range(iterations):
        if current.n_vertices == 0:
            break
        vc = grid.cells_of_points(current.vertices)
        fresh = CellFlags(grid.res)
        n_cell = grid.res - 1
        for dx in offs:
            for dy in offs:
                for dz in offs:
                    c = vc + np.array([dx, dy, dz])
                    ok = ((c >= 0) & (c < n_cell)).all(axis=1)
                    if np.any(ok):
                        fresh.set_cells(c[ok])
        new_cells = fresh.cell_indices()
        new_cells = new_cells[~known.test_cells(new_cells)]
        if new_cells.shape[0] == 0:
            break
        known.set_cells(new_cells)
        grid.candidates.set_cells(new_cells)
        added = CellFlags(grid.res)
        added.set_cells(new_cells)
        nk, npos = marching_cubes(grid, iso, cells=added, _raw=True)
        if nk.size == 0:
            continue
        keys = np.concatenate([keys, nk]) if keys.size else nk
        pos = np.concatenate([pos, npos]) if pos.size else npos
        current = _weld(keys, pos)
    return current


def to_world(mesh: TriangleMesh) -> TriangleMesh:
    """Map a contracted-space mesh to world space, keeping the contracted copy."""
    norms = np.linalg.norm(mesh.vertices, axis=1)
    if mesh.n_vertices and norms.max() >= GRID_EXTENT:
        bad = int((norms >= GRID_EXTENT).sum())
        raise ValueError(
            f"to_world: {bad} vertices at contracted norm >= 2 (max {norms.max():.6f}); "
            "bounding sphere clamp missing?"
        )
    world = uncontract(mesh.vertices)
    return TriangleMesh(world, mesh.faces.copy(), contracted=mesh.vertices.copy())
