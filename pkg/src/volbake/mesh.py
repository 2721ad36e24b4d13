"""Indexed triangle meshes: containers, hygiene, ordering, and file formats.

Meshes move between two coordinate systems: extraction produces vertices in
contracted space, and :func:`volbake.meshing.to_world` maps them to world
space while keeping the contracted copy (the appearance stage needs it to
decide per-vertex lobe budgets).

Binary format ("BMSH"): little-endian magic, u32 version, u32 vertex count,
u32 triangle count, u8 flag for presence of contracted vertices, then f32
world positions, u32 indices, and optionally f32 contracted positions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["TriangleMesh", "edge_manifold", "euler_characteristic", "morton_sort"]

_BMSH_MAGIC = b"BMSH"
_BMSH_VERSION = 1


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (n, 3) float64
    faces: np.ndarray  # (m, 3) int64
    contracted: np.ndarray | None = None  # (n, 3) when vertices are world-space

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.faces)

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    def drop_degenerate(self, area_tol: float = 1e-12) -> "TriangleMesh":
        """Remove zero-area triangles and any vertices left unreferenced."""
        keep = self.triangle_areas() > area_tol
        distinct = (
            (self.faces[:, 0] != self.faces[:, 1])
            & (self.faces[:, 1] != self.faces[:, 2])
            & (self.faces[:, 0] != self.faces[:, 2])
        )
        faces = self.faces[keep & distinct]
        used = np.unique(faces)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        return TriangleMesh(
            self.vertices[used],
            remap[faces],
            None if self.contracted is None else self.contracted[used],
        )

    def save_obj(self, path) -> None:
        with open(path, "w") as fh:
            for v in self.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for f in self.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")

    def save_bmsh(self, path) -> None:
        with open(path, "wb") as fh:
            has_c = self.contracted is not None
            fh.write(_BMSH_MAGIC)
            fh.write(struct.pack("<IIIB", _BMSH_VERSION, self.n_vertices, self.n_triangles, has_c))
            fh.write(self.vertices.astype("<f4").tobytes())
            fh.write(self.faces.astype("<u4").tobytes())
            if has_c:
                fh.write(self.contracted.astype("<f4").tobytes())

    @staticmethod
    def load_bmsh(path) -> "TriangleMesh":
        raw = Path(path).read_bytes()
        if raw[:4] != _BMSH_MAGIC:
            raise ValueError(f"{path}: not a BMSH mesh file")
        version, nv, nt, has_c = struct.unpack_from("<IIIB", raw, 4)
        if version != _BMSH_VERSION:
            raise ValueError(f"{path}: unsupported BMSH version {version}")
        off = 4 + 13
        verts = np.frombuffer(raw, "<f4", nv * 3, off).reshape(nv, 3).astype(np.float64)
        off += nv * 12
        faces = np.frombuffer(raw, "<u4", nt * 3, off).reshape(nt, 3).astype(np.int64)
        off += nt * 12
        contracted = None
        if has_c:
            contracted = np.frombuffer(raw, "<f4", nv * 3, off).reshape(nv, 3).astype(np.float64)
        return TriangleMesh(verts, faces, contracted)


def edge_manifold(mesh: TriangleMesh) -> bool:
    """True when every undirected edge borders at most two triangles."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts <= 2))


def euler_characteristic(mesh: TriangleMesh) -> int:
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    n_edges = len(np.unique(np.sort(edges, axis=1), axis=0))
    n_verts = len(np.unique(f))
    return n_verts - n_edges + len(f)


def _interleave_bits(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    x = (x | (x << 32)) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << 16)) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << 8)) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << 4)) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << 2)) & np.uint64(0x1249249249249249)
    return x


def morton_sort(mesh: TriangleMesh) -> TriangleMesh:
    """Reorder vertices along a Morton curve for rasterization cache locality."""
    ref = mesh.contracted if mesh.contracted is not None else mesh.vertices
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    q = np.clip(((ref - lo) / span * 2047).astype(np.int64), 0, 2047)
    code = _interleave_bits(q[:, 0]) | (_interleave_bits(q[:, 1]) << np.uint64(1)) | (
        _interleave_bits(q[:, 2]) << np.uint64(2)
    )
    order = np.argsort(code, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return TriangleMesh(
        mesh.vertices[order],
        remap[mesh.faces],
        None if mesh.contracted is None else mesh.contracted[order],
    )
