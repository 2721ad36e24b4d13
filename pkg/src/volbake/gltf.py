"""Binary glTF export/import of baked meshes with quantized appearance attributes.

The asset is a standard .glb container (gzip-compressed on disk as .glb.gz)
holding one mesh with up to two primitives: the center region (three lobes
per vertex) and the periphery (one lobe).  Vertices referenced by triangles
of both regions are duplicated into the center primitive with zeroed extra
lobes, so every primitive is self-contained.

Per-vertex attributes (all u8, padded to 4-byte stride as glTF requires):

==================  ======  =====================================
attribute           type    decode
==================  ======  =====================================
POSITION            f32v3   world position, as-is
_DIFFUSE            u8v4    rgb / 255, alpha pad
_SG{i}_MEAN         u8v4    xyz / 255 * 2 - 1 (not re-normalized)
_SG{i}_COLOR        u8v4    rgb / 255
_SG_WIDTHS          u8v4    w_i / 255 * lambda_max
==================  ======  =====================================

Scene-level metadata lives in the glTF root ``extras``: format version, lobe
counts per region, lambda_max, clear color.  Serialization is canonical
(fixed key order, no whitespace, mtime-free gzip) so export -> load ->
re-export is byte-identical.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .appearance import VertexAppearance, decode_levels, quantize_levels
from .mesh import TriangleMesh

__all__ = ["export_gltf", "load_gltf", "LoadedAsset", "FORMAT_VERSION"]

FORMAT_VERSION = 1
_MAGIC = 0x46546C67  # 'glTF'
_JSON_CHUNK = 0x4E4F534A
_BIN_CHUNK = 0x004E4942
_U8 = 5121
_U32 = 5125
_F32 = 5126


@dataclass
class LoadedAsset:
    """Decoded asset: geometry, quantized appearance, and shared metadata."""

    mesh: TriangleMesh  # welded across regions, world space
    appearance: VertexAppearance  # decoded u8 levels (exactly the shipped values)
    clear_color: np.ndarray
    lambda_max: float
    lobes_center: int
    lobes_periphery: int
    regions: list  # per-primitive dicts with raw level arrays, for re-export


class _BinWriter:
    def __init__(self):
        self.chunks = []
        self.views = []
        self.offset = 0

    def add(self, data: bytes, stride: int | None = None, target: int | None = None) -> int:
        pad = (4 - self.offset % 4) % 4
        if pad:
            self.chunks.append(b"\x00" * pad)
            self.offset += pad
        view = {"buffer": 0, "byteOffset": self.offset, "byteLength": len(data)}
        if stride is not None:
            view["byteStride"] = stride
        if target is not None:
            view["target"] = target
        self.views.append(view)
        self.chunks.append(data)
        self.offset += len(data)
        return len(self.views) - 1

    def blob(self) -> bytes:
        out = b"".join(self.chunks)
        pad = (4 - len(out) % 4) % 4
        return out + b"\x00" * pad


def _pad_u8(levels: np.ndarray, pad_value: int = 0) -> np.ndarray:
    """(n, k<=3) or (n,) u8 -> (n, 4) with zero padding."""
    levels = np.asarray(levels, dtype=np.uint8)
    if levels.ndim == 1:
        levels = levels[:, None]
    out = np.full((levels.shape[0], 4), pad_value, dtype=np.uint8)
    out[:, : levels.shape[1]] = levels
    return out


def _region_tables(mesh: TriangleMesh, app: VertexAppearance):
    """Split triangles into center/periphery primitives with local vertex buffers.

    A triangle touching any center vertex goes to the center primitive (its
    peripheral corners come along with zeroed extra lobes).
    """
    is_center = app.is_center
    tri_center = is_center[mesh.faces].any(axis=1)
    out = []
    for name, tris in (("center", mesh.faces[tri_center]), ("periphery", mesh.faces[~tri_center])):
        if len(tris) == 0:
            continue
        used = np.unique(tris)
        remap = np.zeros(mesh.n_vertices, dtype=np.int64)
        remap[used] = np.arange(used.size)
        out.append({"name": name, "vertex_ids": used, "faces": remap[tris]})
    return out


def export_gltf(mesh: TriangleMesh, app_raw: VertexAppearance, clear_color, path) -> Path:
    """Write the quantized asset; returns the written path (.glb.gz).

    ``app_raw`` may be raw or already-quantized parameters; quantization here
    uses the same level arithmetic as the straight-through trainer, so stored
    bytes equal training-time values exactly.
    """
    path = Path(path)
    app = app_raw
    lam = app.lambda_max
    lobes = {"center": int(app.lobe_mask[app.is_center].sum(1).max(initial=0)),
             "periphery": int(app.lobe_mask[~app.is_center].sum(1).max(initial=0))}
    mask3 = app.lobe_mask[:, :, None]
    lv_diff = quantize_levels(app.diffuse, 0.0, 1.0)
    lv_mu = quantize_levels(np.where(mask3, app.mu, 0.0), -1.0, 1.0)
    lv_col = quantize_levels(np.where(mask3, app.color, 0.0), 0.0, 1.0)
    lv_wid = quantize_levels(np.where(app.lobe_mask, app.width, 0.0), 0.0, lam)

    writer = _BinWriter()
    accessors = []
    meshes_prims = []
    regions_meta = []

    def accessor(view, comp, count, type_, normalized=False, minmax=None, offset=0):
        acc = {"bufferView": view, "componentType": comp, "count": count, "type": type_}
        if normalized:
            acc["normalized"] = True
        if offset:
            acc["byteOffset"] = offset
        if minmax is not None:
            acc["min"], acc["max"] = minmax
        accessors.append(acc)
        return len(accessors) - 1

    for region in _region_tables(mesh, app):
        vid = region["vertex_ids"]
        n = len(vid)
        n_lobes = lobes[region["name"]]
        pos = mesh.vertices[vid].astype("<f4")
        v_pos = writer.add(pos.tobytes(), stride=12, target=34962)
        a_pos = accessor(
            v_pos, _F32, n, "VEC3",
            minmax=[pos.min(axis=0).tolist(), pos.max(axis=0).tolist()],
        )
        attrs = {"POSITION": a_pos}

        def u8_attr(name, levels):
            data = _pad_u8(levels)
            view = writer.add(data.tobytes(), stride=4, target=34962)
            attrs[name] = accessor(view, _U8, n, "VEC4", normalized=True)

        u8_attr("_DIFFUSE", lv_diff[vid])
        for l in range(n_lobes):
            u8_attr(f"_SG{l}_MEAN", lv_mu[vid, l])
            u8_attr(f"_SG{l}_COLOR", lv_col[vid, l])
        u8_attr("_SG_WIDTHS", lv_wid[vid, :n_lobes])

        idx = region["faces"].astype("<u4")
        v_idx = writer.add(idx.tobytes(), target=34963)
        a_idx = accessor(v_idx, _U32, idx.size, "SCALAR")
        meshes_prims.append(
            {"attributes": attrs, "indices": a_idx, "mode": 4,
             "extras": {"region": region["name"], "lobes": n_lobes}}
        )
        regions_meta.append({"region": region["name"], "lobes": n_lobes, "vertices": n,
                             "triangles": int(len(idx) // 3)})

    doc = {
        "asset": {"version": "2.0", "generator": "volbake"},
        "scene": 0,
        "scenes": [{"nodes": [0]}],
        "nodes": [{"mesh": 0}],
        "meshes": [{"primitives": meshes_prims}],
        "accessors": accessors,
        "bufferViews": writer.views,
        "buffers": [{"byteLength": len(writer.blob())}],
        "extras": {
            "volbake": {
                "formatVersion": FORMAT_VERSION,
                "lambdaMax": lam,
                "clearColor": np.asarray(clear_color, dtype=np.float64).tolist(),
                "lobesCenter": lobes["center"],
                "lobesPeriphery": lobes["periphery"],
                "regions": regions_meta,
            }
        },
    }
    glb = _pack_glb(doc, writer.blob())
    if str(path).endswith(".gz"):
        path.write_bytes(gzip.compress(glb, compresslevel=9, mtime=0))
    else:
        path.write_bytes(glb)
    return path


def _pack_glb(doc: dict, blob: bytes) -> bytes:
    js = json.dumps(doc, separators=(",", ":")).encode()
    js += b" " * ((4 - len(js) % 4) % 4)
    total = 12 + 8 + len(js) + 8 + len(blob)
    head = struct.pack("<III", _MAGIC, 2, total)
    return (
        head
        + struct.pack("<II", len(js), _JSON_CHUNK) + js
        + struct.pack("<II", len(blob), _BIN_CHUNK) + blob
    )


def _read_accessor(doc, views, blob, idx):
    acc = doc["accessors"][idx]
    view = views[acc["bufferView"]]
    comp = acc["componentType"]
    n = acc["count"]
    n_comp = {"SCALAR": 1, "VEC2": 2, "VEC3": 3, "VEC4": 4}[acc["type"]]
    base = view.get("byteOffset", 0) + acc.get("byteOffset", 0)
    dtype = {_U8: np.uint8, _U32: np.dtype("<u4"), _F32: np.dtype("<f4")}[comp]
    itemsize = np.dtype(dtype).itemsize
    stride = view.get("byteStride", n_comp * itemsize)
    raw = np.frombuffer(blob, np.uint8, n * stride, base).reshape(n, stride)
    arr = raw[:, : n_comp * itemsize].copy().view(dtype).reshape(n, n_comp)
    return arr[:, 0] if acc["type"] == "SCALAR" else arr


def load_gltf(path) -> LoadedAsset:
    """Parse an exported asset back into geometry + decoded appearance."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 12 or struct.unpack_from("<I", raw, 0)[0] != _MAGIC:
        raise ValueError(f"{path}: not a binary glTF container")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != 2:
        raise ValueError(f"{path}: unsupported glTF container version {version}")
    off = 12
    js, blob = None, None
    while off + 8 <= len(raw):
        length, kind = struct.unpack_from("<II", raw, off)
        off += 8
        chunk = raw[off : off + length]
        if len(chunk) != length:
            raise ValueError(f"{path}: truncated glTF chunk")
        if kind == _JSON_CHUNK:
            js = chunk
        elif kind == _BIN_CHUNK:
            blob = chunk
        off += length
    if js is None or blob is None:
        raise ValueError(f"{path}: missing JSON or BIN chunk")
    doc = json.loads(js)
    meta = doc.get("extras", {}).get("volbake")
    if meta is None:
        raise ValueError(f"{path}: no appearance metadata; not a volbake asset")
    if meta["formatVersion"] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {meta['formatVersion']}")
    views = doc["bufferViews"]
    lam = float(meta["lambdaMax"])
    L = max(meta["lobesCenter"], meta["lobesPeriphery"], 1)

    all_pos, all_faces, all_center = [], [], []
    diff_lv, mu_lv, col_lv, wid_lv = [], [], [], []
    regions = []
    base = 0
    for prim in doc["meshes"][0]["primitives"]:
        attrs = prim["attributes"]
        pos = _read_accessor(doc, views, blob, attrs["POSITION"]).astype(np.float64)
        n = len(pos)
        n_lobes = prim["extras"]["lobes"]
        faces = _read_accessor(doc, views, blob, prim["indices"]).astype(np.int64).reshape(-1, 3)
        d = _read_accessor(doc, views, blob, attrs["_DIFFUSE"])[:, :3]
        mus = np.zeros((n, L, 3), dtype=np.uint8)
        cols = np.zeros((n, L, 3), dtype=np.uint8)
        wids = np.zeros((n, L), dtype=np.uint8)
        for l in range(n_lobes):
            mus[:, l] = _read_accessor(doc, views, blob, attrs[f"_SG{l}_MEAN"])[:, :3]
            cols[:, l] = _read_accessor(doc, views, blob, attrs[f"_SG{l}_COLOR"])[:, :3]
        wid4 = _read_accessor(doc, views, blob, attrs["_SG_WIDTHS"])
        wids[:, :n_lobes] = wid4[:, :n_lobes]
        all_pos.append(pos)
        all_faces.append(faces + base)
        all_center.append(np.full(n, prim["extras"]["region"] == "center"))
        diff_lv.append(d)
        mu_lv.append(mus)
        col_lv.append(cols)
        wid_lv.append(wids)
        regions.append(
            {"region": prim["extras"]["region"], "lobes": n_lobes,
             "position": pos, "faces": faces,
             "diffuse_levels": d, "mu_levels": mus, "color_levels": cols,
             "width_levels": wids}
        )
        base += n

    is_center = np.concatenate(all_center)
    lobe_count = np.where(is_center, meta["lobesCenter"], meta["lobesPeriphery"])
    app = VertexAppearance(
        diffuse=decode_levels(np.concatenate(diff_lv), 0.0, 1.0),
        mu=decode_levels(np.concatenate(mu_lv), -1.0, 1.0),
        color=decode_levels(np.concatenate(col_lv), 0.0, 1.0),
        width=decode_levels(np.concatenate(wid_lv), 0.0, lam),
        lobe_mask=np.arange(L)[None, :] < lobe_count[:, None],
        is_center=is_center,
        lambda_max=lam,
    )
    mesh = TriangleMesh(np.concatenate(all_pos), np.concatenate(all_faces))
    return LoadedAsset(
        mesh=mesh,
        appearance=app,
        clear_color=np.asarray(meta["clearColor"], dtype=np.float64),
        lambda_max=lam,
        lobes_center=meta["lobesCenter"],
        lobes_periphery=meta["lobesPeriphery"],
        regions=regions,
    )
