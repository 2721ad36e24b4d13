"""Versioned binary checkpoints for trained fields.

Layout: magic "BSDF", u32 format version, u32 JSON header length, the header
(architectures, final density scale, array manifest), then the raw parameter
arrays little-endian in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .fields import MlpSdf
from .training import AppearanceHead

__all__ = ["save_checkpoint", "load_checkpoint"]

_MAGIC = b"BSDF"
_VERSION = 1


def _arrays_of(net, prefix):
    out = []
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        out.append((f"{prefix}.W{i}", W))
        out.append((f"{prefix}.b{i}", b))
    return out


def save_checkpoint(path, field: MlpSdf, head: AppearanceHead, beta: float) -> None:
    arrays = _arrays_of(field.net, "sdf") + _arrays_of(head.net, "app")
    header = {
        "sdf": {
            "hidden": field.hidden,
            "layers": field.layers,
            "n_freq": field.n_freq,
            "act_scale": field.net.act_scale,
            "init_radius": field.init_radius,
        },
        "appearance": {
            "hidden": head.hidden,
            "layers": head.layers,
            "n_freq": head.n_freq,
            "act_scale": head.net.act_scale,
        },
        "beta": beta,
        "arrays": [
            {"name": n, "shape": list(a.shape), "dtype": "<f4"} for n, a in arrays
        ],
    }
    blob = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (field, head, beta)."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen])
    rng = np.random.default_rng(0)
    s = header["sdf"]
    field = MlpSdf(
        hidden=s["hidden"], layers=s["layers"], n_freq=s["n_freq"], rng=rng,
        act_scale=s["act_scale"], dtype=np.float32, init_radius=s["init_radius"],
    )
    a = header["appearance"]
    head = AppearanceHead(hidden=a["hidden"], layers=a["layers"], n_freq=a["n_freq"], rng=rng)
    head.net.act_scale = a["act_scale"]

    off = 12 + hlen
    nets = {"sdf": field.net, "app": head.net}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(raw, "<f4", n, off).reshape(spec["shape"])
        off += 4 * n
        prefix, which = spec["name"].split(".")
        idx = int(which[1:])
        target = nets[prefix].weights if which[0] == "W" else nets[prefix].biases
        if target[idx].shape != arr.shape:
            raise ValueError(f"{path}: shape mismatch for {spec['name']}")
        target[idx][...] = arr
    return field, head, float(header["beta"])
