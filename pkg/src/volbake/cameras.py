"""Pinhole cameras, ray generation, and the posed-image dataset convention.

A dataset directory holds 8-bit sRGB PNGs plus one ``cameras.json`` listing
shared intrinsics and a 3x4 camera-to-world pose per image.  Pixels are
linearized on load; all losses and metrics operate on linear RGB in [0, 1].

Axis convention: camera x right, y down, z forward (rays leave through +z).
Pixel centers sit at half-integer coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "Camera",
    "PosedImage",
    "srgb_to_linear",
    "linear_to_srgb",
    "load_png_linear",
    "save_png_linear",
    "write_dataset",
    "load_dataset",
]


def srgb_to_linear(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def load_png_linear(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(img)


def save_png_linear(path, pixels: np.ndarray) -> None:
    srgb = np.clip(np.round(linear_to_srgb(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(srgb).save(path)


@dataclass
class Camera:
    """Intrinsics plus camera-to-world pose."""

    width: int
    height: int
    focal: float
    cx: float
    cy: float
    cam_to_world: np.ndarray  # (3, 4)

    def __post_init__(self) -> None:
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64).reshape(3, 4)
        R = self.cam_to_world[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera pose rotation is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:, :3]

    def rays(self, pixels: np.ndarray | None = None):
        """Ray origins and unit directions; all pixels by default.

        ``pixels`` is an (n, 2) integer array of (row, col) coordinates.
        Returns (origins (n,3), directions (n,3)).
        """
        if pixels is None:
            ii, jj = np.mgrid[0 : self.height, 0 : self.width]
            pixels = np.stack([ii.ravel(), jj.ravel()], axis=1)
        u = (pixels[:, 1] + 0.5 - self.cx) / self.focal
        v = (pixels[:, 0] + 0.5 - self.cy) / self.focal
        d_cam = np.stack([u, v, np.ones_like(u)], axis=1)
        d_world = d_cam @ self.rotation.T
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        o = np.broadcast_to(self.position, d_world.shape)
        return o, d_world

    @staticmethod
    def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
        """Camera-to-world 3x4 with +z toward target and image up opposing ``up``."""
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        return np.concatenate([R, position[:, None]], axis=1)


@dataclass
class PosedImage:
    pixels: np.ndarray  # (H, W, 3) linear RGB
    camera: Camera
    name: str = ""


def write_dataset(out_dir, images: list[PosedImage], near: float, far: float) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cam0 = images[0].camera
    frames = []
    for im in images:
        save_png_linear(out_dir / im.name, im.pixels)
        frames.append({"file": im.name, "camera_to_world": im.camera.cam_to_world.tolist()})
    meta = {
        "resolution": [cam0.width, cam0.height],
        "focal": cam0.focal,
        "principal": [cam0.cx, cam0.cy],
        "near": near,
        "far": far,
        "frames": frames,
    }
    (out_dir / "cameras.json").write_text(json.dumps(meta, indent=1))


def load_dataset(dataset_dir):
    """Returns (images, near, far)."""
    dataset_dir = Path(dataset_dir)
    meta = json.loads((dataset_dir / "cameras.json").read_text())
    W, H = meta["resolution"]
    images = []
    for fr in meta["frames"]:
        cam = Camera(
            width=W,
            height=H,
            focal=meta["focal"],
            cx=meta["principal"][0],
            cy=meta["principal"][1],
            cam_to_world=np.asarray(fr["camera_to_world"]),
        )
        images.append(PosedImage(load_png_linear(dataset_dir / fr["file"]), cam, fr["file"]))
    return images, float(meta["near"]), float(meta["far"])
