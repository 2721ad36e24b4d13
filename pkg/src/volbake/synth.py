"""Ground-truth dataset synthesis from analytic scenes.

Renders a ring of cameras around the scene with the exact sphere-tracing
renderer and writes train/test splits in the posed-image dataset convention.
The sampling bounds stored with the dataset are derived from the measured
hit distances so the volumetric trainer wastes no samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import Camera, PosedImage, write_dataset
from .scenes import AnalyticScene, render_scene

__all__ = ["RingSpec", "camera_ring", "synthesize_dataset"]


@dataclass
class RingSpec:
    """Circular camera rig looking at a common target."""

    n_train: int = 32
    n_test: int = 8
    radius: float = 3.2
    height: float = 2.6
    target: tuple = (0.0, 0.0, 0.3)
    vfov_deg: float = 50.0
    width: int = 128
    height_px: int = 128
    test_height: float = 2.3

    def __post_init__(self) -> None:
        if self.n_train < 2 or self.radius <= 0 or self.vfov_deg <= 0:
            raise ValueError("degenerate camera ring")


def camera_ring(spec: RingSpec, n: int, radius: float, height: float, phase: float) -> list[Camera]:
    focal = 0.5 * spec.height_px / np.tan(0.5 * np.radians(spec.vfov_deg))
    cams = []
    for k in range(n):
        ang = phase + 2 * np.pi * k / n
        pos = np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        cams.append(
            Camera(
                width=spec.width,
                height=spec.height_px,
                focal=focal,
                cx=spec.width / 2,
                cy=spec.height_px / 2,
                cam_to_world=Camera.look_at(pos, spec.target),
            )
        )
    return cams


def synthesize_dataset(scene: AnalyticScene, spec: RingSpec, out_dir, supersample: int = 2):
    """Render train/test splits; returns the dataset manifest dict."""
    out_dir = Path(out_dir)
    splits = {
        "train": camera_ring(spec, spec.n_train, spec.radius, spec.height, 0.0),
        "test": camera_ring(spec, spec.n_test, spec.radius, spec.test_height, np.pi / spec.n_train),
    }
    hit_min, hit_max = np.inf, 0.0
    rendered = {}
    for split, cams in splits.items():
        images = []
        for i, cam in enumerate(cams):
            pixels, t_img = render_scene(scene, cam, supersample=supersample)
            finite = t_img[np.isfinite(t_img)]
            if finite.size:
                hit_min = min(hit_min, float(finite.min()))
                hit_max = max(hit_max, float(finite.max()))
            images.append(PosedImage(pixels, cam, f"{split}_{i:03d}.png"))
        rendered[split] = images
    if not np.isfinite(hit_min):
        raise ValueError("scene is invisible from every camera in the rig")
    near = max(0.05, 0.5 * hit_min)
    far = 1.1 * hit_max
    for split, images in rendered.items():
        write_dataset(out_dir / split, images, near, far)
    manifest = {
        "scene": scene.name,
        "near": near,
        "far": far,
        "splits": {s: len(v) for s, v in rendered.items()},
    }
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=1))
    return manifest
