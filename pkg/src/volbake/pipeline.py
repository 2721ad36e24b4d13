"""Stage orchestration: synth -> train -> bake -> fit -> export -> render -> metrics.

Stages communicate only through files under the run directory, each stage
writes a manifest recording the SHA-256 of its config slice, inputs, and
outputs, and every consumer verifies the producer's manifest before reading.
All randomness derives from one root seed through fixed per-stage streams.

Run directory layout::

    dataset/{train,test}/   posed images + cameras.json
    checkpoint.bsdf         trained field + appearance head
    mesh.bmsh, mesh.obj     baked world-space mesh
    appearance.npz          fitted per-vertex parameters + clear color
    asset.glb.gz            final exported asset
    renders/                baked renders of the test split
    metrics.json            PSNR/SSIM report
    manifest_<stage>.json   provenance records
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .appearance import FitConfig, VertexAppearance, fit_appearance, render_baked
from .cameras import load_dataset, save_png_linear, load_png_linear
from .checkpoint import load_checkpoint, save_checkpoint
from .contraction import contract
from .density import DensityParams, beta_at
from .gltf import export_gltf, load_gltf
from .mesh import TriangleMesh, morton_sort
from .meshing import (
    BakeGrid,
    build_bounding_hull,
    clamp_with_hull,
    marching_cubes,
    region_grow,
    splat_visibility,
    to_world,
)
from .metrics import MetricsReport, psnr, ssim
from .raster import rasterize_views
from .rendering import render_image
from .scenes import load_scene
from .synth import RingSpec, synthesize_dataset
from .training import TrainConfig, train

__all__ = ["PipelineConfig", "BakeConfig", "PipelineError", "Pipeline"]


class PipelineError(RuntimeError):
    """User-facing pipeline failure (bad inputs, stale artifacts)."""


@dataclass
class BakeConfig:
    resolution: int = 256
    iso: float = 0.001
    weight_threshold: float = 0.005
    splat_samples: int = 128
    growth_iterations: int = 32
    growth_neighborhood: int = 8
    hull_planes: int = 32
    hull_coverage: float = 0.9975
    hull_inflate: float = 1.025
    bounding_sphere_radius: float = 500.0


@dataclass
class PipelineConfig:
    scene: str = "scenes/sphere_plane_specular.json"
    out: str = "runs/default"
    seed: int = 0
    deterministic: bool = False
    supersample: int = 2
    eval_samples: int = 192
    ring: RingSpec = dc_field(default_factory=RingSpec)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    bake: BakeConfig = dc_field(default_factory=BakeConfig)
    fit: FitConfig = dc_field(default_factory=FitConfig)

    @staticmethod
    def from_dict(doc: dict) -> "PipelineConfig":
        cfg = PipelineConfig()
        plain = {k: v for k, v in doc.items() if k not in ("ring", "train", "bake", "fit")}
        for k, v in plain.items():
            if not hasattr(cfg, k):
                raise PipelineError(f"unknown config key: {k}")
            setattr(cfg, k, v)
        for section, cls in (("ring", RingSpec), ("train", TrainConfig), ("bake", BakeConfig), ("fit", FitConfig)):
            sub = doc.get(section, {})
            base = getattr(cfg, section)
            for k, v in sub.items():
                if not hasattr(base, k):
                    raise PipelineError(f"unknown config key: {section}.{k}")
                if k == "beta_schedule":
                    from .density import BetaSchedule

                    v = BetaSchedule(**v)
                if k == "target":
                    v = tuple(v)
                setattr(base, k, v)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def apply_overrides(self, pairs: list[str]) -> None:
        for pair in pairs:
            if "=" not in pair:
                raise PipelineError(f"override must be key=value, got {pair!r}")
            key, raw = pair.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            obj = self
            parts = key.split(".")
            for p in parts[:-1]:
                if not hasattr(obj, p):
                    raise PipelineError(f"unknown config section: {key}")
                obj = getattr(obj, p)
            if not hasattr(obj, parts[-1]):
                raise PipelineError(f"unknown config key: {key}")
            if parts[-1] == "target":
                value = tuple(value)
            current = getattr(obj, parts[-1])
            if isinstance(value, dict) and hasattr(current, "__dataclass_fields__"):
                for k, v in value.items():
                    if not hasattr(current, k):
                        raise PipelineError(f"unknown config key: {key}.{k}")
                    setattr(current, k, tuple(v) if k == "target" else v)
            else:
                setattr(obj, parts[-1], value)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_config(obj) -> str:
    return hashlib.sha256(json.dumps(asdict(obj), sort_keys=True).encode()).hexdigest()


def log_event(stage: str, event: str, **fields) -> None:
    rec = {"ts": round(time.time(), 3), "stage": stage, "event": event}
    rec.update(fields)
    sys.stderr.write(json.dumps(rec) + "\n")


class Pipeline:
    """File-based stage runner over one output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)

    # -- manifest plumbing ---------------------------------------------------

    def _manifest_path(self, stage: str) -> Path:
        return self.out / f"manifest_{stage}.json"

    def _write_manifest(self, stage: str, cfg_obj, inputs: list[Path], outputs: list[Path], t0: float):
        man = {
            "stage": stage,
            "config_hash": _hash_config(cfg_obj),
            "seed": self.cfg.seed,
            "inputs": {str(p.relative_to(self.out)): _sha256(p) for p in inputs},
            "outputs": {str(p.relative_to(self.out)): _sha256(p) for p in outputs},
            "runtime_s": round(time.time() - t0, 3),
        }
        self._manifest_path(stage).write_text(json.dumps(man, indent=1))
        log_event(stage, "done", runtime_s=man["runtime_s"])

    def _require(self, stage: str, *artifacts: str) -> list[Path]:
        """Verify a producing stage's manifest and artifact hashes."""
        mp = self._manifest_path(stage)
        if not mp.exists():
            raise PipelineError(f"missing upstream stage '{stage}': run it first ({mp} not found)")
        man = json.loads(mp.read_text())
        paths = []
        for rel in artifacts:
            p = self.out / rel
            if not p.exists():
                raise PipelineError(f"missing artifact {rel} from stage '{stage}'")
            recorded = man["outputs"].get(rel)
            if recorded is None:
                raise PipelineError(f"stage '{stage}' manifest does not list {rel}")
            actual = _sha256(p)
            if actual != recorded:
                raise PipelineError(
                    f"artifact {rel} does not match the manifest of stage '{stage}' "
                    f"(stale or tampered input): {actual[:12]} != {recorded[:12]}"
                )
            paths.append(p)
        return paths

    # -- stages ----------------------------------------------------------------

    def synth(self) -> dict:
        t0 = time.time()
        scene_path = Path(self.cfg.scene)
        if not scene_path.exists():
            raise PipelineError(f"scene file not found: {scene_path}")
        scene = load_scene(scene_path)
        self.out.mkdir(parents=True, exist_ok=True)
        log_event("synth", "start", scene=scene.name)
        manifest = synthesize_dataset(scene, self.cfg.ring, self.out / "dataset", self.cfg.supersample)
        outputs = sorted((self.out / "dataset").rglob("*.*"))
        (self.out / "scene.json").write_text(scene_path.read_text())
        self._write_manifest("synth", self.cfg.ring, [], outputs + [self.out / "scene.json"], t0)
        return manifest

    def train(self) -> dict:
        t0 = time.time()
        self._require("synth", "dataset/train/cameras.json")
        images, near, far = load_dataset(self.out / "dataset" / "train")
        tc = self.cfg.train
        tc.seed = self.cfg.seed
        log_event("train", "start", images=len(images), iters=tc.iters, near=near, far=far)
        progress = lambda it, m: log_event("train", "iter", i=it, **{k: round(v, 6) for k, v in m.items()})
        tc.log_every = tc.log_every or 500
        field, head, hist = train(images, tc, near, far, progress=progress)
        beta_final = beta_at(tc.beta_schedule, 1.0)
        save_checkpoint(self.out / "checkpoint.bsdf", field, head, beta_final)
        np.savez(self.out / "train_history.npz", **hist)
        inputs = sorted((self.out / "dataset" / "train").glob("*"))
        self._write_manifest(
            "train", tc, inputs, [self.out / "checkpoint.bsdf", self.out / "train_history.npz"], t0
        )
        return {"final_loss": float(hist["loss"][-1]) if len(hist["loss"]) else None}

    def bake(self) -> dict:
        t0 = time.time()
        self._require("train", "checkpoint.bsdf")
        field, head, beta = load_checkpoint(self.out / "checkpoint.bsdf")
        images, near, far = load_dataset(self.out / "dataset" / "train")
        bc = self.cfg.bake
        log_event("bake", "start", resolution=bc.resolution, iso=bc.iso)
        grid = BakeGrid(field, res=bc.resolution)
        params = DensityParams(beta)
        n_cand = splat_visibility(
            grid, field, [im.camera for im in images], near, far, params,
            n_samples=bc.splat_samples, weight_threshold=bc.weight_threshold,
        )
        log_event("bake", "splat", candidates=n_cand)
        centers = grid.candidates.cell_indices() * grid.h - 2.0 + grid.h / 2
        cameras_c = contract(np.stack([im.camera.position for im in images]))
        hull = build_bounding_hull(
            centers, n_planes=bc.hull_planes, coverage=bc.hull_coverage,
            inflate=bc.hull_inflate, seed=self.cfg.seed,
            sphere_radius_world=bc.bounding_sphere_radius, must_contain=cameras_c,
        )
        clamp_with_hull(grid, hull)
        mesh = marching_cubes(grid, iso=bc.iso, only_candidates=True)
        log_event("bake", "extracted", vertices=mesh.n_vertices, triangles=mesh.n_triangles)
        mesh = region_grow(
            grid, mesh, iso=bc.iso, iterations=bc.growth_iterations,
            neighborhood=bc.growth_neighborhood,
        )
        log_event("bake", "grown", vertices=mesh.n_vertices, triangles=mesh.n_triangles)
        world = morton_sort(to_world(mesh))
        world.save_bmsh(self.out / "mesh.bmsh")
        world.save_obj(self.out / "mesh.obj")
        self._write_manifest(
            "bake", bc, [self.out / "checkpoint.bsdf"],
            [self.out / "mesh.bmsh", self.out / "mesh.obj"], t0,
        )
        return {"vertices": world.n_vertices, "triangles": world.n_triangles}

    def fit(self) -> dict:
        t0 = time.time()
        self._require("bake", "mesh.bmsh")
        mesh = TriangleMesh.load_bmsh(self.out / "mesh.bmsh")
        images, _, _ = load_dataset(self.out / "dataset" / "train")
        fc = self.cfg.fit
        fc.seed = self.cfg.seed
        log_event("fit", "start", vertices=mesh.n_vertices, iters=fc.iters, loss=fc.loss)
        caches = rasterize_views(mesh, [im.camera for im in images])
        fc.log_every = fc.log_every or 500
        progress = lambda it, m: log_event("fit", "iter", i=it, **{k: round(v, 6) for k, v in m.items()})
        app, clear, hist = fit_appearance(mesh, caches, images, fc, progress=progress)
        np.savez(
            self.out / "appearance.npz",
            diffuse=app.diffuse, mu=app.mu, color=app.color, width=app.width,
            lobe_mask=app.lobe_mask, is_center=app.is_center,
            lambda_max=app.lambda_max, clear_color=clear, loss=hist["loss"],
        )
        self._write_manifest(
            "fit", fc, [self.out / "mesh.bmsh"], [self.out / "appearance.npz"], t0
        )
        return {"final_loss": float(hist["loss"][-1])}

    def _load_appearance(self):
        data = np.load(self.out / "appearance.npz")
        app = VertexAppearance(
            diffuse=data["diffuse"], mu=data["mu"], color=data["color"], width=data["width"],
            lobe_mask=data["lobe_mask"], is_center=data["is_center"],
            lambda_max=float(data["lambda_max"]),
        )
        return app, data["clear_color"]

    def export(self) -> dict:
        t0 = time.time()
        self._require("bake", "mesh.bmsh")
        self._require("fit", "appearance.npz")
        mesh = TriangleMesh.load_bmsh(self.out / "mesh.bmsh")
        app, clear = self._load_appearance()
        path = export_gltf(mesh, app, clear, self.out / "asset.glb.gz")
        size = path.stat().st_size
        log_event("export", "written", bytes=size)
        self._write_manifest("export", self.cfg.fit, [self.out / "mesh.bmsh", self.out / "appearance.npz"], [path], t0)
        return {"bytes": size}

    def render(self, split: str = "test") -> dict:
        t0 = time.time()
        self._require("export", "asset.glb.gz")
        asset = load_gltf(self.out / "asset.glb.gz")
        images, _, _ = load_dataset(self.out / "dataset" / split)
        rdir = self.out / "renders"
        rdir.mkdir(exist_ok=True)
        outs = []
        for im in images:
            frame = render_baked(asset.mesh, asset.appearance, asset.clear_color, im.camera)
            p = rdir / im.name
            save_png_linear(p, frame)
            outs.append(p)
        self._write_manifest("render", self.cfg.fit, [self.out / "asset.glb.gz"], outs, t0)
        return {"frames": len(outs)}

    def metrics(self, split: str = "test") -> MetricsReport:
        t0 = time.time()
        self._require("render", *(f"renders/{p.name}" for p in sorted((self.out / "dataset" / split).glob("*.png"))))
        images, _, _ = load_dataset(self.out / "dataset" / split)
        report = MetricsReport()
        for im in images:
            ours = load_png_linear(self.out / "renders" / im.name)
            report.per_image_psnr.append(psnr(ours, im.pixels))
            report.per_image_ssim.append(ssim(ours, im.pixels))
        report.runtime_s["metrics"] = round(time.time() - t0, 3)
        (self.out / "metrics.json").write_text(json.dumps(report.as_dict(), indent=1))
        log_event("metrics", "done", mean_psnr=report.mean_psnr, mean_ssim=report.mean_ssim)
        return report

    def render_volume(self, split: str = "test", n_samples: int | None = None) -> list:
        """Stage-1 volume renders of a split (the offline-quality reference)."""
        self._require("train", "checkpoint.bsdf")
        field, head, beta = load_checkpoint(self.out / "checkpoint.bsdf")
        images, near, far = load_dataset(self.out / "dataset" / split)
        params = DensityParams(beta)
        frames = []
        for im in images:
            frames.append(
                render_image(
                    field, head.colors, im.camera, near, far, params,
                    n_samples=n_samples or self.cfg.eval_samples,
                )
            )
        return frames
