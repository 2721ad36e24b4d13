import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from volbake.cameras import load_png_linear
from volbake.checkpoint import load_checkpoint, save_checkpoint
from volbake.fields import MlpSdf
from volbake.metrics import psnr, ssim
from volbake.pipeline import Pipeline, PipelineConfig, PipelineError
from volbake.training import AppearanceHead

SCENES = Path(__file__).resolve().parents[1] / "scenes"


def tiny_config(out_dir) -> PipelineConfig:
    return PipelineConfig.from_dict(
        {
            "scene": str(SCENES / "sphere_plane.json"),
            "out": str(out_dir),
            "seed": 3,
            "supersample": 1,
            "eval_samples": 48,
            "ring": {"n_train": 6, "n_test": 2, "width": 40, "height_px": 40},
            "train": {
                "iters": 40, "batch_rays": 48, "n_samples": 32, "sdf_hidden": 16,
                "sdf_layers": 2, "sdf_freqs": 2, "app_hidden": 8, "app_layers": 1,
                "app_freqs": 1, "n_eikonal": 64, "warmup": 10,
            },
            "bake": {"resolution": 56, "growth_iterations": 4},
            "fit": {"iters": 30, "batch": 1024},
        }
    )


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    pipe = Pipeline(tiny_config(out))
    pipe.synth()
    pipe.train()
    pipe.bake()
    pipe.fit()
    pipe.export()
    pipe.render()
    pipe.metrics()
    return out


def test_full_pipeline_emits_asset(run_dir):
    assert (run_dir / "asset.glb.gz").exists()
    assert (run_dir / "mesh.bmsh").exists()
    assert (run_dir / "metrics.json").exists()
    report = json.loads((run_dir / "metrics.json").read_text())
    assert len(report["psnr"]) == 2


def test_stage_reruns_are_byte_identical(run_dir, tmp_path):
    cfg = tiny_config(tmp_path / "again")
    pipe = Pipeline(cfg)
    pipe.synth()
    pipe.train()
    pipe.bake()
    pipe.fit()
    pipe.export()
    for rel in ("checkpoint.bsdf", "mesh.bmsh", "appearance.npz", "asset.glb.gz"):
        a = (run_dir / rel).read_bytes()
        b = (tmp_path / "again" / rel).read_bytes()
        assert a == b, f"{rel} differs between identical runs"


def test_missing_upstream_stage_refused(tmp_path):
    pipe = Pipeline(tiny_config(tmp_path / "fresh"))
    with pytest.raises(PipelineError, match="missing upstream"):
        pipe.train()


def test_tampered_artifact_refused(run_dir, tmp_path):
    out = tmp_path / "tampered"
    shutil.copytree(run_dir, out)
    cfg = tiny_config(out)
    with open(out / "checkpoint.bsdf", "r+b") as fh:
        fh.seek(40)
        fh.write(b"\xff\xff")
    pipe = Pipeline(cfg)
    with pytest.raises(PipelineError, match="stale or tampered"):
        pipe.bake()


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    field = MlpSdf(hidden=16, layers=2, n_freq=3, rng=rng)
    head = AppearanceHead(hidden=8, layers=1, n_freq=2, rng=rng)
    p = tmp_path / "c.bsdf"
    save_checkpoint(p, field, head, 0.004)
    f2, h2, beta = load_checkpoint(p)
    assert beta == 0.004
    assert np.array_equal(field.net.flat_params(), f2.net.flat_params())
    assert np.array_equal(head.net.flat_params(), h2.net.flat_params())
    pts = rng.uniform(-1, 1, (20, 3))
    assert np.array_equal(field.value(pts), f2.value(pts))
    bad = tmp_path / "bad.bsdf"
    bad.write_bytes(b"XXXX123")
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_psnr_and_ssim_reference_values():
    rng = np.random.default_rng(1)
    img = rng.random((64, 64, 3))
    assert psnr(img, img) == 99.0
    assert ssim(img, img) == pytest.approx(1.0)
    off = np.clip(img + 1.0 / 255.0, 0, None)  # uniform one-level offset
    assert psnr(off, img) == pytest.approx(20 * np.log10(255), abs=1e-6)
    with pytest.raises(ValueError):
        psnr(img, img[:32])


def test_cli_smoke_and_exit_codes(tmp_path):
    out = tmp_path / "cli_run"
    base = [
        sys.executable, "-m", "volbake.cli",
        "--scene", str(SCENES / "sphere_plane.json"), "--out", str(out), "--seed", "1",
        "--set", "supersample=1",
        "--set", 'ring={"n_train": 4, "n_test": 1, "width": 24, "height_px": 24}',
        "--set", 'train={"iters": 10, "batch_rays": 24, "n_samples": 16, "sdf_hidden": 8, "sdf_layers": 1, "sdf_freqs": 1, "app_hidden": 8, "app_layers": 1, "app_freqs": 1, "n_eikonal": 32}',
        "--set", 'bake={"resolution": 40, "growth_iterations": 2}',
        "--set", 'fit={"iters": 5, "batch": 256}',
    ]
    env = {"PYTHONPATH": str(Path(__file__).resolve().parents[1] / "src")}
    import os

    env.update(os.environ)
    r = subprocess.run(base + ["run"], capture_output=True, text=True, env=env)
    assert r.returncode == 0, r.stderr[-2000:]
    assert (out / "asset.glb.gz").exists()
    assert "mean PSNR" in r.stdout
    # stderr carries line-delimited JSON records
    recs = [json.loads(line) for line in r.stderr.splitlines() if line.startswith("{")]
    assert any(rec["stage"] == "bake" and rec["event"] == "done" for rec in recs)

    # user error: missing scene -> exit 1
    r = subprocess.run(
        [sys.executable, "-m", "volbake.cli", "--scene", "nope.json", "--out", str(out), "synth"],
        capture_output=True, text=True, env=env,
    )
    assert r.returncode == 1

    # user error: bad override key -> exit 1
    r = subprocess.run(base + ["--set", "nonsense.key=1", "synth"], capture_output=True, text=True, env=env)
    assert r.returncode == 1


def test_config_overrides_dotted(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg.apply_overrides(["train.iters=77", "bake.iso=0.002", 'scene="x.json"'])
    assert cfg.train.iters == 77
    assert cfg.bake.iso == 0.002
    assert cfg.scene == "x.json"
    with pytest.raises(PipelineError):
        cfg.apply_overrides(["bogus.path=1"])
