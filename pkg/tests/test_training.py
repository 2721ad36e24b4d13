import numpy as np
import pytest

from volbake.cameras import PosedImage
from volbake.density import BetaSchedule, DensityParams
from volbake.fields import MlpSdf, PlaneSdf, SphereSdf
from volbake.mlp import Mlp
from volbake.scenes import load_scene
from volbake.synth import RingSpec, camera_ring
from volbake.training import (
    AppearanceHead,
    TrainConfig,
    batch_loss_and_grads,
    eikonal_loss,
    train,
)

from pathlib import Path

SCENES = Path(__file__).resolve().parents[1] / "scenes"


class _Scaled:
    """SDF multiplied by a constant, for exact eikonal expectations."""

    def __init__(self, base, k):
        self.base, self.k = base, k

    def gradient(self, q):
        return self.k * self.base.gradient(q)


def test_eikonal_zero_on_exact_sdfs():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1.5, 1.5, size=(500, 3))
    assert eikonal_loss(SphereSdf([0.1, 0, -0.2], 0.8), pts) < 1e-10
    assert eikonal_loss(PlaneSdf([1, -2, 0.5], 0.1), pts) < 1e-10


def test_eikonal_exactly_one_for_doubled_sdf():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1.5, 1.5, size=(200, 3))
    val = eikonal_loss(_Scaled(SphereSdf([0, 0, 0], 1.0), 2.0), pts)
    assert val == pytest.approx(1.0, abs=1e-12)


def test_eikonal_positive_on_random_mlp():
    field = MlpSdf(hidden=16, layers=2, n_freq=2, rng=np.random.default_rng(2))
    pts = np.random.default_rng(3).uniform(-1, 1, size=(100, 3))
    val = eikonal_loss(field, pts)
    assert np.isfinite(val) and val > 0


def test_eikonal_rejects_empty_points():
    with pytest.raises(ValueError):
        eikonal_loss(SphereSdf([0, 0, 0], 1.0), np.zeros((0, 3)))


def _tiny_setup(rng):
    field = MlpSdf(hidden=8, layers=2, n_freq=2, rng=rng, dtype=np.float64, init_radius=0.8)
    head = AppearanceHead(hidden=8, layers=1, n_freq=1, rng=rng, dtype=np.float64)
    n_rays, n_samples = 4, 6
    origins = np.tile(np.array([[-2.0, 0.0, 0.3]]), (n_rays, 1))
    dirs = rng.normal(size=(n_rays, 3)) * 0.05 + np.array([1.0, 0, 0])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ts = np.sort(rng.uniform(0.5, 4.0, size=(n_rays, n_samples)), axis=1)
    gt = rng.random((n_rays, 3))
    eik_pts = rng.uniform(-1.2, 1.2, size=(10, 3))
    params = DensityParams(beta=0.05)
    return field, head, origins, dirs, gt, ts, params, eik_pts


def test_training_gradients_match_finite_differences():
    """Total-loss gradients (data + eikonal) on a tiny network vs central FD."""
    rng = np.random.default_rng(4)
    field, head, origins, dirs, gt, ts, params, eik_pts = _tiny_setup(rng)
    lam = 0.1

    loss0, _, _, g_field, g_head, _ = batch_loss_and_grads(
        field, head, origins, dirs, gt, ts, 0.5, params, eik_pts, lam
    )

    def loss_for(net, flat):
        saved = net.flat_params()
        net.set_flat_params(flat)
        val = batch_loss_and_grads(field, head, origins, dirs, gt, ts, 0.5, params, eik_pts, lam)[0]
        net.set_flat_params(saved)
        return val

    h = 1e-6
    for net, grads in ((field.net, g_field), (head.net, g_head)):
        flat = net.flat_params()
        g_fd = np.zeros_like(flat)
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += h
            dn[i] -= h
            g_fd[i] = (loss_for(net, up) - loss_for(net, dn)) / (2 * h)
        g_an = Mlp.flatten_grads(grads)
        rel = np.linalg.norm(g_an - g_fd) / np.linalg.norm(g_fd)
        assert rel < 1e-3


def _render_dataset(scene_path, n_views, res):
    from volbake.scenes import render_scene

    scene = load_scene(scene_path)
    spec = RingSpec(n_train=n_views, width=res, height_px=res, radius=3.6, height=1.2, target=(0, 0, 0))
    cams = camera_ring(spec, n_views, spec.radius, spec.height, 0.0)
    images = []
    for i, cam in enumerate(cams):
        px, _ = render_scene(scene, cam, supersample=1)
        images.append(PosedImage(px, cam, f"{i}.png"))
    return images


def test_zero_iteration_train_returns_init_unchanged():
    images = _render_dataset(SCENES / "sphere.json", 2, 16)
    cfg = TrainConfig(iters=0, batch_rays=8, n_samples=8, sdf_hidden=8, sdf_layers=2, sdf_freqs=1)
    field, head, hist = train(images, cfg, near=1.0, far=6.0)
    fresh = MlpSdf(
        hidden=8, layers=2, n_freq=1,
        rng=np.random.default_rng(np.random.SeedSequence((0, 0x5D1))),
        dtype=np.float32, init_radius=cfg.sdf_init_radius,
    )
    assert np.array_equal(field.net.flat_params(), fresh.net.flat_params())
    assert hist["loss"].size == 0


def test_train_smoke_reduces_loss_and_is_reproducible():
    images = _render_dataset(SCENES / "sphere.json", 4, 24)
    cfg = TrainConfig(
        iters=60, batch_rays=32, n_samples=24, sdf_hidden=16, sdf_layers=2, sdf_freqs=2,
        app_hidden=8, app_layers=1, app_freqs=1, n_eikonal=64, warmup=10, seed=11,
        beta_schedule=BetaSchedule(0.1, 0.05),
    )
    _, _, hist1 = train(images, cfg, near=1.5, far=6.5)
    _, _, hist2 = train(images, cfg, near=1.5, far=6.5)
    assert np.array_equal(hist1["loss"], hist2["loss"])  # bit-identical reruns
    assert np.mean(hist1["data"][-10:]) < np.mean(hist1["data"][:10])
    assert hist1["beta"][0] == pytest.approx(0.1)


def test_train_requires_two_images():
    images = _render_dataset(SCENES / "sphere.json", 2, 16)
    with pytest.raises(ValueError):
        train(images[:1], TrainConfig(iters=1), near=1.0, far=5.0)
