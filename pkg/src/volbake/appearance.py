"""Per-vertex view-dependent appearance: diffuse color plus spherical-Gaussian lobes.

A vertex shades as ``C(d) = c_d + sum_i c_i * exp(lambda_i * (mu_i . d - 1))``
where ``d`` is the unit direction from the surface point toward the camera.
Central vertices (contracted norm <= 1) carry three lobes, peripheral ones a
single lobe; the split is fixed at bake time.

Fitting minimizes a robust per-channel loss between shaded pixels (replayed
through the rasterization cache) and the training images, with every
parameter passed through an 8-bit straight-through quantizer so the values
that ship in the asset are the values that were optimized.  Lobe means are
re-normalized after each step; the quantizer, not the optimizer, owns range
clamping.  Miss pixels supervise a single global clear color.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .cameras import Camera
from .mesh import TriangleMesh
from .mlp import Adam
from .raster import ViewCache, cache_hit_table, rasterize_view

__all__ = [
    "quantize_ste",
    "quantize_levels",
    "decode_levels",
    "robust_loss",
    "robust_loss_grad",
    "FitConfig",
    "VertexAppearance",
    "shade",
    "fit_appearance",
    "render_from_cache",
    "render_baked",
]


def quantize_levels(value: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Nearest of 256 levels over [lo, hi] (ties to even); out-of-range clamps."""
    if not lo < hi:
        raise ValueError(f"bad quantization range [{lo}, {hi}]")
    x = np.clip((np.asarray(value, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return np.rint(x * 255.0).astype(np.uint8)


def decode_levels(levels: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + (np.asarray(levels, dtype=np.float64) / 255.0) * (hi - lo)


def quantize_ste(value: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Forward pass of straight-through quantization: snap to the 8-bit grid.

    The backward pass is the identity, which callers realize by applying
    gradients to the raw (unquantized) parameters directly.
    """
    return decode_levels(quantize_levels(value, lo, hi), lo, hi)


def robust_loss(residual, c: float = 0.2):
    """General robust loss at shape parameter 0: log(0.5 * (r/c)^2 + 1)."""
    if not c > 0:
        raise ValueError("robust loss scale must be positive")
    r = np.asarray(residual)
    return np.log1p(0.5 * (r / c) ** 2)


def robust_loss_grad(residual, c: float = 0.2):
    r = np.asarray(residual)
    return 2.0 * r / (r * r + 2.0 * c * c)


@dataclass
class FitConfig:
    iters: int = 2000
    batch: int = 16384
    lr: float = 1e-3
    lobes_center: int = 3
    lobes_periphery: int = 1
    lambda_max: float = 40.0
    loss: str = "robust"  # "robust" | "l2"
    robust_scale: float = 0.2
    seed: int = 0
    init_width: float = 5.0
    init_lobe_color: float = 0.1
    log_every: int = 0


@dataclass
class VertexAppearance:
    """Raw (pre-quantization) appearance parameters for every mesh vertex.

    Lobe arrays are padded to the maximum lobe count; ``lobe_mask`` marks the
    live lobes per vertex.  ``is_center`` records the bake-time region split.
    """

    diffuse: np.ndarray  # (n, 3) in [0, 1]
    mu: np.ndarray  # (n, L, 3) unit rows where masked on
    color: np.ndarray  # (n, L, 3) in [0, 1]
    width: np.ndarray  # (n, L) in [0, lambda_max]
    lobe_mask: np.ndarray  # (n, L) bool
    is_center: np.ndarray  # (n,) bool
    lambda_max: float = 40.0

    @property
    def n_lobes_max(self) -> int:
        return self.mu.shape[1]

    def quantized(self) -> "VertexAppearance":
        """Snapshot with every field snapped to its 8-bit grid (masked lobes zeroed)."""
        mask3 = self.lobe_mask[:, :, None]
        return VertexAppearance(
            diffuse=quantize_ste(self.diffuse, 0.0, 1.0),
            mu=quantize_ste(np.where(mask3, self.mu, 0.0), -1.0, 1.0),
            color=quantize_ste(np.where(mask3, self.color, 0.0), 0.0, 1.0),
            width=quantize_ste(np.where(self.lobe_mask, self.width, 0.0), 0.0, self.lambda_max),
            lobe_mask=self.lobe_mask.copy(),
            is_center=self.is_center.copy(),
            lambda_max=self.lambda_max,
        )


def region_split(mesh: TriangleMesh) -> np.ndarray:
    """Center/periphery flag per vertex from the contracted norm at bake time."""
    if mesh.contracted is None:
        raise ValueError("mesh lacks contracted vertex positions")
    return np.linalg.norm(mesh.contracted, axis=1) <= 1.0


def shade(diffuse, mu, color, width, dirs):
    """Evaluate the lobe model once per pixel on interpolated parameters.

    diffuse (n,3), mu (n,L,3), color (n,L,3), width (n,L), dirs (n,3) -> (n,3)
    """
    g = np.exp(width * ((mu * dirs[:, None, :]).sum(axis=2) - 1.0))  # (n, L)
    return diffuse + (color * g[:, :, None]).sum(axis=1)


def _shade_backward(dC, mu, color, width, dirs):
    """Gradients of shade() w.r.t. its parameter inputs."""
    mudot = (mu * dirs[:, None, :]).sum(axis=2)
    g = np.exp(width * (mudot - 1.0))
    d_diffuse = dC
    d_color = dC[:, None, :] * g[:, :, None]
    s = (dC[:, None, :] * color).sum(axis=2) * g  # (n, L)
    d_width = s * (mudot - 1.0)
    d_mu = (s * width)[:, :, None] * dirs[:, None, :]
    return d_diffuse, d_mu, d_color, d_width


def _init_appearance(mesh, hit_table, cfg: FitConfig, rng) -> VertexAppearance:
    n = mesh.n_vertices
    L = max(cfg.lobes_center, cfg.lobes_periphery, 1)
    is_center = region_split(mesh)
    lobe_count = np.where(is_center, cfg.lobes_center, cfg.lobes_periphery)
    lobe_mask = np.arange(L)[None, :] < lobe_count[:, None]

    # diffuse starts at the mean observed color of the pixels covering a vertex
    acc = np.zeros((n, 3))
    wacc = np.zeros(n)
    vids, bary, gt = hit_table["vertex_ids"], hit_table["bary"], hit_table["gt"]
    for k in range(3):
        np.add.at(acc, vids[:, k], bary[:, k, None] * gt)
        np.add.at(wacc, vids[:, k], bary[:, k])
    diffuse = np.where(wacc[:, None] > 1e-6, acc / np.maximum(wacc, 1e-6)[:, None], 0.5)

    mu = rng.normal(size=(n, L, 3))
    mu /= np.linalg.norm(mu, axis=2, keepdims=True)
    return VertexAppearance(
        diffuse=np.clip(diffuse, 0.0, 1.0),
        mu=mu,
        color=np.full((n, L, 3), cfg.init_lobe_color),
        width=np.full((n, L), cfg.init_width),
        lobe_mask=lobe_mask,
        is_center=is_center,
        lambda_max=cfg.lambda_max,
    )


def fit_appearance(
    mesh: TriangleMesh,
    caches: list[ViewCache],
    images,
    cfg: FitConfig | None = None,
    progress=None,
):
    """Optimize per-vertex appearance and the clear color against training views.

    Returns (VertexAppearance raw params, clear_color (3,), history dict).
    Shading inside the loop uses quantized parameters (straight-through), so
    the exported 8-bit asset reproduces training-time colors exactly.
    """
    cfg = cfg or FitConfig()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xAEA)))
    table = cache_hit_table(caches, mesh, images)
    n_hit = len(table["gt"])
    if n_hit == 0:
        raise ValueError("no training pixel hits the mesh; cannot fit appearance")
    app = _init_appearance(mesh, table, cfg, rng)
    clear = np.full(3, 0.5)
    if len(table["miss_gt"]):
        clear = table["miss_gt"].mean(axis=0)

    params = [app.diffuse, app.mu, app.color, app.width, clear]
    opt = Adam(eps=1e-8)
    mask3 = app.lobe_mask[:, :, None]
    lam_c = cfg.robust_scale
    hist = {"loss": np.zeros(cfg.iters)}
    vids, bary, dirs, gt = table["vertex_ids"], table["bary"], table["view_dirs"], table["gt"]
    miss_gt = table["miss_gt"]

    for it in range(cfg.iters):
        # learning rate drops by 10x at thirds of the schedule
        lr = cfg.lr * 10.0 ** (-(it * 3 // max(cfg.iters, 1)))
        idx = rng.integers(0, n_hit, size=min(cfg.batch, n_hit))
        v = vids[idx]  # (b, 3)
        b = bary[idx]
        d = dirs[idx]

        q_diff = quantize_ste(app.diffuse, 0.0, 1.0)
        q_mu = quantize_ste(np.where(mask3, app.mu, 0.0), -1.0, 1.0)
        q_col = quantize_ste(np.where(mask3, app.color, 0.0), 0.0, 1.0)
        q_wid = quantize_ste(np.where(app.lobe_mask, app.width, 0.0), 0.0, cfg.lambda_max)

        p_diff = np.einsum("bk,bkc->bc", b, q_diff[v])
        p_mu = np.einsum("bk,bklc->blc", b, q_mu[v])
        p_col = np.einsum("bk,bklc->blc", b, q_col[v])
        p_wid = np.einsum("bk,bkl->bl", b, q_wid[v])

        C = shade(p_diff, p_mu, p_col, p_wid, d)
        resid = C - gt[idx]
        if cfg.loss == "robust":
            loss = float(np.mean(robust_loss(resid, lam_c).sum(axis=1)))
            dC = robust_loss_grad(resid, lam_c) / len(idx)
        else:
            loss = float(np.mean((resid**2).sum(axis=1)))
            dC = 2.0 * resid / len(idx)

        d_diff, d_mu, d_col, d_wid = _shade_backward(dC, p_mu, p_col, p_wid, d)
        g_diff = np.zeros_like(app.diffuse)
        g_mu = np.zeros_like(app.mu)
        g_col = np.zeros_like(app.color)
        g_wid = np.zeros_like(app.width)
        for k in range(3):
            w = b[:, k]
            np.add.at(g_diff, v[:, k], w[:, None] * d_diff)
            np.add.at(g_mu, v[:, k], w[:, None, None] * d_mu)
            np.add.at(g_col, v[:, k], w[:, None, None] * d_col)
            np.add.at(g_wid, v[:, k], w[:, None] * d_wid)
        g_mu *= mask3
        g_col *= mask3
        g_wid *= app.lobe_mask

        # clear color learns from a slice of miss pixels
        g_clear = np.zeros(3)
        if len(miss_gt):
            midx = rng.integers(0, len(miss_gt), size=min(cfg.batch // 4, len(miss_gt)))
            cres = clear[None, :] - miss_gt[midx]
            if cfg.loss == "robust":
                loss += float(np.mean(robust_loss(cres, lam_c).sum(axis=1)))
                g_clear = robust_loss_grad(cres, lam_c).mean(axis=0)
            else:
                loss += float(np.mean((cres**2).sum(axis=1)))
                g_clear = 2.0 * cres.mean(axis=0)

        opt.step(params, [g_diff, g_mu, g_col, g_wid, g_clear], lr)
        norms = np.linalg.norm(app.mu, axis=2, keepdims=True)
        app.mu /= np.maximum(norms, 1e-12)
        np.clip(clear, 0.0, 1.0, out=clear)
        hist["loss"][it] = loss
        if progress is not None and cfg.log_every and it % cfg.log_every == 0:
            progress(it, {"loss": loss})
        if not np.isfinite(loss):
            bad = np.nonzero(~np.isfinite(C).all(axis=1))[0]
            raise RuntimeError(
                f"appearance fit diverged at iteration {it}"
                + (f" (hit-table row {int(idx[bad[0]])})" if bad.size else "")
            )
    return app, clear.copy(), hist


def _shade_cache(cache: ViewCache, mesh, app_q: VertexAppearance, clear):
    """Shade one rasterized view with (already quantized) parameters."""
    H, W = cache.tri_id.shape
    out = np.tile(np.asarray(clear, dtype=np.float64), (H * W, 1))
    hits = cache.hit_mask
    if hits.any():
        table = cache_hit_table([cache], mesh)
        v, b, d = table["vertex_ids"], table["bary"], table["view_dirs"]
        p_diff = np.einsum("bk,bkc->bc", b, app_q.diffuse[v])
        p_mu = np.einsum("bk,bklc->blc", b, app_q.mu[v])
        p_col = np.einsum("bk,bklc->blc", b, app_q.color[v])
        p_wid = np.einsum("bk,bkl->bl", b, app_q.width[v])
        out[hits.reshape(-1)] = shade(p_diff, p_mu, p_col, p_wid, d)
    return np.clip(out, 0.0, 1.0).reshape(H, W, 3)


def render_from_cache(cache: ViewCache, mesh, app: VertexAppearance, clear):
    """Render through a stored cache; quantizes raw parameters first."""
    return _shade_cache(cache, mesh, app.quantized(), clear)


def render_baked(mesh: TriangleMesh, app: VertexAppearance, clear, camera: Camera):
    """Rasterize + shade a camera view of the baked asset (CPU reference)."""
    return _shade_cache(rasterize_view(mesh, camera), mesh, app.quantized(), clear)
