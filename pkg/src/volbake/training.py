"""Stage-1 optimization: fit the distance field and a point appearance head to posed images.

Each step renders a random batch of training rays through the current field
(dense stratified sampling, no importance sampling), measures the mean
squared color error, adds the Eikonal penalty on a mix of ray samples and
uniform points in the contracted ball, and applies Adam with a warm-started
log-linearly decaying learning rate.  The density sharpness follows the
annealing schedule over training progress.

The appearance head is deliberately simple: per-point diffuse color plus a
4-coefficient spherical-harmonic view branch, enough to absorb low-order
view dependence during geometry optimization.  The baked asset replaces it
entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .cameras import PosedImage
from .contraction import contract
from .density import BetaSchedule, DensityParams, beta_at, density_from_sdf, density_dsdf
from .fields import MlpSdf
from .mlp import Adam, FeatureEncoding, Mlp, lr_log_linear
from .rendering import composite, composite_backward, deltas_from_ts, stratified_ts

__all__ = [
    "AppearanceHead",
    "TrainConfig",
    "TrainingDiverged",
    "eikonal_loss",
    "batch_loss_and_grads",
    "train",
]

_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199


def _sh_basis(dirs: np.ndarray) -> np.ndarray:
    """First four real spherical harmonics of the view direction."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    return np.stack([np.full_like(x, _SH_C0), _SH_C1 * y, _SH_C1 * z, _SH_C1 * x], axis=1)


class AppearanceHead:
    """Point color model: sigmoid diffuse plus an SH-modulated view branch."""

    def __init__(self, hidden=64, layers=2, n_freq=4, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.encoding = FeatureEncoding(n_freq)
        self.net = Mlp([self.encoding.dim] + [hidden] * layers + [15], rng, act_scale=10.0, dtype=dtype)
        self.hidden, self.layers, self.n_freq = hidden, layers, n_freq

    def colors(self, q: np.ndarray, dirs: np.ndarray, want_cache: bool = False):
        q = np.asarray(q, dtype=self.net.dtype)
        out = self.net.forward(self.encoding.encode(q), want_cache=want_cache)
        if want_cache:
            out, cache = out
        diffuse = 1.0 / (1.0 + np.exp(-out[:, 0:3]))
        sh = out[:, 3:15].reshape(-1, 3, 4)
        Y = _sh_basis(np.asarray(dirs, dtype=self.net.dtype))
        c = diffuse + np.einsum("nck,nk->nc", sh, Y)
        if want_cache:
            return c, {"net": cache, "diffuse": diffuse, "Y": Y}
        return c

    def backward(self, cache: dict, dc: np.ndarray):
        dout = np.empty((dc.shape[0], 15), dtype=self.net.dtype)
        dif = cache["diffuse"]
        dout[:, 0:3] = dc * dif * (1.0 - dif)
        dout[:, 3:15] = (dc[:, :, None] * cache["Y"][:, None, :]).reshape(-1, 12)
        return self.net.backward(cache["net"], dout)


@dataclass
class TrainConfig:
    iters: int = 5000
    batch_rays: int = 256
    n_samples: int = 96
    near: float | None = None  # dataset values when None
    far: float | None = None
    lr0: float = 2e-3
    lr1: float = 2e-5
    warmup: int = 500
    eikonal_weight: float = 0.1
    n_eikonal: int = 2048
    eik_ball_radius: float = 1.9
    beta_schedule: BetaSchedule = dc_field(default_factory=BetaSchedule)
    seed: int = 0
    sdf_hidden: int = 128
    sdf_layers: int = 4
    sdf_freqs: int = 6
    sdf_init_radius: float = 1.2
    app_hidden: int = 64
    app_layers: int = 2
    app_freqs: int = 4
    log_every: int = 0  # 0 disables progress callbacks


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, ray_id: int):
        super().__init__(f"non-finite loss at iteration {iteration} (ray {ray_id})")
        self.iteration = iteration
        self.ray_id = ray_id


def eikonal_loss(field, points: np.ndarray) -> float:
    """Mean squared deviation of the gradient norm from one."""
    points = np.asarray(points)
    if points.size == 0:
        raise ValueError("eikonal loss needs a nonempty point set")
    g = field.gradient(points)
    norms = np.linalg.norm(np.asarray(g, dtype=np.float64), axis=-1)
    return float(np.mean((norms - 1.0) ** 2))


def _uniform_ball(rng, n, radius, dtype):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return (v * r[:, None]).astype(dtype)


def batch_loss_and_grads(field, head, origins, dirs, gt, ts, near, params, eik_pts, lam):
    """One training batch: total loss and hand-derived parameter gradients.

    Pure in (field, head) parameters for fixed inputs, which is what the
    finite-difference gradient checks rely on.  Returns
    (loss, data_loss, eik_loss, field_grads, head_grads, residuals).
    """
    dtype = field.net.dtype
    n_rays, n_samples = ts.shape
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    q = contract(pts.reshape(-1, 3)).astype(dtype)

    f_flat, f_cache = field.net.forward(field.encoding.encode(q), want_cache=True)
    f = f_flat[:, 0].astype(np.float64).reshape(n_rays, n_samples)
    dens = density_from_sdf(f, params)
    view = np.broadcast_to(dirs[:, None, :], pts.shape).reshape(-1, 3)
    cols_flat, a_cache = head.colors(q, view, want_cache=True)
    cols = cols_flat.astype(np.float64).reshape(n_rays, n_samples, 3)

    deltas = deltas_from_ts(np.asarray(ts, dtype=np.float64), near)
    C, weights = composite(deltas, dens, cols)
    resid = C - gt
    data_loss = float(np.mean(np.sum(resid**2, axis=1)))

    dC = (2.0 / n_rays) * resid
    d_dens, d_cols = composite_backward(deltas, dens, cols, weights, dC)
    df = d_dens * density_dsdf(f, params)
    g_field = field.net.backward(f_cache, df.reshape(-1, 1).astype(dtype))
    g_head = head.backward(a_cache, d_cols.reshape(-1, 3).astype(dtype))

    _, G, jcache = field.net.forward_jvp(
        field.encoding.encode(eik_pts), field.encoding.jacobian(eik_pts)
    )
    grad = G[:, 0, :].astype(np.float64)
    norms = np.maximum(np.linalg.norm(grad, axis=1), 1e-12)
    eik_loss = float(np.mean((norms - 1.0) ** 2))
    dG = ((2.0 / norms.shape[0]) * (norms - 1.0) / norms)[:, None] * grad
    g_eik = field.net.backward_jvp(jcache, None, dG[:, None, :].astype(dtype))

    g_field = [a + lam * b for a, b in zip(g_field, g_eik)]
    return data_loss + lam * eik_loss, data_loss, eik_loss, g_field, g_head, resid


def train(images: list[PosedImage], config: TrainConfig, near: float, far: float, progress=None):
    """Optimize field + appearance head; returns (field, head, history).

    ``near``/``far`` are the dataset sampling bounds unless overridden in the
    config.  History arrays are recorded every iteration.
    """
    if len(images) < 2:
        raise ValueError("training needs at least two posed images")
    near = config.near if config.near is not None else near
    far = config.far if config.far is not None else far
    dtype = np.float32
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x5D1)))

    field = MlpSdf(
        hidden=config.sdf_hidden,
        layers=config.sdf_layers,
        n_freq=config.sdf_freqs,
        rng=rng,
        dtype=dtype,
        init_radius=config.sdf_init_radius,
    )
    head = AppearanceHead(
        hidden=config.app_hidden, layers=config.app_layers, n_freq=config.app_freqs, rng=rng, dtype=dtype
    )

    origins, dirs, gt = [], [], []
    for im in images:
        o, d = im.camera.rays()
        origins.append(o)
        dirs.append(d)
        gt.append(im.pixels.reshape(-1, 3))
    origins = np.concatenate(origins).astype(dtype)
    dirs = np.concatenate(dirs).astype(dtype)
    gt = np.concatenate(gt).astype(dtype)
    n_rays_total = origins.shape[0]

    opt_field = Adam()
    opt_head = Adam()
    field_params = field.net.params()
    head_params = head.net.params()

    hist = {k: np.zeros(config.iters) for k in ("loss", "data", "eikonal", "beta", "lr")}
    n_eik_ray = config.n_eikonal // 2
    n_eik_ball = config.n_eikonal - n_eik_ray

    for it in range(config.iters):
        t_frac = it / max(config.iters - 1, 1)
        beta = beta_at(config.beta_schedule, t_frac)
        params = DensityParams(beta)
        lr = lr_log_linear(it, config.iters, config.lr0, config.lr1, config.warmup)

        idx = rng.integers(0, n_rays_total, size=config.batch_rays)
        ts = stratified_ts(near, far, config.n_samples, config.batch_rays, rng, dtype=dtype)

        # Eikonal points: half resampled from this batch's ray points, half uniform.
        pts = origins[idx][:, None, :] + ts[..., None] * dirs[idx][:, None, :]
        q_all = contract(pts.reshape(-1, 3)).astype(dtype)
        e_idx = rng.integers(0, q_all.shape[0], size=n_eik_ray)
        eik_pts = np.concatenate(
            [q_all[e_idx], _uniform_ball(rng, n_eik_ball, config.eik_ball_radius, dtype)]
        )

        loss, data_loss, eik_loss, g_total, g_head, resid = batch_loss_and_grads(
            field, head, origins[idx], dirs[idx], gt[idx], ts, near, params, eik_pts,
            config.eikonal_weight,
        )
        if not np.isfinite(loss):
            bad = np.nonzero(~np.isfinite(resid).all(axis=1))[0]
            ray_id = int(idx[bad[0]]) if bad.size else -1
            raise TrainingDiverged(it, ray_id)

        opt_field.step(field_params, g_total, lr)
        opt_head.step(head_params, g_head, lr)

        hist["loss"][it] = loss
        hist["data"][it] = data_loss
        hist["eikonal"][it] = eik_loss
        hist["beta"][it] = beta
        hist["lr"][it] = lr
        if progress is not None and config.log_every and (it % config.log_every == 0 or it == config.iters - 1):
            progress(it, {"loss": loss, "data": data_loss, "eikonal": eik_loss, "beta": beta})

    return field, head, hist
